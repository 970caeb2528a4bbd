#pragma once

// Estimator arithmetic on abstract error instances, plus the numerical checks
// of the bias identity, double robustness, the tail bound and the DR-vs-IPS
// bound comparison.
//
// An instance holds, for every domain Z and every pair of D^Z: the true error
// e, the imputed error e_hat, the true propensity p and the learned propensity
// p_hat. delta = e - e_hat and Delta = (p_hat - p) / p_hat.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "amid/datagen/events.hpp"
#include "amid/errors.hpp"
#include "amid/numerics/random.hpp"

namespace amid::theory {

struct DomainPairs {
  std::vector<double> e, e_hat, p, p_hat;

  std::size_t size() const { return e.size(); }
};

struct ErrorInstance {
  std::vector<DomainPairs> domains;

  std::size_t total_pairs() const {
    std::size_t n = 0;
    for (const auto& d : domains) n += d.size();
    return n;
  }
};

// Per domain, one 0/1 entry per pair.
using Observation = std::vector<std::vector<std::uint8_t>>;

enum class Estimator { dr, ips };

inline void validate(const ErrorInstance& inst) {
  if (inst.domains.empty()) throw ContractError("instance: no domains");
  for (std::size_t z = 0; z < inst.domains.size(); ++z) {
    const auto& d = inst.domains[z];
    const std::string where = "instance domain " + std::to_string(z);
    if (d.size() == 0) throw ContractError(where + " is empty");
    if (d.e_hat.size() != d.size() || d.p.size() != d.size() || d.p_hat.size() != d.size()) {
      throw ShapeError(where + ": e, e_hat, p, p_hat lengths differ");
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(d.e[i] >= 0.0) || !(d.e_hat[i] >= 0.0)) throw ContractError(where + ": errors must be >= 0");
      if (!(d.p[i] > 0.0 && d.p[i] <= 1.0) || !(d.p_hat[i] > 0.0 && d.p_hat[i] <= 1.0)) {
        throw ContractError(where + ": propensities must lie in (0, 1]");
      }
    }
  }
}

namespace detail {

// (1/|Z|) sum_Z (1/|D^Z|) sum_i f(Z, i)
template <class F>
double domain_average(const ErrorInstance& inst, F f) {
  double total = 0.0;
  for (std::size_t z = 0; z < inst.domains.size(); ++z) {
    const auto& d = inst.domains[z];
    if (d.size() == 0) throw ContractError("instance domain " + std::to_string(z) + " is empty");
    double s = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) s += f(z, i);
    total += s / static_cast<double>(d.size());
  }
  return total / static_cast<double>(inst.domains.size());
}

inline void check_observation(const ErrorInstance& inst, const Observation& o) {
  if (o.size() != inst.domains.size()) throw ShapeError("observation: one vector per domain expected");
  for (std::size_t z = 0; z < o.size(); ++z) {
    if (o[z].size() != inst.domains[z].size()) throw ShapeError("observation: length differs from the domain");
  }
}

}  // namespace detail

inline double prediction_inaccuracy(const ErrorInstance& inst) {
  return detail::domain_average(inst, [&](std::size_t z, std::size_t i) { return inst.domains[z].e[i]; });
}

inline double dr_estimate(const ErrorInstance& inst, const Observation& o) {
  detail::check_observation(inst, o);
  return detail::domain_average(inst, [&](std::size_t z, std::size_t i) {
    const auto& d = inst.domains[z];
    return d.e_hat[i] + (o[z][i] ? (d.e[i] - d.e_hat[i]) / d.p_hat[i] : 0.0);
  });
}

inline double ips_estimate(const ErrorInstance& inst, const Observation& o) {
  detail::check_observation(inst, o);
  return detail::domain_average(inst, [&](std::size_t z, std::size_t i) {
    const auto& d = inst.domains[z];
    return o[z][i] ? d.e[i] / d.p_hat[i] : 0.0;
  });
}

// (1/|Z|) sum_Z (1/|D^Z|) | sum Delta delta |
inline double dr_bias(const ErrorInstance& inst) {
  double total = 0.0;
  for (const auto& d : inst.domains) {
    if (d.size() == 0) throw ContractError("instance: empty domain");
    double s = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) s += (d.p_hat[i] - d.p[i]) / d.p_hat[i] * (d.e[i] - d.e_hat[i]);
    total += std::fabs(s) / static_cast<double>(d.size());
  }
  return total / static_cast<double>(inst.domains.size());
}

// |(1/|Z|) sum_Z (1/|D^Z|) sum Delta delta|: the same terms with the absolute
// value outside the domain average, which is what |P - E_O[E_DR]| reduces to.
// dr_bias is never below it and equals it when every domain sum has the same sign.
inline double pooled_bias(const ErrorInstance& inst) {
  double total = 0.0;
  for (const auto& d : inst.domains) {
    if (d.size() == 0) throw ContractError("instance: empty domain");
    double s = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) s += (d.p_hat[i] - d.p[i]) / d.p_hat[i] * (d.e[i] - d.e_hat[i]);
    total += s / static_cast<double>(d.size());
  }
  return std::fabs(total / static_cast<double>(inst.domains.size()));
}

// True when the per-domain sums of Delta delta do not all share a sign.
inline bool mixed_sign_domains(const ErrorInstance& inst) {
  bool pos = false, neg = false;
  for (const auto& d : inst.domains) {
    double s = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) s += (d.p_hat[i] - d.p[i]) / d.p_hat[i] * (d.e[i] - d.e_hat[i]);
    pos = pos || s > 0.0;
    neg = neg || s < 0.0;
  }
  return pos && neg;
}

// E_O[E_DR] in closed form: o_i ~ Bernoulli(p_i) independently.
inline double exact_expectation_dr(const ErrorInstance& inst) {
  return detail::domain_average(inst, [&](std::size_t z, std::size_t i) {
    const auto& d = inst.domains[z];
    return d.e_hat[i] + d.p[i] * (d.e[i] - d.e_hat[i]) / d.p_hat[i];
  });
}

inline constexpr std::size_t kMaxEnumerationPairs = 20;

// E_O[E_DR] by summing E_DR over all 2^|D| observation outcomes.
inline double enumerate_expectation_dr(const ErrorInstance& inst) {
  const std::size_t n = inst.total_pairs();
  if (n > kMaxEnumerationPairs) {
    throw ContractError("enumeration: " + std::to_string(n) + " pairs exceeds the limit of " +
                        std::to_string(kMaxEnumerationPairs));
  }
  std::vector<std::pair<std::size_t, std::size_t>> index;
  Observation o;
  for (std::size_t z = 0; z < inst.domains.size(); ++z) {
    o.emplace_back(inst.domains[z].size(), 0);
    for (std::size_t i = 0; i < inst.domains[z].size(); ++i) index.emplace_back(z, i);
  }
  double total = 0.0;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
    double weight = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
      const auto [z, i] = index[k];
      const bool on = (mask >> k) & 1;
      o[z][i] = on ? 1 : 0;
      const double p = inst.domains[z].p[i];
      weight *= on ? p : 1.0 - p;
    }
    if (weight != 0.0) total += weight * dr_estimate(inst, o);
  }
  return total;
}

// sqrt( log(2/eta) / (2 |Z| (sum_Z |D^Z|)^2) * sum_Z (1/|D^Z|) sum (x/p_hat)^2 ),
// x = delta for dr and x = e for ips.
inline double tail_bound(const ErrorInstance& inst, double eta, Estimator estimator) {
  if (!(eta > 0.0 && eta < 1.0)) throw ContractError("tail_bound: eta must lie in (0, 1)");
  double weighted = 0.0;
  double pairs = 0.0;
  for (const auto& d : inst.domains) {
    if (d.size() == 0) throw ContractError("instance: empty domain");
    double s = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x = estimator == Estimator::dr ? d.e[i] - d.e_hat[i] : d.e[i];
      const double r = x / d.p_hat[i];
      s += r * r;
    }
    weighted += s / static_cast<double>(d.size());
    pairs += static_cast<double>(d.size());
  }
  const double Z = static_cast<double>(inst.domains.size());
  return std::sqrt(std::log(2.0 / eta) / (2.0 * Z * pairs * pairs) * weighted);
}

// Hoeffding radius for the same estimator from the per-pair ranges: pair i of
// domain Z moves the estimate by at most |x| / (|Z| |D^Z| p_hat).
inline double hoeffding_bound(const ErrorInstance& inst, double eta, Estimator estimator) {
  if (!(eta > 0.0 && eta < 1.0)) throw ContractError("hoeffding_bound: eta must lie in (0, 1)");
  const double Z = static_cast<double>(inst.domains.size());
  double sum_sq = 0.0;
  for (const auto& d : inst.domains) {
    const double w = 1.0 / (Z * static_cast<double>(d.size()));
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x = estimator == Estimator::dr ? d.e[i] - d.e_hat[i] : d.e[i];
      const double c = w * x / d.p_hat[i];
      sum_sq += c * c;
    }
  }
  return std::sqrt(std::log(2.0 / eta) / 2.0 * sum_sq);
}

inline Observation draw_observation(const ErrorInstance& inst, Rng& rng) {
  Observation o;
  for (const auto& d : inst.domains) {
    std::vector<std::uint8_t> row(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) row[i] = bernoulli(rng, d.p[i]) ? 1 : 0;
    o.push_back(std::move(row));
  }
  return o;
}

// ---- random instances ----

struct SamplerConfig {
  std::size_t domains = 2;
  std::size_t min_pairs = 2;
  std::size_t max_pairs = 10;
  double imputation_scale = 2.0;  // e_hat = e * U[0, scale]
  double p_lo = 0.1;
  double p_hi = 1.0;
  double log_noise = 0.5;  // p_hat = clip(p * exp(U[-noise, noise]), p_min, 1)
  double p_min = 0.05;
  bool exact_imputation = false;   // e_hat = e
  bool exact_propensity = false;   // p_hat = p
};

inline void validate(const SamplerConfig& c) {
  if (c.domains < 1) throw ConfigError("sampler: need at least one domain");
  if (c.min_pairs < 1 || c.max_pairs < c.min_pairs) throw ConfigError("sampler: need 1 <= min_pairs <= max_pairs");
  if (!(c.p_lo > 0.0) || c.p_hi > 1.0 || c.p_hi < c.p_lo) throw ConfigError("sampler: need 0 < p_lo <= p_hi <= 1");
  if (!(c.imputation_scale >= 0.0) || !(c.log_noise >= 0.0)) throw ConfigError("sampler: scales must be >= 0");
  if (!(c.p_min > 0.0) || c.p_min > 1.0) throw ConfigError("sampler: p_min must lie in (0, 1]");
}

inline ErrorInstance sample_instance(const SamplerConfig& c, Rng& rng) {
  ErrorInstance inst;
  for (std::size_t z = 0; z < c.domains; ++z) {
    DomainPairs d;
    const std::size_t n = c.min_pairs + uniform_index(rng, c.max_pairs - c.min_pairs + 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double e = uniform01(rng);
      const double e_hat = e * uniform(rng, 0.0, c.imputation_scale);
      const double p = uniform(rng, c.p_lo, c.p_hi);
      const double p_hat = std::clamp(p * std::exp(uniform(rng, -c.log_noise, c.log_noise)), c.p_min, 1.0);
      d.e.push_back(e);
      d.e_hat.push_back(c.exact_imputation ? e : e_hat);
      d.p.push_back(p);
      d.p_hat.push_back(c.exact_propensity ? p : p_hat);
    }
    inst.domains.push_back(std::move(d));
  }
  return inst;
}

// ---- instance files ----

// Four files in dir (e.csv, e_hat.csv, p.csv, p_hat.csv) with header
// domain,user,item,value. Pair i of a domain is written as user i, item 0.
inline void save_instance(const ErrorInstance& inst, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::pair<const char*, std::vector<double> DomainPairs::*> files[] = {
      {"e.csv", &DomainPairs::e}, {"e_hat.csv", &DomainPairs::e_hat}, {"p.csv", &DomainPairs::p},
      {"p_hat.csv", &DomainPairs::p_hat}};
  char buf[64];
  for (const auto& [name, member] : files) {
    std::ofstream out(dir / name);
    if (!out) throw ConfigError("cannot write " + (dir / name).string());
    out << "domain,user,item,value\n";
    for (std::size_t z = 0; z < inst.domains.size(); ++z) {
      const auto& values = inst.domains[z].*member;
      for (std::size_t i = 0; i < values.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", values[i]);
        out << z << ',' << i << ",0," << buf << '\n';
      }
    }
  }
}

inline ErrorInstance load_instance(const std::filesystem::path& dir) {
  const std::pair<const char*, std::vector<double> DomainPairs::*> files[] = {
      {"e.csv", &DomainPairs::e}, {"e_hat.csv", &DomainPairs::e_hat}, {"p.csv", &DomainPairs::p},
      {"p_hat.csv", &DomainPairs::p_hat}};
  ErrorInstance inst;
  for (const auto& [name, member] : files) {
    std::ifstream in(dir / name);
    if (!in) throw ConfigError("cannot read " + (dir / name).string());
    std::string line;
    std::size_t line_no = 1;
    if (!std::getline(in, line) || line != "domain,user,item,value") {
      throw ParseError(std::string(name) + ": expected header domain,user,item,value", 1);
    }
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto fields = data::detail::split_commas(line);
      if (fields.size() != 4) throw ParseError(std::string(name) + ": expected 4 fields at line " + std::to_string(line_no), line_no);
      std::size_t z = 0, i = 0;
      double v = 0.0;
      try {
        z = std::stoul(std::string(fields[0]));
        i = std::stoul(std::string(fields[1]));
        v = std::stod(std::string(fields[3]));
      } catch (const std::exception&) {
        throw ParseError(std::string(name) + ": bad number at line " + std::to_string(line_no), line_no);
      }
      if (z >= inst.domains.size()) inst.domains.resize(z + 1);
      auto& values = inst.domains[z].*member;
      if (i != values.size()) {
        throw ParseError(std::string(name) + ": pairs out of order at line " + std::to_string(line_no), line_no);
      }
      values.push_back(v);
    }
  }
  validate(inst);
  return inst;
}

// ---- verification ----

struct VerifyConfig {
  SamplerConfig sampler;
  std::size_t bias_instances = 1000;        // (a) and each half of (b)
  std::size_t coverage_instances = 20;      // (c)
  std::size_t draws = 100000;               // (c), per instance
  std::size_t comparison_instances = 1000;  // (d)
  double eta = 0.05;
  double bias_tolerance = 1e-10;
  double robust_tolerance = 1e-12;
};

struct CheckResult {
  std::string name;
  bool passed = true;
  std::size_t evaluated = 0;
  std::size_t failures = 0;
  std::size_t skipped = 0;
  double worst = 0.0;  // largest deviation (a, b), largest violation rate (c), largest excess (d)
  double limit = 0.0;
  std::vector<ErrorInstance> failing;  // at most a few, for replay
  std::string detail;
};

struct CoverageRow {
  std::size_t instance = 0;
  std::size_t pairs = 0;
  double bound = 0.0;
  double hoeffding = 0.0;
  double violation_rate = 0.0;
  double hoeffding_violation_rate = 0.0;
};

struct EstimatorReport {
  std::vector<CheckResult> checks;  // (a) bias identity, (b) double robustness, (c) tail coverage, (d) dr <= ips
  std::vector<CoverageRow> coverage;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }
  std::size_t passed_count() const {
    return static_cast<std::size_t>(std::count_if(checks.begin(), checks.end(), [](const CheckResult& c) {
      return c.passed;
    }));
  }
};

inline constexpr std::size_t kKeptFailures = 3;

inline void record_failure(CheckResult& r, const ErrorInstance& inst) {
  ++r.failures;
  r.passed = false;
  if (r.failing.size() < kKeptFailures) r.failing.push_back(inst);
}

// (a) the analytic bias equals |P - E_O[E_DR]| with the expectation enumerated.
inline CheckResult check_bias_identity(const SamplerConfig& sampler, std::size_t instances, double tolerance,
                                       std::uint64_t seed) {
  CheckResult r;
  r.name = "bias identity";
  r.limit = tolerance;
  std::size_t mixed = 0, mixed_failures = 0;
  Rng rng = make_rng(seed, 0xa);
  for (std::size_t k = 0; k < instances; ++k) {
    const auto inst = sample_instance(sampler, rng);
    if (inst.total_pairs() > kMaxEnumerationPairs) {
      ++r.skipped;
      continue;
    }
    ++r.evaluated;
    const double gap = std::fabs(dr_bias(inst) - std::fabs(prediction_inaccuracy(inst) - enumerate_expectation_dr(inst)));
    r.worst = std::max(r.worst, gap);
    const bool mixed_sign = mixed_sign_domains(inst);
    mixed += mixed_sign;
    if (!(gap <= tolerance)) {
      record_failure(r, inst);
      mixed_failures += mixed_sign;
    }
  }
  r.detail = std::to_string(mixed) + " instances have domain sums of opposite sign; " +
             std::to_string(mixed_failures) + " of the " + std::to_string(r.failures) + " failures are among them";
  return r;
}

// (b) zero bias with exact imputation and with exact propensities.
inline CheckResult check_double_robustness(SamplerConfig sampler, std::size_t instances, double tolerance,
                                           std::uint64_t seed) {
  CheckResult r;
  r.name = "double robustness";
  r.limit = tolerance;
  for (int variant = 0; variant < 2; ++variant) {
    sampler.exact_imputation = variant == 0;
    sampler.exact_propensity = variant == 1;
    Rng rng = make_rng(seed, 0xb0 + variant);
    for (std::size_t k = 0; k < instances; ++k) {
      const auto inst = sample_instance(sampler, rng);
      ++r.evaluated;
      const double bias = dr_bias(inst);
      r.worst = std::max(r.worst, bias);
      if (!(bias <= tolerance)) record_failure(r, inst);
    }
  }
  return r;
}

inline double coverage_limit(double eta, std::size_t draws) {
  return eta + 3.0 * std::sqrt(eta * (1.0 - eta) / static_cast<double>(draws));
}

// (c) fraction of draws with |E_DR - E_O[E_DR]| above the tail bound.
inline CheckResult check_tail_coverage(const SamplerConfig& sampler, std::size_t instances, std::size_t draws,
                                       double eta, std::uint64_t seed, std::vector<CoverageRow>* rows = nullptr) {
  CheckResult r;
  r.name = "tail bound coverage";
  r.limit = coverage_limit(eta, draws);
  Rng inst_rng = make_rng(seed, 0xc);
  for (std::size_t k = 0; k < instances; ++k) {
    const auto inst = sample_instance(sampler, inst_rng);
    const double mean = exact_expectation_dr(inst);
    const double bound = tail_bound(inst, eta, Estimator::dr);
    const double hoeffding = hoeffding_bound(inst, eta, Estimator::dr);
    Rng rng = make_rng(mix_seed(seed, k), 0xc0);
    std::size_t over = 0, over_h = 0;
    for (std::size_t t = 0; t < draws; ++t) {
      const double dev = std::fabs(dr_estimate(inst, draw_observation(inst, rng)) - mean);
      over += dev > bound;
      over_h += dev > hoeffding;
    }
    const double rate = static_cast<double>(over) / static_cast<double>(draws);
    ++r.evaluated;
    r.worst = std::max(r.worst, rate);
    if (!(rate <= r.limit)) record_failure(r, inst);
    if (rows) {
      rows->push_back({k, inst.total_pairs(), bound, hoeffding, rate,
                       static_cast<double>(over_h) / static_cast<double>(draws)});
    }
  }
  return r;
}

// Pairs with 0 <= e_hat <= 2 e; the rest fall outside the comparison.
inline ErrorInstance comparable_pairs(const ErrorInstance& inst, std::size_t* dropped = nullptr) {
  ErrorInstance out;
  std::size_t n = 0;
  for (const auto& d : inst.domains) {
    DomainPairs kept;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d.e_hat[i] >= 0.0 && d.e_hat[i] <= 2.0 * d.e[i]) {
        kept.e.push_back(d.e[i]);
        kept.e_hat.push_back(d.e_hat[i]);
        kept.p.push_back(d.p[i]);
        kept.p_hat.push_back(d.p_hat[i]);
      } else {
        ++n;
      }
    }
    if (kept.size() > 0) out.domains.push_back(std::move(kept));
  }
  if (dropped) *dropped = n;
  return out;
}

// (d) tail_bound(dr) <= tail_bound(ips) on the pairs where 0 <= e_hat <= 2 e.
inline CheckResult check_bound_comparison(const SamplerConfig& sampler, std::size_t instances, double eta,
                                          std::uint64_t seed) {
  CheckResult r;
  r.name = "dr bound <= ips bound";
  Rng rng = make_rng(seed, 0xd);
  for (std::size_t k = 0; k < instances; ++k) {
    const auto inst = sample_instance(sampler, rng);
    std::size_t dropped = 0;
    const auto kept = comparable_pairs(inst, &dropped);
    r.skipped += dropped;
    if (kept.domains.empty()) continue;
    ++r.evaluated;
    const double excess = tail_bound(kept, eta, Estimator::dr) - tail_bound(kept, eta, Estimator::ips);
    r.worst = std::max(r.worst, excess);
    if (!(excess <= 0.0)) record_failure(r, inst);
  }
  return r;
}

inline EstimatorReport verify_theory(const VerifyConfig& c, std::uint64_t seed) {
  validate(c.sampler);
  if (c.draws < 10000) throw ConfigError("verify: need at least 10000 Monte Carlo draws");
  if (!(c.eta > 0.0 && c.eta < 1.0)) throw ConfigError("verify: eta must lie in (0, 1)");
  EstimatorReport report;
  report.checks.push_back(check_bias_identity(c.sampler, c.bias_instances, c.bias_tolerance, seed));
  report.checks.push_back(check_double_robustness(c.sampler, c.bias_instances, c.robust_tolerance, seed));
  report.checks.push_back(check_tail_coverage(c.sampler, c.coverage_instances, c.draws, c.eta, seed, &report.coverage));
  report.checks.push_back(check_bound_comparison(c.sampler, c.comparison_instances, c.eta, seed));
  return report;
}

inline std::string format_report(const EstimatorReport& report) {
  std::ostringstream out;
  char buf[256];
  for (const auto& c : report.checks) {
    std::snprintf(buf, sizeof buf, "%-22s %s  evaluated=%zu failures=%zu skipped=%zu worst=%.6g limit=%.6g\n",
                  c.name.c_str(), c.passed ? "PASS" : "FAIL", c.evaluated, c.failures, c.skipped, c.worst, c.limit);
    out << buf;
    if (!c.detail.empty()) out << "  " << c.detail << "\n";
  }
  if (!report.coverage.empty()) {
    out << "\ncoverage per instance (eta bound vs pairwise Hoeffding radius)\n";
    out << "instance pairs      bound  violation  hoeffding  violation\n";
    for (const auto& row : report.coverage) {
      std::snprintf(buf, sizeof buf, "%8zu %5zu %10.5f %10.5f %10.5f %10.5f\n", row.instance, row.pairs, row.bound,
                    row.violation_rate, row.hoeffding, row.hoeffding_violation_rate);
      out << buf;
    }
  }
  out << "\n" << report.passed_count() << "/" << report.checks.size() << " checks passed\n";
  return out.str();
}

}  // namespace amid::theory
