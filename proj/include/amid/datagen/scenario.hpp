#pragma once

// Synthetic cross-domain scenarios with full ground truth.
//
// Users and items live in a shared latent space. A pair's true rating is
// Bernoulli(sigmoid(relevance logit)); whether the pair is observed depends on
// both that relevance and the item's popularity,
//
//   p = clip(base * pop^gamma_pop * exp(gamma * (sigmoid(logit) - 0.5)), p_min, 1),
//
// so the logged data is missing not at random. A user's sequence in a domain
// is the timestamp-ordered list of observed positives.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "amid/datagen/events.hpp"
#include "amid/errors.hpp"
#include "amid/numerics/random.hpp"

namespace amid::data {

struct GenConfig {
  std::size_t num_domains = 2;
  std::size_t users_per_domain = 200;
  std::size_t items_per_domain = 100;
  std::size_t latent_dim = 4;
  double overlap_ratio = 0.2;  // rho: share of each domain's users active in every domain
  std::size_t min_seq_len = 2;
  std::size_t max_seq_len = 20;
  double p_min = 0.05;
  double base_propensity = 0.3;
  double popularity_exponent = 0.5;  // gamma_pop
  double selection_strength = 2.0;   // gamma
  double popularity_skew = 1.0;      // popularity weight of the item at rank r is r^-skew
  double relevance_scale = 2.0;      // logit = scale * <z_u, q_v> / sqrt(latent_dim)
  // Overlapping users are drawn with weight exp(affinity * z_u[0]), so users
  // active in several domains lean towards one taste direction.
  double overlap_affinity = 1.0;
};

inline void validate(const GenConfig& c) {
  if (c.num_domains < 2) throw ConfigError("generate: need at least 2 domains");
  if (!(c.overlap_ratio >= 0.0 && c.overlap_ratio <= 1.0)) throw ConfigError("generate: overlap ratio must lie in [0, 1]");
  if (!(c.p_min > 0.0) || c.p_min > 1.0) throw ConfigError("generate: p_min must lie in (0, 1]");
  if (c.users_per_domain < 1 || c.items_per_domain < 2) throw ConfigError("generate: empty population");
  if (c.latent_dim < 1) throw ConfigError("generate: latent_dim must be >= 1");
  if (c.min_seq_len < 1 || c.max_seq_len < c.min_seq_len) throw ConfigError("generate: bad sequence length bounds");
  if (c.selection_strength < 0.0 || c.popularity_exponent < 0.0) throw ConfigError("generate: bias strengths must be >= 0");
  if (!(c.base_propensity > 0.0)) throw ConfigError("generate: base propensity must be positive");
}

struct ScenarioUser {
  std::vector<double> latent;
  std::vector<bool> in_domain;

  bool overlapping() const { return std::count(in_domain.begin(), in_domain.end(), true) >= 2; }
};

struct ScenarioDomain {
  std::size_t num_items = 0;
  std::vector<std::vector<double>> item_latent;  // [item - 1]
  std::vector<double> popularity;                // [item - 1], in (0, 1]
  std::vector<UserId> members;                   // ascending
  // members x items, row-major; item v sits at column v - 1.
  std::vector<std::uint8_t> rating;
  std::vector<double> relevance;  // sigmoid(logit)
  std::vector<double> propensity;
  std::vector<std::uint8_t> observed;
  std::vector<std::vector<std::size_t>> sequences;  // per member, items 1..V oldest first
  std::vector<std::vector<std::int64_t>> timestamps;

  std::size_t cell(std::size_t member, std::size_t item) const { return member * num_items + (item - 1); }
};

struct CdsrScenario {
  GenConfig config;
  std::uint64_t seed = 0;
  std::vector<ScenarioUser> users;  // indexed by user id
  std::vector<ScenarioDomain> domains;

  std::vector<InteractionEvent> events() const {
    std::vector<InteractionEvent> out;
    for (std::size_t d = 0; d < domains.size(); ++d) {
      const auto& dom = domains[d];
      for (std::size_t m = 0; m < dom.members.size(); ++m)
        for (std::size_t k = 0; k < dom.sequences[m].size(); ++k)
          out.push_back({dom.members[m], static_cast<ItemId>(dom.sequences[m][k]), d, dom.timestamps[m][k]});
    }
    return out;
  }

  std::vector<std::size_t> items_per_domain() const {
    std::vector<std::size_t> out;
    for (const auto& d : domains) out.push_back(d.num_items);
    return out;
  }
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Draws one member's ratings and observations; the sequence is the observed
// positives in timestamp order, truncated to the most recent max_seq_len.
inline void draw_member_row(const GenConfig& c, const std::vector<double>& z, ScenarioDomain& dom, std::size_t m,
                            Rng& rng) {
  const double norm = c.relevance_scale / std::sqrt(static_cast<double>(c.latent_dim));
  std::vector<std::pair<std::int64_t, std::size_t>> positives;
  for (std::size_t v = 1; v <= dom.num_items; ++v) {
    const auto& q = dom.item_latent[v - 1];
    const double logit = norm * std::inner_product(z.begin(), z.end(), q.begin(), 0.0);
    const double rel = sigmoid(logit);
    const double p = std::clamp(c.base_propensity * std::pow(dom.popularity[v - 1], c.popularity_exponent) *
                                    std::exp(c.selection_strength * (rel - 0.5)),
                                c.p_min, 1.0);
    const auto idx = dom.cell(m, v);
    dom.relevance[idx] = rel;
    dom.propensity[idx] = p;
    dom.rating[idx] = bernoulli(rng, rel) ? 1 : 0;
    dom.observed[idx] = bernoulli(rng, p) ? 1 : 0;
    const auto ts = static_cast<std::int64_t>(uniform_index(rng, 1u << 30));
    if (dom.rating[idx] && dom.observed[idx]) positives.emplace_back(ts, v);
  }
  std::stable_sort(positives.begin(), positives.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  const std::size_t keep = std::min(positives.size(), c.max_seq_len);
  dom.sequences[m].clear();
  dom.timestamps[m].clear();
  for (std::size_t k = positives.size() - keep; k < positives.size(); ++k) {
    dom.timestamps[m].push_back(positives[k].first);
    dom.sequences[m].push_back(positives[k].second);
  }
}

}  // namespace detail

// Deterministic in (config, seed). Members whose sequence comes out shorter
// than min_seq_len have their row redrawn (at most 1000 times).
inline CdsrScenario generate_scenario(const GenConfig& config, std::uint64_t seed) {
  validate(config);
  CdsrScenario sc;
  sc.config = config;
  sc.seed = seed;
  Rng rng = make_rng(seed, 0x5ce4);
  const std::size_t D = config.num_domains;
  const std::size_t U = config.users_per_domain;
  const auto n_overlap = static_cast<std::size_t>(std::llround(config.overlap_ratio * static_cast<double>(U)));
  const std::size_t n_single = U - n_overlap;
  const std::size_t n_users = n_overlap + D * n_single;

  sc.users.resize(n_users);
  for (auto& u : sc.users) {
    u.latent.resize(config.latent_dim);
    for (auto& x : u.latent) x = standard_normal(rng);
    u.in_domain.assign(D, false);
  }

  // Weighted sampling without replacement via exponential keys.
  std::vector<std::pair<double, std::size_t>> keys(n_users);
  for (std::size_t i = 0; i < n_users; ++i) {
    double u01 = uniform01(rng);
    while (u01 <= 0.0) u01 = uniform01(rng);
    const double w = std::exp(config.overlap_affinity * sc.users[i].latent[0]);
    keys[i] = {-std::log(u01) / w, i};
  }
  std::sort(keys.begin(), keys.end());
  std::size_t next_single_domain = 0;
  std::vector<std::size_t> single_count(D, 0);
  for (std::size_t k = 0; k < n_users; ++k) {
    auto& user = sc.users[keys[k].second];
    if (k < n_overlap) {
      user.in_domain.assign(D, true);
    } else {
      while (single_count[next_single_domain] >= n_single) next_single_domain = (next_single_domain + 1) % D;
      user.in_domain[next_single_domain] = true;
      ++single_count[next_single_domain];
      next_single_domain = (next_single_domain + 1) % D;
    }
  }

  sc.domains.resize(D);
  for (std::size_t d = 0; d < D; ++d) {
    auto& dom = sc.domains[d];
    dom.num_items = config.items_per_domain;
    dom.item_latent.resize(dom.num_items);
    for (auto& q : dom.item_latent) {
      q.resize(config.latent_dim);
      for (auto& x : q) x = standard_normal(rng);
    }
    std::vector<std::size_t> rank(dom.num_items);
    std::iota(rank.begin(), rank.end(), 1);
    shuffle(std::span<std::size_t>(rank), rng);
    dom.popularity.resize(dom.num_items);
    for (std::size_t v = 0; v < dom.num_items; ++v) {
      dom.popularity[v] = std::pow(static_cast<double>(rank[v]), -config.popularity_skew);
    }
    for (std::size_t u = 0; u < n_users; ++u)
      if (sc.users[u].in_domain[d]) dom.members.push_back(static_cast<UserId>(u));
    const std::size_t cells = dom.members.size() * dom.num_items;
    dom.rating.assign(cells, 0);
    dom.relevance.assign(cells, 0.0);
    dom.propensity.assign(cells, 0.0);
    dom.observed.assign(cells, 0);
    dom.sequences.resize(dom.members.size());
    dom.timestamps.resize(dom.members.size());
    for (std::size_t m = 0; m < dom.members.size(); ++m) {
      const auto& z = sc.users[static_cast<std::size_t>(dom.members[m])].latent;
      for (int attempt = 0; attempt < 1000; ++attempt) {
        detail::draw_member_row(config, z, dom, m, rng);
        if (dom.sequences[m].size() >= config.min_seq_len) break;
      }
    }
  }
  return sc;
}

namespace detail {

template <class Value>
void dump_matrix(const std::filesystem::path& path, const CdsrScenario& sc,
                 const std::vector<Value> ScenarioDomain::*field) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "domain,user,item,value\n";
  for (std::size_t d = 0; d < sc.domains.size(); ++d) {
    const auto& dom = sc.domains[d];
    const auto& values = dom.*field;
    for (std::size_t m = 0; m < dom.members.size(); ++m)
      for (std::size_t v = 1; v <= dom.num_items; ++v) {
        out << d << ',' << dom.members[m] << ',' << v << ',';
        if constexpr (std::is_same_v<Value, std::uint8_t>) {
          out << static_cast<int>(values[dom.cell(m, v)]);
        } else {
          out << values[dom.cell(m, v)];
        }
        out << '\n';
      }
  }
}

}  // namespace detail

// Writes ratings.csv, propensity.csv, observed.csv (domain,user,item,value)
// and sequences.csv (domain,user,position,item) into `dir`.
inline void dump_scenario(const CdsrScenario& sc, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::dump_matrix(dir / "ratings.csv", sc, &ScenarioDomain::rating);
  detail::dump_matrix(dir / "propensity.csv", sc, &ScenarioDomain::propensity);
  detail::dump_matrix(dir / "observed.csv", sc, &ScenarioDomain::observed);
  std::ofstream out(dir / "sequences.csv");
  if (!out) throw std::runtime_error("cannot write sequences.csv");
  out << "domain,user,position,item\n";
  for (std::size_t d = 0; d < sc.domains.size(); ++d) {
    const auto& dom = sc.domains[d];
    for (std::size_t m = 0; m < dom.members.size(); ++m)
      for (std::size_t k = 0; k < dom.sequences[m].size(); ++k)
        out << d << ',' << dom.members[m] << ',' << k << ',' << dom.sequences[m][k] << '\n';
  }
}

}  // namespace amid::data
