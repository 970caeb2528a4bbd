#pragma once

// Sampled-negative ranking evaluation, HR@K / NDCG@K and aggregation over seeds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "amid/datagen/batches.hpp"
#include "amid/dre/model.hpp"
#include "amid/errors.hpp"

namespace amid::eval {

enum class Metric { hr, ndcg };

inline std::string to_string(Metric m) { return m == Metric::hr ? "hr" : "ndcg"; }

inline Metric parse_metric(std::string_view s) {
  if (s == "hr") return Metric::hr;
  if (s == "ndcg") return Metric::ndcg;
  throw ConfigError("unknown metric '" + std::string(s) + "' (expected hr or ndcg)");
}

struct RankResult {
  data::UserId user = 0;
  std::size_t domain = 0;
  std::size_t rank = 1;  // of the positive among 1 + M candidates, from 1
};

// 1 + number of negatives scoring at least as high as the positive.
inline std::size_t rank_of_positive(double positive, std::span<const double> negatives) {
  if (negatives.empty()) throw ConfigError("ranking: need at least one negative");
  std::size_t rank = 1;
  for (double s : negatives) rank += s >= positive;
  return rank;
}

inline double metric_at_k(std::size_t rank, std::size_t k, Metric metric) {
  if (k < 1) throw ConfigError("metric: K must be >= 1");
  if (rank > k) return 0.0;
  return metric == Metric::hr ? 1.0 : 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

// Scores every candidate of every row (positive first) and ranks the positives.
inline std::vector<RankResult> rank_candidates(const dre::Model& model, const data::SequenceBatch& batch) {
  NoGradGuard guard;
  const Tensor features = dre::pair_features(model, batch);
  const Tensor scores = sigmoid(model.prediction.logits(features));
  const std::size_t C = 1 + batch.negatives_per_row;
  std::vector<RankResult> out;
  const auto v = scores.values();
  for (std::size_t b = 0; b < batch.rows(); ++b) {
    out.push_back({batch.user[b], batch.domain[b], rank_of_positive(v[b * C], v.subspan(b * C + 1, C - 1))});
  }
  return out;
}

struct EvalConfig {
  std::size_t negatives = 199;  // M
  std::vector<std::size_t> ks{10};
  std::size_t batch_size = 64;
};

struct DomainMetrics {
  std::size_t domain = 0;
  Metric metric = Metric::hr;
  std::size_t k = 10;
  double value = 0.0;
  std::size_t users = 0;
};

struct Evaluation {
  std::vector<RankResult> ranks;
  std::vector<DomainMetrics> metrics;  // per domain, then metric, then K
};

// Ranks the last item of every test sequence against M sampled unvisited
// items and averages HR@K / NDCG@K per domain.
inline Evaluation evaluate(const dre::Model& model, const data::SequenceStore& test, const EvalConfig& config,
                           std::uint64_t seed) {
  if (config.negatives < 1) throw ConfigError("evaluation: M must be >= 1");
  const auto targets = data::last_item_targets(test);
  if (targets.empty()) throw ConfigError("evaluation: test split has no sequence with two or more items");
  Evaluation ev;
  for (const auto& batch :
       data::make_eval_batches(test, targets, config.batch_size, config.negatives, model.config.seq_len, seed)) {
    auto r = rank_candidates(model, batch);
    ev.ranks.insert(ev.ranks.end(), r.begin(), r.end());
  }
  std::map<std::size_t, std::size_t> users;
  for (const auto& r : ev.ranks) ++users[r.domain];
  for (const auto& [domain, n] : users) {
    for (Metric m : {Metric::hr, Metric::ndcg}) {
      for (std::size_t k : config.ks) {
        double s = 0.0;
        for (const auto& r : ev.ranks)
          if (r.domain == domain) s += metric_at_k(r.rank, k, m);
        ev.metrics.push_back({domain, m, k, s / static_cast<double>(n), n});
      }
    }
  }
  return ev;
}

inline double metric_value(const Evaluation& ev, std::size_t domain, Metric metric, std::size_t k) {
  for (const auto& m : ev.metrics)
    if (m.domain == domain && m.metric == metric && m.k == k) return m.value;
  throw IndexError("evaluation: no " + to_string(metric) + "@" + std::to_string(k) + " for domain " +
                   std::to_string(domain));
}

// Mean over domains of a metric.
inline double mean_over_domains(const Evaluation& ev, Metric metric, std::size_t k) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& m : ev.metrics)
    if (m.metric == metric && m.k == k) s += m.value, ++n;
  if (n == 0) throw IndexError("evaluation: metric not computed");
  return s / static_cast<double>(n);
}

// ---- aggregation ----

struct SeedMetric {
  std::uint64_t seed = 0;
  std::size_t domain = 0;
  Metric metric = Metric::hr;
  std::size_t k = 10;
  double value = 0.0;
};

struct SummaryRow {
  std::size_t domain = 0;
  Metric metric = Metric::hr;
  std::size_t k = 10;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single seed
  std::size_t n_seeds = 0;
};

inline std::vector<SummaryRow> aggregate_runs(std::span<const SeedMetric> values) {
  if (values.empty()) throw ConfigError("aggregate: no runs");
  std::map<std::tuple<std::size_t, int, std::size_t>, std::vector<double>> groups;
  for (const auto& v : values) groups[{v.domain, static_cast<int>(v.metric), v.k}].push_back(v.value);
  std::vector<SummaryRow> out;
  for (const auto& [key, xs] : groups) {
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    const auto& [domain, metric, k] = key;
    out.push_back({domain, static_cast<Metric>(metric), k, mean, xs.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0,
                   xs.size()});
  }
  return out;
}

inline std::vector<SeedMetric> seed_metrics(const Evaluation& ev, std::uint64_t seed) {
  std::vector<SeedMetric> out;
  for (const auto& m : ev.metrics) out.push_back({seed, m.domain, m.metric, m.k, m.value});
  return out;
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline void write_metrics_csv(std::ostream& out, std::span<const SeedMetric> values) {
  out << "seed,domain,metric,k,value\n";
  for (const auto& v : values) {
    out << v.seed << ',' << v.domain << ',' << to_string(v.metric) << ',' << v.k << ',' << fmt(v.value) << '\n';
  }
}

inline void write_summary_csv(std::ostream& out, std::span<const SummaryRow> rows) {
  out << "domain,metric,k,mean,std,n_seeds\n";
  for (const auto& r : rows) {
    out << r.domain << ',' << to_string(r.metric) << ',' << r.k << ',' << fmt(r.mean) << ',' << fmt(r.std) << ','
        << r.n_seeds << '\n';
  }
}

}  // namespace amid::eval
