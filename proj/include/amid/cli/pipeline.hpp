#pragma once

// Per-seed pipeline: data -> user split -> K_u downsampling -> training ->
// test evaluation, plus the experiment grid over objectives and the MIM switch.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "amid/cli/config.hpp"
#include "amid/datagen/batches.hpp"
#include "amid/datagen/events.hpp"
#include "amid/datagen/scenario.hpp"
#include "amid/dre/checkpoint.hpp"
#include "amid/dre/model.hpp"
#include "amid/dre/train.hpp"
#include "amid/eval/eval.hpp"

namespace amid::cli {

struct PreparedData {
  std::optional<data::CdsrScenario> scenario;  // synthetic source only
  std::vector<data::InteractionEvent> events;
  data::UserSplit split;
  data::KuResult ku;
  std::vector<std::size_t> items_per_domain;
  dre::TrainData train;
  data::SequenceStore test;
};

inline PreparedData prepare_data(const DataConfig& c, std::uint64_t seed) {
  PreparedData p;
  data::ItemVocabulary vocab;
  if (c.source == DataSource::synthetic) {
    p.scenario = data::generate_scenario(c.gen, seed);
    p.events = p.scenario->events();
    vocab = data::ItemVocabulary::identity(p.scenario->items_per_domain());
  } else {
    p.events = data::filter_sparse(data::load_interactions_csv(c.path), c.min_item_inter, c.min_user_inter);
    if (p.events.empty()) throw ConfigError("data: no interactions left after filtering " + c.path);
    vocab = data::ItemVocabulary::from_events(p.events);
  }
  p.items_per_domain = vocab.items_per_domain();
  p.split = data::split_users(p.events, seed);
  p.ku = data::apply_ku(p.split, c.ku, seed);
  std::vector<data::InteractionEvent> full = p.ku.observed.train;
  full.insert(full.end(), p.ku.unseen_train.begin(), p.ku.unseen_train.end());
  p.train = dre::make_train_data(data::build_sequences(p.ku.observed.train, vocab), data::build_sequences(full, vocab));
  p.test = data::build_sequences(p.split.test, vocab);
  return p;
}

struct RunResult {
  dre::Model model;
  dre::TrainingHistory history;
  eval::Evaluation evaluation;
};

inline dre::Model train_model(const ExperimentConfig& c, const PreparedData& data, std::uint64_t seed,
                              dre::TrainingHistory* history = nullptr) {
  dre::Model model = dre::make_model(c.model, data.items_per_domain, seed);
  auto h = dre::train_alternating(model, data.train, c.train, seed);
  if (history) *history = std::move(h);
  return model;
}

inline eval::Evaluation evaluate_model(const ExperimentConfig& c, const dre::Model& model, const PreparedData& data,
                                       std::uint64_t seed) {
  return eval::evaluate(model, data.test, c.eval, mix_seed(seed, 0xe7a1));
}

inline RunResult run_seed(const ExperimentConfig& c, const PreparedData& data, std::uint64_t seed) {
  RunResult r{dre::make_model(c.model, data.items_per_domain, seed), {}, {}};
  r.history = dre::train_alternating(r.model, data.train, c.train, seed);
  r.evaluation = evaluate_model(c, r.model, data, seed);
  return r;
}

inline void write_history_csv(std::ostream& out, const dre::TrainingHistory& h) {
  out << "step,round,phase,loss,grad_norm\n";
  for (const auto& s : h.steps) {
    out << s.step << ',' << s.round << ',' << s.phase << ',' << eval::fmt(s.loss) << ',' << eval::fmt(s.grad_norm)
        << '\n';
  }
}

struct Variant {
  dre::Objective objective = dre::Objective::dr;
  bool mim = true;

  std::string name() const { return dre::to_string(objective) + (mim ? "_mim_on" : "_mim_off"); }
};

inline std::vector<Variant> experiment_grid() {
  std::vector<Variant> out;
  for (auto o : {dre::Objective::naive, dre::Objective::ips, dre::Objective::dr})
    for (bool mim : {true, false}) out.push_back({o, mim});
  return out;
}

inline ExperimentConfig with_variant(ExperimentConfig c, const Variant& v) {
  c.train.objective = v.objective;
  c.model.mim_enabled = v.mim;
  return c;
}

struct VariantResult {
  Variant variant;
  std::vector<eval::SeedMetric> per_seed;
  std::vector<eval::SummaryRow> summary;
};

// Variants of one seed share the data, the initialization seed and the
// evaluation negatives, so differences between them are paired.
inline std::vector<VariantResult> run_experiment(const ExperimentConfig& c, const std::vector<Variant>& grid,
                                                 const std::function<void(const Variant&, std::uint64_t,
                                                                          const RunResult&)>& on_run = {}) {
  std::vector<VariantResult> results;
  for (const auto& v : grid) results.push_back({v, {}, {}});
  for (auto seed : c.seeds) {
    const auto data = prepare_data(c.data, seed);
    for (auto& r : results) {
      const auto run = run_seed(with_variant(c, r.variant), data, seed);
      const auto m = eval::seed_metrics(run.evaluation, seed);
      r.per_seed.insert(r.per_seed.end(), m.begin(), m.end());
      if (on_run) on_run(r.variant, seed, run);
    }
  }
  for (auto& r : results) r.summary = eval::aggregate_runs(r.per_seed);
  return results;
}

// Mean over domains of metric@k for one seed.
inline double seed_mean(const std::vector<eval::SeedMetric>& values, std::uint64_t seed, eval::Metric metric,
                        std::size_t k) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& v : values)
    if (v.seed == seed && v.metric == metric && v.k == k) s += v.value, ++n;
  if (n == 0) throw IndexError("experiment: no values for seed " + std::to_string(seed));
  return s / static_cast<double>(n);
}

inline void write_experiment_summary(std::ostream& out, const std::vector<VariantResult>& results) {
  out << "objective,mim,domain,metric,k,mean,std,n_seeds\n";
  for (const auto& r : results) {
    for (const auto& row : r.summary) {
      out << dre::to_string(r.variant.objective) << ',' << (r.variant.mim ? "on" : "off") << ',' << row.domain << ','
          << eval::to_string(row.metric) << ',' << row.k << ',' << eval::fmt(row.mean) << ',' << eval::fmt(row.std)
          << ',' << row.n_seeds << '\n';
    }
  }
}

}  // namespace amid::cli
