#pragma once

// Alternating optimisation. Each round runs Q steps on observed batches
// (L_e, updating theta, phi and psi) and then Q' steps on full-space batches
// (L_r, updating theta only), each phase with its own Adam state.

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "amid/datagen/batches.hpp"
#include "amid/dre/losses.hpp"
#include "amid/dre/model.hpp"
#include "amid/errors.hpp"
#include "amid/numerics/adam.hpp"
#include "amid/numerics/random.hpp"

namespace amid::dre {

enum class Objective { naive, ips, dr };

inline Objective parse_objective(std::string_view s) {
  if (s == "naive") return Objective::naive;
  if (s == "ips") return Objective::ips;
  if (s == "dr") return Objective::dr;
  throw ConfigError("unknown objective '" + std::string(s) + "' (expected naive, ips or dr)");
}

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::naive: return "naive";
    case Objective::ips: return "ips";
    default: return "dr";
  }
}

struct TrainConfig {
  double lambda1 = 0.01;
  double lambda2 = 1e-4;
  double lambda3 = 1e-4;
  double lambda4 = 1e-4;
  double lambda5 = 1e-4;
  double lambda_p = 1.0;
  double lr_phase1 = 1e-3;
  double lr_phase2 = 1e-5;
  std::size_t q = 1;
  std::size_t q_prime = 1;
  std::size_t rounds = 1;
  std::size_t batch_size = 64;
  std::size_t negatives = 1;
  ErrorMetric metric = ErrorMetric::mse;
  Objective objective = Objective::dr;
  bool normalize = false;         // divide the lambda1 sum by |O^Z|
  double similarity_weight = 0.0;  // pushes a' of each row's own other-domain history above k
};

inline void validate(const TrainConfig& c) {
  for (double l : {c.lambda1, c.lambda2, c.lambda3, c.lambda4, c.lambda5, c.lambda_p, c.similarity_weight}) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("train: loss weights must be finite and >= 0");
  }
  if (!(c.lr_phase1 > 0.0) || !(c.lr_phase2 > 0.0)) throw ConfigError("train: learning rates must be > 0");
  if (c.q < 1 || c.q_prime < 1) throw ConfigError("train: Q and Q' must be >= 1");
  if (c.rounds < 1) throw ConfigError("train: rounds must be >= 1");
  if (c.batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
}

inline TrainConfig validated(TrainConfig c) {
  validate(c);
  return c;
}

struct StepRecord {
  int phase = 1;
  std::size_t round = 0;
  std::size_t step = 0;  // global optimizer step, from 1
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct TrainingHistory {
  std::vector<StepRecord> steps;

  std::size_t optimizer_steps() const { return steps.size(); }
};

// Observed users form O. D adds users whose sequences are known but whose
// exposure was not logged (o = 0); their labels are never read.
struct TrainData {
  data::SequenceStore observed;
  data::SequenceStore full;
  std::vector<data::Target> observed_targets;
  std::vector<data::Target> full_targets;
};

inline TrainData make_train_data(data::SequenceStore observed, data::SequenceStore full) {
  TrainData t;
  t.observed_targets = data::next_item_targets(observed);
  t.full_targets = data::next_item_targets(full);
  for (auto& target : t.full_targets) target.observed = observed.find(target.user, target.domain) ? 1 : 0;
  t.observed = std::move(observed);
  t.full = std::move(full);
  return t;
}

namespace detail {

inline std::vector<Tensor> join(std::vector<Tensor> a, const std::vector<Tensor>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline double norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

inline Tensor errors(const PairOutputs& out, ErrorMetric metric) {
  return pointwise_error(out.r_hat, out.label, metric);
}

// a' of each row's own other-domain history pushed above k.
inline Tensor similarity_penalty(const Model& model, const PairOutputs& out, const data::SequenceBatch& batch) {
  std::vector<double> mask(batch.rows());
  double n = 0.0;
  for (std::size_t b = 0; b < batch.rows(); ++b) n += mask[b] = batch.has_other[b] ? 1.0 : 0.0;
  if (n == 0.0) return Tensor::scalar(0.0);
  const Tensor gap = softplus(add_scalar(-1.0 * out.own_similarity, model.config.k));
  return sum(gap * Tensor({batch.rows()}, std::move(mask))) * (1.0 / n);
}

}  // namespace detail

// Head inputs and o for the propensity supervision, computed from a full-space
// batch and held constant so that the supervision reaches only the propensity
// head.
struct SideBatch {
  Tensor features;
  Tensor observed;
};

inline SideBatch side_batch(const Model& model, const data::SequenceBatch& batch) {
  SideBatch side;
  {
    NoGradGuard guard;
    side.features = pair_features(model, batch).detach();
  }
  const std::size_t C = 1 + batch.negatives_per_row;
  const std::size_t n = batch.rows() * C;
  std::vector<double> o(n);
  for (std::size_t b = 0; b < batch.rows(); ++b)
    for (std::size_t c = 0; c < C; ++c) o[b * C + c] = batch.observed[b];
  side.observed = Tensor({n, 1}, std::move(o));
  return side;
}

// Phase-1 objective on an observed batch, plus the propensity supervision when
// a side batch is given.
inline Tensor phase1_loss(const Model& model, const TrainConfig& config, const data::SequenceBatch& batch,
                          const SideBatch* side) {
  const bool debias = config.objective != Objective::naive;
  const bool impute = config.objective == Objective::dr;
  const PairOutputs out = forward(model, batch, {impute, impute});
  const Tensor e = detail::errors(out, config.metric);
  Tensor loss = impute ? loss_e(e, out.e_hat, out.p_hat, out.domain, config.lambda1, config.normalize)
                       : loss_e(e, Tensor(), Tensor(), out.domain, 0.0);
  loss = loss + l2_penalty(config.lambda2, model.theta());
  if (impute) loss = loss + l2_penalty(config.lambda3, model.phi());
  if (debias) {
    loss = loss + l2_penalty(config.lambda4, model.psi());
    if (side && config.lambda_p > 0.0) {
      loss = loss + config.lambda_p * propensity_bce(propensity_logits(model, side->features), side->observed);
    }
  }
  if (config.similarity_weight > 0.0) {
    loss = loss + config.similarity_weight * detail::similarity_penalty(model, out, batch);
  }
  return loss;
}

// Imputed errors and propensities entering phase 2 as constants.
struct FrozenHeads {
  Tensor e_hat;
  Tensor p_hat;
};

inline FrozenHeads frozen_heads(const Model& model, const data::SequenceBatch& batch) {
  NoGradGuard guard;
  const auto out = forward(model, batch);
  return {out.e_hat.detach(), out.p_hat.detach()};
}

// Phase-2 objective on a full-space batch. Without `frozen` the head outputs
// of the same forward pass are used (and detached).
inline Tensor phase2_loss(const Model& model, const TrainConfig& config, const data::SequenceBatch& batch,
                          const FrozenHeads* frozen = nullptr) {
  const bool impute = config.objective == Objective::dr;
  const PairOutputs out = forward(model, batch, {impute && !frozen, !frozen});
  const Tensor e_hat = frozen ? frozen->e_hat : out.e_hat;
  const Tensor p_hat = frozen ? frozen->p_hat : out.p_hat;
  const Tensor e = detail::errors(out, config.metric);
  const Tensor loss = impute ? loss_r(e, e_hat, p_hat, out.observed, out.domain)
                             : loss_ips(e, p_hat, out.observed, out.domain);
  return loss + l2_penalty(config.lambda5, model.theta());
}

class AlternatingTrainer {
 public:
  AlternatingTrainer(Model& model, const TrainData& data, TrainConfig config, std::uint64_t seed)
      : model_(&model),
        config_(validated(std::move(config))),
        observed_(data.observed, data.observed_targets, config_.batch_size, config_.negatives,
                  model.config.seq_len, mix_seed(seed, 1)),
        full_(data.full, data.full_targets, config_.batch_size, config_.negatives, model.config.seq_len,
              mix_seed(seed, 2)),
        adam1_(make_adam_state(config_.lr_phase1)),
        adam2_(make_adam_state(config_.lr_phase2)) {}

  // One observed-batch step; returns the loss before the update.
  double phase1_step() {
    const auto batch = observed_.next();
    const bool supervise = config_.objective != Objective::naive && config_.lambda_p > 0.0;
    SideBatch side;
    if (supervise) side = side_batch(*model_, full_.next());
    const Tensor loss = phase1_loss(*model_, config_, batch, supervise ? &side : nullptr);
    auto params = detail::join(detail::join(model_->theta(), model_->phi()), model_->psi());
    return apply(loss, params, adam1_, 1);
  }

  double phase2_step() {
    const auto batch = full_.next();
    const Tensor loss = phase2_loss(*model_, config_, batch);
    auto params = model_->theta();
    return apply(loss, params, adam2_, 2);
  }

  void run_round() {
    for (std::size_t i = 0; i < config_.q; ++i) phase1_step();
    if (config_.objective != Objective::naive) {
      for (std::size_t i = 0; i < config_.q_prime; ++i) phase2_step();
    }
    ++round_;
  }

  const TrainingHistory& history() const { return history_; }

 private:
  double apply(const Tensor& loss, std::vector<Tensor>& params, AdamState& state, int phase) {
    const double value = loss.item();
    const std::size_t step = history_.steps.size() + 1;
    if (!std::isfinite(value)) {
      throw DivergenceError("training diverged: loss " + std::to_string(value) + " at step " + std::to_string(step) +
                                " (phase " + std::to_string(phase) + ")",
                            step);
    }
    const auto grads = grad(loss, params);
    history_.steps.push_back({phase, round_, step, value, detail::norm(grads)});
    adam_step(params, grads, state);
    return value;
  }

  Model* model_;
  TrainConfig config_;
  data::BatchStream observed_;
  data::BatchStream full_;
  AdamState adam1_;
  AdamState adam2_;
  TrainingHistory history_;
  std::size_t round_ = 0;
};

// Trains `model` in place and returns the step history. The naive objective
// skips phase 2 and trains on the observed error alone.
inline TrainingHistory train_alternating(Model& model, const TrainData& data, const TrainConfig& config,
                                         std::uint64_t seed) {
  AlternatingTrainer trainer(model, data, config, seed);
  for (std::size_t r = 0; r < config.rounds; ++r) trainer.run_round();
  return trainer.history();
}

}  // namespace amid::dre
