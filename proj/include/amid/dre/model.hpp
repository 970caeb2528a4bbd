#pragma once

// The full network: item/position embeddings and encoder, the multi-interest
// module, and three heads over mean(S*) || v:
//   prediction  r_hat = sigmoid(MLP_theta(.)),
//   imputation  e_hat = softplus(MLP_phi(.)),
//   propensity  p_hat = clip(sigmoid(MLP_psi(.)), p_min, 1).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "amid/datagen/batches.hpp"
#include "amid/encoders/encoders.hpp"
#include "amid/errors.hpp"
#include "amid/mim/mim.hpp"
#include "amid/numerics/tensor.hpp"

namespace amid::dre {

enum class MimSource { encoded, embedded };

inline std::string to_string(MimSource s) { return s == MimSource::encoded ? "encoded" : "embedded"; }

inline MimSource parse_mim_source(std::string_view s) {
  if (s == "encoded") return MimSource::encoded;
  if (s == "embedded") return MimSource::embedded;
  throw ConfigError("unknown mim source '" + std::string(s) + "' (expected encoded or embedded)");
}

struct ModelConfig {
  std::size_t dim = 16;
  std::size_t seq_len = 8;
  enc::EncoderKind encoder = enc::EncoderKind::gru;
  bool mim_enabled = true;
  MimSource mim_source = MimSource::encoded;
  double k = 0.7;
  std::size_t pool_size = 64;  // N; the experiment driver sets it to the batch size
  double p_min = 0.05;
  bool shared_trunk = false;   // imputation and propensity heads share hidden layers
};

inline void validate(const ModelConfig& c) {
  if (c.dim < 2) throw ConfigError("model: d must be >= 2");
  if (c.seq_len < 1) throw ConfigError("model: T must be >= 1");
  if (c.pool_size < 1) throw ConfigError("model: pool size N must be >= 1");
  if (!(c.p_min > 0.0) || c.p_min > 1.0) throw ConfigError("model: p_min must lie in (0, 1]");
  if (!std::isfinite(c.k)) throw ConfigError("model: k must be finite");
}

// [2d -> d -> d/2 -> 1], tanh hidden activations, linear output.
struct Mlp {
  Tensor W1, b1, W2, b2, W3, b3;

  std::vector<Tensor> list() const { return {W1, b1, W2, b2, W3, b3}; }
  std::vector<Tensor> trunk() const { return {W1, b1, W2, b2}; }
  std::vector<Tensor> output() const { return {W3, b3}; }

  Tensor hidden(const Tensor& x) const { return tanh(matmul(tanh(matmul(x, W1) + b1), W2) + b2); }
  Tensor logits_from_hidden(const Tensor& h) const { return matmul(h, W3) + b3; }
  Tensor logits(const Tensor& x) const { return logits_from_hidden(hidden(x)); }
};

inline Mlp make_mlp(std::size_t d, Rng& rng) {
  const std::size_t half = std::max<std::size_t>(1, d / 2);
  Mlp m;
  m.W1 = enc::init_weight({2 * d, d}, 2 * d, rng);
  m.b1 = Tensor::zeros({1, d}, true);
  m.W2 = enc::init_weight({d, half}, d, rng);
  m.b2 = Tensor::zeros({1, half}, true);
  m.W3 = enc::init_weight({half, 1}, half, rng);
  m.b3 = Tensor::zeros({1, 1}, true);
  return m;
}

struct Model {
  ModelConfig config;
  enc::EmbeddingTables tables;
  enc::Encoder encoder;
  mim::MimParams mim;
  Mlp prediction;
  Mlp imputation;
  Mlp propensity;

  // Prediction model: embeddings, encoder, multi-interest module, prediction head.
  std::vector<Tensor> theta() const {
    std::vector<Tensor> out = tables.item_tables;
    out.push_back(tables.position);
    for (const auto& t : encoder.params()) out.push_back(t);
    for (const auto& t : mim.list()) out.push_back(t);
    for (const auto& t : prediction.list()) out.push_back(t);
    return out;
  }
  std::vector<Tensor> phi() const { return imputation.list(); }
  std::vector<Tensor> psi() const { return config.shared_trunk ? propensity.output() : propensity.list(); }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t z = 0; z < tables.item_tables.size(); ++z) {
      out.emplace_back("embedding.item." + std::to_string(z), tables.item_tables[z]);
    }
    out.emplace_back("embedding.position", tables.position);
    if (encoder.kind == enc::EncoderKind::gru) {
      const char* names[] = {"Wz", "Uz", "bz", "Wr", "Ur", "br", "Wc", "Uc", "bc"};
      const auto list = encoder.gru.list();
      for (std::size_t i = 0; i < list.size(); ++i) out.emplace_back(std::string("encoder.gru.") + names[i], list[i]);
    }
    const char* mim_names[] = {"W1", "W2", "W_ip", "W_C", "W_F"};
    const auto ml = mim.list();
    for (std::size_t i = 0; i < ml.size(); ++i) out.emplace_back(std::string("mim.") + mim_names[i], ml[i]);
    const char* mlp_names[] = {"W1", "b1", "W2", "b2", "W3", "b3"};
    for (const auto& [head, mlp] : {std::pair<const char*, const Mlp*>{"head.prediction.", &prediction},
                                    {"head.imputation.", &imputation},
                                    {"head.propensity.", &propensity}}) {
      const auto list = mlp->list();
      for (std::size_t i = 0; i < list.size(); ++i) out.emplace_back(std::string(head) + mlp_names[i], list[i]);
    }
    return out;
  }
};

inline Model make_model(const ModelConfig& config, std::span<const std::size_t> items_per_domain, std::uint64_t seed) {
  validate(config);
  Rng rng = make_rng(seed, 0x30de1);
  Model m;
  m.config = config;
  m.tables = enc::make_embedding_tables(items_per_domain, config.seq_len, config.dim, rng);
  m.encoder = enc::make_encoder(config.encoder, config.dim, rng);
  m.mim = mim::make_mim_params(config.dim, config.pool_size, config.k, rng);
  m.prediction = make_mlp(config.dim, rng);
  m.imputation = make_mlp(config.dim, rng);
  m.propensity = make_mlp(config.dim, rng);
  return m;
}

// r_hat = sigmoid(MLP(mean over rows of S* || v)) for one sequence.
inline Tensor predict_preference(const Mlp& head, const Tensor& s_star, const Tensor& item_embedding) {
  if (s_star.rank() != 2) throw ShapeError("predict_preference: S* must be 2T x d, got " + shape_str(s_star.shape()));
  const std::size_t d = s_star.dim(1);
  if (item_embedding.numel() != d) throw ShapeError("predict_preference: item embedding must have d entries");
  const Tensor x = concat({reshape(mean(s_star, 0), {1, d}), reshape(item_embedding, {1, d})}, 1);
  return reshape(sigmoid(head.logits(x)), {});
}

enum class ErrorMetric { mse, mae };

inline ErrorMetric parse_error_metric(std::string_view s) {
  if (s == "mse") return ErrorMetric::mse;
  if (s == "mae") return ErrorMetric::mae;
  throw ConfigError("unknown error metric '" + std::string(s) + "' (expected mse or mae)");
}

inline Tensor pointwise_error(const Tensor& r_hat, const Tensor& r, ErrorMetric metric) {
  return metric == ErrorMetric::mse ? square(r_hat - r) : abs(r_hat - r);
}

// Scores and head outputs for every (row, candidate) pair of a batch. Row b's
// candidates are its positive followed by its negatives; pairs are laid out
// row-major, so pair b * C + c is candidate c of row b.
struct PairOutputs {
  std::size_t rows = 0;
  std::size_t candidates = 0;
  Tensor features;  // P x 2d: mean(S*) || v
  Tensor r_hat;     // P x 1
  Tensor e_hat;     // P x 1 (undefined unless requested)
  Tensor p_hat;     // P x 1 clipped (undefined unless requested)
  Tensor p_logit;   // P x 1
  Tensor label;     // P x 1: 1 for the positive, 0 for negatives
  Tensor observed;  // P x 1: the row's o
  std::vector<std::size_t> domain;  // per pair
  Tensor own_similarity;            // B
  mim::GroupFlags flags;
};

inline Tensor pair_features(const Model& model, const data::SequenceBatch& batch, Tensor* own_similarity = nullptr,
                            mim::GroupFlags* flags = nullptr) {
  const std::size_t B = batch.rows();
  const std::size_t T = model.config.seq_len;
  const std::size_t d = model.config.dim;
  if (batch.seq_len != T) throw ShapeError("model: batch T differs from model T");
  const Tensor s = enc::embed_batch(model.tables, batch.item_ids, batch.domain);
  const Tensor s_other = enc::embed_batch(model.tables, batch.other_ids, batch.other_domain);
  const Tensor H = enc::encode(model.encoder, s, enc::padding_mask(batch.item_ids, T));
  Tensor H_other;
  Tensor src = H;
  if (model.config.mim_source == MimSource::encoded) {
    H_other = enc::encode(model.encoder, s_other, enc::padding_mask(batch.other_ids, T));
  } else {
    H_other = s_other;
    src = s;
  }
  const mim::BatchContext ctx{batch.domain, batch.has_other, batch.item_ids, batch.other_ids};
  Tensor s_star;
  if (model.config.mim_source == MimSource::encoded) {
    auto out = mim::apply_batch(model.mim, H, H_other, ctx, model.config.mim_enabled);
    s_star = out.s_star;
    if (own_similarity) *own_similarity = out.own_similarity;
    if (flags) *flags = std::move(out.flags);
  } else {
    // Similarity and messages come from S'; the top half of S* is still H.
    auto out = mim::apply_batch(model.mim, src, H_other, ctx, model.config.mim_enabled);
    const Tensor fused = slice(out.s_star, 1, T, 2 * T);
    const Tensor top = reshape(matmul(reshape(H, {B * T, d}), model.mim.W_F), {B, T, d});
    s_star = concat({top, fused}, 1);
    if (own_similarity) *own_similarity = out.own_similarity;
    if (flags) *flags = std::move(out.flags);
  }
  const Tensor user = mean(s_star, 1);  // B x d
  const std::size_t C = 1 + batch.negatives_per_row;
  std::vector<std::size_t> row_of(B * C), item(B * C), dom(B * C);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      row_of[b * C + c] = b;
      item[b * C + c] = c == 0 ? batch.positive[b] : batch.negatives[b * batch.negatives_per_row + c - 1];
      dom[b * C + c] = batch.domain[b];
    }
  }
  return concat({gather(user, row_of), enc::item_rows(model.tables, item, dom)}, 1);
}

struct HeadRequest {
  bool imputation = true;
  bool propensity = true;
};

inline Tensor propensity_logits(const Model& model, const Tensor& features) {
  if (model.config.shared_trunk) return model.propensity.logits_from_hidden(model.imputation.hidden(features));
  return model.propensity.logits(features);
}

inline PairOutputs forward(const Model& model, const data::SequenceBatch& batch, HeadRequest heads = {}) {
  PairOutputs out;
  out.rows = batch.rows();
  out.candidates = 1 + batch.negatives_per_row;
  out.features = pair_features(model, batch, &out.own_similarity, &out.flags);
  out.r_hat = sigmoid(model.prediction.logits(out.features));
  if (heads.imputation) out.e_hat = softplus(model.imputation.logits(out.features));
  if (heads.propensity) {
    out.p_logit = propensity_logits(model, out.features);
    out.p_hat = clip(sigmoid(out.p_logit), model.config.p_min, 1.0);
  }
  const std::size_t P = out.rows * out.candidates;
  std::vector<double> label(P, 0.0), obs(P, 0.0);
  out.domain.resize(P);
  for (std::size_t b = 0; b < out.rows; ++b)
    for (std::size_t c = 0; c < out.candidates; ++c) {
      const std::size_t i = b * out.candidates + c;
      label[i] = c == 0 && batch.observed[b] ? 1.0 : 0.0;
      obs[i] = batch.observed[b];
      out.domain[i] = batch.domain[b];
    }
  out.label = Tensor({P, 1}, std::move(label));
  out.observed = Tensor({P, 1}, std::move(obs));
  return out;
}

}  // namespace amid::dre
