#pragma once

// Multi-interest information module: users of another domain whose encoded
// sequences look alike (max over T x T of (H_i W1)(H_j W2)^T >= k) form an
// interest group, and each target receives a learned mix of their messages
//
//   m'_j = a_ij * H_j W_ip,   fused = sum_j W_C[j] m'_j,
//   S*   = concat_rows(H, fused) W_F            (2T x d).
//
// The per-target functions follow those formulas one user at a time; the
// batched path below computes the same thing for a whole mixed batch.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "amid/encoders/encoders.hpp"
#include "amid/errors.hpp"
#include "amid/numerics/tensor.hpp"

namespace amid::mim {

struct MimParams {
  Tensor W1, W2, W_ip, W_C, W_F;
  double k = 0.7;

  std::size_t pool_size() const { return W_C.dim(0); }
  std::vector<Tensor> list() const { return {W1, W2, W_ip, W_C, W_F}; }
};

inline MimParams make_mim_params(std::size_t d, std::size_t pool_size, double k, Rng& rng) {
  if (pool_size < 1) throw ConfigError("mim: pool size N must be >= 1");
  if (!std::isfinite(k)) throw ConfigError("mim: k must be finite");
  MimParams p;
  p.W1 = enc::init_weight({d, d}, d, rng);
  p.W2 = enc::init_weight({d, d}, d, rng);
  p.W_ip = enc::init_weight({d, d}, d, rng);
  p.W_C = enc::init_weight({pool_size, 1}, pool_size, rng);
  p.W_F = enc::init_weight({d, d}, d, rng);
  p.k = k;
  return p;
}

namespace detail {

inline void check_td(const Tensor& h, const char* what) {
  if (h.rank() != 2) throw ShapeError(std::string("mim: ") + what + " must be T x d, got " + shape_str(h.shape()));
}

inline std::vector<std::uint8_t> all_real(std::size_t T) { return std::vector<std::uint8_t>(T, 1); }

}  // namespace detail

// a' = max over real (t, s) of [(H_i W1)(H_j W2)^T]_{ts}; 0 when either side
// has no real positions.
inline Tensor interest_similarity(const Tensor& Hi, const Tensor& Hj, const Tensor& W1, const Tensor& W2,
                                  std::span<const std::uint8_t> mask_i, std::span<const std::uint8_t> mask_j) {
  detail::check_td(Hi, "H_i");
  detail::check_td(Hj, "H_j");
  if (Hi.shape() != Hj.shape()) {
    throw ShapeError("interest_similarity: " + shape_str(Hi.shape()) + " vs " + shape_str(Hj.shape()));
  }
  const std::size_t T = Hi.dim(0);
  if (mask_i.size() != T || mask_j.size() != T) throw ShapeError("interest_similarity: mask length must be T");
  const Tensor scores = reshape(matmul(matmul(Hi, W1), transpose(matmul(Hj, W2))), {1, T * T});
  std::vector<double> offset(T * T);
  bool any = false;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < T; ++s) {
      const bool real = mask_i[t] && mask_j[s];
      offset[t * T + s] = real ? 0.0 : -1e300;
      any = any || real;
    }
  if (!any) return Tensor::scalar(0.0);
  return reshape(max(add(scores, Tensor({1, T * T}, std::move(offset))), 1), {});
}

inline Tensor interest_similarity(const Tensor& Hi, const Tensor& Hj, const Tensor& W1, const Tensor& W2) {
  const auto m = detail::all_real(Hi.rank() == 2 ? Hi.dim(0) : 0);
  return interest_similarity(Hi, Hj, W1, W2, m, m);
}

struct GroupFlags {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> a;  // rows x cols

  std::uint8_t at(std::size_t i, std::size_t j) const { return a.at(i * cols + j); }
  std::span<const std::uint8_t> row(std::size_t i) const {
    return std::span<const std::uint8_t>(a).subspan(i * cols, cols);
  }
};

// a = 1 where a' >= k (boundary inclusive).
inline GroupFlags group_flags(std::span<const double> similarity, std::size_t rows, std::size_t cols, double k) {
  if (similarity.size() != rows * cols) throw ShapeError("group_flags: similarity is not rows x cols");
  GroupFlags f{rows, cols, std::vector<std::uint8_t>(rows * cols)};
  for (std::size_t i = 0; i < similarity.size(); ++i) f.a[i] = similarity[i] >= k ? 1 : 0;
  return f;
}

// T x d x N stack whose slot j is a_j * (H_j W_ip).
inline Tensor propagate_messages(std::span<const std::uint8_t> flags, const std::vector<Tensor>& sources,
                                 const Tensor& W_ip) {
  if (flags.size() != sources.size() || sources.empty()) {
    throw ShapeError("propagate_messages: need one flag per source and at least one source");
  }
  const std::size_t T = sources[0].dim(0), d = sources[0].dim(1);
  std::vector<Tensor> slots;
  slots.reserve(sources.size());
  for (std::size_t j = 0; j < sources.size(); ++j) {
    detail::check_td(sources[j], "source");
    const Tensor msg = flags[j] ? matmul(sources[j], W_ip) : Tensor::zeros({T, d});
    slots.push_back(reshape(msg, {T, d, 1}));
  }
  return concat(slots, 2);
}

// S* = concat_rows(H, squeeze(m' W_C)) W_F.
inline Tensor enhance(const Tensor& H, const Tensor& messages, const Tensor& W_C, const Tensor& W_F) {
  detail::check_td(H, "H");
  const std::size_t T = H.dim(0), d = H.dim(1);
  if (messages.rank() != 3 || messages.dim(0) != T || messages.dim(1) != d) {
    throw ShapeError("enhance: messages must be T x d x N, got " + shape_str(messages.shape()));
  }
  const std::size_t N = messages.dim(2);
  if (W_C.shape() != Shape{N, 1}) throw ShapeError("enhance: W_C must be N x 1, got " + shape_str(W_C.shape()));
  const Tensor fused = reshape(matmul(reshape(messages, {T * d, N}), W_C), {T, d});
  return matmul(concat({H, fused}, 0), W_F);
}

// ---- batched path ----------------------------------------------------------

struct BatchContext {
  std::span<const std::size_t> domain;        // per row
  std::span<const std::uint8_t> has_other;    // per row
  std::span<const std::size_t> item_ids;      // B x T, own-domain history
  std::span<const std::size_t> other_ids;     // B x T, same user's other-domain history
};

struct MimOutput {
  Tensor s_star;                    // B x 2T x d
  std::vector<double> similarity;   // B x N, a' per slot (0 for empty slots)
  GroupFlags flags;                 // B x N
  std::vector<std::vector<std::ptrdiff_t>> slot_source;  // per row and slot: -1 empty, -2 own other row, else batch row
  Tensor own_similarity;            // B, differentiable a' against the own other-domain row (0 without one)
};

namespace detail {

// Max over real (t, s) of P_i[t] . Q_j[s] from plain values.
inline double max_score(std::span<const double> P, std::span<const double> Q, std::span<const std::size_t> ids_i,
                        std::span<const std::size_t> ids_j, std::size_t T, std::size_t d) {
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < T; ++t) {
    if (!ids_i[t]) continue;
    for (std::size_t s = 0; s < T; ++s) {
      if (!ids_j[s]) continue;
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += P[t * d + k] * Q[s * d + k];
      best = std::max(best, acc);
    }
  }
  return std::isinf(best) ? 0.0 : best;
}

}  // namespace detail

// H and H_other are B x T x d encodings of each row's own history and of the
// same user's other-domain history. Slot 0 of every target holds its own
// other-domain row (flag forced to 1 when present); the following slots are
// the batch rows from other domains, in batch order, up to N. When
// `enabled` is false no message is sent and the bottom half of S* is zero.
inline MimOutput apply_batch(const MimParams& p, const Tensor& H, const Tensor& H_other, const BatchContext& ctx,
                             bool enabled = true) {
  const std::size_t B = H.dim(0), T = H.dim(1), d = H.dim(2);
  const std::size_t N = p.pool_size();
  if (H_other.shape() != H.shape()) throw ShapeError("mim: H_other must match H");
  if (ctx.domain.size() != B || ctx.has_other.size() != B || ctx.item_ids.size() != B * T ||
      ctx.other_ids.size() != B * T) {
    throw ShapeError("mim: batch context does not match B x T");
  }
  MimOutput out;
  out.similarity.assign(B * N, 0.0);
  out.flags = GroupFlags{B, N, std::vector<std::uint8_t>(B * N, 0)};
  out.slot_source.assign(B, std::vector<std::ptrdiff_t>(N, -1));

  const Tensor flatH = reshape(H, {B * T, d});
  const Tensor flatO = reshape(H_other, {B * T, d});
  const Tensor P = matmul(flatH, p.W1);
  const Tensor Q = matmul(flatH, p.W2);
  const Tensor Qo = matmul(flatO, p.W2);

  // Differentiable a' against the own other-domain row.
  {
    const Tensor scores = bmm(reshape(P, {B, T, d}), transpose(reshape(Qo, {B, T, d})));
    std::vector<double> offset(B * T * T), valid(B, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t s = 0; s < T; ++s) {
          const bool real = ctx.has_other[b] && ctx.item_ids[b * T + t] && ctx.other_ids[b * T + s];
          offset[(b * T + t) * T + s] = real ? 0.0 : -1e300;
          if (real) valid[b] = 1.0;
        }
    const Tensor best = max(add(reshape(scores, {B, T * T}), Tensor({B, T * T}, std::move(offset))), 1);
    out.own_similarity = mul(best, Tensor({B}, std::move(valid)));
  }
  if (!enabled) {
    const Tensor zeros = Tensor::zeros({B, T, d});
    out.s_star = reshape(matmul(reshape(concat({H, zeros}, 1), {B * 2 * T, d}), p.W_F), {B, 2 * T, d});
    return out;
  }

  const auto Pv = P.values(), Qv = Q.values();
  const auto own = out.own_similarity.values();
  // Sources are indexed over concat(H_other, H): row b of H_other is b, row j of H is B + j.
  std::vector<double> coef_mask(B * 2 * B, 0.0);
  std::vector<std::size_t> coef_slot(B * 2 * B, 0);
  for (std::size_t i = 0; i < B; ++i) {
    const auto ids_i = ctx.item_ids.subspan(i * T, T);
    const auto Pi = Pv.subspan(i * T * d, T * d);
    if (ctx.has_other[i]) {
      out.slot_source[i][0] = -2;
      out.similarity[i * N] = own[i];
      out.flags.a[i * N] = 1;
      coef_mask[i * 2 * B + i] = 1.0;
      coef_slot[i * 2 * B + i] = 0;
    }
    std::size_t slot = 1;
    for (std::size_t j = 0; j < B && slot < N; ++j) {
      if (ctx.domain[j] == ctx.domain[i]) continue;
      const double sim = detail::max_score(Pi, Qv.subspan(j * T * d, T * d), ids_i, ctx.item_ids.subspan(j * T, T), T, d);
      out.slot_source[i][slot] = static_cast<std::ptrdiff_t>(j);
      out.similarity[i * N + slot] = sim;
      const bool flag = sim >= p.k;
      out.flags.a[i * N + slot] = flag ? 1 : 0;
      if (flag) {
        coef_mask[i * 2 * B + B + j] = 1.0;
        coef_slot[i * 2 * B + B + j] = slot;
      }
      ++slot;
    }
  }
  const Tensor coef = mul(reshape(gather(p.W_C, coef_slot), {B, 2 * B}), Tensor({B, 2 * B}, std::move(coef_mask)));
  const Tensor sources = reshape(concat({H_other, H}, 0), {2 * B, T * d});
  const Tensor mixed = reshape(matmul(coef, sources), {B * T, d});
  const Tensor fused = reshape(matmul(mixed, p.W_ip), {B, T, d});
  out.s_star = reshape(matmul(reshape(concat({H, fused}, 1), {B * 2 * T, d}), p.W_F), {B, 2 * T, d});
  return out;
}

}  // namespace amid::mim
