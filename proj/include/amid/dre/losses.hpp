#pragma once

// Hybrid objectives over P x 1 pair tensors. Every pair carries its domain;
// domains absent from a batch are skipped and the 1/|Z| average runs over the
// domains that are present.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "amid/errors.hpp"
#include "amid/numerics/tensor.hpp"

namespace amid::dre {

namespace detail {

inline void check_pairs(const Tensor& t, std::size_t n, const char* what) {
  if (!t.defined() || t.numel() != n) {
    throw ShapeError(std::string("loss: ") + what + " must hold one value per pair (" + std::to_string(n) + ")");
  }
}

// Per-pair weight 1 / (|Z present| * n_Z), or 1 / |Z present| when `per_domain_mean` is false.
inline Tensor domain_weights(std::span<const std::size_t> domain, bool per_domain_mean) {
  std::vector<std::size_t> count;
  for (auto z : domain) {
    if (z >= count.size()) count.resize(z + 1, 0);
    ++count[z];
  }
  double present = 0;
  for (auto c : count) present += c > 0 ? 1 : 0;
  std::vector<double> w(domain.size());
  for (std::size_t i = 0; i < domain.size(); ++i) {
    w[i] = 1.0 / present / (per_domain_mean ? static_cast<double>(count[domain[i]]) : 1.0);
  }
  return Tensor({domain.size(), 1}, std::move(w));
}

}  // namespace detail

// (1/|Z|) sum_Z [ (1/|O^Z|) sum e + lambda1 sum (e_hat - e)^2 / p_hat ].
// The second sum is unnormalized unless `normalize` is set.
inline Tensor loss_e(const Tensor& e, const Tensor& e_hat, const Tensor& p_hat, std::span<const std::size_t> domain,
                     double lambda1, bool normalize = false) {
  const std::size_t n = domain.size();
  if (n == 0) throw ContractError("loss_e: empty batch");
  detail::check_pairs(e, n, "e");
  const Tensor reshaped_e = reshape(e, {n, 1});
  Tensor loss = sum(detail::domain_weights(domain, true) * reshaped_e);
  if (lambda1 != 0.0) {
    detail::check_pairs(e_hat, n, "e_hat");
    detail::check_pairs(p_hat, n, "p_hat");
    const Tensor gap = square(reshape(e_hat, {n, 1}) - reshaped_e) / reshape(p_hat, {n, 1});
    loss = loss + lambda1 * sum(detail::domain_weights(domain, normalize) * gap);
  }
  return loss;
}

// (1/|Z|) sum_Z (1/|D^Z|) sum [ e_hat + o (e - e_hat) / p_hat ], with e_hat and
// p_hat held constant. Pairs with o = 0 contribute e_hat only.
inline Tensor loss_r(const Tensor& e, const Tensor& e_hat, const Tensor& p_hat, const Tensor& observed,
                     std::span<const std::size_t> domain) {
  const std::size_t n = domain.size();
  if (n == 0) throw ContractError("loss_r: empty batch");
  detail::check_pairs(e, n, "e");
  detail::check_pairs(e_hat, n, "e_hat");
  detail::check_pairs(p_hat, n, "p_hat");
  detail::check_pairs(observed, n, "o");
  const Tensor eh = reshape(e_hat.detach(), {n, 1});
  const Tensor ph = reshape(p_hat.detach(), {n, 1});
  const Tensor o = reshape(observed.detach(), {n, 1});
  const Tensor term = eh + o * (reshape(e, {n, 1}) - eh) / ph;
  return sum(detail::domain_weights(domain, true) * term);
}

// Inverse-propensity counterpart: (1/|Z|) sum_Z (1/|D^Z|) sum o e / p_hat.
inline Tensor loss_ips(const Tensor& e, const Tensor& p_hat, const Tensor& observed,
                       std::span<const std::size_t> domain) {
  const std::size_t n = domain.size();
  if (n == 0) throw ContractError("loss_ips: empty batch");
  detail::check_pairs(e, n, "e");
  detail::check_pairs(p_hat, n, "p_hat");
  detail::check_pairs(observed, n, "o");
  const Tensor term = reshape(observed.detach(), {n, 1}) * reshape(e, {n, 1}) / reshape(p_hat.detach(), {n, 1});
  return sum(detail::domain_weights(domain, true) * term);
}

// Mean binary cross-entropy of sigmoid(logit) against o, on the logit scale.
inline Tensor propensity_bce(const Tensor& logit, const Tensor& observed) {
  if (logit.numel() != observed.numel()) throw ShapeError("propensity_bce: one o per logit expected");
  const Tensor o = reshape(observed.detach(), logit.shape());
  return mean(softplus(logit) - o * logit);
}

inline Tensor l2_penalty(double lambda, std::span<const Tensor> params) {
  if (lambda == 0.0) return Tensor::scalar(0.0);
  return lambda * squared_norm(params);
}

}  // namespace amid::dre
