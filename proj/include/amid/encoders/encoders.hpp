#pragma once

// Item + position embedding and the single-domain sequential encoders that
// the multi-interest module wraps. Batched tensors are B x T x d; padding
// (id 0) sits on the left and always encodes to a zero row.

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "amid/errors.hpp"
#include "amid/numerics/random.hpp"
#include "amid/numerics/tensor.hpp"

namespace amid::enc {

// Uniform on [-1/sqrt(d), 1/sqrt(d)].
inline Tensor init_weight(Shape shape, std::size_t fan, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan));
  return Tensor::uniform(std::move(shape), -bound, bound, rng, true);
}

struct EmbeddingTables {
  std::vector<Tensor> item_tables;  // per domain, (V + 1) x d, row 0 is padding
  Tensor position;                  // T x d
  std::size_t dim = 0;

  std::size_t seq_len() const { return position.dim(0); }
  std::size_t num_items(std::size_t domain) const { return item_tables.at(domain).dim(0) - 1; }
};

inline EmbeddingTables make_embedding_tables(std::span<const std::size_t> items_per_domain, std::size_t seq_len,
                                             std::size_t dim, Rng& rng) {
  if (dim == 0) throw ConfigError("embedding: d must be positive");
  if (seq_len == 0) throw ConfigError("embedding: T must be positive");
  EmbeddingTables t;
  t.dim = dim;
  for (auto v : items_per_domain) {
    Tensor table = init_weight({v + 1, dim}, dim, rng);
    auto values = table.mutable_values();
    std::fill(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(dim), 0.0);
    t.item_tables.push_back(table);
  }
  t.position = init_weight({seq_len, dim}, dim, rng);
  return t;
}

// 1 for real items, 0 for padding; shape B x T x 1.
inline Tensor padding_mask(std::span<const std::size_t> ids, std::size_t T) {
  std::vector<double> m(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) m[i] = ids[i] != 0 ? 1.0 : 0.0;
  return Tensor({ids.size() / T, T, 1}, std::move(m));
}

namespace detail {

// Offsets of each domain's table inside the row-stacked tables.
inline std::vector<std::size_t> table_offsets(const EmbeddingTables& tables) {
  std::vector<std::size_t> offset(tables.item_tables.size(), 0);
  for (std::size_t z = 1; z < offset.size(); ++z) offset[z] = offset[z - 1] + tables.item_tables[z - 1].dim(0);
  return offset;
}

inline Tensor stacked_items(const EmbeddingTables& tables) {
  return tables.item_tables.size() == 1 ? tables.item_tables[0] : concat(tables.item_tables, 0);
}

inline std::size_t global_id(const EmbeddingTables& tables, const std::vector<std::size_t>& offset, std::size_t z,
                             std::size_t id) {
  if (z >= tables.item_tables.size()) throw IndexError("embed: unknown domain " + std::to_string(z));
  if (id > tables.num_items(z)) {
    throw IndexError("embed: item " + std::to_string(id) + " outside 0.." + std::to_string(tables.num_items(z)) +
                     " in domain " + std::to_string(z));
  }
  // Every padding id maps to row 0 of the first table, which is frozen.
  return id == 0 ? 0 : offset[z] + id;
}

}  // namespace detail

// Item embedding rows (no position term): ids[i] looked up in domains[i]'s table.
inline Tensor item_rows(const EmbeddingTables& tables, std::span<const std::size_t> ids,
                        std::span<const std::size_t> domains) {
  if (ids.size() != domains.size()) throw ShapeError("item_rows: one domain per id expected");
  const auto offset = detail::table_offsets(tables);
  std::vector<std::size_t> global(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) global[i] = detail::global_id(tables, offset, domains[i], ids[i]);
  return gather(detail::stacked_items(tables), global, std::size_t{0});
}

// S'[b, t] = item_table[domain_b][id] + position[t] for real items, 0 for padding.
// `ids` is B x T row-major and `domains` has one entry per row.
inline Tensor embed_batch(const EmbeddingTables& tables, std::span<const std::size_t> ids,
                          std::span<const std::size_t> domains) {
  const std::size_t T = tables.seq_len();
  const std::size_t d = tables.dim;
  if (ids.size() != domains.size() * T) {
    throw ShapeError("embed: expected " + std::to_string(domains.size()) + " x " + std::to_string(T) + " ids, got " +
                     std::to_string(ids.size()));
  }
  const std::size_t B = domains.size();
  const auto offset = detail::table_offsets(tables);
  std::vector<std::size_t> global(ids.size());
  std::vector<std::size_t> pos_ids(ids.size());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      global[b * T + t] = detail::global_id(tables, offset, domains[b], ids[b * T + t]);
      pos_ids[b * T + t] = t;
    }
  }
  const Tensor items = gather(detail::stacked_items(tables), global, std::size_t{0});
  const Tensor pos = gather(tables.position, pos_ids);
  return mul(reshape(add(items, pos), {B, T, d}), padding_mask(ids, T));
}

// Single sequence: T ids -> T x d.
inline Tensor embed_sequence(const EmbeddingTables& tables, std::size_t domain, std::span<const std::size_t> ids) {
  const std::vector<std::size_t> dom{domain};
  const Tensor s = embed_batch(tables, ids, dom);
  return reshape(s, {tables.seq_len(), tables.dim});
}

enum class EncoderKind { prefix_mean, gru };

inline EncoderKind parse_encoder_kind(std::string_view name) {
  if (name == "prefix_mean") return EncoderKind::prefix_mean;
  if (name == "gru") return EncoderKind::gru;
  throw ConfigError("unknown encoder kind '" + std::string(name) + "' (expected prefix_mean or gru)");
}

inline std::string to_string(EncoderKind kind) { return kind == EncoderKind::gru ? "gru" : "prefix_mean"; }

struct GruParams {
  Tensor Wz, Uz, bz;
  Tensor Wr, Ur, br;
  Tensor Wc, Uc, bc;

  std::vector<Tensor> list() const { return {Wz, Uz, bz, Wr, Ur, br, Wc, Uc, bc}; }
};

inline GruParams make_gru(std::size_t d, Rng& rng) {
  GruParams g;
  g.Wz = init_weight({d, d}, d, rng);
  g.Uz = init_weight({d, d}, d, rng);
  g.bz = Tensor::zeros({1, d}, true);
  g.Wr = init_weight({d, d}, d, rng);
  g.Ur = init_weight({d, d}, d, rng);
  g.br = Tensor::zeros({1, d}, true);
  g.Wc = init_weight({d, d}, d, rng);
  g.Uc = init_weight({d, d}, d, rng);
  g.bc = Tensor::zeros({1, d}, true);
  return g;
}

// H_t = mean of S' over real positions <= t; zero at padded positions.
inline Tensor encode_prefix_mean(const Tensor& s, const Tensor& mask) {
  const std::size_t B = s.dim(0), T = s.dim(1);
  const auto m = mask.values();
  std::vector<double> weights(B * T * T, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double count = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      count += m[b * T + t];
      if (m[b * T + t] == 0.0) continue;
      for (std::size_t r = 0; r <= t; ++r) weights[(b * T + t) * T + r] = m[b * T + r] / count;
    }
  }
  return bmm(Tensor({B, T, T}, std::move(weights)), s);
}

// Gated recurrent unit over real positions with h_0 = 0:
//   z = sigma(x Wz + h Uz + bz), r = sigma(x Wr + h Ur + br),
//   c = tanh(x Wc + (r * h) Uc + bc), h' = (1 - z) * h + z * c.
// Padded steps carry h through unchanged and output zero.
inline Tensor encode_gru(const Tensor& s, const Tensor& mask, const GruParams& p) {
  const std::size_t B = s.dim(0), T = s.dim(1), d = s.dim(2);
  Tensor h = Tensor::zeros({B, d});
  std::vector<Tensor> outputs;
  outputs.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor x = reshape(slice(s, 1, t, t + 1), {B, d});
    const Tensor m = reshape(slice(mask, 1, t, t + 1), {B, 1});
    const Tensor z = sigmoid(matmul(x, p.Wz) + matmul(h, p.Uz) + p.bz);
    const Tensor r = sigmoid(matmul(x, p.Wr) + matmul(h, p.Ur) + p.br);
    const Tensor c = tanh(matmul(x, p.Wc) + matmul(mul(r, h), p.Uc) + p.bc);
    const Tensor next = h + mul(z, c - h);
    h = h + mul(m, next - h);
    outputs.push_back(reshape(mul(m, h), {B, 1, d}));
  }
  return concat(outputs, 1);
}

struct Encoder {
  EncoderKind kind = EncoderKind::gru;
  GruParams gru;

  std::vector<Tensor> params() const { return kind == EncoderKind::gru ? gru.list() : std::vector<Tensor>{}; }
};

inline Encoder make_encoder(EncoderKind kind, std::size_t d, Rng& rng) {
  Encoder e;
  e.kind = kind;
  if (kind == EncoderKind::gru) e.gru = make_gru(d, rng);
  return e;
}

// S' (B x T x d) and mask (B x T x 1) -> H (B x T x d).
inline Tensor encode(const Encoder& encoder, const Tensor& s, const Tensor& mask) {
  if (s.rank() != 3 || mask.rank() != 3 || mask.dim(0) != s.dim(0) || mask.dim(1) != s.dim(1) || mask.dim(2) != 1) {
    throw ShapeError("encode: expected B x T x d input and B x T x 1 mask, got " + shape_str(s.shape()) + " and " +
                     shape_str(mask.shape()));
  }
  return encoder.kind == EncoderKind::gru ? encode_gru(s, mask, encoder.gru) : encode_prefix_mean(s, mask);
}

// Single sequence: T x d and T ids -> T x d.
inline Tensor encode_sequence(const Encoder& encoder, const Tensor& s, std::span<const std::size_t> ids) {
  const std::size_t T = s.dim(0), d = s.dim(1);
  return reshape(encode(encoder, reshape(s, {1, T, d}), padding_mask(ids, T)), {T, d});
}

}  // namespace amid::enc
