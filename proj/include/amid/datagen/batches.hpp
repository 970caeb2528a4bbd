#pragma once

// Per-(user, domain) item sequences and the fixed-length batches fed to the
// encoder: next-item training rows with sampled negatives, full-space rows for
// the debiasing phase, and evaluation rows.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "amid/datagen/events.hpp"
#include "amid/errors.hpp"
#include "amid/numerics/random.hpp"

namespace amid::data {

// Maps raw item ids to dense per-domain indices 1..V (0 is padding).
class ItemVocabulary {
 public:
  static ItemVocabulary from_events(std::span<const InteractionEvent> events) {
    ItemVocabulary vocab;
    std::map<std::size_t, std::set<ItemId>> ids;
    for (const auto& e : events) ids[e.domain_id].insert(e.item_id);
    const std::size_t domains = ids.empty() ? 0 : ids.rbegin()->first + 1;
    vocab.maps_.resize(domains);
    vocab.sizes_.assign(domains, 0);
    for (const auto& [domain, set] : ids) {
      std::size_t next = 1;
      for (auto id : set) vocab.maps_[domain][id] = next++;
      vocab.sizes_[domain] = set.size();
    }
    return vocab;
  }

  // Item ids are already 1..V per domain.
  static ItemVocabulary identity(std::vector<std::size_t> items_per_domain) {
    ItemVocabulary vocab;
    vocab.identity_ = true;
    vocab.sizes_ = std::move(items_per_domain);
    return vocab;
  }

  std::size_t num_domains() const { return sizes_.size(); }
  std::size_t num_items(std::size_t domain) const { return sizes_.at(domain); }
  const std::vector<std::size_t>& items_per_domain() const { return sizes_; }

  std::size_t index(std::size_t domain, ItemId id) const {
    if (domain >= sizes_.size()) throw IndexError("vocabulary: unknown domain " + std::to_string(domain));
    if (identity_) {
      if (id < 1 || static_cast<std::size_t>(id) > sizes_[domain]) {
        throw IndexError("vocabulary: item " + std::to_string(id) + " outside 1.." + std::to_string(sizes_[domain]));
      }
      return static_cast<std::size_t>(id);
    }
    auto it = maps_[domain].find(id);
    if (it == maps_[domain].end()) throw IndexError("vocabulary: unknown item " + std::to_string(id));
    return it->second;
  }

 private:
  bool identity_ = false;
  std::vector<std::size_t> sizes_;
  std::vector<std::map<ItemId, std::size_t>> maps_;
};

struct SequenceStore {
  std::vector<std::size_t> items_per_domain;
  // (user, domain) -> chronological dense item indices.
  std::map<std::pair<UserId, std::size_t>, std::vector<std::size_t>> sequences;

  std::size_t num_domains() const { return items_per_domain.size(); }

  const std::vector<std::size_t>* find(UserId user, std::size_t domain) const {
    auto it = sequences.find({user, domain});
    return it == sequences.end() ? nullptr : &it->second;
  }

  // First other domain with a non-empty history for this user.
  std::optional<std::size_t> other_domain(UserId user, std::size_t domain) const {
    for (std::size_t d = 0; d < num_domains(); ++d) {
      if (d == domain) continue;
      if (const auto* s = find(user, d); s && !s->empty()) return d;
    }
    return std::nullopt;
  }

  std::vector<UserId> users(std::size_t domain) const {
    std::vector<UserId> out;
    for (const auto& [key, seq] : sequences)
      if (key.second == domain) out.push_back(key.first);
    return out;
  }
};

// Sorts each (user, domain) stream by timestamp; ties keep input order.
inline SequenceStore build_sequences(std::span<const InteractionEvent> events, const ItemVocabulary& vocab) {
  SequenceStore store;
  store.items_per_domain = vocab.items_per_domain();
  std::map<std::pair<UserId, std::size_t>, std::vector<std::pair<std::int64_t, std::size_t>>> timed;
  for (const auto& e : events) timed[{e.user_id, e.domain_id}].emplace_back(e.timestamp, vocab.index(e.domain_id, e.item_id));
  for (auto& [key, stream] : timed) {
    std::stable_sort(stream.begin(), stream.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    auto& seq = store.sequences[key];
    for (const auto& [ts, item] : stream) seq.push_back(item);
  }
  return store;
}

// One prediction context: the first `position` items of (user, domain) are the
// input, item `position` is the positive.
struct Target {
  UserId user = 0;
  std::size_t domain = 0;
  std::size_t position = 0;
  std::uint8_t observed = 1;
};

struct SequenceBatch {
  std::size_t seq_len = 0;
  std::size_t negatives_per_row = 0;
  std::vector<std::size_t> item_ids;   // rows x T, right-aligned, 0 = padding
  std::vector<std::size_t> other_ids;  // rows x T, the user's own history in another domain
  std::vector<std::uint8_t> has_other;
  std::vector<std::size_t> other_domain;
  std::vector<std::size_t> domain;
  std::vector<UserId> user;
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negatives;  // rows x negatives_per_row
  std::vector<std::uint8_t> observed;  // o per row; labels of rows with o = 0 are not to be used

  std::size_t rows() const { return domain.size(); }
  std::span<const std::size_t> row_items(std::size_t r) const {
    return std::span<const std::size_t>(item_ids).subspan(r * seq_len, seq_len);
  }
  std::span<const std::size_t> row_other(std::size_t r) const {
    return std::span<const std::size_t>(other_ids).subspan(r * seq_len, seq_len);
  }
  std::span<const std::size_t> row_negatives(std::size_t r) const {
    return std::span<const std::size_t>(negatives).subspan(r * negatives_per_row, negatives_per_row);
  }
};

// Every (user, domain, t >= 1) next-item context of a store.
inline std::vector<Target> next_item_targets(const SequenceStore& store) {
  std::vector<Target> out;
  for (const auto& [key, seq] : store.sequences)
    for (std::size_t t = 1; t < seq.size(); ++t) out.push_back({key.first, key.second, t, 1});
  return out;
}

// The last item of every sequence with at least two items.
inline std::vector<Target> last_item_targets(const SequenceStore& store) {
  std::vector<Target> out;
  for (const auto& [key, seq] : store.sequences)
    if (seq.size() >= 2) out.push_back({key.first, key.second, seq.size() - 1, 1});
  return out;
}

// Uniform draws from the domain's items that the user never visited.
inline std::vector<std::size_t> sample_unvisited(std::span<const std::size_t> history, std::size_t num_items,
                                                 std::size_t count, Rng& rng, bool distinct) {
  std::unordered_set<std::size_t> visited(history.begin(), history.end());
  const std::size_t needed = count == 0 ? 0 : (distinct ? count : 1);
  if (num_items < visited.size() + needed) {
    throw ConfigError("negative sampling: domain with " + std::to_string(num_items) + " items cannot supply " +
                      std::to_string(count) + " negatives for a user with " + std::to_string(visited.size()) +
                      " visited items");
  }
  std::vector<std::size_t> out;
  out.reserve(count);
  while (out.size() < count) {
    const std::size_t item = 1 + uniform_index(rng, num_items);
    if (visited.count(item)) continue;
    if (distinct) visited.insert(item);
    out.push_back(item);
  }
  return out;
}

inline SequenceBatch build_batch(const SequenceStore& store, std::span<const Target> targets, std::size_t seq_len,
                                 std::size_t negatives, Rng& rng, bool distinct_negatives = false) {
  SequenceBatch b;
  b.seq_len = seq_len;
  b.negatives_per_row = negatives;
  for (const auto& t : targets) {
    const auto* seq = store.find(t.user, t.domain);
    if (!seq || t.position == 0 || t.position >= seq->size()) throw IndexError("build_batch: invalid target");
    const auto prefix = pad_truncate(std::span<const std::size_t>(*seq).first(t.position), seq_len);
    b.item_ids.insert(b.item_ids.end(), prefix.begin(), prefix.end());
    const auto other = store.other_domain(t.user, t.domain);
    if (other) {
      const auto row = pad_truncate(*store.find(t.user, *other), seq_len);
      b.other_ids.insert(b.other_ids.end(), row.begin(), row.end());
    } else {
      b.other_ids.insert(b.other_ids.end(), seq_len, 0);
    }
    b.has_other.push_back(other ? 1 : 0);
    b.other_domain.push_back(other.value_or(t.domain));
    b.domain.push_back(t.domain);
    b.user.push_back(t.user);
    b.positive.push_back((*seq)[t.position]);
    const auto neg = sample_unvisited(*seq, store.items_per_domain.at(t.domain), negatives, rng, distinct_negatives);
    b.negatives.insert(b.negatives.end(), neg.begin(), neg.end());
    b.observed.push_back(t.observed);
  }
  return b;
}

// Endless stream of mixed-domain batches. Each domain's targets are visited
// in seeded shuffled passes; every batch holds batch_size / |Z| rows per domain.
class BatchStream {
 public:
  BatchStream(const SequenceStore& store, std::vector<Target> targets, std::size_t batch_size,
              std::size_t negatives_per_row, std::size_t seq_len, std::uint64_t seed)
      : store_(&store),
        batch_size_(batch_size),
        negatives_(negatives_per_row),
        seq_len_(seq_len),
        rng_(make_rng(seed, 0xba7c)) {
    const std::size_t domains = store.num_domains();
    if (batch_size < 2) throw ConfigError("make_batches: batch_size must be >= 2");
    if (batch_size < domains) throw ConfigError("make_batches: batch_size smaller than domain count");
    for (std::size_t d = 0; d < domains; ++d) {
      if (store.items_per_domain[d] < negatives_per_row + 1) {
        throw ConfigError("make_batches: domain " + std::to_string(d) + " has fewer than " +
                          std::to_string(negatives_per_row + 1) + " items");
      }
    }
    pools_.resize(domains);
    for (const auto& t : targets) pools_.at(t.domain).push_back(t);
    for (std::size_t d = 0; d < domains; ++d) {
      if (pools_[d].empty()) throw ConfigError("make_batches: domain " + std::to_string(d) + " has no targets");
    }
    cursor_.assign(domains, 0);
    for (auto& pool : pools_) shuffle(std::span<Target>(pool), rng_);
  }

  SequenceBatch next() {
    const std::size_t domains = pools_.size();
    std::vector<Target> chosen;
    chosen.reserve(batch_size_);
    for (std::size_t d = 0; d < domains; ++d) {
      const std::size_t share = batch_size_ / domains + (d < batch_size_ % domains ? 1 : 0);
      for (std::size_t i = 0; i < share; ++i) {
        if (cursor_[d] == pools_[d].size()) {
          shuffle(std::span<Target>(pools_[d]), rng_);
          cursor_[d] = 0;
        }
        chosen.push_back(pools_[d][cursor_[d]++]);
      }
    }
    return build_batch(*store_, chosen, seq_len_, negatives_, rng_);
  }

 private:
  const SequenceStore* store_;
  std::size_t batch_size_;
  std::size_t negatives_;
  std::size_t seq_len_;
  Rng rng_;
  std::vector<std::vector<Target>> pools_;
  std::vector<std::size_t> cursor_;
};

inline BatchStream make_batches(const SequenceStore& split, std::size_t batch_size, std::size_t negatives_per_positive,
                                std::size_t seq_len, std::uint64_t seed) {
  return BatchStream(split, next_item_targets(split), batch_size, negatives_per_positive, seq_len, seed);
}

// Evaluation rows: targets interleaved across domains, chunked in order, each
// with `negatives` distinct unvisited items.
inline std::vector<SequenceBatch> make_eval_batches(const SequenceStore& store, std::span<const Target> targets,
                                                    std::size_t batch_size, std::size_t negatives, std::size_t seq_len,
                                                    std::uint64_t seed) {
  if (negatives < 1) throw ConfigError("evaluation: need at least one negative");
  std::vector<std::deque<Target>> by_domain(store.num_domains());
  for (const auto& t : targets) by_domain.at(t.domain).push_back(t);
  std::vector<Target> order;
  bool any = true;
  while (any) {
    any = false;
    for (auto& q : by_domain) {
      if (q.empty()) continue;
      order.push_back(q.front());
      q.pop_front();
      any = true;
    }
  }
  Rng rng = make_rng(seed, 0xe7a1);
  std::vector<SequenceBatch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto n = std::min(batch_size, order.size() - start);
    out.push_back(build_batch(store, std::span<const Target>(order).subspan(start, n), seq_len, negatives, rng, true));
  }
  return out;
}

}  // namespace amid::data
