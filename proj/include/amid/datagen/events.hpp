#pragma once

// Interaction logs and the preprocessing applied before training: sparse
// filtering, the user-level 80/10/10 split, K_u downsampling of
// non-overlapping users and fixed-length padding.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "amid/errors.hpp"
#include "amid/numerics/random.hpp"

namespace amid::data {

using UserId = std::int64_t;
using ItemId = std::int64_t;

struct InteractionEvent {
  UserId user_id = 0;
  ItemId item_id = 0;
  std::size_t domain_id = 0;
  std::int64_t timestamp = 0;

  friend bool operator==(const InteractionEvent&, const InteractionEvent&) = default;
};

inline constexpr std::string_view kEventHeader = "user_id,item_id,domain_id,timestamp";

namespace detail {

template <class T>
T parse_field(std::string_view field, std::string_view name, std::size_t line) {
  T value{};
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end || field.empty()) {
    throw ParseError("line " + std::to_string(line) + ": field " + std::string(name) + " is not an integer: '" +
                         std::string(field) + "'",
                     line);
  }
  return value;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

// Parses `user_id,item_id,domain_id,timestamp` rows. Line numbers in errors
// are 1-based and count the header.
inline std::vector<InteractionEvent> parse_interactions(std::istream& in) {
  std::vector<InteractionEvent> events;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("line 1: missing header", 1);
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kEventHeader) {
    throw ParseError("line 1: expected header '" + std::string(kEventHeader) + "', got '" + line + "'", 1);
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_commas(line);
    if (fields.size() != 4) {
      throw ParseError("line " + std::to_string(line_no) + ": expected 4 fields, got " +
                           std::to_string(fields.size()),
                       line_no);
    }
    InteractionEvent e;
    e.user_id = detail::parse_field<UserId>(fields[0], "user_id", line_no);
    e.item_id = detail::parse_field<ItemId>(fields[1], "item_id", line_no);
    e.domain_id = detail::parse_field<std::size_t>(fields[2], "domain_id", line_no);
    e.timestamp = detail::parse_field<std::int64_t>(fields[3], "timestamp", line_no);
    events.push_back(e);
  }
  return events;
}

inline std::vector<InteractionEvent> load_interactions_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path, 0);
  return parse_interactions(in);
}

inline void write_interactions_csv(std::ostream& out, std::span<const InteractionEvent> events) {
  out << kEventHeader << '\n';
  for (const auto& e : events) out << e.user_id << ',' << e.item_id << ',' << e.domain_id << ',' << e.timestamp << '\n';
}

inline std::size_t count_domains(std::span<const InteractionEvent> events) {
  std::size_t n = 0;
  for (const auto& e : events) n = std::max(n, e.domain_id + 1);
  return n;
}

// Iteratively drops items with fewer than `min_item_inter` events and users
// with fewer than `min_user_inter` events in a domain, until nothing changes.
inline std::vector<InteractionEvent> filter_sparse(std::vector<InteractionEvent> events,
                                                   std::size_t min_item_inter = 10,
                                                   std::size_t min_user_inter = 5) {
  if (min_item_inter < 1 || min_user_inter < 1) throw ConfigError("filter_sparse: thresholds must be >= 1");
  while (true) {
    std::map<std::pair<std::size_t, ItemId>, std::size_t> item_count;
    std::map<std::pair<std::size_t, UserId>, std::size_t> user_count;
    for (const auto& e : events) {
      ++item_count[{e.domain_id, e.item_id}];
      ++user_count[{e.domain_id, e.user_id}];
    }
    const auto before = events.size();
    std::erase_if(events, [&](const InteractionEvent& e) {
      return item_count[{e.domain_id, e.item_id}] < min_item_inter ||
             user_count[{e.domain_id, e.user_id}] < min_user_inter;
    });
    if (events.size() == before) return events;
  }
}

// Users with events in at least two domains.
inline std::set<UserId> overlapping_users(std::span<const InteractionEvent> events) {
  std::map<UserId, std::set<std::size_t>> domains;
  for (const auto& e : events) domains[e.user_id].insert(e.domain_id);
  std::set<UserId> out;
  for (const auto& [user, ds] : domains)
    if (ds.size() >= 2) out.insert(user);
  return out;
}

struct UserSplit {
  std::vector<InteractionEvent> train;
  std::vector<InteractionEvent> val;
  std::vector<InteractionEvent> test;
};

inline constexpr double kTrainFraction = 0.8;
inline constexpr double kValFraction = 0.1;

namespace detail {

// Deterministic 80/10/10 assignment of an id list; floors for train and val.
inline void assign_fractions(std::vector<UserId> users, Rng& rng, std::map<UserId, int>& assignment) {
  std::sort(users.begin(), users.end());
  shuffle(std::span<UserId>(users), rng);
  const auto n = users.size();
  const auto n_train = static_cast<std::size_t>(std::floor(kTrainFraction * static_cast<double>(n) + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(kValFraction * static_cast<double>(n) + 1e-9));
  for (std::size_t i = 0; i < n; ++i) assignment[users[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
}

}  // namespace detail

// User-level disjoint 80/10/10 split. Overlapping users are split as one
// stratum so each lands in the same split in every domain; the remaining
// users are split per domain.
inline UserSplit split_users(std::span<const InteractionEvent> events, std::uint64_t seed) {
  const auto overlap = overlapping_users(events);
  std::map<std::size_t, std::set<UserId>> single;
  for (const auto& e : events)
    if (!overlap.count(e.user_id)) single[e.domain_id].insert(e.user_id);
  Rng rng = make_rng(seed, 0x5017);
  std::map<UserId, int> assignment;
  detail::assign_fractions({overlap.begin(), overlap.end()}, rng, assignment);
  for (const auto& [domain, users] : single) detail::assign_fractions({users.begin(), users.end()}, rng, assignment);
  UserSplit split;
  for (const auto& e : events) {
    switch (assignment.at(e.user_id)) {
      case 0: split.train.push_back(e); break;
      case 1: split.val.push_back(e); break;
      default: split.test.push_back(e); break;
    }
  }
  return split;
}

// Number of non-overlapping users kept for a pool size, K_u and split
// fraction: floor(K_u * pool * fraction).
inline std::size_t ku_retained_count(std::size_t nonoverlap_pool, double ku, double split_fraction) {
  return static_cast<std::size_t>(std::floor(ku * split_fraction * static_cast<double>(nonoverlap_pool) * (1 + 1e-12)));
}

struct KuResult {
  UserSplit observed;                          // train/val downsampled, test untouched
  std::vector<InteractionEvent> unseen_train;  // dropped non-overlapping train users
  std::vector<InteractionEvent> unseen_val;
};

namespace detail {

inline void downsample(std::span<const InteractionEvent> events, const std::set<UserId>& overlap, double ku,
                       Rng& rng, std::vector<InteractionEvent>& kept, std::vector<InteractionEvent>& dropped) {
  std::map<std::size_t, std::set<UserId>> candidates;
  for (const auto& e : events)
    if (!overlap.count(e.user_id)) candidates[e.domain_id].insert(e.user_id);
  std::set<UserId> retained;
  for (const auto& [domain, users] : candidates) {
    std::vector<UserId> pool(users.begin(), users.end());
    shuffle(std::span<UserId>(pool), rng);
    const auto n_keep = ku_retained_count(pool.size(), ku, 1.0);
    retained.insert(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_keep));
  }
  for (const auto& e : events) {
    if (overlap.count(e.user_id) || retained.count(e.user_id)) {
      kept.push_back(e);
    } else {
      dropped.push_back(e);
    }
  }
}

}  // namespace detail

// Keeps a fraction K_u of the non-overlapping users of each domain in train
// and val; every overlapping user and the whole test split are kept.
inline KuResult apply_ku(const UserSplit& split, double ku, std::uint64_t seed) {
  if (!(ku > 0.0) || ku > 1.0) throw ConfigError("apply_ku: K_u must lie in (0, 1], got " + std::to_string(ku));
  std::vector<InteractionEvent> all;
  all.insert(all.end(), split.train.begin(), split.train.end());
  all.insert(all.end(), split.val.begin(), split.val.end());
  all.insert(all.end(), split.test.begin(), split.test.end());
  const auto overlap = overlapping_users(all);
  Rng rng = make_rng(seed, 0x4b75);
  KuResult result;
  detail::downsample(split.train, overlap, ku, rng, result.observed.train, result.unseen_train);
  detail::downsample(split.val, overlap, ku, rng, result.observed.val, result.unseen_val);
  result.observed.test = split.test;
  return result;
}

// Keeps the most recent T items; shorter inputs are left-padded with 0.
inline std::vector<std::size_t> pad_truncate(std::span<const std::size_t> sequence, std::size_t T) {
  if (T < 1) throw ConfigError("pad_truncate: T must be >= 1");
  std::vector<std::size_t> row(T, 0);
  const std::size_t n = std::min(T, sequence.size());
  std::copy(sequence.end() - static_cast<std::ptrdiff_t>(n), sequence.end(),
            row.end() - static_cast<std::ptrdiff_t>(n));
  return row;
}

}  // namespace amid::data
