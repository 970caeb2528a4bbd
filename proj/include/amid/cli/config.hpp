#pragma once

// Experiment configuration: `key = value` lines grouped under `[section]`
// headers, `#` comments. Keys before the first header are global.
//
//   seeds = 1, 2, 3, 4, 5
//   [data]   source, path, min_item_inter, min_user_inter, ku, and the
//            synthetic generator knobs (users_per_domain, overlap_ratio, ...)
//   [model]  dim, seq_len, encoder, mim_source, pool_size, p_min, shared_trunk
//   [mim]    enabled, k
//   [train]  objective, lambda1..lambda5, lambda_p, lr_phase1, lr_phase2, q,
//            q_prime, rounds, batch_size, negatives, metric, normalize,
//            similarity_weight
//   [eval]   negatives, ks, batch_size
//   [theory] sampler and verification sizes

#include <charconv>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "amid/datagen/scenario.hpp"
#include "amid/dre/model.hpp"
#include "amid/dre/train.hpp"
#include "amid/errors.hpp"
#include "amid/eval/eval.hpp"
#include "amid/theory/theory.hpp"

namespace amid::cli {

enum class DataSource { synthetic, csv };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  std::string path;  // interactions CSV when source = csv
  std::size_t min_item_inter = 10;
  std::size_t min_user_inter = 5;
  double ku = 0.25;
  data::GenConfig gen = default_generator();

  // Enough items per domain for M = 199 sampled negatives.
  static data::GenConfig default_generator() {
    data::GenConfig g;
    g.items_per_domain = 300;
    return g;
  }
};

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  DataConfig data;
  dre::ModelConfig model;
  dre::TrainConfig train = default_training();
  eval::EvalConfig eval;
  theory::VerifyConfig theory;

  static dre::TrainConfig default_training() {
    dre::TrainConfig t;
    t.rounds = 300;
    return t;
  }
};

namespace detail {

struct TypeMismatch {
  std::string expected;
};

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t to_uint(std::string_view s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) throw TypeMismatch{"a non-negative integer"};
  return v;
}

inline double to_double(std::string_view s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) throw TypeMismatch{"a number"};
  return v;
}

inline bool to_bool(std::string_view s) {
  if (s == "true" || s == "on" || s == "yes" || s == "1") return true;
  if (s == "false" || s == "off" || s == "no" || s == "0") return false;
  throw TypeMismatch{"a boolean (true/false, on/off, yes/no, 1/0)"};
}

inline std::vector<std::uint64_t> to_uint_list(std::string_view s) {
  std::vector<std::uint64_t> out;
  for (auto part : data::detail::split_commas(s)) out.push_back(to_uint(trim(part)));
  if (out.empty()) throw TypeMismatch{"a comma-separated list of integers"};
  return out;
}

template <class F>
auto to_enum(std::string_view s, F parse) {
  try {
    return parse(s);
  } catch (const ConfigError& e) {
    throw TypeMismatch{std::string("one of the accepted names (") + e.what() + ")"};
  }
}

using Setter = std::function<void(ExperimentConfig&, std::string_view)>;
using Schema = std::map<std::string, std::map<std::string, Setter>>;

#define AMID_SIZE(field) [](ExperimentConfig& c, std::string_view v) { c.field = to_uint(v); }
#define AMID_REAL(field) [](ExperimentConfig& c, std::string_view v) { c.field = to_double(v); }
#define AMID_BOOL(field) [](ExperimentConfig& c, std::string_view v) { c.field = to_bool(v); }

inline const Schema& schema() {
  static const Schema s = {
      {"",
       {{"seeds", [](ExperimentConfig& c, std::string_view v) { c.seeds = to_uint_list(v); }}}},
      {"data",
       {{"source",
         [](ExperimentConfig& c, std::string_view v) {
           if (v == "synthetic") c.data.source = DataSource::synthetic;
           else if (v == "csv") c.data.source = DataSource::csv;
           else throw TypeMismatch{"synthetic or csv"};
         }},
        {"path", [](ExperimentConfig& c, std::string_view v) { c.data.path = std::string(v); }},
        {"min_item_inter", AMID_SIZE(data.min_item_inter)},
        {"min_user_inter", AMID_SIZE(data.min_user_inter)},
        {"ku", AMID_REAL(data.ku)},
        {"domains", AMID_SIZE(data.gen.num_domains)},
        {"users_per_domain", AMID_SIZE(data.gen.users_per_domain)},
        {"items_per_domain", AMID_SIZE(data.gen.items_per_domain)},
        {"latent_dim", AMID_SIZE(data.gen.latent_dim)},
        {"overlap_ratio", AMID_REAL(data.gen.overlap_ratio)},
        {"min_seq_len", AMID_SIZE(data.gen.min_seq_len)},
        {"max_seq_len", AMID_SIZE(data.gen.max_seq_len)},
        {"p_min", AMID_REAL(data.gen.p_min)},
        {"base_propensity", AMID_REAL(data.gen.base_propensity)},
        {"popularity_exponent", AMID_REAL(data.gen.popularity_exponent)},
        {"selection_strength", AMID_REAL(data.gen.selection_strength)},
        {"popularity_skew", AMID_REAL(data.gen.popularity_skew)},
        {"relevance_scale", AMID_REAL(data.gen.relevance_scale)},
        {"overlap_affinity", AMID_REAL(data.gen.overlap_affinity)}}},
      {"model",
       {{"dim", AMID_SIZE(model.dim)},
        {"seq_len", AMID_SIZE(model.seq_len)},
        {"encoder",
         [](ExperimentConfig& c, std::string_view v) { c.model.encoder = to_enum(v, enc::parse_encoder_kind); }},
        {"mim_source",
         [](ExperimentConfig& c, std::string_view v) { c.model.mim_source = to_enum(v, dre::parse_mim_source); }},
        {"pool_size", AMID_SIZE(model.pool_size)},
        {"p_min", AMID_REAL(model.p_min)},
        {"shared_trunk", AMID_BOOL(model.shared_trunk)}}},
      {"mim", {{"enabled", AMID_BOOL(model.mim_enabled)}, {"k", AMID_REAL(model.k)}}},
      {"train",
       {{"objective",
         [](ExperimentConfig& c, std::string_view v) { c.train.objective = to_enum(v, dre::parse_objective); }},
        {"metric",
         [](ExperimentConfig& c, std::string_view v) { c.train.metric = to_enum(v, dre::parse_error_metric); }},
        {"lambda1", AMID_REAL(train.lambda1)},
        {"lambda2", AMID_REAL(train.lambda2)},
        {"lambda3", AMID_REAL(train.lambda3)},
        {"lambda4", AMID_REAL(train.lambda4)},
        {"lambda5", AMID_REAL(train.lambda5)},
        {"lambda_p", AMID_REAL(train.lambda_p)},
        {"lr_phase1", AMID_REAL(train.lr_phase1)},
        {"lr_phase2", AMID_REAL(train.lr_phase2)},
        {"q", AMID_SIZE(train.q)},
        {"q_prime", AMID_SIZE(train.q_prime)},
        {"rounds", AMID_SIZE(train.rounds)},
        {"batch_size", AMID_SIZE(train.batch_size)},
        {"negatives", AMID_SIZE(train.negatives)},
        {"normalize", AMID_BOOL(train.normalize)},
        {"similarity_weight", AMID_REAL(train.similarity_weight)}}},
      {"eval",
       {{"negatives", AMID_SIZE(eval.negatives)},
        {"batch_size", AMID_SIZE(eval.batch_size)},
        {"ks",
         [](ExperimentConfig& c, std::string_view v) {
           const auto ks = to_uint_list(v);
           c.eval.ks.assign(ks.begin(), ks.end());
         }}}},
      {"theory",
       {{"domains", AMID_SIZE(theory.sampler.domains)},
        {"min_pairs", AMID_SIZE(theory.sampler.min_pairs)},
        {"max_pairs", AMID_SIZE(theory.sampler.max_pairs)},
        {"imputation_scale", AMID_REAL(theory.sampler.imputation_scale)},
        {"p_lo", AMID_REAL(theory.sampler.p_lo)},
        {"p_hi", AMID_REAL(theory.sampler.p_hi)},
        {"log_noise", AMID_REAL(theory.sampler.log_noise)},
        {"p_min", AMID_REAL(theory.sampler.p_min)},
        {"bias_instances", AMID_SIZE(theory.bias_instances)},
        {"coverage_instances", AMID_SIZE(theory.coverage_instances)},
        {"draws", AMID_SIZE(theory.draws)},
        {"comparison_instances", AMID_SIZE(theory.comparison_instances)},
        {"eta", AMID_REAL(theory.eta)},
        {"bias_tolerance", AMID_REAL(theory.bias_tolerance)},
        {"robust_tolerance", AMID_REAL(theory.robust_tolerance)}}},
  };
  return s;
}

#undef AMID_SIZE
#undef AMID_REAL
#undef AMID_BOOL

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  if (c.seeds.empty()) throw ConfigError("config: seed list is empty");
  if (!(c.data.ku > 0.0) || c.data.ku > 1.0) throw ConfigError("config: data.ku must lie in (0, 1]");
  if (c.data.source == DataSource::csv && c.data.path.empty()) throw ConfigError("config: data.path is required for csv");
  if (c.data.source == DataSource::synthetic) data::validate(c.data.gen);
  dre::validate(c.model);
  dre::validate(c.train);
  if (c.eval.negatives < 1) throw ConfigError("config: eval.negatives must be >= 1");
  if (c.eval.batch_size < 1) throw ConfigError("config: eval.batch_size must be >= 1");
  for (auto k : c.eval.ks)
    if (k < 1) throw ConfigError("config: eval.ks entries must be >= 1");
  theory::validate(c.theory.sampler);
}

// Throws ParseError for unknown sections or keys and for values of the wrong
// type, ConfigError when the assembled configuration is invalid.
inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig config;
  const auto& schema = detail::schema();
  std::string section;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string at = " at line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("config: malformed section header" + at, line_no);
      section = std::string(detail::trim(line.substr(1, line.size() - 2)));
      if (!schema.count(section) || section.empty()) throw ParseError("config: unknown section " + section + at, line_no);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError("config: expected key = value" + at, line_no);
    const std::string key(detail::trim(line.substr(0, eq)));
    const auto value = detail::trim(line.substr(eq + 1));
    const auto& keys = schema.at(section);
    const auto it = keys.find(key);
    if (it == keys.end()) throw ParseError("config: unknown key " + key + at, line_no);
    try {
      it->second(config, value);
    } catch (const detail::TypeMismatch& m) {
      throw ParseError("config: type mismatch for " + (section.empty() ? "" : section + ".") + key + at +
                           ": expected " + m.expected + ", got '" + std::string(value) + "'",
                       line_no);
    }
  }
  validate(config);
  return config;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  return parse_config(in);
}

inline ExperimentConfig default_config() { return ExperimentConfig{}; }

// Writes every key; parse_config reads the result back to the same values.
inline void write_config(std::ostream& out, const ExperimentConfig& c) {
  const auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  const auto list = [](const auto& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? ", " : "") + std::to_string(xs[i]);
    return s;
  };
  const auto flag = [](bool b) { return b ? "true" : "false"; };
  const auto& g = c.data.gen;
  out << "seeds = " << list(c.seeds) << "\n\n[data]\n"
      << "source = " << (c.data.source == DataSource::csv ? "csv" : "synthetic") << "\n"
      << "path = " << c.data.path << "\n"
      << "min_item_inter = " << c.data.min_item_inter << "\n"
      << "min_user_inter = " << c.data.min_user_inter << "\n"
      << "ku = " << num(c.data.ku) << "\n"
      << "domains = " << g.num_domains << "\n"
      << "users_per_domain = " << g.users_per_domain << "\n"
      << "items_per_domain = " << g.items_per_domain << "\n"
      << "latent_dim = " << g.latent_dim << "\n"
      << "overlap_ratio = " << num(g.overlap_ratio) << "\n"
      << "min_seq_len = " << g.min_seq_len << "\n"
      << "max_seq_len = " << g.max_seq_len << "\n"
      << "p_min = " << num(g.p_min) << "\n"
      << "base_propensity = " << num(g.base_propensity) << "\n"
      << "popularity_exponent = " << num(g.popularity_exponent) << "\n"
      << "selection_strength = " << num(g.selection_strength) << "\n"
      << "popularity_skew = " << num(g.popularity_skew) << "\n"
      << "relevance_scale = " << num(g.relevance_scale) << "\n"
      << "overlap_affinity = " << num(g.overlap_affinity) << "\n";
  const auto& m = c.model;
  out << "\n[model]\n"
      << "dim = " << m.dim << "\n"
      << "seq_len = " << m.seq_len << "\n"
      << "encoder = " << enc::to_string(m.encoder) << "\n"
      << "mim_source = " << dre::to_string(m.mim_source) << "\n"
      << "pool_size = " << m.pool_size << "\n"
      << "p_min = " << num(m.p_min) << "\n"
      << "shared_trunk = " << flag(m.shared_trunk) << "\n"
      << "\n[mim]\n"
      << "enabled = " << flag(m.mim_enabled) << "\n"
      << "k = " << num(m.k) << "\n";
  const auto& t = c.train;
  out << "\n[train]\n"
      << "objective = " << dre::to_string(t.objective) << "\n"
      << "metric = " << (t.metric == dre::ErrorMetric::mse ? "mse" : "mae") << "\n"
      << "lambda1 = " << num(t.lambda1) << "\n"
      << "lambda2 = " << num(t.lambda2) << "\n"
      << "lambda3 = " << num(t.lambda3) << "\n"
      << "lambda4 = " << num(t.lambda4) << "\n"
      << "lambda5 = " << num(t.lambda5) << "\n"
      << "lambda_p = " << num(t.lambda_p) << "\n"
      << "lr_phase1 = " << num(t.lr_phase1) << "\n"
      << "lr_phase2 = " << num(t.lr_phase2) << "\n"
      << "q = " << t.q << "\n"
      << "q_prime = " << t.q_prime << "\n"
      << "rounds = " << t.rounds << "\n"
      << "batch_size = " << t.batch_size << "\n"
      << "negatives = " << t.negatives << "\n"
      << "normalize = " << flag(t.normalize) << "\n"
      << "similarity_weight = " << num(t.similarity_weight) << "\n";
  out << "\n[eval]\n"
      << "negatives = " << c.eval.negatives << "\n"
      << "ks = " << list(c.eval.ks) << "\n"
      << "batch_size = " << c.eval.batch_size << "\n";
  const auto& v = c.theory;
  out << "\n[theory]\n"
      << "domains = " << v.sampler.domains << "\n"
      << "min_pairs = " << v.sampler.min_pairs << "\n"
      << "max_pairs = " << v.sampler.max_pairs << "\n"
      << "imputation_scale = " << num(v.sampler.imputation_scale) << "\n"
      << "p_lo = " << num(v.sampler.p_lo) << "\n"
      << "p_hi = " << num(v.sampler.p_hi) << "\n"
      << "log_noise = " << num(v.sampler.log_noise) << "\n"
      << "p_min = " << num(v.sampler.p_min) << "\n"
      << "bias_instances = " << v.bias_instances << "\n"
      << "coverage_instances = " << v.coverage_instances << "\n"
      << "draws = " << v.draws << "\n"
      << "comparison_instances = " << v.comparison_instances << "\n"
      << "eta = " << num(v.eta) << "\n"
      << "bias_tolerance = " << num(v.bias_tolerance) << "\n"
      << "robust_tolerance = " << num(v.robust_tolerance) << "\n";
}

}  // namespace amid::cli
