#pragma once

// Text checkpoints.
//
//   amid-checkpoint 1
//   config dim=16 seq_len=8 encoder=gru mim=1 mim_source=encoded k=0.7 pool=64 p_min=0.05 shared_trunk=0
//   items 100 100
//   tensors <count>
//   <name> <rank> <dim>...
//   <values, %.17g, space separated>
//   ...
//
// Tensors appear in named_parameters() order; values round-trip exactly.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "amid/dre/model.hpp"
#include "amid/errors.hpp"

namespace amid::dre {

inline constexpr int kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& out, const Model& model) {
  const auto& c = model.config;
  out << "amid-checkpoint " << kCheckpointVersion << "\n";
  char k[64], pmin[64];
  std::snprintf(k, sizeof k, "%.17g", c.k);
  std::snprintf(pmin, sizeof pmin, "%.17g", c.p_min);
  out << "config dim=" << c.dim << " seq_len=" << c.seq_len << " encoder=" << enc::to_string(c.encoder)
      << " mim=" << (c.mim_enabled ? 1 : 0) << " mim_source=" << to_string(c.mim_source) << " k=" << k
      << " pool=" << c.pool_size << " p_min=" << pmin << " shared_trunk=" << (c.shared_trunk ? 1 : 0) << "\n";
  out << "items";
  for (const auto& t : model.tables.item_tables) out << ' ' << t.dim(0) - 1;
  out << "\n";
  const auto named = model.named_parameters();
  out << "tensors " << named.size() << "\n";
  char buf[64];
  for (const auto& [name, t] : named) {
    out << name << ' ' << t.rank();
    for (auto d : t.shape()) out << ' ' << d;
    out << "\n";
    bool first = true;
    for (double v : t.values()) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << (first ? "" : " ") << buf;
      first = false;
    }
    out << "\n";
  }
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  write_checkpoint(out, model);
}

inline Model read_checkpoint(std::istream& in) {
  std::size_t line_no = 0;
  std::string line;
  const auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw ParseError(std::string("checkpoint: missing ") + what, line_no + 1);
    ++line_no;
    return std::istringstream(line);
  };
  {
    auto ls = next("header");
    std::string tag;
    int version = 0;
    ls >> tag >> version;
    if (tag != "amid-checkpoint") throw ParseError("checkpoint: bad header '" + line + "'", line_no);
    if (version != kCheckpointVersion) {
      throw ParseError("checkpoint: unsupported version " + std::to_string(version), line_no);
    }
  }
  ModelConfig config;
  {
    auto ls = next("config");
    std::string word;
    ls >> word;
    if (word != "config") throw ParseError("checkpoint: expected config line", line_no);
    std::map<std::string, std::string> kv;
    while (ls >> word) {
      const auto eq = word.find('=');
      if (eq == std::string::npos) throw ParseError("checkpoint: malformed config entry '" + word + "'", line_no);
      kv[word.substr(0, eq)] = word.substr(eq + 1);
    }
    try {
      config.dim = std::stoul(kv.at("dim"));
      config.seq_len = std::stoul(kv.at("seq_len"));
      config.encoder = enc::parse_encoder_kind(kv.at("encoder"));
      config.mim_enabled = kv.at("mim") == "1";
      config.mim_source = parse_mim_source(kv.at("mim_source"));
      config.k = std::stod(kv.at("k"));
      config.pool_size = std::stoul(kv.at("pool"));
      config.p_min = std::stod(kv.at("p_min"));
      config.shared_trunk = kv.at("shared_trunk") == "1";
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ParseError("checkpoint: incomplete or malformed config line", line_no);
    }
  }
  std::vector<std::size_t> items;
  {
    auto ls = next("items");
    std::string word;
    ls >> word;
    if (word != "items") throw ParseError("checkpoint: expected items line", line_no);
    std::size_t v;
    while (ls >> v) items.push_back(v);
    if (items.empty()) throw ParseError("checkpoint: no domains", line_no);
  }
  Model model = make_model(config, items, 0);
  auto named = model.named_parameters();
  std::size_t count = 0;
  {
    auto ls = next("tensor count");
    std::string word;
    ls >> word >> count;
    if (word != "tensors") throw ParseError("checkpoint: expected tensor count", line_no);
    if (count != named.size()) {
      throw ParseError("checkpoint: " + std::to_string(count) + " tensors, model expects " +
                           std::to_string(named.size()),
                       line_no);
    }
  }
  for (auto& [name, tensor] : named) {
    auto head = next("tensor header");
    std::string got;
    std::size_t rank = 0;
    head >> got >> rank;
    if (got != name) throw ParseError("checkpoint: expected tensor " + name + ", found '" + got + "'", line_no);
    Shape shape(rank);
    for (auto& d : shape) head >> d;
    if (!head || shape != tensor.shape()) {
      throw ParseError("checkpoint: tensor " + name + " has shape " + shape_str(shape) + ", model expects " +
                           shape_str(tensor.shape()),
                       line_no);
    }
    auto body = next("tensor values");
    auto values = tensor.mutable_values();
    for (auto& v : values) {
      std::string tok;
      if (!(body >> tok)) throw ParseError("checkpoint: too few values for " + name, line_no);
      try {
        v = std::stod(tok);
      } catch (const std::exception&) {
        throw ParseError("checkpoint: bad value '" + tok + "' in " + name, line_no);
      }
    }
    std::string extra;
    if (body >> extra) throw ParseError("checkpoint: too many values for " + name, line_no);
  }
  return model;
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace amid::dre
