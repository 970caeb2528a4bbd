// amid: generate / train / evaluate / verify / experiment / report.
//
// Exit codes: 0 success, 1 usage or config error, 2 check failure,
// 3 numeric divergence.

#include <CLI11.hpp>
#include <json.hpp>

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "amid/cli/config.hpp"
#include "amid/cli/pipeline.hpp"
#include "amid/datagen/events.hpp"
#include "amid/datagen/scenario.hpp"
#include "amid/dre/checkpoint.hpp"
#include "amid/errors.hpp"
#include "amid/eval/eval.hpp"
#include "amid/theory/theory.hpp"

namespace fs = std::filesystem;
using namespace amid;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kCheckFailed = 2;
constexpr int kDiverged = 3;

struct Common {
  std::string config_path;
  std::string out = "out";
  std::optional<std::uint64_t> seed;

  cli::ExperimentConfig config() const {
    if (config_path.empty()) {
      auto c = cli::default_config();
      cli::validate(c);
      return c;
    }
    return cli::parse_config(fs::path(config_path));
  }

  std::uint64_t run_seed(const cli::ExperimentConfig& c) const { return seed ? *seed : c.seeds.front(); }
};

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  return out;
}

// "dr bound <= ips bound" -> "dr_bound_ips_bound"
std::string slug(const std::string& name) {
  std::string out;
  for (char ch : name) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      out += ch;
    } else if (!out.empty() && out.back() != '_') {
      out += '_';
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

void write_events(const fs::path& path, const std::vector<data::InteractionEvent>& events) {
  auto out = open_out(path);
  data::write_interactions_csv(out, events);
}

int cmd_generate(const Common& o) {
  const auto c = o.config();
  const auto seed = o.run_seed(c);
  const auto data = cli::prepare_data(c.data, seed);
  const fs::path dir = fs::path(o.out) / "scenario";
  if (data.scenario) data::dump_scenario(*data.scenario, dir);
  write_events(dir / "interactions.csv", data.events);
  write_events(dir / "train.csv", data.ku.observed.train);
  write_events(dir / "val.csv", data.ku.observed.val);
  write_events(dir / "test.csv", data.split.test);
  write_events(dir / "unseen_train.csv", data.ku.unseen_train);
  std::cout << "wrote " << dir.string() << " (" << data.events.size() << " interactions, seed " << seed << ")\n";
  return kOk;
}

int cmd_train(const Common& o) {
  const auto c = o.config();
  const auto seed = o.run_seed(c);
  const auto data = cli::prepare_data(c.data, seed);
  dre::TrainingHistory history;
  const auto model = cli::train_model(c, data, seed, &history);
  const fs::path dir = fs::path(o.out) / "checkpoints";
  dre::save_checkpoint(model, dir / "model.ckpt");
  auto out = open_out(dir / "history.csv");
  cli::write_history_csv(out, history);
  std::cout << "trained " << history.optimizer_steps() << " steps, final loss "
            << eval::fmt(history.steps.back().loss) << "; wrote " << (dir / "model.ckpt").string() << "\n";
  return kOk;
}

int cmd_evaluate(const Common& o, const std::string& checkpoint) {
  const auto c = o.config();
  const auto seed = o.run_seed(c);
  const fs::path path = checkpoint.empty() ? fs::path(o.out) / "checkpoints" / "model.ckpt" : fs::path(checkpoint);
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string() + " (run train first)");
  const auto model = dre::load_checkpoint(path);
  const auto data = cli::prepare_data(c.data, seed);
  if (model.tables.item_tables.size() != data.items_per_domain.size()) {
    throw ConfigError("checkpoint domains do not match the configured data");
  }
  const auto ev = cli::evaluate_model(c, model, data, seed);
  const fs::path dir = fs::path(o.out) / "metrics";
  {
    auto out = open_out(dir / "metrics.csv");
    eval::write_metrics_csv(out, eval::seed_metrics(ev, seed));
  }
  {
    auto out = open_out(dir / "ranks.csv");
    out << "user,domain,rank\n";
    for (const auto& r : ev.ranks) out << r.user << ',' << r.domain << ',' << r.rank << '\n';
  }
  for (const auto& m : ev.metrics) {
    std::printf("domain %zu %s@%zu = %.4f (%zu users)\n", m.domain, eval::to_string(m.metric).c_str(), m.k, m.value,
                m.users);
  }
  return kOk;
}

int cmd_replay(const std::string& dir, const cli::ExperimentConfig& c) {
  const auto inst = theory::load_instance(dir);
  const double eta = c.theory.eta;
  std::printf("pairs %zu in %zu domains\n", inst.total_pairs(), inst.domains.size());
  std::printf("P                  %.12g\n", theory::prediction_inaccuracy(inst));
  std::printf("E[E_DR] closed     %.12g\n", theory::exact_expectation_dr(inst));
  if (inst.total_pairs() <= theory::kMaxEnumerationPairs) {
    std::printf("E[E_DR] enumerated %.12g\n", theory::enumerate_expectation_dr(inst));
  }
  std::printf("bias per domain    %.12g\n", theory::dr_bias(inst));
  std::printf("bias pooled        %.12g\n", theory::pooled_bias(inst));
  std::printf("mixed-sign domains %s\n", theory::mixed_sign_domains(inst) ? "yes" : "no");
  std::printf("tail bound dr      %.12g\n", theory::tail_bound(inst, eta, theory::Estimator::dr));
  std::printf("tail bound ips     %.12g\n", theory::tail_bound(inst, eta, theory::Estimator::ips));
  std::printf("hoeffding dr       %.12g\n", theory::hoeffding_bound(inst, eta, theory::Estimator::dr));
  return kOk;
}

int cmd_verify(const Common& o, const std::string& replay) {
  const auto c = o.config();
  if (!replay.empty()) return cmd_replay(replay, c);
  const auto seed = o.run_seed(c);
  const auto report = theory::verify_theory(c.theory, seed);
  const auto text = theory::format_report(report);
  const fs::path dir = fs::path(o.out) / "theory";
  if (fs::exists(dir / "failures")) fs::remove_all(dir / "failures");
  {
    auto out = open_out(dir / "report.txt");
    out << text;
  }
  auto index = open_out(dir / "failures.csv");
  index << "check,instance,path\n";
  for (const auto& check : report.checks) {
    for (std::size_t i = 0; i < check.failing.size(); ++i) {
      const fs::path inst_dir = dir / "failures" / slug(check.name) / std::to_string(i);
      theory::save_instance(check.failing[i], inst_dir);
      index << slug(check.name) << ',' << i << ',' << fs::relative(inst_dir, dir).string() << '\n';
    }
  }
  std::cout << text;
  return report.passed() ? kOk : kCheckFailed;
}

int cmd_experiment(const Common& o) {
  auto c = o.config();
  if (o.seed) c.seeds = {*o.seed};
  const fs::path out_dir(o.out);
  const auto grid = cli::experiment_grid();
  const auto results = cli::run_experiment(c, grid, [&](const cli::Variant& v, std::uint64_t seed,
                                                        const cli::RunResult& run) {
    const fs::path ckpt = out_dir / "checkpoints" / v.name() / ("seed_" + std::to_string(seed) + ".ckpt");
    dre::save_checkpoint(run.model, ckpt);
    auto h = open_out(out_dir / "checkpoints" / v.name() / ("history_seed_" + std::to_string(seed) + ".csv"));
    cli::write_history_csv(h, run.history);
    std::printf("%-14s seed %-4llu ndcg@%zu %.4f\n", v.name().c_str(), static_cast<unsigned long long>(seed),
                c.eval.ks.front(), eval::mean_over_domains(run.evaluation, eval::Metric::ndcg, c.eval.ks.front()));
    std::fflush(stdout);
  });
  nlohmann::json manifest;
  std::ostringstream config_text;
  cli::write_config(config_text, c);
  manifest["config"] = config_text.str();
  manifest["seeds"] = c.seeds;
  manifest["variants"] = nlohmann::json::array();
  for (const auto& r : results) {
    const fs::path dir = out_dir / "metrics" / r.variant.name();
    {
      auto out = open_out(dir / "metrics.csv");
      eval::write_metrics_csv(out, r.per_seed);
    }
    {
      auto out = open_out(dir / "summary.csv");
      eval::write_summary_csv(out, r.summary);
    }
    manifest["variants"].push_back({{"name", r.variant.name()},
                                    {"objective", dre::to_string(r.variant.objective)},
                                    {"mim", r.variant.mim},
                                    {"metrics", fs::relative(dir / "metrics.csv", out_dir).string()},
                                    {"summary", fs::relative(dir / "summary.csv", out_dir).string()}});
  }
  {
    auto out = open_out(out_dir / "metrics" / "summary.csv");
    cli::write_experiment_summary(out, results);
  }
  auto m = open_out(out_dir / "metrics" / "manifest.json");
  m << manifest.dump(2) << "\n";
  std::cout << "wrote " << (out_dir / "metrics" / "summary.csv").string() << "\n";
  return kOk;
}

int cmd_report(const Common& o, const std::string& summary) {
  const fs::path path = summary.empty() ? fs::path(o.out) / "metrics" / "summary.csv" : fs::path(summary);
  std::ifstream in(path);
  if (!in) throw ConfigError("summary not found: " + path.string() + " (run experiment first)");
  std::string line;
  std::getline(in, line);
  const auto header = data::detail::split_commas(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[std::string(header[i])] = i;
  for (const char* need : {"domain", "metric", "k", "mean", "std", "n_seeds"}) {
    if (!col.count(need)) throw ParseError("report: " + path.string() + " lacks column " + need, 1);
  }
  const bool variants = col.count("objective") && col.count("mim");
  std::printf("%-8s %-4s %-6s %-10s %-22s %s\n", "method", "mim", "domain", "metric", "mean +- std", "seeds");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = data::detail::split_commas(line);
    if (f.size() != header.size()) throw ParseError("report: wrong field count at line " + std::to_string(line_no), line_no);
    const auto get = [&](const char* name) { return std::string(f[col.at(name)]); };
    const std::string metric = get("metric") + "@" + get("k");
    const std::string value = get("mean") + " +- " + get("std");
    std::printf("%-8s %-4s %-6s %-10s %-22s %s\n", variants ? get("objective").c_str() : "-",
                variants ? get("mim").c_str() : "-", get("domain").c_str(), metric.c_str(), value.c_str(),
                get("n_seeds").c_str());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"amid: debiased cross-domain sequential recommendation experiments"};
  app.require_subcommand(1);
  Common common;
  std::string checkpoint, replay, summary;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "experiment config file (defaults when omitted)");
    sub->add_option("--out", common.out, "output directory")->capture_default_str();
    sub->add_option("--seed", common.seed, "seed (default: first configured seed)");
  };
  auto* generate = app.add_subcommand("generate", "build the dataset and write scenario/ CSVs");
  auto* train = app.add_subcommand("train", "train one model; writes checkpoints/model.ckpt and history.csv");
  auto* evaluate = app.add_subcommand("evaluate", "rank test users' held-out items; writes metrics/");
  auto* verify = app.add_subcommand("verify", "Monte Carlo checks of the estimator bias and tail bounds");
  auto* experiment = app.add_subcommand("experiment", "objectives x MIM grid over the seed list");
  auto* report = app.add_subcommand("report", "print a summary CSV as a table");
  for (auto* sub : {generate, train, evaluate, verify, experiment, report}) add_common(sub);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint to evaluate (default OUT/checkpoints/model.ckpt)");
  verify->add_option("--replay", replay, "print the quantities of one saved instance directory");
  report->add_option("--summary", summary, "summary CSV (default OUT/metrics/summary.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  try {
    if (generate->parsed()) return cmd_generate(common);
    if (train->parsed()) return cmd_train(common);
    if (evaluate->parsed()) return cmd_evaluate(common, checkpoint);
    if (verify->parsed()) return cmd_verify(common, replay);
    if (experiment->parsed()) return cmd_experiment(common);
    if (report->parsed()) return cmd_report(common, summary);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IndexError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
