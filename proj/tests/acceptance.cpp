// Acceptance runner: one PASS/FAIL line per criterion.
//
//   amid_acceptance                 all criteria, exit 1 if any fails
//   amid_acceptance --criterion 7   selected criteria only (repeatable)
//   amid_acceptance --report        exit 0 once every selected criterion was evaluated

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "amid/cli/config.hpp"
#include "amid/cli/pipeline.hpp"
#include "amid/datagen/events.hpp"
#include "amid/dre/losses.hpp"
#include "amid/dre/train.hpp"
#include "amid/eval/eval.hpp"
#include "amid/mim/mim.hpp"
#include "amid/theory/theory.hpp"
#include "support/toy.hpp"

using namespace amid;

namespace {

constexpr std::uint64_t kSeed = 20240;

struct Verdict {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1: bias identity against exhaustive enumeration ----

Verdict bias_identity() {
  const theory::SamplerConfig sampler;
  Rng rng = make_rng(kSeed, 1);
  std::size_t off = 0, off_mixed = 0, mixed = 0, pooled_off = 0;
  double worst = 0.0, pooled_worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto inst = theory::sample_instance(sampler, rng);
    const double truth = std::abs(theory::prediction_inaccuracy(inst) - theory::enumerate_expectation_dr(inst));
    const double dev = std::abs(theory::dr_bias(inst) - truth);
    const double pooled = std::abs(theory::pooled_bias(inst) - truth);
    const bool opposite = theory::mixed_sign_domains(inst);
    mixed += opposite;
    worst = std::max(worst, dev);
    pooled_worst = std::max(pooled_worst, pooled);
    if (dev > 1e-10) ++off, off_mixed += opposite;
    pooled_off += pooled > 1e-10;
  }
  return {off == 0, fmt("per-domain bias off on %zu/1000 instances (max %.3g, tol 1e-10); %zu of them have domain "
                        "sums of opposite sign (%zu such instances); pooled |P - E[E_DR]| off on %zu (max %.3g)",
                        off, worst, off_mixed, mixed, pooled_off, pooled_worst)};
}

// ---- 2: zero bias with exact imputation or exact propensities ----

Verdict double_robustness() {
  const auto r = theory::check_double_robustness(theory::SamplerConfig{}, 1000, 1e-12, kSeed);
  return {r.passed && r.evaluated == 2000,
          fmt("%zu instances (1000 with e_hat = e, 1000 with p_hat = p), %zu failures, max bias %.3g (tol 1e-12)",
              r.evaluated, r.failures, r.worst)};
}

// ---- 3: tail bound coverage ----

Verdict tail_coverage() {
  std::vector<theory::CoverageRow> rows;
  const auto r = theory::check_tail_coverage(theory::SamplerConfig{}, 20, 100000, 0.05, kSeed, &rows);
  double hoeffding = 0.0;
  for (const auto& row : rows) hoeffding = std::max(hoeffding, row.hoeffding_violation_rate);
  return {r.passed && r.evaluated == 20,
          fmt("worst violation rate %.4f vs limit %.6f, %zu/20 instances over; pairwise Hoeffding radius worst "
              "rate %.5f",
              r.worst, r.limit, r.failures, hoeffding)};
}

// ---- 4: dr bound never above ips bound ----

Verdict bound_comparison() {
  const auto r = theory::check_bound_comparison(theory::SamplerConfig{}, 1000, 0.05, kSeed);
  return {r.passed && r.evaluated == 1000 && r.skipped == 0,
          fmt("%zu instances, %zu violations, %zu pairs outside 0 <= e_hat <= 2e", r.evaluated, r.failures, r.skipped)};
}

// ---- 5: gradients of both objectives on the 4-pair toy batch ----

Verdict gradients() {
  dre::TrainConfig c;
  c.lambda1 = 0.5;
  c.lambda2 = c.lambda3 = c.lambda4 = c.lambda5 = 1e-2;
  double worst_e = 0.0, worst_r = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    dre::Model m = toy::toy_model(seed);
    const auto batch = toy::toy_batch();
    const auto side = dre::side_batch(m, toy::toy_batch(1, 0));
    auto all = dre::detail::join(dre::detail::join(m.theta(), m.phi()), m.psi());
    worst_e = std::max(worst_e, finite_diff_check([&] { return dre::phase1_loss(m, c, batch, &side); }, all));
    const auto full = toy::toy_batch(1, 0);
    const auto frozen = dre::frozen_heads(m, full);
    auto theta = m.theta();
    worst_r = std::max(worst_r, finite_diff_check([&] { return dre::phase2_loss(m, c, full, &frozen); }, theta));
  }
  return {worst_e <= 1e-5 && worst_r <= 1e-5,
          fmt("max relative error L_e (theta, phi, psi) %.2e, L_r (theta) %.2e, tol 1e-5", worst_e, worst_r)};
}

// ---- 6: MIM structure ----

Verdict mim_structure() {
  Rng rng = make_rng(kSeed, 6);
  const std::size_t T = 5, d = 4, N = 3;
  std::vector<std::string> broken;
  Tensor eye = Tensor::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) eye.mutable_values()[i * d + i] = 1.0;

  // Isolation and shape with every flag 0.
  const Tensor H = Tensor::uniform({T, d}, -1, 1, rng);
  std::vector<Tensor> sources;
  for (std::size_t j = 0; j < N; ++j) sources.push_back(Tensor::uniform({T, d}, -1, 1, rng));
  const Tensor W_ip = Tensor::uniform({d, d}, -1, 1, rng), W_C = Tensor::uniform({N, 1}, -1, 1, rng);
  const std::vector<std::uint8_t> none(N, 0);
  const Tensor pre = mim::enhance(H, mim::propagate_messages(none, sources, W_ip), W_C, eye);
  if (pre.shape() != Shape{2 * T, d}) broken.push_back("S* shape " + shape_str(pre.shape()));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < d; ++k) {
      if (pre.at({T + t, k}) != 0.0) broken.push_back("nonzero bottom row without flags");
      if (pre.at({t, k}) != H.at({t, k})) broken.push_back("top rows differ from H");
    }
  const Tensor W_F = Tensor::uniform({d, d}, -1, 1, rng);
  const Tensor post = mim::enhance(H, mim::propagate_messages(none, sources, W_ip), W_C, W_F);
  for (std::size_t t = T; t < 2 * T; ++t)
    for (std::size_t k = 0; k < d; ++k)
      if (post.at({t, k}) != 0.0) broken.push_back("nonzero bottom row after W_F");

  // Batched path, module switched off: bottom half zero for every row.
  {
    dre::Model m = toy::toy_model(4);
    m.config.mim_enabled = false;
    const auto b = toy::toy_batch();
    const Tensor Hb = Tensor::uniform({2, 3, 4}, -1, 1, rng), Ho = Tensor::uniform({2, 3, 4}, -1, 1, rng);
    const mim::BatchContext ctx{b.domain, b.has_other, b.item_ids, b.other_ids};
    const auto out = mim::apply_batch(m.mim, Hb, Ho, ctx, false);
    if (out.s_star.shape() != Shape{2, 6, 4}) broken.push_back("batched S* shape " + shape_str(out.s_star.shape()));
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t t = 3; t < 6; ++t)
        for (std::size_t k = 0; k < 4; ++k)
          if (out.s_star.at({r, t, k}) != 0.0) broken.push_back("batched bottom half nonzero");
  }

  // Similarity against the exhaustive T x T loop.
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor Hi = Tensor::uniform({T, d}, -1, 1, rng), Hj = Tensor::uniform({T, d}, -1, 1, rng);
    const Tensor W1 = Tensor::uniform({d, d}, -1, 1, rng), W2 = Tensor::uniform({d, d}, -1, 1, rng);
    std::vector<std::uint8_t> mi(T), mj(T);
    for (auto& x : mi) x = uniform01(rng) < 0.7;
    for (auto& x : mj) x = uniform01(rng) < 0.7;
    double best = -INFINITY;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t s = 0; s < T; ++s) {
        if (!mi[t] || !mj[s]) continue;
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          double p = 0.0, q = 0.0;
          for (std::size_t l = 0; l < d; ++l) p += Hi.at({t, l}) * W1.at({l, k});
          for (std::size_t l = 0; l < d; ++l) q += Hj.at({s, l}) * W2.at({l, k});
          acc += p * q;
        }
        best = std::max(best, acc);
      }
    if (std::isinf(best)) best = 0.0;
    worst = std::max(worst, std::abs(mim::interest_similarity(Hi, Hj, W1, W2, mi, mj).item() - best));
  }
  if (worst > 1e-12) broken.push_back(fmt("similarity off by %.3g", worst));

  const std::vector<double> at_k{0.7}, below{0.69999};
  if (mim::group_flags(at_k, 1, 1, 0.7).at(0, 0) != 1) broken.push_back("a' = k not flagged");
  if (mim::group_flags(below, 1, 1, 0.7).at(0, 0) != 0) broken.push_back("a' < k flagged");

  std::string detail = fmt("isolation, shapes, boundary flag; similarity vs exhaustive loop max dev %.2e", worst);
  if (!broken.empty()) detail += "; broken: " + broken.front();
  return {broken.empty(), detail};
}

// ---- 7: directional debiasing experiment ----

Verdict directional() {
  const auto c = cli::parse_config(std::filesystem::path(AMID_CONFIG_DIR) / "directional.ini");
  const std::vector<cli::Variant> grid{{dre::Objective::naive, true}, {dre::Objective::dr, true},
                                       {dre::Objective::dr, false}};
  const auto results = cli::run_experiment(c, grid);
  const std::size_t k = 10;
  std::vector<double> naive, dr_on, dr_off;
  for (auto s : c.seeds) {
    naive.push_back(cli::seed_mean(results[0].per_seed, s, eval::Metric::ndcg, k));
    dr_on.push_back(cli::seed_mean(results[1].per_seed, s, eval::Metric::ndcg, k));
    dr_off.push_back(cli::seed_mean(results[2].per_seed, s, eval::Metric::ndcg, k));
  }
  const auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  std::size_t wins_naive = 0, wins_mim = 0, ties_mim = 0;
  for (std::size_t i = 0; i < naive.size(); ++i) {
    wins_naive += dr_on[i] > naive[i];
    wins_mim += dr_on[i] > dr_off[i];
    ties_mim += dr_on[i] == dr_off[i];
  }
  const bool over_naive = mean(dr_on) > mean(naive) && wins_naive >= 4;
  const bool over_off = mean(dr_on) > mean(dr_off) && wins_mim >= 4;
  std::string seeds;
  for (std::size_t i = 0; i < naive.size(); ++i) {
    seeds += fmt("%s%.4f/%.4f/%.4f", i ? " " : "", naive[i], dr_on[i], dr_off[i]);
  }
  return {over_naive && over_off,
          fmt("NDCG@10 naive %.4f, dr %.4f, dr without MIM %.4f; dr beats naive in %zu/5 seeds, MIM on beats off in "
              "%zu/5 (%zu ties); per seed naive/dr/dr-off: %s",
              mean(naive), mean(dr_on), mean(dr_off), wins_naive, wins_mim, ties_mim, seeds.c_str())};
}

// ---- 8: protocol ----

Verdict protocol() {
  std::vector<std::string> broken;
  // K_u on pools of 27,519 and 107,984 users with 16,377 in both domains.
  const std::size_t overlap = 16377, only0 = 27519 - overlap, only1 = 107984 - overlap;
  std::vector<data::InteractionEvent> events;
  data::UserId next = 0;
  for (std::size_t i = 0; i < overlap; ++i, ++next) {
    events.push_back({next, 1, 0, 0});
    events.push_back({next, 1, 1, 0});
  }
  for (std::size_t i = 0; i < only0; ++i, ++next) events.push_back({next, 1, 0, 0});
  for (std::size_t i = 0; i < only1; ++i, ++next) events.push_back({next, 1, 1, 0});
  const auto split = data::split_users(events, kSeed);
  const auto ku = data::apply_ku(split, 0.25, kSeed);
  const auto both = data::overlapping_users(events);
  std::set<data::UserId> kept;
  for (const auto& e : ku.observed.train)
    if (!both.count(e.user_id)) kept.insert(e.user_id);
  const std::size_t arithmetic = data::ku_retained_count(only0 + only1, 0.25, 0.8);
  if (kept.size() != 20549 || arithmetic != 20549) broken.push_back("K_u count");

  // Per-user NDCG@10 <= HR@10 and 5-seed summaries on the small config.
  const auto tiny = cli::parse_config(std::filesystem::path(AMID_TEST_DATA) / "tiny.ini");
  std::size_t users = 0, ordered = 0;
  std::size_t rows = 0, five = 0;
  double stat_dev = 0.0;
  const auto results = cli::run_experiment(tiny, cli::experiment_grid(), [&](const cli::Variant&, std::uint64_t,
                                                                              const cli::RunResult& run) {
    for (const auto& r : run.evaluation.ranks) {
      ++users;
      ordered += eval::metric_at_k(r.rank, 10, eval::Metric::ndcg) <= eval::metric_at_k(r.rank, 10, eval::Metric::hr);
    }
  });
  for (const auto& r : results) {
    for (const auto& row : r.summary) {
      ++rows;
      five += row.n_seeds == 5;
      std::vector<double> xs;
      for (const auto& v : r.per_seed)
        if (v.domain == row.domain && v.metric == row.metric && v.k == row.k) xs.push_back(v.value);
      double m = 0.0, ss = 0.0;
      for (double x : xs) m += x / static_cast<double>(xs.size());
      for (double x : xs) ss += (x - m) * (x - m);
      stat_dev = std::max({stat_dev, std::abs(row.mean - m), std::abs(row.std - std::sqrt(ss / (xs.size() - 1.0)))});
    }
  }
  if (ordered != users || users == 0) broken.push_back("NDCG above HR");
  if (five != rows || rows == 0 || stat_dev > 1e-12) broken.push_back("summary seeds or statistics");
  return {broken.empty(),
          fmt("K_u kept %zu non-overlapping train users (arithmetic %zu, expected 20549); NDCG@10 <= HR@10 for "
              "%zu/%zu evaluated users; %zu/%zu summary rows over 5 seeds, mean/std max dev %.2e",
              kept.size(), arithmetic, ordered, users, five, rows, stat_dev)};
}

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;  // 0: no runtime limit
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> selected;
  bool report = false;
  app.add_option("--criterion", selected, "criterion number 1-8 (repeatable; default all)")->check(CLI::Range(1, 8));
  app.add_flag("--report", report, "exit 0 once the selected criteria were evaluated, whatever the verdicts");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "bias identity", 60, bias_identity},
      {2, "double robustness", 10, double_robustness},
      {3, "tail bound coverage", 300, tail_coverage},
      {4, "dr bound <= ips bound", 10, bound_comparison},
      {5, "gradient suite", 30, gradients},
      {6, "mim structure", 10, mim_structure},
      {7, "directional debiasing", 600, directional},
      {8, "protocol fidelity", 0, protocol},
  };
  bool all = true;
  for (const auto& c : criteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_seconds == 0 || secs <= c.limit_seconds;
    const bool passed = v.passed && in_time;
    all = all && passed;
    std::string timing = fmt("%.1f s", secs);
    if (c.limit_seconds > 0) timing += fmt(" of %.0f s", c.limit_seconds);
    std::printf("criterion %d %s: %s | %s | %s\n", c.id, c.name, passed ? "PASS" : "FAIL", v.detail.c_str(),
                timing.c_str());
    std::fflush(stdout);
  }
  return report || all ? 0 : 1;
}
