#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "amid/mim/mim.hpp"

namespace amid::mim {
namespace {

Tensor eye(std::size_t d) {
  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  return Tensor({d, d}, v, true);
}

TEST(Similarity, IdentityWeightsHandProduct) {
  const Tensor Hi({2, 2}, {1, 0, 0, 0});
  const Tensor Hj({2, 2}, {0, 1, 1, 0});
  EXPECT_DOUBLE_EQ(interest_similarity(Hi, Hj, eye(2), eye(2)).item(), 1.0);
}

TEST(Similarity, ZeroSequenceGivesZero) {
  Rng rng = make_rng(1);
  const Tensor Hj = Tensor::uniform({3, 2}, -1, 1, rng);
  EXPECT_EQ(interest_similarity(Tensor::zeros({3, 2}), Hj, eye(2), eye(2)).item(), 0.0);
  const std::vector<std::uint8_t> none{0, 0, 0}, all{1, 1, 1};
  EXPECT_EQ(interest_similarity(Hj, Hj, eye(2), eye(2), none, all).item(), 0.0);
}

TEST(Similarity, MatchesExhaustiveMax) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed);
    const Tensor Hi = Tensor::uniform({4, 3}, -1, 1, rng);
    const Tensor Hj = Tensor::uniform({4, 3}, -1, 1, rng);
    const Tensor W1 = Tensor::uniform({3, 3}, -1, 1, rng);
    const Tensor W2 = Tensor::uniform({3, 3}, -1, 1, rng);
    const std::vector<std::uint8_t> mi{0, 1, 1, 1}, mj{0, 0, 1, 1};
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t s = 0; s < 4; ++s) {
        if (!mi[t] || !mj[s]) continue;
        double v = 0.0;
        for (std::size_t a = 0; a < 3; ++a)
          for (std::size_t b = 0; b < 3; ++b)
            for (std::size_t c = 0; c < 3; ++c) v += Hi.at({t, a}) * W1.at({a, c}) * Hj.at({s, b}) * W2.at({b, c});
        best = std::max(best, v);
      }
    EXPECT_NEAR(interest_similarity(Hi, Hj, W1, W2, mi, mj).item(), best, 1e-12);
  }
}

TEST(Similarity, ShapeMismatchThrows) {
  EXPECT_THROW(interest_similarity(Tensor::zeros({3, 2}), Tensor::zeros({4, 2}), eye(2), eye(2)), ShapeError);
}

TEST(Similarity, GradientMatchesFiniteDifferences) {
  Rng rng = make_rng(3);
  Tensor Hi = Tensor::uniform({3, 2}, -1, 1, rng, true);
  Tensor Hj = Tensor::uniform({3, 2}, -1, 1, rng, true);
  Tensor W1 = Tensor::uniform({2, 2}, -1, 1, rng, true);
  Tensor W2 = Tensor::uniform({2, 2}, -1, 1, rng, true);
  std::vector<Tensor> params{Hi, Hj, W1, W2};
  EXPECT_LE(finite_diff_check([&] { return interest_similarity(Hi, Hj, W1, W2); }, params), 1e-5);
}

TEST(GroupFlags, ThresholdIsInclusive) {
  const std::vector<double> sim{0.7, 0.69999, -3.0, 5.0};
  const auto f = group_flags(sim, 2, 2, 0.7);
  EXPECT_EQ(f.at(0, 0), 1);
  EXPECT_EQ(f.at(0, 1), 0);
  EXPECT_EQ(f.at(1, 0), 0);
  EXPECT_EQ(f.at(1, 1), 1);
  const auto all = group_flags(sim, 2, 2, -1e18);
  for (auto a : all.a) EXPECT_EQ(a, 1);
}

TEST(GroupFlags, RaisingKNeverAddsMembers) {
  Rng rng = make_rng(4);
  std::vector<double> sim(50);
  for (auto& s : sim) s = uniform(rng, -2, 2);
  for (double k = -2.0; k < 2.0; k += 0.1) {
    const auto lo = group_flags(sim, 5, 10, k);
    const auto hi = group_flags(sim, 5, 10, k + 0.05);
    for (std::size_t i = 0; i < sim.size(); ++i) EXPECT_LE(hi.a[i], lo.a[i]);
  }
}

TEST(Messages, AllFlagsZeroGivesZero) {
  Rng rng = make_rng(5);
  const std::vector<Tensor> src{Tensor::uniform({3, 2}, -1, 1, rng), Tensor::uniform({3, 2}, -1, 1, rng)};
  const std::vector<std::uint8_t> flags{0, 0};
  const Tensor m = propagate_messages(flags, src, Tensor::uniform({2, 2}, -1, 1, rng));
  EXPECT_EQ(m.shape(), (Shape{3, 2, 2}));
  for (double v : m.values()) EXPECT_EQ(v, 0.0);
}

TEST(Messages, IdentityProjectionCopiesSource) {
  Rng rng = make_rng(6);
  const std::vector<Tensor> src{Tensor::uniform({3, 2}, -1, 1, rng), Tensor::uniform({3, 2}, -1, 1, rng)};
  const std::vector<std::uint8_t> flags{0, 1};
  const Tensor m = propagate_messages(flags, src, eye(2));
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_EQ(m.at({t, k, 1}), src[1].at({t, k}));
      EXPECT_EQ(m.at({t, k, 0}), 0.0);
    }
}

TEST(Messages, MatchesPerSlotMatmul) {
  Rng rng = make_rng(7);
  std::vector<Tensor> src;
  for (int j = 0; j < 4; ++j) src.push_back(Tensor::uniform({3, 2}, -1, 1, rng));
  const Tensor W = Tensor::uniform({2, 2}, -1, 1, rng);
  const std::vector<std::uint8_t> flags{1, 0, 1, 1};
  const Tensor m = propagate_messages(flags, src, W);
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t k = 0; k < 2; ++k) {
        double v = 0.0;
        for (std::size_t a = 0; a < 2; ++a) v += src[j].at({t, a}) * W.at({a, k});
        EXPECT_NEAR(m.at({t, k, j}), flags[j] * v, 1e-14);
      }
}

TEST(Enhance, ZeroMessagesLeaveBottomHalfZero) {
  Rng rng = make_rng(8);
  const Tensor H = Tensor::uniform({3, 2}, -1, 1, rng);
  const Tensor s = enhance(H, Tensor::zeros({3, 2, 4}), Tensor::uniform({4, 1}, -1, 1, rng), eye(2));
  ASSERT_EQ(s.shape(), (Shape{6, 2}));
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_EQ(s.at({t, k}), H.at({t, k}));
      EXPECT_EQ(s.at({t + 3, k}), 0.0);
    }
}

TEST(Enhance, SingleSlotConcatenates) {
  Rng rng = make_rng(9);
  const Tensor H = Tensor::uniform({2, 3}, -1, 1, rng);
  const Tensor msg = Tensor::uniform({2, 3}, -1, 1, rng);
  const Tensor s = enhance(H, reshape(msg, {2, 3, 1}), Tensor({1, 1}, {1.0}), eye(3));
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_EQ(s.at({t, k}), H.at({t, k}));
      EXPECT_EQ(s.at({t + 2, k}), msg.at({t, k}));
    }
}

TEST(Enhance, MatchesIndexLoopOracle) {
  Rng rng = make_rng(10);
  const std::size_t T = 3, d = 2, N = 4;
  const Tensor H = Tensor::uniform({T, d}, -1, 1, rng);
  const Tensor m = Tensor::uniform({T, d, N}, -1, 1, rng);
  const Tensor WC = Tensor::uniform({N, 1}, -1, 1, rng);
  const Tensor WF = Tensor::uniform({d, d}, -1, 1, rng);
  const Tensor s = enhance(H, m, WC, WF);
  for (std::size_t r = 0; r < 2 * T; ++r)
    for (std::size_t k = 0; k < d; ++k) {
      double v = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        double row = 0.0;
        if (r < T) {
          row = H.at({r, a});
        } else {
          for (std::size_t j = 0; j < N; ++j) row += m.at({r - T, a, j}) * WC.at({j, 0});
        }
        v += row * WF.at({a, k});
      }
      EXPECT_NEAR(s.at({r, k}), v, 1e-14);
    }
  EXPECT_THROW(enhance(H, m, Tensor::zeros({3, 1}), WF), ShapeError);
}

TEST(Enhance, ChainMatchesFiniteDifferences) {
  Rng rng = make_rng(11);
  const std::size_t T = 3, d = 2;
  Tensor H = Tensor::uniform({T, d}, -1, 1, rng, true);
  Tensor s0 = Tensor::uniform({T, d}, -1, 1, rng, true);
  Tensor s1 = Tensor::uniform({T, d}, -1, 1, rng, true);
  MimParams p = make_mim_params(d, 2, 0.0, rng);
  const Tensor w = Tensor::uniform({2 * T, d}, -1, 1, rng);
  std::vector<Tensor> params{H, s0, s1, p.W_ip, p.W_C, p.W_F};
  auto build = [&] {
    const std::vector<Tensor> src{s0, s1};
    const std::vector<std::uint8_t> flags{1, 1};
    return sum(mul(enhance(H, propagate_messages(flags, src, p.W_ip), p.W_C, p.W_F), w));
  };
  EXPECT_LE(finite_diff_check(build, params), 1e-5);
}

struct ToyBatch {
  std::size_t B = 5, T = 3, d = 2;
  std::vector<std::size_t> domain{0, 1, 0, 1, 1};
  std::vector<std::uint8_t> has_other{1, 0, 0, 1, 0};
  std::vector<std::size_t> item_ids{0, 1, 2, 3, 4, 5, 0, 0, 6, 1, 1, 1, 0, 2, 2};
  std::vector<std::size_t> other_ids{0, 0, 7, 0, 0, 0, 0, 0, 0, 3, 3, 3, 0, 0, 0};
  Tensor H, H_other;

  explicit ToyBatch(Rng& rng) {
    H = masked(Tensor::uniform({B, T, d}, -1, 1, rng, true), item_ids);
    H_other = masked(Tensor::uniform({B, T, d}, -1, 1, rng, true), other_ids);
  }

  Tensor masked(Tensor t, const std::vector<std::size_t>& ids) const {
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (!ids[i])
        for (std::size_t k = 0; k < d; ++k) v[i * d + k] = 0.0;
    return t;
  }

  BatchContext ctx() const { return {domain, has_other, item_ids, other_ids}; }

  Tensor row(const Tensor& t, std::size_t b) const { return reshape(slice(t, 0, b, b + 1), {T, d}); }
  std::vector<std::uint8_t> mask(const std::vector<std::size_t>& ids, std::size_t b) const {
    std::vector<std::uint8_t> m(T);
    for (std::size_t t = 0; t < T; ++t) m[t] = ids[b * T + t] != 0;
    return m;
  }
};

TEST(Batched, MatchesPerTargetPath) {
  Rng rng = make_rng(12);
  ToyBatch tb(rng);
  MimParams p = make_mim_params(tb.d, tb.B, 0.0, rng);
  const auto out = apply_batch(p, tb.H, tb.H_other, tb.ctx());
  ASSERT_EQ(out.s_star.shape(), (Shape{tb.B, 2 * tb.T, tb.d}));
  for (std::size_t i = 0; i < tb.B; ++i) {
    std::vector<Tensor> sources;
    std::vector<double> sims;
    for (std::size_t slot = 0; slot < tb.B; ++slot) {
      const auto src = out.slot_source[i][slot];
      if (src == -1) {
        sources.push_back(Tensor::zeros({tb.T, tb.d}));
        sims.push_back(0.0);
        continue;
      }
      const bool own = src == -2;
      const std::size_t j = own ? i : static_cast<std::size_t>(src);
      const Tensor Hj = own ? tb.row(tb.H_other, i) : tb.row(tb.H, j);
      const auto mj = own ? tb.mask(tb.other_ids, i) : tb.mask(tb.item_ids, j);
      sims.push_back(interest_similarity(tb.row(tb.H, i), Hj, p.W1, p.W2, tb.mask(tb.item_ids, i), mj).item());
      sources.push_back(Hj);
      if (!own) {
        EXPECT_NE(tb.domain[j], tb.domain[i]);
      }
    }
    auto flags = group_flags(sims, 1, tb.B, p.k);
    if (tb.has_other[i]) {
      EXPECT_EQ(out.slot_source[i][0], -2);
      flags.a[0] = 1;
    }
    for (std::size_t slot = 0; slot < tb.B; ++slot) {
      EXPECT_NEAR(out.similarity[i * tb.B + slot], sims[slot], 1e-12);
      EXPECT_EQ(out.flags.at(i, slot), out.slot_source[i][slot] == -1 ? 0 : flags.a[slot]);
      if (out.slot_source[i][slot] == -1) flags.a[slot] = 0;
    }
    const Tensor ref = enhance(tb.row(tb.H, i), propagate_messages(flags.a, sources, p.W_ip), p.W_C, p.W_F);
    for (std::size_t r = 0; r < 2 * tb.T; ++r)
      for (std::size_t k = 0; k < tb.d; ++k) EXPECT_NEAR(out.s_star.at({i, r, k}), ref.at({r, k}), 1e-12);
  }
}

TEST(Batched, DisabledModuleIsolatesEveryRow) {
  Rng rng = make_rng(13);
  ToyBatch tb(rng);
  MimParams p = make_mim_params(tb.d, tb.B, -1e18, rng);
  const auto out = apply_batch(p, tb.H, tb.H_other, tb.ctx(), false);
  for (std::size_t i = 0; i < tb.B; ++i)
    for (std::size_t r = tb.T; r < 2 * tb.T; ++r)
      for (std::size_t k = 0; k < tb.d; ++k) EXPECT_EQ(out.s_star.at({i, r, k}), 0.0);
  for (auto a : out.flags.a) EXPECT_EQ(a, 0);
}

TEST(Batched, HighThresholdKeepsOnlyOwnRow) {
  Rng rng = make_rng(14);
  ToyBatch tb(rng);
  MimParams p = make_mim_params(tb.d, tb.B, 1e18, rng);
  const auto out = apply_batch(p, tb.H, tb.H_other, tb.ctx());
  for (std::size_t i = 0; i < tb.B; ++i) {
    for (std::size_t slot = 1; slot < tb.B; ++slot) EXPECT_EQ(out.flags.at(i, slot), 0);
    EXPECT_EQ(out.flags.at(i, 0), tb.has_other[i]);
    if (!tb.has_other[i]) {
      for (std::size_t r = tb.T; r < 2 * tb.T; ++r)
        for (std::size_t k = 0; k < tb.d; ++k) EXPECT_EQ(out.s_star.at({i, r, k}), 0.0);
    }
  }
}

TEST(Batched, GradientsMatchFiniteDifferences) {
  Rng rng = make_rng(15);
  ToyBatch tb(rng);
  MimParams p = make_mim_params(tb.d, tb.B, -0.2, rng);
  const Tensor w = Tensor::uniform({tb.B, 2 * tb.T, tb.d}, -1, 1, rng);
  std::vector<Tensor> params{tb.H, tb.H_other, p.W_ip, p.W_C, p.W_F};
  // Flags are fixed at the initial values; the perturbations stay far from the threshold.
  const auto flags = apply_batch(p, tb.H, tb.H_other, tb.ctx()).flags.a;
  auto build = [&] {
    const auto out = apply_batch(p, tb.H, tb.H_other, tb.ctx());
    EXPECT_EQ(out.flags.a, flags);
    return sum(mul(out.s_star, w));
  };
  EXPECT_LE(finite_diff_check(build, params), 1e-5);
  std::vector<Tensor> sim_params{tb.H, tb.H_other, p.W1, p.W2};
  EXPECT_LE(finite_diff_check([&] { return sum(apply_batch(p, tb.H, tb.H_other, tb.ctx()).own_similarity); },
                              sim_params),
            1e-5);
}

TEST(Batched, SimilarityDoesNotReachW1ThroughFlags) {
  Rng rng = make_rng(16);
  ToyBatch tb(rng);
  MimParams p = make_mim_params(tb.d, tb.B, 0.0, rng);
  const auto out = apply_batch(p, tb.H, tb.H_other, tb.ctx());
  const std::vector<Tensor> params{p.W1, p.W2};
  const auto g = grad(sum(out.s_star), params);
  for (const auto& t : g)
    for (double v : t.values()) EXPECT_EQ(v, 0.0);
}

}  // namespace
}  // namespace amid::mim
