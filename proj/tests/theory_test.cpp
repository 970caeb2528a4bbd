#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "amid/theory/theory.hpp"

namespace amid::theory {
namespace {

ErrorInstance two_pair() {
  ErrorInstance inst;
  inst.domains.push_back({{1.0, 0.5}, {0.6, 0.5}, {0.5, 0.8}, {0.25, 0.8}});
  return inst;
}

TEST(Estimators, PredictionInaccuracy) {
  EXPECT_DOUBLE_EQ(prediction_inaccuracy(two_pair()), 0.75);
  ErrorInstance zero;
  zero.domains.push_back({{0, 0}, {0, 0}, {1, 1}, {1, 1}});
  EXPECT_EQ(prediction_inaccuracy(zero), 0.0);
  ErrorInstance two;
  two.domains.push_back({{0.1, 0.3}, {0, 0}, {1, 1}, {1, 1}});
  two.domains.push_back({{0.4}, {0}, {1}, {1}});
  EXPECT_DOUBLE_EQ(prediction_inaccuracy(two), 0.3);
  ErrorInstance empty;
  empty.domains.emplace_back();
  EXPECT_THROW(prediction_inaccuracy(empty), ContractError);
}

TEST(Estimators, DoublyRobustExamples) {
  const auto inst = two_pair();
  EXPECT_NEAR(dr_estimate(inst, {{1, 0}}), 1.35, 1e-15);
  EXPECT_DOUBLE_EQ(dr_estimate(inst, {{0, 0}}), 0.55);
  auto exact = inst;
  exact.domains[0].e_hat = exact.domains[0].e;
  for (Observation o : {Observation{{0, 0}}, {{1, 0}}, {{0, 1}}, {{1, 1}}}) {
    EXPECT_DOUBLE_EQ(dr_estimate(exact, o), prediction_inaccuracy(exact));
  }
  EXPECT_THROW(dr_estimate(inst, {{1}}), ShapeError);
}

TEST(Estimators, IpsExamples) {
  const auto inst = two_pair();
  EXPECT_DOUBLE_EQ(ips_estimate(inst, {{1, 0}}), 2.0);
  EXPECT_EQ(ips_estimate(inst, {{0, 0}}), 0.0);
  auto ones = inst;
  ones.domains[0].p_hat = {1.0, 1.0};
  EXPECT_DOUBLE_EQ(ips_estimate(ones, {{1, 1}}), prediction_inaccuracy(ones));
}

TEST(Estimators, BiasAndExpectationExample) {
  const auto inst = two_pair();
  EXPECT_NEAR(dr_bias(inst), 0.2, 1e-15);
  EXPECT_NEAR(exact_expectation_dr(inst), 0.95, 1e-15);
  EXPECT_NEAR(enumerate_expectation_dr(inst), 0.95, 1e-15);
  EXPECT_NEAR(std::fabs(prediction_inaccuracy(inst) - enumerate_expectation_dr(inst)), dr_bias(inst), 1e-15);
}

// Hand enumeration of the four outcomes of the two-pair instance.
TEST(Estimators, EnumerationMatchesHandSum) {
  const auto inst = two_pair();
  double total = 0.0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      const double w = (a ? 0.5 : 0.5) * (b ? 0.8 : 0.2);
      total += w * dr_estimate(inst, {{static_cast<std::uint8_t>(a), static_cast<std::uint8_t>(b)}});
    }
  EXPECT_NEAR(enumerate_expectation_dr(inst), total, 1e-15);
}

TEST(Estimators, ExpectationEdgeCases) {
  Rng rng = make_rng(4);
  SamplerConfig s;
  s.exact_imputation = true;
  const auto inst = sample_instance(s, rng);
  EXPECT_NEAR(exact_expectation_dr(inst), prediction_inaccuracy(inst), 1e-15);
  // p -> 0 leaves only the imputed errors.
  ErrorInstance tiny;
  tiny.domains.push_back({{0.9, 0.1}, {0.3, 0.6}, {1e-300, 1e-300}, {0.5, 0.5}});
  EXPECT_NEAR(exact_expectation_dr(tiny), 0.45, 1e-15);
}

TEST(Estimators, EnumerationRefusesLargeInstances) {
  ErrorInstance big;
  big.domains.push_back({std::vector<double>(21, 0.5), std::vector<double>(21, 0.5), std::vector<double>(21, 0.5),
                         std::vector<double>(21, 0.5)});
  EXPECT_THROW(enumerate_expectation_dr(big), ContractError);
}

TEST(Estimators, ClosedFormMatchesEnumeration) {
  Rng rng = make_rng(7);
  SamplerConfig s;
  for (int k = 0; k < 200; ++k) {
    const auto inst = sample_instance(s, rng);
    EXPECT_NEAR(exact_expectation_dr(inst), enumerate_expectation_dr(inst), 1e-12);
  }
}

TEST(Estimators, DoubleRobustness) {
  Rng rng = make_rng(8);
  SamplerConfig a, b;
  a.exact_imputation = true;
  b.exact_propensity = true;
  for (int k = 0; k < 200; ++k) {
    EXPECT_LE(dr_bias(sample_instance(a, rng)), 1e-12);
    EXPECT_LE(dr_bias(sample_instance(b, rng)), 1e-12);
  }
}

TEST(TailBound, Examples) {
  ErrorInstance one;
  one.domains.push_back({{0.4}, {0.0}, {0.3}, {0.25}});
  const double expected = std::sqrt(std::log(40.0) / 2.0 * 1.6 * 1.6);
  EXPECT_NEAR(tail_bound(one, 0.05, Estimator::dr), expected, 1e-12);
  EXPECT_NEAR(tail_bound(one, 0.05, Estimator::dr), 2.1729, 1e-4);
  auto exact = two_pair();
  exact.domains[0].e_hat = exact.domains[0].e;
  EXPECT_EQ(tail_bound(exact, 0.05, Estimator::dr), 0.0);
  EXPECT_THROW(tail_bound(one, 0.0, Estimator::dr), ContractError);
  EXPECT_THROW(tail_bound(one, 1.0, Estimator::ips), ContractError);
}

TEST(TailBound, DrNeverExceedsIpsUnderThePremise) {
  Rng rng = make_rng(9);
  SamplerConfig s;
  for (int k = 0; k < 1000; ++k) {
    const auto inst = sample_instance(s, rng);
    EXPECT_LE(tail_bound(inst, 0.05, Estimator::dr), tail_bound(inst, 0.05, Estimator::ips));
  }
}

TEST(TailBound, HoeffdingRadiusForOnePair) {
  ErrorInstance one;
  one.domains.push_back({{0.4}, {0.0}, {0.3}, {0.25}});
  EXPECT_NEAR(hoeffding_bound(one, 0.05, Estimator::dr), std::sqrt(std::log(40.0) / 2.0) * 1.6, 1e-12);
}

TEST(Sampler, DefaultsRespectRanges) {
  Rng rng = make_rng(10);
  SamplerConfig s;
  for (int k = 0; k < 300; ++k) {
    const auto inst = sample_instance(s, rng);
    validate(inst);
    ASSERT_EQ(inst.domains.size(), 2u);
    EXPECT_LE(inst.total_pairs(), 20u);
    for (const auto& d : inst.domains) {
      EXPECT_GE(d.size(), 2u);
      EXPECT_LE(d.size(), 10u);
      for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_LE(d.e_hat[i], 2 * d.e[i]);
        EXPECT_GE(d.p[i], 0.1);
        EXPECT_GE(d.p_hat[i], 0.05);
        EXPECT_LE(d.p_hat[i], 1.0);
      }
    }
  }
  s.max_pairs = 1;
  EXPECT_THROW(validate(s), ConfigError);
}

TEST(Estimators, PerDomainBiasBoundsThePooledBias) {
  Rng rng = make_rng(12);
  SamplerConfig s;
  std::size_t mixed = 0;
  for (int k = 0; k < 300; ++k) {
    const auto inst = sample_instance(s, rng);
    const double exact = std::fabs(prediction_inaccuracy(inst) - enumerate_expectation_dr(inst));
    EXPECT_NEAR(pooled_bias(inst), exact, 1e-12);
    EXPECT_GE(dr_bias(inst), exact - 1e-12);
    if (mixed_sign_domains(inst)) {
      ++mixed;
    } else {
      EXPECT_NEAR(dr_bias(inst), exact, 1e-12);
    }
  }
  EXPECT_GT(mixed, 0u);
}

// Opposite-sign domain sums: the per-domain absolute values no longer cancel.
TEST(Estimators, OppositeSignDomainsExample) {
  ErrorInstance inst;
  inst.domains.push_back({{1.0}, {0.6}, {0.5}, {0.25}});  // Delta delta = -0.4
  inst.domains.push_back({{1.0}, {0.6}, {0.5}, {1.0}});   // Delta delta = +0.2
  EXPECT_NEAR(dr_bias(inst), 0.3, 1e-15);
  EXPECT_NEAR(pooled_bias(inst), 0.1, 1e-15);
  EXPECT_NEAR(std::fabs(prediction_inaccuracy(inst) - enumerate_expectation_dr(inst)), 0.1, 1e-15);
}

TEST(Verify, BiasChecksOnSingleDomainInstances) {
  SamplerConfig s;
  s.domains = 1;
  const auto a = check_bias_identity(s, 300, 1e-10, 1);
  EXPECT_TRUE(a.passed) << a.worst;
  EXPECT_EQ(a.evaluated, 300u);
  s = SamplerConfig{};
  const auto two = check_bias_identity(s, 300, 1e-10, 1);
  EXPECT_GT(two.failures, 0u);
  const auto b = check_double_robustness(s, 300, 1e-12, 1);
  EXPECT_TRUE(b.passed) << b.worst;
  EXPECT_EQ(b.evaluated, 600u);
}

TEST(Verify, ComparisonSkipsPairsOutsideThePremise) {
  SamplerConfig s;
  s.imputation_scale = 3.0;
  const auto d = check_bound_comparison(s, 300, 0.05, 2);
  EXPECT_TRUE(d.passed);
  EXPECT_GT(d.skipped, 0u);
  std::size_t dropped = 0;
  ErrorInstance inst;
  inst.domains.push_back({{0.5, 0.5}, {1.2, 0.7}, {0.5, 0.5}, {0.5, 0.5}});
  const auto kept = comparable_pairs(inst, &dropped);
  EXPECT_EQ(dropped, 1u);
  EXPECT_EQ(kept.total_pairs(), 1u);
}

TEST(Verify, ExactImputationHasNoDeviation) {
  SamplerConfig s;
  s.exact_imputation = true;
  std::vector<CoverageRow> rows;
  const auto c = check_tail_coverage(s, 3, 10000, 0.05, 3, &rows);
  EXPECT_TRUE(c.passed);
  EXPECT_EQ(c.worst, 0.0);
  for (const auto& r : rows) EXPECT_EQ(r.bound, 0.0);
}

// The pairwise Hoeffding radius is a valid deviation bound; its violation rate
// stays below eta.
TEST(Verify, HoeffdingRadiusCoversTheDeviation) {
  SamplerConfig s;
  std::vector<CoverageRow> rows;
  check_tail_coverage(s, 5, 20000, 0.05, 4, &rows);
  for (const auto& r : rows) EXPECT_LE(r.hoeffding_violation_rate, coverage_limit(0.05, 20000));
}

TEST(Verify, RejectsSmallDrawCounts) {
  VerifyConfig c;
  c.draws = 100;
  EXPECT_THROW(verify_theory(c, 1), ConfigError);
}

TEST(InstanceFiles, RoundTripAndReplay) {
  Rng rng = make_rng(11);
  const auto inst = sample_instance(SamplerConfig{}, rng);
  const auto dir = std::filesystem::temp_directory_path() / "amid_theory_roundtrip";
  std::filesystem::remove_all(dir);
  save_instance(inst, dir);
  const auto back = load_instance(dir);
  ASSERT_EQ(back.domains.size(), inst.domains.size());
  for (std::size_t z = 0; z < inst.domains.size(); ++z) {
    EXPECT_EQ(back.domains[z].e, inst.domains[z].e);
    EXPECT_EQ(back.domains[z].e_hat, inst.domains[z].e_hat);
    EXPECT_EQ(back.domains[z].p, inst.domains[z].p);
    EXPECT_EQ(back.domains[z].p_hat, inst.domains[z].p_hat);
  }
  EXPECT_EQ(dr_bias(back), dr_bias(inst));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace amid::theory
