#include <cmath>
#include <stdexcept>

#include <gtest/gtest.h>

#include "fedlora/drift.hpp"
#include "fedlora/experiment.hpp"

using namespace fedlora;

namespace {

// Direct transcriptions of the drift definitions, written without the
// library's helpers.
double brute_magnitude(const std::vector<Vector>& t, const std::vector<Vector>& r, bool mean) {
  long double total = 0;
  for (std::size_t n = 0; n < t.size(); ++n) {
    long double s = 0;
    for (std::size_t i = 0; i < t[n].size(); ++i) s += std::fabs(static_cast<long double>(t[n][i]) - r[n][i]);
    total += mean ? s / t[n].size() : s;
  }
  return static_cast<double>(total / t.size());
}

double brute_direction(const Matrix& a, const Matrix& b) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      ab += static_cast<long double>(a(i, j)) * b(i, j);
      aa += static_cast<long double>(a(i, j)) * a(i, j);
      bb += static_cast<long double>(b(i, j)) * b(i, j);
    }
  return static_cast<double>(1.0L - ab / std::sqrt(aa * bb));
}

}  // namespace

TEST(MagnitudeDrift, HandExamples) {
  const std::vector<Vector> x{{1, 2}, {3}};
  EXPECT_EQ(magnitude_drift(x, x), 0.0);
  // per-layer mean |diff| of 1 and 2
  EXPECT_DOUBLE_EQ(magnitude_drift({{1, 1}, {2}}, {{0, 2}, {0}}), 1.5);
  EXPECT_DOUBLE_EQ(magnitude_drift({{1, 1}, {2}}, {{0, 2}, {0}}, MagnitudeReduction::SumAbs), 2.0);
}

TEST(MagnitudeDrift, ShapeErrors) {
  EXPECT_THROW(magnitude_drift({{1, 2}}, {{1}}), DimensionError);
  EXPECT_THROW(magnitude_drift({{1}}, {{1}, {2}}), DimensionError);
  EXPECT_THROW(magnitude_drift({}, {}), DimensionError);
}

TEST(MagnitudeDrift, MatchesBruteForceOnRandomInputs) {
  Rng r(1);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t k = 1 + r.below(4);
    std::vector<Vector> a(k), b(k);
    for (std::size_t n = 0; n < k; ++n) {
      const std::size_t len = 1 + r.below(9);
      for (std::size_t i = 0; i < len; ++i) {
        a[n].push_back(std::fabs(r.gaussian()));
        b[n].push_back(std::fabs(r.gaussian()));
      }
    }
    EXPECT_NEAR(magnitude_drift(a, b), brute_magnitude(a, b, true), 1e-12);
    EXPECT_NEAR(magnitude_drift(a, b, MagnitudeReduction::SumAbs), brute_magnitude(a, b, false), 1e-12);
  }
}

TEST(MagnitudeDrift, NegatedTaskMagnitudesMatchBruteForce) {
  Rng r(2);
  for (int t = 0; t < 100; ++t) {
    std::vector<Vector> ref{{}, {}}, neg{{}, {}};
    for (auto n : {0, 1})
      for (int i = 0; i < 5; ++i) {
        ref[n].push_back(std::fabs(r.gaussian()));
        neg[n].push_back(-ref[n].back());
      }
    // |-m - m| = 2|m| elementwise
    EXPECT_NEAR(magnitude_drift(neg, ref), brute_magnitude(neg, ref, true), 1e-12);
    std::vector<Vector> doubled = ref, zero{Vector(5, 0.0), Vector(5, 0.0)};
    for (auto& v : doubled)
      for (double& x : v) x *= 2;
    EXPECT_NEAR(magnitude_drift(neg, ref), magnitude_drift(doubled, zero), 1e-12);
  }
}

TEST(DirectionDrift, HandExamples) {
  EXPECT_EQ(direction_drift(Matrix{{1, 0}}, Matrix{{1, 0}}), 0.0);
  EXPECT_EQ(direction_drift(Matrix{{1, 0}}, Matrix{{0, 1}}), 1.0);
  EXPECT_NEAR(direction_drift(Matrix{{1, 0}}, Matrix{{1, 1}}), 1.0 - 1.0 / std::sqrt(2.0), 1e-12);
}

TEST(DirectionDrift, ZeroInputRejected) { EXPECT_THROW(direction_drift(Matrix(1, 2), Matrix{{1, 0}}), NumericalError); }

TEST(DirectionDrift, MatchesBruteForceAndStaysInRange) {
  Rng r(3);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t m = 1 + r.below(6), n = 1 + r.below(6);
    const Matrix a = seeded_gaussian(m, n, 0, 1, r.next_u64());
    const Matrix b = seeded_gaussian(m, n, 0, 1, r.next_u64());
    const double d = direction_drift(a, b);
    EXPECT_NEAR(d, brute_direction(a, b), 1e-12);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0);
    EXPECT_EQ(direction_drift(a, a), 0.0);
  }
}

TEST(DirectionDrift, InvariantToPositiveScaling) {
  const Matrix a = seeded_gaussian(3, 4, 0, 1, 5);
  const Matrix b = seeded_gaussian(3, 4, 0, 1, 6);
  EXPECT_NEAR(direction_drift(scale(a, 7.5), scale(b, 0.01)), direction_drift(a, b), 1e-12);
}

TEST(DirectionDrift, ColumnMeanVariant) {
  const Matrix a{{1, 0}, {0, 1}};
  const Matrix b{{1, 1}, {0, 0}};
  // columns: cos 1 and cos 0
  EXPECT_DOUBLE_EQ(direction_drift(a, b, DirectionCosine::ColumnMean), 0.5);
}

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.seeds = {1};
  c.bench.d_in = 8;
  c.bench.train_per_task = 96;
  c.bench.test_per_task = 32;
  c.hidden = {8};
  c.rank = 2;
  c.drift_rounds = 3;
  c.drift_epochs = 3;
  return c;
}

}  // namespace

TEST(Observation, IdenticalDataGivesZeroDrift) {
  const ExperimentConfig cfg = small_config();
  const Environment env = make_environment(cfg, 1);
  const std::vector<TaskBatch> same{env.bench.global_train, env.bench.global_train};
  const DriftReport d = observe_drift(env.base.net, same, env.bench.global_train, env.init_adapters, 2, 2, 0.1);
  for (const auto& row : d.rows) {
    if (row.delta_m) {
      EXPECT_EQ(*row.delta_m, 0.0);
    }
    if (row.delta_d) {
      EXPECT_EQ(*row.delta_d, 0.0);
    }
  }
}

TEST(Observation, ZeroBIsAbsentAtRoundZeroAndRatiosArePositive) {
  const ExperimentConfig cfg = small_config();
  const DriftReport d = observation_experiment(cfg, 1);
  for (const auto& row : d.rows) {
    if (row.round == 0 && row.factor == LoraFactor::B) {
      EXPECT_FALSE(row.delta_m.has_value());
      EXPECT_FALSE(row.delta_d.has_value());
    }
    if (row.round > 0) {
      ASSERT_TRUE(row.delta_d.has_value());
      EXPECT_GE(*row.delta_d, 0.0);
      EXPECT_LE(*row.delta_d, 2.0);
      EXPECT_GE(*row.delta_m, 0.0);
    }
  }
  EXPECT_TRUE(ratios_valid(d));
}

TEST(Observation, RerunIsBitIdentical) {
  const ExperimentConfig cfg = small_config();
  EXPECT_EQ(to_json(observation_experiment(cfg, 4)).dump(), to_json(observation_experiment(cfg, 4)).dump());
}

TEST(Observation, SingleTaskRejected) {
  ExperimentConfig cfg = small_config();
  const Environment env = make_environment(cfg, 1);
  EXPECT_THROW(observe_drift(env.base.net, {env.bench.tasks[0].train}, env.bench.global_train, env.init_adapters, 1,
                             1, 0.1),
               std::invalid_argument);
  cfg.bench.num_tasks = 1;
  EXPECT_THROW(observation_experiment(cfg, 1), ConfigError);
}
