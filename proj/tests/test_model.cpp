#include <cmath>
#include <stdexcept>

#include <gtest/gtest.h>

#include "fedlora/experiment.hpp"
#include "fedlora/model.hpp"

using namespace fedlora;

namespace {

TaskBatch random_batch(std::size_t n, std::size_t d, std::size_t classes, std::uint64_t seed) {
  Rng r(seed);
  TaskBatch b{seeded_gaussian(n, d, 0, 1, r.next_u64()), {}};
  for (std::size_t i = 0; i < n; ++i) b.y.push_back(r.below(classes));
  return b;
}

// Same network with every adapter merged into its base weight.
ToyNet merged(const ToyNet& net) {
  ToyNet out = net;
  for (auto& l : out.layers) {
    if (!l.adapter) continue;
    l.weight = add(l.weight, delta_weight(*l.adapter));
    l.adapter.reset();
  }
  return out;
}

}  // namespace

TEST(Forward, AdapterEqualsMergedWeights) {
  for (GradMode mode : {GradMode::FullLora, GradMode::DirectionA}) {
    const FdFixture f = fd_fixture(mode, 3);
    const Matrix p = forward(f.net, f.batch.x);
    const Matrix q = forward(merged(f.net), f.batch.x);
    EXPECT_LT(relative_frobenius_error(p, q), 1e-12);
  }
}

TEST(Forward, ProbabilitiesSumToOne) {
  const FdFixture f = fd_fixture(GradMode::FullLora, 4);
  const Matrix p = forward(f.net, f.batch.x);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < p.cols(); ++j) s += p(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Forward, CrossEntropyHandValue) {
  ToyNet net;
  net.layers.push_back({Matrix{{1, 0}, {0, 1}}, Vector{0, 0}, {}});
  const TaskBatch b{Matrix{{std::log(3.0), 0}}, {0}};
  // softmax([ln 3, 0]) = [3/4, 1/4]
  EXPECT_NEAR(task_loss(net, b), -std::log(0.75), 1e-15);
  EXPECT_EQ(accuracy(net, b), 1.0);
}

TEST(Validate, LabelOutOfRangeThrows) {
  const FdFixture f = fd_fixture(GradMode::FullLora, 5);
  TaskBatch b = f.batch;
  b.y[0] = 99;
  EXPECT_THROW(task_loss(f.net, b), std::invalid_argument);
}

TEST(Backward, WrongAdapterKindThrows) {
  const FdFixture raw = fd_fixture(GradMode::FullLora, 6);
  const FdFixture fac = fd_fixture(GradMode::MagnitudeB, 6);
  EXPECT_THROW(backward(raw.net, raw.batch, GradMode::DirectionA), std::invalid_argument);
  EXPECT_THROW(backward(fac.net, fac.batch, GradMode::FullLora), std::invalid_argument);
}

class GradientOracle : public ::testing::TestWithParam<GradMode> {};

TEST_P(GradientOracle, AnalyticMatchesCentralDifferences) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const FdFixture f = fd_fixture(GetParam(), derive_seed(100, {s}));
    const FdReport r = fd_check(f.net, f.batch, GetParam(), 0.1, 1e-6, 1e-5);
    EXPECT_TRUE(r.passed) << "seed " << s << " max rel error " << r.max_rel_error;
    EXPECT_GT(r.coordinates, 0u);
  }
}

TEST_P(GradientOracle, DiscrepancyShrinksQuadraticallyWithStep) {
  // Central differences carry an O(h^2) error against the true gradient, so a
  // correct analytic gradient sees the discrepancy fall ~100x per decade of h.
  const FdFixture f = fd_fixture(GetParam(), 77);
  const double coarse = fd_check(f.net, f.batch, GetParam(), 0.1, 1e-2, 1.0).max_rel_error;
  const double fine = fd_check(f.net, f.batch, GetParam(), 0.1, 1e-3, 1.0).max_rel_error;
  ASSERT_GT(fine, 0.0);
  EXPECT_GT(coarse / fine, 30.0);
  EXPECT_LT(coarse / fine, 300.0);
}

INSTANTIATE_TEST_SUITE_P(Modes, GradientOracle,
                         ::testing::Values(GradMode::FullLora, GradMode::DirectionA, GradMode::MagnitudeB),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Backward, FactoredGradientsAreProjectionsOfRawGradients) {
  const FdFixture f = fd_fixture(GradMode::MagnitudeB, 12);
  const double lambda = 0.3;
  ToyNet raw = f.net;
  for (auto& l : raw.layers) l.adapter = effective(*l.adapter);
  const Gradients gr = backward(raw, f.batch, GradMode::FullLora);
  const Gradients gm = backward(f.net, f.batch, GradMode::MagnitudeB, lambda);
  const Gradients gd = backward(f.net, f.batch, GradMode::DirectionA);
  for (std::size_t l = 0; l < f.net.layers.size(); ++l) {
    const auto& fa = std::get<FactoredAdapter>(*f.net.layers[l].adapter);
    for (std::size_t h = 0; h < fa.heads.size(); ++h) {
      const auto& head = fa.heads[h];
      // d/d(dm_j) = <B_dir[:, j], dL/dB[:, j]> + lambda dm_j
      for (std::size_t j = 0; j < fa.shape.rank; ++j) {
        double expect = lambda * head.b_magnitude_delta[j];
        for (std::size_t i = 0; i < head.b_direction.rows(); ++i)
          expect += head.b_direction(i, j) * gr.layers[l][h].b(i, j);
        EXPECT_NEAR(gm.layers[l][h].b_magnitude_delta[j], expect, 1e-12);
      }
      // d/dV_j = m_j (I - u u^T) dL/dA[:, j] / |V_j|
      const Vector rho = column_norms(head.a_proxy);
      for (std::size_t j = 0; j < head.a_proxy.cols(); ++j) {
        double ug = 0;
        for (std::size_t i = 0; i < head.a_proxy.rows(); ++i)
          ug += head.a_proxy(i, j) / rho[j] * gr.layers[l][h].a(i, j);
        for (std::size_t i = 0; i < head.a_proxy.rows(); ++i) {
          const double expect =
              head.a_magnitude[j] * (gr.layers[l][h].a(i, j) - head.a_proxy(i, j) / rho[j] * ug) / rho[j];
          EXPECT_NEAR(gd.layers[l][h].a_proxy(i, j), expect, 1e-12);
        }
      }
    }
  }
}

TEST(Backward, DirectionGradientIsOrthogonalToProxyColumns) {
  const FdFixture f = fd_fixture(GradMode::DirectionA, 13);
  const Gradients g = backward(f.net, f.batch, GradMode::DirectionA);
  for (std::size_t l = 0; l < f.net.layers.size(); ++l) {
    const auto& fa = std::get<FactoredAdapter>(*f.net.layers[l].adapter);
    for (std::size_t h = 0; h < fa.heads.size(); ++h) {
      const Matrix& v = fa.heads[h].a_proxy;
      const Matrix& gv = g.layers[l][h].a_proxy;
      for (std::size_t j = 0; j < v.cols(); ++j) {
        double d = 0;
        for (std::size_t i = 0; i < v.rows(); ++i) d += v(i, j) * gv(i, j);
        EXPECT_NEAR(d, 0.0, 1e-12);
      }
    }
  }
}

TEST(LocalLoss, ExplicitDeltaOverloadMatchesStoredDeltas) {
  const FdFixture f = fd_fixture(GradMode::MagnitudeB, 14);
  std::vector<Vector> deltas;
  double sq = 0;
  for (const auto& l : f.net.layers) {
    Vector layer;
    for (const auto& h : std::get<FactoredAdapter>(*l.adapter).heads) {
      layer.insert(layer.end(), h.b_magnitude_delta.begin(), h.b_magnitude_delta.end());
      sq += norm_sq(h.b_magnitude_delta);
    }
    deltas.push_back(layer);
  }
  EXPECT_DOUBLE_EQ(local_loss(f.net, f.batch, 0.7), local_loss(f.net, f.batch, deltas, 0.7));
  EXPECT_NEAR(local_loss(f.net, f.batch, 0.7) - task_loss(f.net, f.batch), 0.35 * sq, 1e-12);
}

TEST(Train, ZeroEpochsLeaveParametersUnchanged) {
  FdFixture f = fd_fixture(GradMode::FullLora, 15);
  const ToyNet before = f.net;
  EXPECT_TRUE(train(f.net, f.batch, GradMode::FullLora, 0, 0.1).empty());
  EXPECT_EQ(digest(f.net, ParamGroup::RawA), digest(before, ParamGroup::RawA));
  EXPECT_EQ(digest(f.net, ParamGroup::RawB), digest(before, ParamGroup::RawB));
}

TEST(Train, NegativeLearningRateRejected) {
  FdFixture f = fd_fixture(GradMode::FullLora, 16);
  EXPECT_THROW(train(f.net, f.batch, GradMode::FullLora, 1, -0.1), std::invalid_argument);
}

TEST(Train, SmallStepsDecreaseLossInEveryMode) {
  for (GradMode mode : {GradMode::FullLora, GradMode::DirectionA, GradMode::MagnitudeB}) {
    FdFixture f = fd_fixture(mode, 17);
    const auto losses = train(f.net, f.batch, mode, 30, 0.01, {0.1, 0.0, 0});
    for (std::size_t e = 1; e < losses.size(); ++e) EXPECT_LE(losses[e], losses[e - 1] + 1e-12) << to_string(mode);
  }
}

TEST(Train, ModesTouchOnlyTheirTrainableSet) {
  {
    FdFixture f = fd_fixture(GradMode::DirectionA, 18);
    const ToyNet before = f.net;
    train(f.net, f.batch, GradMode::DirectionA, 5, 0.1);
    EXPECT_NE(digest(f.net, ParamGroup::ADirection), digest(before, ParamGroup::ADirection));
    for (auto g : {ParamGroup::Base, ParamGroup::AMagnitude, ParamGroup::BDirection, ParamGroup::BMagnitude,
                   ParamGroup::BMagnitudeDelta})
      EXPECT_EQ(digest(f.net, g), digest(before, g));
  }
  {
    FdFixture f = fd_fixture(GradMode::MagnitudeB, 18);
    const ToyNet before = f.net;
    train(f.net, f.batch, GradMode::MagnitudeB, 5, 0.1, {0.01, 0.0, 0});
    EXPECT_NE(digest(f.net, ParamGroup::BMagnitudeDelta), digest(before, ParamGroup::BMagnitudeDelta));
    for (auto g : {ParamGroup::Base, ParamGroup::AMagnitude, ParamGroup::ADirection, ParamGroup::BDirection,
                   ParamGroup::BMagnitude})
      EXPECT_EQ(digest(f.net, g), digest(before, g));
  }
}

TEST(Dropout, ZeroRateIsIdentityAndTrainingIsSeeded) {
  FdFixture a = fd_fixture(GradMode::FullLora, 19);
  FdFixture b = a;
  FdFixture c = a;
  train(a.net, a.batch, GradMode::FullLora, 5, 0.1, {0.0, 0.5, 42});
  train(b.net, b.batch, GradMode::FullLora, 5, 0.1, {0.0, 0.5, 42});
  train(c.net, c.batch, GradMode::FullLora, 5, 0.1, {0.0, 0.5, 43});
  EXPECT_EQ(digest(a.net, ParamGroup::RawA), digest(b.net, ParamGroup::RawA));
  EXPECT_NE(digest(a.net, ParamGroup::RawA), digest(c.net, ParamGroup::RawA));

  FdFixture d = fd_fixture(GradMode::FullLora, 19);
  const Gradients g0 = backward(d.net, d.batch, GradMode::FullLora);
  const Gradients g1 = backward(d.net, d.batch, GradMode::FullLora, 0.0, {0.0, 1234});
  EXPECT_EQ(g0.loss, g1.loss);
}

TEST(Dropout, GradientMatchesFiniteDifferencesOfMaskedObjective) {
  // With a fixed mask the objective is smooth in the adapter parameters.
  const FdFixture f = fd_fixture(GradMode::FullLora, 20);
  const ForwardOptions fo{0.3, 5};
  const Gradients g = backward(f.net, f.batch, GradMode::FullLora, 0.0, fo);
  ToyNet probe = f.net;
  auto params = trainable_blocks(probe, GradMode::FullLora);
  const auto grads = gradient_blocks(g);
  const double h = 1e-6;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      const double saved = params[b][i];
      params[b][i] = saved + h;
      const double up = backward(probe, f.batch, GradMode::FullLora, 0.0, fo).loss;
      params[b][i] = saved - h;
      const double down = backward(probe, f.batch, GradMode::FullLora, 0.0, fo).loss;
      params[b][i] = saved;
      EXPECT_LE(gradient_rel_error(grads[b][i], (up - down) / (2 * h)), 1e-5);
    }
  }
}

TEST(FdCheck, InjectedSignFlipFails) {
  const FdFixture f = fd_fixture(GradMode::MagnitudeB, 21);
  const FdReport r = fd_check(f.net, f.batch, GradMode::MagnitudeB, 0.1, 1e-6, 1e-5, sign_flipped_gradient);
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_rel_error, 2.0, 1e-3);
}

TEST(FdCheck, RelativeErrorUsesScaleFloor) {
  EXPECT_DOUBLE_EQ(gradient_rel_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(gradient_rel_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(gradient_rel_error(0.0, 1e-9), 1e-9 / kFdScaleFloor);
}

TEST(Base, PretrainingReducesLossAndRejectsAdapters) {
  const TaskBatch b = random_batch(40, 4, 3, 8);
  ToyNet net = init_base({4, 8, 3}, 1);
  const auto losses = train_base(net, b, 50, 0.5);
  EXPECT_LT(losses.back(), losses.front());
  net.layers[0].adapter = init_adapter(8, 4, 2, 1, 2.0, 1);
  EXPECT_THROW(train_base(net, b, 1, 0.1), std::invalid_argument);
}
