#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "fedlora/container.hpp"
#include "fedlora/datagen.hpp"
#include "fedlora/digest.hpp"

using namespace fedlora;

namespace {

BenchmarkParams small_params(std::uint64_t seed = 3) {
  BenchmarkParams p;
  p.d_in = 8;
  p.train_per_task = 96;
  p.test_per_task = 32;
  p.seed = seed;
  return p;
}

std::string fingerprint(const Benchmark& b) { return sha256_hex(serialize(to_container(b))); }

}  // namespace

TEST(Benchmark, InvalidParametersRejected) {
  auto p = small_params();
  p.num_tasks = 1;
  EXPECT_THROW(gen_benchmark(p), std::invalid_argument);
  p = small_params();
  p.heterogeneity = 1.5;
  EXPECT_THROW(gen_benchmark(p), std::invalid_argument);
  p = small_params();
  p.classes = 1;
  EXPECT_THROW(gen_benchmark(p), std::invalid_argument);
  p = small_params();
  p.noise_std = -1;
  EXPECT_THROW(gen_benchmark(p), std::invalid_argument);
}

TEST(Benchmark, SameSeedByteIdentical) {
  EXPECT_EQ(fingerprint(gen_benchmark(small_params(5))), fingerprint(gen_benchmark(small_params(5))));
  EXPECT_NE(fingerprint(gen_benchmark(small_params(5))), fingerprint(gen_benchmark(small_params(6))));
}

TEST(Benchmark, ShapesAndClientCoverage) {
  const auto p = small_params();
  const Benchmark b = gen_benchmark(p);
  ASSERT_EQ(b.tasks.size(), p.num_tasks);
  ASSERT_EQ(b.clients.size(), p.num_tasks * p.clients_per_task);
  std::set<std::size_t> covered;
  for (const auto& c : b.clients) covered.insert(c.task_id);
  EXPECT_EQ(covered.size(), p.num_tasks);
  EXPECT_EQ(b.global_test.size(), p.num_tasks * p.test_per_task);
  EXPECT_EQ(b.global_train.size(), p.num_tasks * p.train_per_task);
  for (const auto& t : b.tasks) {
    EXPECT_EQ(t.train.size(), p.train_per_task);
    EXPECT_EQ(t.test.size(), p.test_per_task);
    EXPECT_EQ(t.train.x.cols(), p.d_in);
  }
}

TEST(Benchmark, TrainSplitIsPartitionedAcrossTaskClients) {
  const Benchmark b = gen_benchmark(small_params());
  for (const auto& t : b.tasks) {
    std::size_t rows = 0;
    for (const auto& c : b.clients)
      if (c.task_id == t.task_id) rows += c.train.size();
    EXPECT_EQ(rows, t.train.size());
  }
}

TEST(Benchmark, TrainAndTestSamplesAreDisjoint) {
  const Benchmark b = gen_benchmark(small_params());
  for (const auto& t : b.tasks) {
    std::set<std::vector<double>> train_rows;
    for (std::size_t i = 0; i < t.train.size(); ++i) {
      const auto r = t.train.x.row(i);
      train_rows.emplace(r.begin(), r.end());
    }
    for (std::size_t i = 0; i < t.test.size(); ++i) {
      const auto r = t.test.x.row(i);
      EXPECT_FALSE(train_rows.contains(std::vector<double>(r.begin(), r.end())));
    }
  }
}

TEST(Benchmark, LabelsAreBalancedWithinOne) {
  const auto p = small_params();
  const Benchmark b = gen_benchmark(p);
  for (const auto& t : b.tasks) {
    for (const TaskBatch* split : {&t.train, &t.test}) {
      std::map<std::size_t, std::size_t> counts;
      for (auto y : split->y) ++counts[y];
      const double uniform = static_cast<double>(split->size()) / static_cast<double>(p.classes);
      for (std::size_t c = 0; c < p.classes; ++c) EXPECT_LE(std::abs(counts[c] - uniform), 1.0);
    }
  }
}

TEST(Benchmark, SharedTransformCommonTaskTransformsDistinct) {
  const Benchmark b = gen_benchmark(small_params());
  for (std::size_t i = 1; i < b.tasks.size(); ++i) {
    EXPECT_EQ(b.tasks[i].shared_transform, b.tasks[0].shared_transform);
    for (std::size_t j = 0; j < i; ++j) EXPECT_NE(b.tasks[i].task_transform, b.tasks[j].task_transform);
  }
}

TEST(Benchmark, ZeroHeterogeneityMeansIdentityTaskTransforms) {
  auto p = small_params();
  p.heterogeneity = 0.0;
  const Benchmark b = gen_benchmark(p);
  for (const auto& t : b.tasks) {
    EXPECT_EQ(t.task_transform, Matrix::identity(p.d_in));
    EXPECT_EQ(frobenius_sq(t.class_shift), 0.0);
  }
}

TEST(Benchmark, RotationsAreOrthogonal) {
  const Matrix q = random_rotation(6, 9);
  EXPECT_LT(relative_frobenius_error(matmul_tn(q, q), Matrix::identity(6)), 1e-12);
}

TEST(Benchmark, ProbeFromOneTaskTransfersPoorlyUnderFullHeterogeneity) {
  BenchmarkParams p;
  p.seed = 7;
  const Benchmark b = gen_benchmark(p);
  const ToyNet probe = train_probe(b.tasks[0].train, p.d_in, p.classes, 200, 0.5, 3);
  const double own = accuracy(probe, b.tasks[0].test);
  const double other = accuracy(probe, b.tasks[1].test);
  EXPECT_GT(own - other, 0.05) << "own " << own << " other " << other;
}

TEST(Benchmark, CrossTaskTransferNonIncreasingInHeterogeneity) {
  double prev = 2.0;
  for (double h : {0.0, 0.5, 1.0}) {
    BenchmarkParams p;
    p.seed = 7;
    p.heterogeneity = h;
    const double t = cross_task_transfer(gen_benchmark(p), 200, 0.5);
    EXPECT_LE(t, prev) << "heterogeneity " << h;
    prev = t;
  }
}

TEST(Pretrain, BeatsChanceByTenPointsOnDefaultBenchmark) {
  BenchmarkParams p;
  p.seed = 1;
  const Benchmark b = gen_benchmark(p);
  const Pretrained base = pretrain_base(b, {32, 32, 32, 4}, 6, 0.5, 2);
  EXPECT_GT(base.test_accuracy, 1.0 / 4.0 + 0.10);
  for (const auto& l : base.net.layers) EXPECT_FALSE(l.adapter.has_value());
}

TEST(Pretrain, ZeroEpochsGivesRandomFrozenBase) {
  const Benchmark b = gen_benchmark(small_params());
  const Pretrained base = pretrain_base(b, {8, 6, 4}, 0, 0.5, 2);
  EXPECT_EQ(base.net.layers[0].weight, init_base({8, 6, 4}, 2).layers[0].weight);
}

TEST(Pretrain, WidthsMustMatchBenchmark) {
  const Benchmark b = gen_benchmark(small_params());
  EXPECT_THROW(pretrain_base(b, {7, 4}, 1, 0.1, 1), std::invalid_argument);
}

TEST(DatasetContainer, RoundTripIsExact) {
  const Benchmark b = gen_benchmark(small_params(11));
  const Container c = to_container(b);
  EXPECT_EQ(c.kind, "dataset");
  const Benchmark back = from_container(deserialize(serialize(c)));
  EXPECT_EQ(back.params, b.params);
  EXPECT_EQ(serialize(to_container(back)), serialize(c));
  ASSERT_EQ(back.clients.size(), b.clients.size());
  EXPECT_EQ(back.global_test.x, b.global_test.x);
  EXPECT_EQ(back.global_test.y, b.global_test.y);
}
