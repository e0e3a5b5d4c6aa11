#pragma once

// Synthetic heterogeneous classification tasks and base-network pretraining.
//
// Every task shares class prototypes mu_c and a shared linear map S. Task t
// adds a rotation R_t and per-class shifts delta_{t,c}, both blended in by the
// heterogeneity knob h in [0, 1]:
//
//   z = mu_c + h * delta_{t,c} + noise * eps
//   x = S * (I + h * (R_t - I)) * z
//
// All random draws happen regardless of h, so changing h alone rescales the
// same underlying tasks and h = 0 gives identical task distributions.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedlora/container.hpp"
#include "fedlora/linalg.hpp"
#include "fedlora/model.hpp"
#include "fedlora/rng.hpp"

namespace fedlora {

struct BenchmarkParams {
  std::size_t num_tasks = 3;
  std::size_t d_in = 32;
  std::size_t classes = 4;
  std::size_t clients_per_task = 2;
  double heterogeneity = 1.0;
  std::size_t train_per_task = 512;
  std::size_t test_per_task = 128;
  double noise_std = 1.0;
  double class_separation = 0.25;
  double task_shift_std = 0.3;
  std::uint64_t seed = 1;

  friend bool operator==(const BenchmarkParams&, const BenchmarkParams&) = default;
};

struct TaskSpec {
  std::size_t task_id = 0;
  std::size_t classes = 0;
  Matrix shared_transform;
  Matrix task_transform;
  Matrix class_shift;  // classes x d_in, already scaled by h
  double noise_std = 0.0;
  std::size_t train_samples = 0;
  std::size_t test_samples = 0;
  TaskBatch train;
  TaskBatch test;
};

struct ClientSplit {
  std::size_t client_id = 0;
  std::size_t task_id = 0;
  TaskBatch train;
  TaskBatch test;
};

struct Benchmark {
  BenchmarkParams params;
  std::vector<TaskSpec> tasks;
  std::vector<ClientSplit> clients;
  TaskBatch global_test;
  TaskBatch global_train;
};

inline void validate(const BenchmarkParams& p) {
  if (p.num_tasks < 2) throw std::invalid_argument("benchmark: num_tasks must be >= 2");
  if (p.d_in == 0) throw std::invalid_argument("benchmark: d_in must be >= 1");
  if (p.classes < 2) throw std::invalid_argument("benchmark: classes must be >= 2");
  if (p.clients_per_task == 0) throw std::invalid_argument("benchmark: clients_per_task must be >= 1");
  if (!(p.heterogeneity >= 0.0 && p.heterogeneity <= 1.0)) {
    throw std::invalid_argument("benchmark: heterogeneity must be in [0, 1]");
  }
  if (p.train_per_task < p.classes * p.clients_per_task || p.test_per_task < p.classes) {
    throw std::invalid_argument("benchmark: too few samples per task");
  }
  if (p.noise_std < 0.0 || p.class_separation < 0.0 || p.task_shift_std < 0.0) {
    throw std::invalid_argument("benchmark: negative scale");
  }
}

// Orthogonal matrix from modified Gram-Schmidt on a Gaussian draw.
inline Matrix random_rotation(std::size_t n, std::uint64_t seed) {
  Matrix q = seeded_gaussian(n, n, 0.0, 1.0, seed);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double d = 0.0;
      for (std::size_t i = 0; i < n; ++i) d += q(i, j) * q(i, k);
      for (std::size_t i = 0; i < n; ++i) q(i, j) -= d * q(i, k);
    }
    double nrm = 0.0;
    for (std::size_t i = 0; i < n; ++i) nrm += q(i, j) * q(i, j);
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < n; ++i) q(i, j) /= nrm;
  }
  return q;
}

inline TaskBatch concat(const std::vector<const TaskBatch*>& parts) {
  std::size_t rows = 0;
  const std::size_t cols = parts.empty() ? 0 : parts.front()->x.cols();
  for (const auto* p : parts) rows += p->size();
  TaskBatch out{Matrix(rows, cols), {}};
  std::size_t r = 0;
  for (const auto* p : parts) {
    for (std::size_t i = 0; i < p->size(); ++i, ++r) {
      auto src = p->x.row(i);
      std::copy(src.begin(), src.end(), out.x.row(r).begin());
      out.y.push_back(p->y[i]);
    }
  }
  return out;
}

inline TaskBatch select_rows(const TaskBatch& b, const std::vector<std::size_t>& idx) {
  TaskBatch out{Matrix(idx.size(), b.x.cols()), {}};
  for (std::size_t k = 0; k < idx.size(); ++k) {
    auto src = b.x.row(idx[k]);
    std::copy(src.begin(), src.end(), out.x.row(k).begin());
    out.y.push_back(b.y[idx[k]]);
  }
  return out;
}

namespace detail {

inline TaskBatch sample_split(const TaskSpec& t, const Matrix& prototypes, std::size_t n, Rng& rng) {
  const std::size_t d = prototypes.cols();
  const Matrix map = matmul(t.shared_transform, t.task_transform);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % t.classes;
  rng.shuffle(labels);
  TaskBatch out{Matrix(n, d), labels};
  Vector z(d);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = labels[i];
    for (std::size_t k = 0; k < d; ++k) z[k] = prototypes(c, k) + t.class_shift(c, k) + rng.gaussian(0.0, t.noise_std);
    auto row = out.x.row(i);
    for (std::size_t r = 0; r < d; ++r) row[r] = dot(map.row(r), z);
  }
  return out;
}

// Client c of a task takes every clients_per_task-th training row starting at
// c; all clients of a task evaluate on the task's full test split.
inline void assign_clients(Benchmark& b) {
  std::size_t client_id = 0;
  for (const auto& t : b.tasks) {
    for (std::size_t c = 0; c < b.params.clients_per_task; ++c) {
      std::vector<std::size_t> idx;
      for (std::size_t i = c; i < t.train.size(); i += b.params.clients_per_task) idx.push_back(i);
      b.clients.push_back({client_id++, t.task_id, select_rows(t.train, idx), t.test});
    }
  }
  std::vector<const TaskBatch*> tests, trains;
  for (const auto& t : b.tasks) {
    tests.push_back(&t.test);
    trains.push_back(&t.train);
  }
  b.global_test = concat(tests);
  b.global_train = concat(trains);
}

}  // namespace detail

inline Benchmark gen_benchmark(const BenchmarkParams& p) {
  validate(p);
  const std::size_t d = p.d_in;
  const double h = p.heterogeneity;
  Benchmark b;
  b.params = p;

  const Matrix prototypes = seeded_gaussian(p.classes, d, 0.0, p.class_separation, derive_seed(p.seed, {1}));
  const Matrix shared = add(Matrix::identity(d), seeded_gaussian(d, d, 0.0, 0.3 / std::sqrt(double(d)),
                                                                   derive_seed(p.seed, {2})));
  for (std::size_t t = 0; t < p.num_tasks; ++t) {
    TaskSpec spec;
    spec.task_id = t;
    spec.classes = p.classes;
    spec.shared_transform = shared;
    const Matrix rotation = random_rotation(d, derive_seed(p.seed, {3, t}));
    spec.task_transform = add(Matrix::identity(d), scale(sub(rotation, Matrix::identity(d)), h));
    spec.class_shift = scale(seeded_gaussian(p.classes, d, 0.0, p.task_shift_std, derive_seed(p.seed, {4, t})), h);
    spec.noise_std = p.noise_std;
    spec.train_samples = p.train_per_task;
    spec.test_samples = p.test_per_task;
    Rng rng(derive_seed(p.seed, {5, t}));
    spec.train = detail::sample_split(spec, prototypes, p.train_per_task, rng);
    spec.test = detail::sample_split(spec, prototypes, p.test_per_task, rng);
    b.tasks.push_back(std::move(spec));
  }

  detail::assign_clients(b);
  return b;
}

struct Pretrained {
  ToyNet net;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

// Full-parameter training of the base on the mixed all-task pool. The result
// carries no adapters and is treated as frozen from here on.
inline Pretrained pretrain_base(const Benchmark& bench, const std::vector<std::size_t>& widths, std::size_t epochs,
                                double lr, std::uint64_t seed) {
  if (widths.empty() || widths.front() != bench.params.d_in || widths.back() != bench.params.classes) {
    throw std::invalid_argument("pretrain_base: widths must start at d_in and end at the class count");
  }
  Pretrained out{init_base(widths, seed), 0.0, 0.0};
  train_base(out.net, bench.global_train, epochs, lr);
  out.train_accuracy = accuracy(out.net, bench.global_train);
  out.test_accuracy = accuracy(out.net, bench.global_test);
  return out;
}

// Softmax-regression probe trained on one task's train split.
inline ToyNet train_probe(const TaskBatch& train, std::size_t d_in, std::size_t classes, std::size_t epochs,
                          double lr, std::uint64_t seed) {
  ToyNet probe = init_base({d_in, classes}, seed);
  train_base(probe, train, epochs, lr);
  return probe;
}

// Mean over ordered task pairs (i != j) of the probe-from-i accuracy on j.
inline double cross_task_transfer(const Benchmark& b, std::size_t epochs, double lr) {
  double total = 0.0;
  std::size_t pairs = 0;
  for (const auto& src : b.tasks) {
    const ToyNet probe = train_probe(src.train, b.params.d_in, b.params.classes, epochs, lr, b.params.seed);
    for (const auto& dst : b.tasks) {
      if (dst.task_id == src.task_id) continue;
      total += accuracy(probe, dst.test);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

inline Container to_container(const Benchmark& b) {
  Container c;
  c.kind = "dataset";
  const auto& p = b.params;
  c.meta = {{"num_tasks", std::to_string(p.num_tasks)},
            {"d_in", std::to_string(p.d_in)},
            {"classes", std::to_string(p.classes)},
            {"clients_per_task", std::to_string(p.clients_per_task)},
            {"heterogeneity", format_double(p.heterogeneity)},
            {"train_per_task", std::to_string(p.train_per_task)},
            {"test_per_task", std::to_string(p.test_per_task)},
            {"seed", std::to_string(p.seed)}};
  auto labels = [](const TaskBatch& tb) {
    Vector v(tb.y.begin(), tb.y.end());
    return as_row(v);
  };
  for (const auto& t : b.tasks) {
    const std::string k = "task" + std::to_string(t.task_id) + ".";
    c.tensors[k + "train.x"] = t.train.x;
    c.tensors[k + "train.y"] = labels(t.train);
    c.tensors[k + "test.x"] = t.test.x;
    c.tensors[k + "test.y"] = labels(t.test);
    c.tensors[k + "shared_transform"] = t.shared_transform;
    c.tensors[k + "task_transform"] = t.task_transform;
    c.tensors[k + "class_shift"] = t.class_shift;
  }
  return c;
}

// Rebuilds a benchmark from an exported container. Only the heterogeneity
// and seed strings are informational; the samples come from the payload.
inline Benchmark from_container(const Container& c) {
  if (c.kind != "dataset") throw FormatError("dataset: container kind is '" + c.kind + "'");
  Benchmark b;
  auto& p = b.params;
  p.num_tasks = std::stoull(c.get("num_tasks"));
  p.d_in = std::stoull(c.get("d_in"));
  p.classes = std::stoull(c.get("classes"));
  p.clients_per_task = std::stoull(c.get("clients_per_task"));
  p.heterogeneity = std::stod(c.get("heterogeneity"));
  p.train_per_task = std::stoull(c.get("train_per_task"));
  p.test_per_task = std::stoull(c.get("test_per_task"));
  p.seed = std::stoull(c.get("seed"));
  auto labels = [](const Matrix& m) {
    std::vector<std::size_t> y;
    for (double v : m.values()) y.push_back(static_cast<std::size_t>(v));
    return y;
  };
  for (std::size_t t = 0; t < p.num_tasks; ++t) {
    const std::string k = "task" + std::to_string(t) + ".";
    TaskSpec spec;
    spec.task_id = t;
    spec.classes = p.classes;
    spec.train = {c.tensor(k + "train.x"), labels(c.tensor(k + "train.y"))};
    spec.test = {c.tensor(k + "test.x"), labels(c.tensor(k + "test.y"))};
    spec.shared_transform = c.tensor(k + "shared_transform");
    spec.task_transform = c.tensor(k + "task_transform");
    spec.class_shift = c.tensor(k + "class_shift");
    spec.train_samples = spec.train.size();
    spec.test_samples = spec.test.size();
    b.tasks.push_back(std::move(spec));
  }
  detail::assign_clients(b);
  return b;
}

}  // namespace fedlora
