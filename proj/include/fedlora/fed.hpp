#pragma once

// Federated round engine.
//
// Three methods share one environment per seed (benchmark, pretrained base,
// initial adapters):
//
//   pipeline     stage 1 full-LoRA rounds with component-wise aggregation,
//                stage 2 direction-of-A rounds, stage 3 magnitude-of-B
//                personalisation per client
//   nonpipeline  stages 1 and 3 only
//   baseline     full-LoRA rounds with raw (B, A) averaging, no stages 2/3
//
// Within a round, clients train independently (optionally on worker
// threads); every reduction runs over clients sorted by id, so results do not
// depend on thread count or client order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fedlora/config.hpp"
#include "fedlora/datagen.hpp"
#include "fedlora/drift.hpp"
#include "fedlora/lora.hpp"
#include "fedlora/model.hpp"
#include "fedlora/rng.hpp"

namespace fedlora {

enum class Method { Pipeline, NonPipeline, Baseline };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::Pipeline: return "pipeline";
    case Method::NonPipeline: return "nonpipeline";
    case Method::Baseline: return "baseline";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::Pipeline, Method::NonPipeline, Method::Baseline})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown method '" + s + "'");
}

struct ClientState {
  std::size_t id = 0;
  std::size_t task_id = 0;
  TaskBatch train;
  TaskBatch test;
  std::vector<Adapter> adapters;  // one per layer
  std::vector<double> history;    // per-epoch objective, appended by each training call
};

struct ServerState {
  ToyNet base;  // frozen, no adapters
  std::vector<DecomposedAdapter> components;  // per layer: (A_D, A_M, B_D, B_M) per head
  std::size_t round = 0;
};

inline ToyNet with_adapters(const ToyNet& base, const std::vector<Adapter>& adapters) {
  if (adapters.size() != base.layers.size()) throw DimensionError("with_adapters: one adapter per layer required");
  ToyNet net = base;
  for (std::size_t l = 0; l < net.layers.size(); ++l) net.layers[l].adapter = adapters[l];
  return net;
}

inline std::vector<Adapter> as_adapters(const std::vector<LoraAdapter>& raw) { return {raw.begin(), raw.end()}; }

inline std::vector<Adapter> factored(const std::vector<DecomposedAdapter>& comps) {
  std::vector<Adapter> out;
  for (const auto& c : comps) out.emplace_back(factor(c));
  return out;
}

inline ToyNet global_model(const ServerState& s) { return with_adapters(s.base, factored(s.components)); }

inline ToyNet local_model(const ToyNet& base, const ClientState& c) { return with_adapters(base, c.adapters); }

// Runs fn(i) for i in [0, n) on up to `threads` workers; each index is
// handled by exactly one worker and results land in caller-owned slots.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  const std::size_t workers = std::min(threads, n);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct TrainingKnobs {
  double adapter_dropout = 0.0;
  std::uint64_t dropout_seed = 0;
  std::size_t threads = 1;
};

inline ClientState local_train_full(ClientState client, const ToyNet& base, const std::vector<LoraAdapter>& snapshot,
                                    std::size_t epochs, double lr, const TrainingKnobs& knobs = {}) {
  ToyNet net = with_adapters(base, as_adapters(snapshot));
  const auto losses =
      train(net, client.train, GradMode::FullLora, epochs, lr, {0.0, knobs.adapter_dropout, knobs.dropout_seed});
  client.history.insert(client.history.end(), losses.begin(), losses.end());
  client.adapters.clear();
  for (auto& layer : net.layers) client.adapters.push_back(std::move(*layer.adapter));
  return client;
}

struct Aggregation {
  std::vector<DecomposedAdapter> components;
  std::size_t zero_direction_columns = 0;  // columns that cancelled during averaging
};

namespace detail {

inline std::vector<std::size_t> by_id(std::span<const ClientState> clients) {
  std::vector<std::size_t> order(clients.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return clients[a].id < clients[b].id; });
  return order;
}

inline std::vector<double> mean_weights(std::span<const ClientState> clients, const std::vector<std::size_t>& order,
                                        bool by_size) {
  std::vector<double> w(order.size(), 1.0 / static_cast<double>(order.size()));
  if (by_size) {
    double total = 0.0;
    for (auto i : order) total += static_cast<double>(clients[i].train.size());
    for (std::size_t k = 0; k < order.size(); ++k) w[k] = static_cast<double>(clients[order[k]].train.size()) / total;
  }
  return w;
}

inline void check_shapes(std::span<const ClientState> clients) {
  if (clients.empty()) throw std::invalid_argument("aggregate: no clients");
  const auto& ref = clients.front().adapters;
  for (const auto& c : clients) {
    if (c.adapters.size() != ref.size()) throw DimensionError("aggregate: clients disagree on layer count");
    for (std::size_t l = 0; l < ref.size(); ++l) {
      if (!(shape_of(c.adapters[l]) == shape_of(ref[l]))) {
        throw DimensionError("aggregate: client " + std::to_string(c.id) + " adapter shape mismatch on layer " +
                             std::to_string(l));
      }
    }
  }
}

// Re-normalises averaged direction columns. Columns that cancel to zero take
// the zero-column convention (zero direction and zero magnitude).
inline std::size_t renormalize(DecomposedMatrix& d) {
  const DecomposedMatrix unit = decompose(d.direction);
  std::size_t zeros = 0;
  for (std::size_t j = 0; j < unit.magnitude.size(); ++j) {
    if (unit.magnitude[j] == 0.0) {
      zeros += d.magnitude[j] != 0.0 || frobenius_sq(d.direction) != 0.0;
      d.magnitude[j] = 0.0;
    }
  }
  d.direction = unit.direction;
  return zeros;
}

}  // namespace detail

// Unweighted (or size-weighted) mean of each client's decomposed components,
// head index aligned, followed by direction re-normalisation.
inline Aggregation aggregate_decomposed(std::span<const ClientState> clients, bool weighted = false) {
  detail::check_shapes(clients);
  const auto order = detail::by_id(clients);
  const auto w = detail::mean_weights(clients, order, weighted);
  Aggregation out;
  const std::size_t layers = clients.front().adapters.size();
  for (std::size_t l = 0; l < layers; ++l) {
    const AdapterShape shape = shape_of(clients.front().adapters[l]);
    DecomposedAdapter acc{shape, {}};
    for (std::size_t h = 0; h < shape.num_heads; ++h) {
      acc.heads.push_back({{Matrix(shape.d_out, shape.rank), Vector(shape.rank, 0.0)},
                           {Matrix(shape.rank, shape.d_in), Vector(shape.d_in, 0.0)}});
    }
    for (std::size_t k = 0; k < order.size(); ++k) {
      const DecomposedAdapter d = decompose(effective(clients[order[k]].adapters[l]));
      for (std::size_t h = 0; h < shape.num_heads; ++h) {
        auto& a = acc.heads[h];
        axpy_inplace(a.b.direction, w[k], d.heads[h].b.direction);
        axpy_inplace(a.a.direction, w[k], d.heads[h].a.direction);
        for (std::size_t j = 0; j < shape.rank; ++j) a.b.magnitude[j] += w[k] * d.heads[h].b.magnitude[j];
        for (std::size_t j = 0; j < shape.d_in; ++j) a.a.magnitude[j] += w[k] * d.heads[h].a.magnitude[j];
      }
    }
    for (auto& h : acc.heads) {
      out.zero_direction_columns += detail::renormalize(h.b);
      out.zero_direction_columns += detail::renormalize(h.a);
    }
    out.components.push_back(std::move(acc));
  }
  return out;
}

// Plain FedAvg over raw (B, A), the baseline rule.
inline std::vector<LoraAdapter> aggregate_raw(std::span<const ClientState> clients, bool weighted = false) {
  detail::check_shapes(clients);
  const auto order = detail::by_id(clients);
  const auto w = detail::mean_weights(clients, order, weighted);
  std::vector<LoraAdapter> out;
  for (std::size_t l = 0; l < clients.front().adapters.size(); ++l) {
    const AdapterShape shape = shape_of(clients.front().adapters[l]);
    LoraAdapter acc{shape, {}};
    for (std::size_t h = 0; h < shape.num_heads; ++h)
      acc.heads.push_back({Matrix(shape.d_out, shape.rank), Matrix(shape.rank, shape.d_in)});
    for (std::size_t k = 0; k < order.size(); ++k) {
      const LoraAdapter raw = effective(clients[order[k]].adapters[l]);
      for (std::size_t h = 0; h < shape.num_heads; ++h) {
        axpy_inplace(acc.heads[h].b, w[k], raw.heads[h].b);
        axpy_inplace(acc.heads[h].a, w[k], raw.heads[h].a);
      }
    }
    out.push_back(std::move(acc));
  }
  return out;
}

struct StageResult {
  ServerState server;
  std::vector<ClientState> clients;
  std::size_t zero_direction_columns = 0;
};

// One round of direction-only training of A: each participant trains the
// unnormalised proxy of A's direction with B and A's magnitudes frozen; the
// server averages the normalised proxies and re-normalises. Columns that
// cancel keep their previous direction so A's magnitudes stay untouched.
inline StageResult direction_round(const ServerState& server, std::vector<ClientState> participants,
                                   std::size_t epochs, double lr, const TrainingKnobs& knobs,
                                   const std::function<std::uint64_t(const ClientState&)>& dropout_seed = {}) {
  const auto broadcast = factored(server.components);
  parallel_for(participants.size(), knobs.threads, [&](std::size_t i) {
    auto& c = participants[i];
    ToyNet net = with_adapters(server.base, broadcast);
    const std::uint64_t ds = dropout_seed ? dropout_seed(c) : knobs.dropout_seed;
    const auto losses = train(net, c.train, GradMode::DirectionA, epochs, lr, {0.0, knobs.adapter_dropout, ds});
    c.history.insert(c.history.end(), losses.begin(), losses.end());
    c.adapters.clear();
    for (auto& layer : net.layers) c.adapters.push_back(std::move(*layer.adapter));
  });

  StageResult out{server, {}, 0};
  const auto order = detail::by_id(participants);
  const double w = 1.0 / static_cast<double>(order.size());
  for (std::size_t l = 0; l < server.components.size(); ++l) {
    auto& comp = out.server.components[l];
    for (std::size_t h = 0; h < comp.heads.size(); ++h) {
      Matrix mean(comp.heads[h].a.direction.rows(), comp.heads[h].a.direction.cols());
      for (auto k : order) {
        const auto& f = std::get<FactoredAdapter>(participants[k].adapters[l]);
        axpy_inplace(mean, w, f.heads[h].a_direction());
      }
      const DecomposedMatrix unit = decompose(mean);
      Matrix& dir = comp.heads[h].a.direction;
      for (std::size_t j = 0; j < dir.cols(); ++j) {
        if (unit.magnitude[j] == 0.0) {
          out.zero_direction_columns += comp.heads[h].a.magnitude[j] != 0.0;
          continue;
        }
        for (std::size_t i = 0; i < dir.rows(); ++i) dir(i, j) = unit.direction(i, j);
      }
    }
  }
  ++out.server.round;
  out.clients = std::move(participants);
  return out;
}

inline ServerState global_direction_stage(const ServerState& server, const std::vector<ClientState>& clients,
                                          std::size_t rounds, std::size_t epochs, double lr,
                                          const TrainingKnobs& knobs = {}) {
  ServerState s = server;
  for (std::size_t r = 0; r < rounds; ++r) s = direction_round(s, clients, epochs, lr, knobs).server;
  return s;
}

// Magnitude-only personalisation of B from the global model, under the
// regularised local objective.
inline ClientState local_personalize(ClientState client, const ServerState& server, double lambda, std::size_t epochs,
                                     double lr, const TrainingKnobs& knobs = {}) {
  ToyNet net = global_model(server);
  const auto losses =
      train(net, client.train, GradMode::MagnitudeB, epochs, lr, {lambda, knobs.adapter_dropout, knobs.dropout_seed});
  client.history.insert(client.history.end(), losses.begin(), losses.end());
  client.adapters.clear();
  for (auto& layer : net.layers) client.adapters.push_back(std::move(*layer.adapter));
  return client;
}

inline double delta_m_norm(const ClientState& c) {
  double acc = 0.0;
  for (const auto& a : c.adapters) {
    if (const auto* f = std::get_if<FactoredAdapter>(&a))
      for (const auto& h : f->heads) acc += norm_sq(h.b_magnitude_delta);
  }
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Reports

struct RoundRecord {
  std::string stage;  // "stage1" or "stage2"
  std::size_t round = 0;
  double global_loss = 0.0;
  double global_accuracy = 0.0;
  std::size_t participants = 0;
  std::size_t zero_direction_columns = 0;
  // Mean over participants of drift between each upload and the aggregate.
  std::optional<double> drift_magnitude_a, drift_magnitude_b, drift_direction_a, drift_direction_b;

  friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

struct ClientRecord {
  std::size_t client_id = 0;
  std::size_t task_id = 0;
  double local_loss = 0.0;
  double local_accuracy = 0.0;
  double delta_m_norm = 0.0;
  std::vector<double> train_history;        // stage 1 (and stage 2 for the pipeline)
  std::vector<double> personalize_history;  // stage 3

  friend bool operator==(const ClientRecord&, const ClientRecord&) = default;
};

struct RunReport {
  std::string method;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::vector<std::pair<std::string, std::string>> config;
  double pretrain_accuracy = 0.0;
  std::size_t stage1_rounds = 0;
  std::size_t stage2_rounds = 0;
  std::vector<RoundRecord> rounds;
  std::vector<ClientRecord> clients;
  double global_loss = 0.0;
  double global_accuracy = 0.0;
  double local_accuracy_mean = 0.0;
  std::vector<double> task_local_accuracy;  // mean over the task's clients
  bool complete = false;

  friend bool operator==(const RunReport&, const RunReport&) = default;
};

// ---------------------------------------------------------------------------
// Orchestration

struct Environment {
  Benchmark bench;
  Pretrained base;
  std::vector<LoraAdapter> init_adapters;
};

inline BenchmarkParams bench_params(const ExperimentConfig& cfg, std::uint64_t seed) {
  BenchmarkParams p = cfg.bench;
  p.seed = derive_seed(seed, {0xB});
  return p;
}

inline Environment make_environment(const ExperimentConfig& cfg, std::uint64_t seed) {
  Environment env;
  env.bench = gen_benchmark(bench_params(cfg, seed));
  env.base = pretrain_base(env.bench, cfg.widths(), cfg.pretrain_epochs, cfg.pretrain_lr, derive_seed(seed, {0xBA5E}));
  const auto widths = cfg.widths();
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    env.init_adapters.push_back(
        init_adapter(widths[l + 1], widths[l], cfg.rank, cfg.heads, cfg.alpha, derive_seed(seed, {0xADA, l})));
  }
  return env;
}

inline std::vector<ClientState> initial_clients(const Environment& env) {
  std::vector<ClientState> out;
  for (const auto& c : env.bench.clients) out.push_back({c.client_id, c.task_id, c.train, c.test, {}, {}});
  return out;
}

enum class Phase { Stage1, Stage2, Stage3, Done };

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::Stage1: return "stage1";
    case Phase::Stage2: return "stage2";
    case Phase::Stage3: return "stage3";
    case Phase::Done: return "done";
  }
  return "?";
}

inline Phase parse_phase(const std::string& s) {
  for (Phase p : {Phase::Stage1, Phase::Stage2, Phase::Stage3, Phase::Done})
    if (s == to_string(p)) return p;
  throw std::invalid_argument("unknown phase '" + s + "'");
}

// Everything needed to continue a run from a round boundary.
struct RunCheckpoint {
  Method method = Method::Pipeline;
  std::uint64_t seed = 0;
  Phase phase = Phase::Stage1;
  std::size_t next_round = 0;  // rounds of `phase` already completed
  Rng::State rng{};
  std::vector<LoraAdapter> global_raw;            // stage 1 global adapters
  std::vector<DecomposedAdapter> components;      // server components (pipeline, nonpipeline)
  std::vector<std::vector<double>> histories;     // per client id
  RunReport report;
};

struct Interrupted : std::runtime_error {
  Interrupted() : std::runtime_error("run interrupted at a checkpoint") {}
};

struct RunHooks {
  std::function<void(const RunCheckpoint&)> on_checkpoint;
  const RunCheckpoint* resume = nullptr;
  // Throws Interrupted after this many checkpoints have been written; 0 = never.
  std::size_t stop_after = 0;
};

namespace detail {

struct UnitDrift {
  double m_a = 0, m_b = 0, d_a = 0, d_b = 0;
  std::size_t n_a = 0, n_b = 0;
};

// Drift of each participant's upload against the aggregated components.
inline void accumulate_drift(UnitDrift& acc, const std::vector<Adapter>& upload,
                             const std::vector<DecomposedAdapter>& global) {
  for (std::size_t l = 0; l < global.size(); ++l) {
    const DecomposedAdapter mine = decompose(effective(upload[l]));
    for (std::size_t h = 0; h < global[l].heads.size(); ++h) {
      const auto& g = global[l].heads[h];
      const auto& c = mine.heads[h];
      if (frobenius_sq(c.a.direction) > 0 && frobenius_sq(g.a.direction) > 0) {
        acc.m_a += magnitude_unit_drift(c.a.magnitude, g.a.magnitude, MagnitudeReduction::MeanAbs);
        acc.d_a += direction_drift(c.a.direction, g.a.direction);
        ++acc.n_a;
      }
      if (frobenius_sq(c.b.direction) > 0 && frobenius_sq(g.b.direction) > 0) {
        acc.m_b += magnitude_unit_drift(c.b.magnitude, g.b.magnitude, MagnitudeReduction::MeanAbs);
        acc.d_b += direction_drift(c.b.direction, g.b.direction);
        ++acc.n_b;
      }
    }
  }
}

inline std::vector<std::size_t> sample_participants(std::size_t n, double fraction, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (fraction >= 1.0) return idx;
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

}  // namespace detail

class FederatedRun {
 public:
  FederatedRun(const ExperimentConfig& cfg, Method method, std::uint64_t seed, const Environment& env)
      : cfg_(cfg), method_(method), seed_(seed), env_(env), rng_(derive_seed(seed, {0x5A3})) {}

  RunReport run(const RunHooks& hooks = {}) {
    hooks_ = &hooks;
    checkpoints_ = 0;
    clients_ = initial_clients(env_);
    if (hooks.resume) {
      restore(*hooks.resume);
    } else {
      start();
    }
    if (phase_ == Phase::Stage1) stage1();
    if (phase_ == Phase::Stage2) stage2();
    if (phase_ == Phase::Stage3) stage3();
    return report_;
  }

 private:
  void start() {
    report_ = {};
    report_.method = to_string(method_);
    report_.seed = seed_;
    report_.config_digest = config_digest(cfg_);
    report_.config = to_pairs(cfg_);
    report_.pretrain_accuracy = env_.base.test_accuracy;
    report_.stage1_rounds = cfg_.stage1_rounds;
    report_.stage2_rounds = method_ == Method::Pipeline ? cfg_.stage2_rounds : 0;
    global_raw_ = env_.init_adapters;
    server_ = {env_.base.net, decompose_all(global_raw_), 0};
    phase_ = Phase::Stage1;
    next_round_ = 0;
  }

  static std::vector<DecomposedAdapter> decompose_all(const std::vector<LoraAdapter>& xs) {
    std::vector<DecomposedAdapter> out;
    for (const auto& x : xs) out.push_back(decompose(x));
    return out;
  }

  void restore(const RunCheckpoint& ck) {
    if (ck.method != method_ || ck.seed != seed_) throw std::invalid_argument("checkpoint belongs to another run");
    if (ck.report.config_digest != config_digest(cfg_)) throw std::invalid_argument("checkpoint config digest differs");
    report_ = ck.report;
    phase_ = ck.phase;
    next_round_ = ck.next_round;
    rng_ = Rng::from_state(ck.rng);
    global_raw_ = ck.global_raw;
    server_ = {env_.base.net, ck.components, 0};
    if (ck.histories.size() != clients_.size()) throw std::invalid_argument("checkpoint client count differs");
    for (std::size_t i = 0; i < clients_.size(); ++i) clients_[i].history = ck.histories[i];
  }

  void checkpoint() {
    if (hooks_->on_checkpoint) {
      RunCheckpoint ck{method_, seed_, phase_, next_round_, rng_.state(), global_raw_, server_.components, {}, report_};
      for (const auto& c : clients_) ck.histories.push_back(c.history);
      hooks_->on_checkpoint(ck);
    }
    ++checkpoints_;
    if (hooks_->stop_after != 0 && checkpoints_ >= hooks_->stop_after && phase_ != Phase::Done) throw Interrupted();
  }

  TrainingKnobs knobs(std::uint64_t stage, std::size_t round, std::size_t client) const {
    return {cfg_.adapter_dropout, derive_seed(seed_, {0xD50, stage, round, client}), 1};
  }

  ToyNet current_global() const {
    return method_ == Method::Baseline ? with_adapters(env_.base.net, as_adapters(global_raw_)) : global_model(server_);
  }

  void record_round(const char* stage, std::size_t participants, std::size_t zeros, const detail::UnitDrift* drift) {
    const ToyNet g = current_global();
    RoundRecord r;
    r.stage = stage;
    r.round = next_round_;
    r.global_loss = task_loss(g, env_.bench.global_test);
    r.global_accuracy = accuracy(g, env_.bench.global_test);
    r.participants = participants;
    r.zero_direction_columns = zeros;
    if (drift && drift->n_a) {
      r.drift_magnitude_a = drift->m_a / static_cast<double>(drift->n_a);
      r.drift_direction_a = drift->d_a / static_cast<double>(drift->n_a);
    }
    if (drift && drift->n_b) {
      r.drift_magnitude_b = drift->m_b / static_cast<double>(drift->n_b);
      r.drift_direction_b = drift->d_b / static_cast<double>(drift->n_b);
    }
    report_.rounds.push_back(std::move(r));
  }

  void stage1() {
    while (next_round_ < cfg_.stage1_rounds) {
      const auto idx = detail::sample_participants(clients_.size(), cfg_.participation, rng_);
      std::vector<ClientState> trained(idx.size());
      parallel_for(idx.size(), cfg_.threads, [&](std::size_t k) {
        const auto& c = clients_[idx[k]];
        trained[k] = local_train_full(c, env_.base.net, global_raw_, cfg_.stage1_epochs, cfg_.stage1_lr,
                                      knobs(1, next_round_, c.id));
      });
      std::size_t zeros = 0;
      if (method_ == Method::Baseline) {
        global_raw_ = aggregate_raw(trained, cfg_.weighted_aggregation);
        server_.components = decompose_all(global_raw_);
      } else {
        auto agg = aggregate_decomposed(trained, cfg_.weighted_aggregation);
        zeros = agg.zero_direction_columns;
        server_.components = std::move(agg.components);
        global_raw_.clear();
        for (const auto& c : server_.components) global_raw_.push_back(recompose(c));
      }
      detail::UnitDrift drift;
      for (const auto& c : trained) detail::accumulate_drift(drift, c.adapters, server_.components);
      for (std::size_t k = 0; k < idx.size(); ++k) clients_[idx[k]].history = std::move(trained[k].history);
      ++next_round_;
      record_round("stage1", idx.size(), zeros, &drift);
      checkpoint();
    }
    phase_ = method_ == Method::Pipeline ? Phase::Stage2 : Phase::Stage3;
    next_round_ = 0;
    if (method_ == Method::Baseline) finish_baseline();
  }

  void stage2() {
    while (next_round_ < cfg_.stage2_rounds) {
      const auto idx = detail::sample_participants(clients_.size(), cfg_.participation, rng_);
      std::vector<ClientState> part;
      for (auto i : idx) part.push_back(clients_[i]);
      TrainingKnobs k{cfg_.adapter_dropout, 0, cfg_.threads};
      const std::size_t round = next_round_;
      auto res = direction_round(server_, std::move(part), cfg_.stage2_epochs, cfg_.stage2_lr, k,
                                 [&](const ClientState& c) { return knobs(2, round, c.id).dropout_seed; });
      server_.components = std::move(res.server.components);
      for (std::size_t j = 0; j < idx.size(); ++j) clients_[idx[j]].history = std::move(res.clients[j].history);
      ++next_round_;
      record_round("stage2", idx.size(), res.zero_direction_columns, nullptr);
      checkpoint();
    }
    phase_ = Phase::Stage3;
    next_round_ = 0;
  }

  void stage3() {
    std::vector<ClientState> personalized(clients_.size());
    parallel_for(clients_.size(), cfg_.threads, [&](std::size_t i) {
      ClientState c = clients_[i];
      c.history.clear();
      personalized[i] = local_personalize(std::move(c), server_, cfg_.lambda, cfg_.stage3_epochs, cfg_.stage3_lr,
                                          knobs(3, 0, clients_[i].id));
    });
    report_.clients.clear();
    for (std::size_t i = 0; i < clients_.size(); ++i) {
      const ToyNet local = local_model(env_.base.net, personalized[i]);
      report_.clients.push_back({clients_[i].id, clients_[i].task_id, task_loss(local, clients_[i].test),
                                 accuracy(local, clients_[i].test), delta_m_norm(personalized[i]),
                                 clients_[i].history, personalized[i].history});
    }
    finish();
  }

  void finish_baseline() {
    const ToyNet g = current_global();
    report_.clients.clear();
    for (const auto& c : clients_) {
      report_.clients.push_back({c.id, c.task_id, task_loss(g, c.test), accuracy(g, c.test), 0.0, c.history, {}});
    }
    finish();
  }

  void finish() {
    const ToyNet g = current_global();
    report_.global_loss = task_loss(g, env_.bench.global_test);
    report_.global_accuracy = accuracy(g, env_.bench.global_test);
    std::vector<double> all;
    std::vector<std::vector<double>> per_task(env_.bench.tasks.size());
    for (const auto& c : report_.clients) {
      all.push_back(c.local_accuracy);
      per_task[c.task_id].push_back(c.local_accuracy);
    }
    report_.local_accuracy_mean = detail::mean_of(all);
    report_.task_local_accuracy.clear();
    for (const auto& t : per_task) report_.task_local_accuracy.push_back(detail::mean_of(t));
    report_.complete = true;
    phase_ = Phase::Done;
    checkpoint();
  }

  const ExperimentConfig& cfg_;
  Method method_;
  std::uint64_t seed_;
  const Environment& env_;
  Rng rng_;
  const RunHooks* hooks_ = nullptr;
  std::size_t checkpoints_ = 0;

  std::vector<ClientState> clients_;
  std::vector<LoraAdapter> global_raw_;
  ServerState server_;
  Phase phase_ = Phase::Stage1;
  std::size_t next_round_ = 0;
  RunReport report_;
};

inline RunReport run_method(const ExperimentConfig& cfg, Method method, std::uint64_t seed, const Environment& env,
                            const RunHooks& hooks = {}) {
  return FederatedRun(cfg, method, seed, env).run(hooks);
}

inline RunReport run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed) {
  return run_method(cfg, Method::Pipeline, seed, make_environment(cfg, seed));
}

inline RunReport run_nonpipeline(const ExperimentConfig& cfg, std::uint64_t seed) {
  return run_method(cfg, Method::NonPipeline, seed, make_environment(cfg, seed));
}

inline RunReport run_baseline_lora(const ExperimentConfig& cfg, std::uint64_t seed) {
  return run_method(cfg, Method::Baseline, seed, make_environment(cfg, seed));
}

}  // namespace fedlora
