#pragma once

// Experiment configuration: a plain-text `key = value` format.
//
//   # comment until end of line
//   mode  = all
//   seeds = 1,2,3,4,5
//   rank  = 8
//
// Keys are unique; unknown keys, duplicates and malformed values are rejected
// with a `<source>:<line>:` prefix. `mode` and `seeds` are required, every
// other key has a default. to_text() emits every key in a fixed order and
// parses back to an equal config.

#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedlora/container.hpp"
#include "fedlora/datagen.hpp"
#include "fedlora/digest.hpp"
#include "fedlora/drift.hpp"

namespace fedlora {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class RunMode { Pipeline, NonPipeline, Baseline, Drift, All };

inline const char* to_string(RunMode m) {
  switch (m) {
    case RunMode::Pipeline: return "pipeline";
    case RunMode::NonPipeline: return "nonpipeline";
    case RunMode::Baseline: return "baseline";
    case RunMode::Drift: return "drift";
    case RunMode::All: return "all";
  }
  return "?";
}

struct GridEntry {
  std::size_t rank = 0;
  std::size_t heads = 0;
  friend bool operator==(const GridEntry&, const GridEntry&) = default;
};

struct ExperimentConfig {
  RunMode mode = RunMode::All;
  std::vector<std::uint64_t> seeds;
  std::string output_dir = "runs/default";
  std::size_t threads = 1;

  BenchmarkParams bench;  // bench.seed is overwritten per run seed
  std::vector<std::size_t> hidden = {32, 32};
  std::size_t pretrain_epochs = 6;
  double pretrain_lr = 0.5;

  std::size_t rank = 8;
  std::size_t heads = 2;
  double alpha = 32.0;
  double adapter_dropout = 0.0;

  std::size_t stage1_rounds = 10;
  std::size_t stage1_epochs = 5;
  double stage1_lr = 0.1;
  std::size_t stage2_rounds = 10;
  std::size_t stage2_epochs = 5;
  double stage2_lr = 5.0;
  double lambda = 0.01;
  std::size_t stage3_epochs = 20;
  double stage3_lr = 1.0;

  double participation = 1.0;
  bool weighted_aggregation = false;

  std::size_t drift_rounds = 5;
  std::size_t drift_epochs = 5;
  double drift_lr = 0.1;
  MagnitudeReduction drift_magnitude = MagnitudeReduction::MeanAbs;
  DirectionCosine drift_direction = DirectionCosine::Flat;

  std::vector<GridEntry> grid = {{4, 1}, {8, 1}, {16, 1}, {8, 2}, {4, 4}};

  std::size_t fd_nets = 20;
  double fd_step = 1e-6;
  double fd_tol = 1e-5;
  double fd_lambda = 0.1;

  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{bench.d_in};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(bench.classes);
    return w;
  }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

inline std::size_t parse_count(const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  }
  return std::stoull(v);
}

inline double parse_real(const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(d)) throw std::invalid_argument("expected a number, got '" + v + "'");
  return d;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("expected true/false, got '" + v + "'");
}

template <class T, class F>
std::vector<T> parse_list(const std::string& v, F item) {
  std::vector<T> out;
  if (trim(v).empty()) return out;
  for (const auto& s : split(v, ',')) out.push_back(item(s));
  return out;
}

template <class T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class M>
Field count_field(M member) {
  return {[member](ExperimentConfig& c, const std::string& v) { c.*member = parse_count(v); },
          [member](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

template <class M>
Field real_field(M member) {
  return {[member](ExperimentConfig& c, const std::string& v) { c.*member = parse_real(v); },
          [member](const ExperimentConfig& c) { return format_double(c.*member); }};
}

template <class M>
Field bench_count(M member) {
  return {[member](ExperimentConfig& c, const std::string& v) { c.bench.*member = parse_count(v); },
          [member](const ExperimentConfig& c) { return std::to_string(c.bench.*member); }};
}

template <class M>
Field bench_real(M member) {
  return {[member](ExperimentConfig& c, const std::string& v) { c.bench.*member = parse_real(v); },
          [member](const ExperimentConfig& c) { return format_double(c.bench.*member); }};
}

inline RunMode parse_mode(const std::string& v) {
  for (RunMode m : {RunMode::Pipeline, RunMode::NonPipeline, RunMode::Baseline, RunMode::Drift, RunMode::All}) {
    if (v == to_string(m)) return m;
  }
  throw std::invalid_argument("mode must be one of pipeline, nonpipeline, baseline, drift, all; got '" + v + "'");
}

inline GridEntry parse_grid_entry(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw std::invalid_argument("grid entries look like RxN, got '" + s + "'");
  return {parse_count(s.substr(0, x)), parse_count(s.substr(x + 1))};
}

// Fixed key order for to_text().
inline const std::vector<std::pair<std::string, Field>>& fields() {
  using C = ExperimentConfig;
  using B = BenchmarkParams;
  static const std::vector<std::pair<std::string, Field>> table = {
      {"mode", {[](C& c, const std::string& v) { c.mode = parse_mode(v); },
                [](const C& c) { return std::string(to_string(c.mode)); }}},
      {"seeds", {[](C& c, const std::string& v) {
                   c.seeds = parse_list<std::uint64_t>(v, [](const std::string& s) { return parse_count(s); });
                 },
                 [](const C& c) {
                   return join<std::uint64_t>(c.seeds, [](const std::uint64_t& s) { return std::to_string(s); });
                 }}},
      {"output_dir", {[](C& c, const std::string& v) { c.output_dir = v; }, [](const C& c) { return c.output_dir; }}},
      {"threads", count_field(&C::threads)},
      {"num_tasks", bench_count(&B::num_tasks)},
      {"d_in", bench_count(&B::d_in)},
      {"classes", bench_count(&B::classes)},
      {"clients_per_task", bench_count(&B::clients_per_task)},
      {"heterogeneity", bench_real(&B::heterogeneity)},
      {"train_per_task", bench_count(&B::train_per_task)},
      {"test_per_task", bench_count(&B::test_per_task)},
      {"noise_std", bench_real(&B::noise_std)},
      {"class_separation", bench_real(&B::class_separation)},
      {"task_shift_std", bench_real(&B::task_shift_std)},
      {"hidden", {[](C& c, const std::string& v) {
                    c.hidden = parse_list<std::size_t>(v, [](const std::string& s) { return parse_count(s); });
                  },
                  [](const C& c) {
                    return join<std::size_t>(c.hidden, [](const std::size_t& s) { return std::to_string(s); });
                  }}},
      {"pretrain_epochs", count_field(&C::pretrain_epochs)},
      {"pretrain_lr", real_field(&C::pretrain_lr)},
      {"rank", count_field(&C::rank)},
      {"heads", count_field(&C::heads)},
      {"alpha", real_field(&C::alpha)},
      {"adapter_dropout", real_field(&C::adapter_dropout)},
      {"stage1_rounds", count_field(&C::stage1_rounds)},
      {"stage1_epochs", count_field(&C::stage1_epochs)},
      {"stage1_lr", real_field(&C::stage1_lr)},
      {"stage2_rounds", count_field(&C::stage2_rounds)},
      {"stage2_epochs", count_field(&C::stage2_epochs)},
      {"stage2_lr", real_field(&C::stage2_lr)},
      {"lambda", real_field(&C::lambda)},
      {"stage3_epochs", count_field(&C::stage3_epochs)},
      {"stage3_lr", real_field(&C::stage3_lr)},
      {"participation", real_field(&C::participation)},
      {"weighted_aggregation", {[](C& c, const std::string& v) { c.weighted_aggregation = parse_bool(v); },
                                [](const C& c) { return std::string(c.weighted_aggregation ? "true" : "false"); }}},
      {"drift_rounds", count_field(&C::drift_rounds)},
      {"drift_epochs", count_field(&C::drift_epochs)},
      {"drift_lr", real_field(&C::drift_lr)},
      {"drift_magnitude",
       {[](C& c, const std::string& v) {
          if (v == "mean_abs") c.drift_magnitude = MagnitudeReduction::MeanAbs;
          else if (v == "sum_abs") c.drift_magnitude = MagnitudeReduction::SumAbs;
          else throw std::invalid_argument("drift_magnitude must be mean_abs or sum_abs");
        },
        [](const C& c) {
          return std::string(c.drift_magnitude == MagnitudeReduction::MeanAbs ? "mean_abs" : "sum_abs");
        }}},
      {"drift_direction",
       {[](C& c, const std::string& v) {
          if (v == "flat") c.drift_direction = DirectionCosine::Flat;
          else if (v == "column_mean") c.drift_direction = DirectionCosine::ColumnMean;
          else throw std::invalid_argument("drift_direction must be flat or column_mean");
        },
        [](const C& c) { return std::string(c.drift_direction == DirectionCosine::Flat ? "flat" : "column_mean"); }}},
      {"grid", {[](C& c, const std::string& v) { c.grid = parse_list<GridEntry>(v, parse_grid_entry); },
                [](const C& c) {
                  return join<GridEntry>(c.grid, [](const GridEntry& g) {
                    return std::to_string(g.rank) + "x" + std::to_string(g.heads);
                  });
                }}},
      {"fd_nets", count_field(&C::fd_nets)},
      {"fd_step", real_field(&C::fd_step)},
      {"fd_tol", real_field(&C::fd_tol)},
      {"fd_lambda", real_field(&C::fd_lambda)},
  };
  return table;
}

inline const Field* find_field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return &f;
  }
  return nullptr;
}

}  // namespace detail

inline const std::vector<std::string>& required_keys() {
  static const std::vector<std::string> keys = {"mode", "seeds"};
  return keys;
}

inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (c.seeds.empty()) fail("seeds", "at least one seed is required");
  if (c.threads == 0) fail("threads", "must be >= 1");
  if (c.rank == 0) fail("rank", "must be >= 1");
  if (c.heads == 0) fail("heads", "must be >= 1");
  if (!(c.alpha > 0.0)) fail("alpha", "must be > 0");
  if (c.hidden.empty()) fail("hidden", "at least one hidden layer is required");
  for (auto w : c.hidden)
    if (w == 0) fail("hidden", "widths must be >= 1");
  const std::pair<const char*, double> rates[] = {{"pretrain_lr", c.pretrain_lr}, {"stage1_lr", c.stage1_lr},
                                                  {"stage2_lr", c.stage2_lr},     {"stage3_lr", c.stage3_lr},
                                                  {"drift_lr", c.drift_lr}};
  for (const auto& [k, v] : rates)
    if (!(v > 0.0)) fail(k, "learning rates must be > 0");
  if (c.lambda < 0.0) fail("lambda", "must be >= 0");
  if (!(c.participation > 0.0 && c.participation <= 1.0)) fail("participation", "must be in (0, 1]");
  if (!(c.adapter_dropout >= 0.0 && c.adapter_dropout < 1.0)) fail("adapter_dropout", "must be in [0, 1)");
  for (const auto& g : c.grid)
    if (g.rank == 0 || g.heads == 0) fail("grid", "rank and heads must be >= 1");
  if (!(c.fd_step > 0.0)) fail("fd_step", "must be > 0");
  if (!(c.fd_tol > 0.0)) fail("fd_tol", "must be > 0");
  if (c.fd_lambda < 0.0) fail("fd_lambda", "must be >= 0");
  try {
    BenchmarkParams p = c.bench;
    validate(p);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// Applies one `key=value` assignment; `where` prefixes error messages.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value,
                          const std::string& where) {
  const auto* field = detail::find_field(key);
  if (!field) throw ConfigError(where + ": unknown key '" + key + "'");
  try {
    field->set(c, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": invalid value for '" + key + "': " + e.what());
  } catch (const std::out_of_range&) {
    throw ConfigError(where + ": value out of range for '" + key + "'");
  }
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  ExperimentConfig c;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto hash = line.find('#');
    const std::string body = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = detail::trim(body.substr(0, eq));
    const std::string value = detail::trim(body.substr(eq + 1));
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError(where + ": duplicate key '" + key + "' (first set on line " + std::to_string(it->second) + ")");
    }
    seen[key] = lineno;
    apply_setting(c, key, value, where);
  }
  for (const auto& k : required_keys()) {
    if (!seen.count(k)) throw ConfigError(source + ": missing required key '" + k + "'");
  }
  return c;
}

inline std::string to_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& [k, f] : detail::fields()) out += k + " = " + f.get(c) + "\n";
  return out;
}

inline std::vector<std::pair<std::string, std::string>> to_pairs(const ExperimentConfig& c) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, f] : detail::fields()) out.emplace_back(k, f.get(c));
  return out;
}

// Digest of everything that determines results; execution-only settings
// (threads, output_dir) are excluded so serial and parallel runs of the same
// experiment carry the same digest.
inline std::string config_digest(const ExperimentConfig& c) {
  ExperimentConfig canon = c;
  canon.threads = 1;
  canon.output_dir.clear();
  return sha256_hex(to_text(canon));
}

}  // namespace fedlora
