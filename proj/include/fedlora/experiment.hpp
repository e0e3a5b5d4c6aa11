#pragma once

// Experiment commands behind the command-line tool.
//
// Output directory layout (all text files are rewritten atomically):
//
//   <out>/.lock                     held while a command writes to <out>
//   <out>/resolved_config.txt       the fully resolved configuration
//   <out>/report.json               runs, drift observations, comparison
//   <out>/metrics.csv               long-format metrics, schema in report.hpp
//   <out>/comparison.csv            medians over seeds, one row per method
//   <out>/gridsearch.csv            rank x heads sweep (gridsearch only)
//   <out>/checkpoints/<method>-seed<k>.ckpt
//   <out>/datasets/seed<k>.fldata
//
// Configuration precedence: config file < FEDLORA_OUTPUT_DIR < --set.
// Exit codes: 0 success, 1 invalid input (config, files, lock), 2 oracle or
// acceptance failure.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedlora/config.hpp"
#include "fedlora/container.hpp"
#include "fedlora/datagen.hpp"
#include "fedlora/drift.hpp"
#include "fedlora/fed.hpp"
#include "fedlora/model.hpp"
#include "fedlora/report.hpp"
#include "fedlora/rng.hpp"

namespace fedlora {

enum ExitCode : int { kExitOk = 0, kExitInvalid = 1, kExitFailure = 2 };

inline constexpr const char* kOutputDirEnv = "FEDLORA_OUTPUT_DIR";

struct LockError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration loading

inline std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path + ": cannot open config file");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void apply_override(ExperimentConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("--set " + kv + ": expected key=value");
  apply_setting(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)), "--set");
}

inline ExperimentConfig resolve_config(const std::string& text, const std::string& source,
                                       const std::vector<std::string>& overrides, const char* env_output_dir) {
  ExperimentConfig cfg = parse_config(text, source);
  if (env_output_dir && *env_output_dir) cfg.output_dir = env_output_dir;
  for (const auto& kv : overrides) apply_override(cfg, kv);
  validate(cfg);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  return resolve_config(read_text(path), path, overrides, std::getenv(kOutputDirEnv));
}

// ---------------------------------------------------------------------------
// Files

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f << text;
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

// One writer per output directory, held for the lifetime of the object.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::filesystem::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw LockError("output directory is locked by another process: " + path_.string());
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;
  ~OutputLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Summaries

inline double median(std::vector<double> xs) {
  if (xs.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

struct ComparisonRow {
  std::string method;
  std::size_t seeds = 0;
  double global_accuracy = 0.0;  // medians over seeds
  double local_accuracy = 0.0;
  std::vector<double> task_local_accuracy;
};

inline std::vector<ComparisonRow> compare(const std::vector<RunReport>& runs) {
  std::vector<ComparisonRow> rows;
  for (Method m : {Method::Pipeline, Method::NonPipeline, Method::Baseline}) {
    std::vector<double> g, l;
    std::vector<std::vector<double>> t;
    for (const auto& r : runs) {
      if (r.method != to_string(m)) continue;
      g.push_back(r.global_accuracy);
      l.push_back(r.local_accuracy_mean);
      t.resize(r.task_local_accuracy.size());
      for (std::size_t k = 0; k < t.size(); ++k) t[k].push_back(r.task_local_accuracy[k]);
    }
    if (g.empty()) continue;
    ComparisonRow row{to_string(m), g.size(), median(g), median(l), {}};
    for (const auto& xs : t) row.task_local_accuracy.push_back(median(xs));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string comparison_csv(const std::string& digest, const std::vector<ComparisonRow>& rows) {
  std::ostringstream out;
  std::size_t tasks = 0;
  for (const auto& r : rows) tasks = std::max(tasks, r.task_local_accuracy.size());
  out << "schema_version,config_digest,method,seeds,global_accuracy_median,local_accuracy_median";
  for (std::size_t t = 0; t < tasks; ++t) out << ",task" << t << "_local_accuracy_median";
  out << '\n';
  for (const auto& r : rows) {
    out << kMetricsSchemaVersion << ',' << digest << ',' << r.method << ',' << r.seeds << ','
        << format_double(r.global_accuracy) << ',' << format_double(r.local_accuracy);
    for (std::size_t t = 0; t < tasks; ++t)
      out << ',' << (t < r.task_local_accuracy.size() ? format_double(r.task_local_accuracy[t]) : "");
    out << '\n';
  }
  return out.str();
}

inline Json to_json(const ComparisonRow& r) {
  return {{"method", r.method},
          {"seeds", r.seeds},
          {"global_accuracy_median", r.global_accuracy},
          {"local_accuracy_median", r.local_accuracy},
          {"task_local_accuracy_median", r.task_local_accuracy}};
}

// ---------------------------------------------------------------------------
// Observation experiment

inline DriftReport observation_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.bench.num_tasks < 2) throw ConfigError("num_tasks: the observation experiment needs at least two tasks");
  const Environment env = make_environment(cfg, seed);
  std::vector<TaskBatch> per_task;
  for (const auto& t : env.bench.tasks) per_task.push_back(t.train);
  return observe_drift(env.base.net, per_task, env.bench.global_train, env.init_adapters, cfg.drift_rounds,
                       cfg.drift_epochs, cfg.drift_lr, {cfg.drift_magnitude, cfg.drift_direction});
}

inline bool ratios_valid(const DriftReport& d) {
  return std::isfinite(d.direction_ratio_a_over_b) && std::isfinite(d.magnitude_ratio_b_over_a) &&
         d.direction_ratio_a_over_b > 0.0 && d.magnitude_ratio_b_over_a > 0.0;
}

// ---------------------------------------------------------------------------
// Gradient check fixtures

inline constexpr std::size_t kFdWidths[] = {5, 6, 4, 3};

struct FdFixture {
  ToyNet net;
  TaskBatch batch;
};

// A small adapted net with nonzero B, non-unit direction proxies and nonzero
// magnitude deltas, so every term of every mode's gradient is exercised.
inline FdFixture fd_fixture(GradMode mode, std::uint64_t seed) {
  const std::vector<std::size_t> widths(std::begin(kFdWidths), std::end(kFdWidths));
  FdFixture f;
  f.net = init_base(widths, derive_seed(seed, {1}));
  Rng rng(derive_seed(seed, {2}));
  for (std::size_t l = 0; l < f.net.layers.size(); ++l) {
    LoraAdapter a = init_adapter(widths[l + 1], widths[l], 2, 2, 4.0, derive_seed(seed, {3, l}));
    for (auto& h : a.heads) {
      h.b = seeded_gaussian(h.b.rows(), h.b.cols(), 0.0, 0.5, rng.next_u64());
      h.a = seeded_gaussian(h.a.rows(), h.a.cols(), 0.0, 0.5, rng.next_u64());
    }
    if (mode == GradMode::FullLora) {
      f.net.layers[l].adapter = a;
      continue;
    }
    FactoredAdapter fa = factor(decompose(a));
    for (auto& h : fa.heads) {
      for (std::size_t j = 0; j < h.a_proxy.cols(); ++j) {
        const double s = 0.5 + 1.5 * rng.uniform();
        for (std::size_t i = 0; i < h.a_proxy.rows(); ++i) h.a_proxy(i, j) *= s;
      }
      for (double& d : h.b_magnitude_delta) d = rng.gaussian(0.0, 0.3);
    }
    f.net.layers[l].adapter = fa;
  }
  const std::size_t n = 7;
  f.batch.x = seeded_gaussian(n, widths.front(), 0.0, 1.0, rng.next_u64());
  for (std::size_t i = 0; i < n; ++i) f.batch.y.push_back(rng.below(widths.back()));
  return f;
}

// Negates the magnitude gradient; a deliberately broken gradient for
// exercising the oracle's failure path.
inline Gradients sign_flipped_gradient(const ToyNet& net, const TaskBatch& batch, GradMode mode, double lambda) {
  Gradients g = backward(net, batch, mode, lambda);
  if (mode == GradMode::MagnitudeB)
    for (auto& layer : g.layers)
      for (auto& h : layer)
        for (double& v : h.b_magnitude_delta) v = -v;
  return g;
}

struct FdSummary {
  GradMode mode = GradMode::FullLora;
  std::size_t nets = 0;
  std::size_t coordinates = 0;
  std::size_t worst_net = 0;
  FdReport worst;
  bool passed = true;
};

inline std::vector<FdSummary> run_fd_checks(const ExperimentConfig& cfg, bool inject_sign_flip = false) {
  const std::uint64_t root = cfg.seeds.empty() ? 0 : cfg.seeds.front();
  std::vector<FdSummary> out;
  for (GradMode mode : {GradMode::FullLora, GradMode::DirectionA, GradMode::MagnitudeB}) {
    FdSummary s;
    s.mode = mode;
    for (std::size_t k = 0; k < cfg.fd_nets; ++k) {
      const FdFixture f = fd_fixture(mode, derive_seed(root, {0xFD, static_cast<std::uint64_t>(mode), k}));
      const FdReport r = fd_check(f.net, f.batch, mode, cfg.fd_lambda, cfg.fd_step, cfg.fd_tol,
                                  inject_sign_flip ? GradientFn(sign_flipped_gradient) : GradientFn{});
      ++s.nets;
      s.coordinates += r.coordinates;
      if (k == 0 || r.max_rel_error > s.worst.max_rel_error) {
        s.worst = r;
        s.worst_net = k;
      }
      s.passed = s.passed && r.passed;
    }
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid search

struct GridRow {
  std::size_t rank = 0;
  std::size_t heads = 0;
  std::size_t adapter_params = 0;
  std::size_t total_params = 0;
  double param_pct = 0.0;
  double local_accuracy = 0.0;   // median over seeds of the mean local accuracy
  double global_accuracy = 0.0;  // median over seeds
};

inline std::size_t adapter_parameter_count(const std::vector<std::size_t>& widths, std::size_t rank,
                                           std::size_t heads) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += heads * rank * (widths[l] + widths[l + 1]);
  return n;
}

inline std::size_t base_parameter_count(const std::vector<std::size_t>& widths) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
  return n;
}

inline std::vector<GridRow> gridsearch(const ExperimentConfig& cfg) {
  std::vector<GridRow> rows;
  const auto widths = cfg.widths();
  for (const auto& e : cfg.grid) {
    ExperimentConfig c = cfg;
    c.rank = e.rank;
    c.heads = e.heads;
    std::vector<double> local, global;
    for (auto seed : c.seeds) {
      const RunReport r = run_method(c, Method::Pipeline, seed, make_environment(c, seed));
      local.push_back(r.local_accuracy_mean);
      global.push_back(r.global_accuracy);
    }
    GridRow row;
    row.rank = e.rank;
    row.heads = e.heads;
    row.adapter_params = adapter_parameter_count(widths, e.rank, e.heads);
    row.total_params = row.adapter_params + base_parameter_count(widths);
    row.param_pct = 100.0 * static_cast<double>(row.adapter_params) / static_cast<double>(row.total_params);
    row.local_accuracy = median(local);
    row.global_accuracy = median(global);
    rows.push_back(row);
  }
  return rows;
}

inline std::string gridsearch_csv(const std::string& digest, const std::vector<GridRow>& rows) {
  std::ostringstream out;
  out << "schema_version,config_digest,rank,heads,adapter_params,total_params,param_pct,local_accuracy_median,"
         "global_accuracy_median\n";
  for (const auto& r : rows) {
    out << kMetricsSchemaVersion << ',' << digest << ',' << r.rank << ',' << r.heads << ',' << r.adapter_params << ','
        << r.total_params << ',' << format_double(r.param_pct) << ',' << format_double(r.local_accuracy) << ','
        << format_double(r.global_accuracy) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Commands

struct RunOptions {
  bool resume = false;
  // Stop (resumably) after this many checkpoints have been written; 0 = run to the end.
  std::size_t stop_after = 0;
};

inline std::vector<Method> methods_for(RunMode mode) {
  switch (mode) {
    case RunMode::Pipeline: return {Method::Pipeline};
    case RunMode::NonPipeline: return {Method::NonPipeline};
    case RunMode::Baseline: return {Method::Baseline};
    case RunMode::Drift: return {};
    case RunMode::All: return {Method::Pipeline, Method::NonPipeline, Method::Baseline};
  }
  return {};
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& out, Method m, std::uint64_t seed) {
  return out / "checkpoints" / (std::string(to_string(m)) + "-seed" + std::to_string(seed) + ".ckpt");
}

struct RunArtifacts {
  std::vector<RunReport> runs;
  std::vector<std::pair<std::uint64_t, DriftReport>> drift;
  bool interrupted = false;
};

// Executes the configured mode; returns the reports without writing the
// summary files (checkpoints and datasets are written as the run proceeds).
inline RunArtifacts execute(const ExperimentConfig& cfg, const RunOptions& opt, std::ostream& log) {
  const std::filesystem::path out = cfg.output_dir;
  RunArtifacts art;
  std::size_t written = 0;
  const auto methods = methods_for(cfg.mode);
  for (auto seed : cfg.seeds) {
    if (!methods.empty()) {
      const Environment env = make_environment(cfg, seed);
      std::filesystem::create_directories(out / "datasets");
      write_container((out / "datasets" / ("seed" + std::to_string(seed) + ".fldata")).string(),
                      to_container(env.bench));
      for (Method m : methods) {
        const auto path = checkpoint_path(out, m, seed);
        std::optional<RunCheckpoint> prior;
        if (opt.resume && std::filesystem::exists(path)) prior = checkpoint_from_container(read_container(path.string()));
        if (prior && prior->phase == Phase::Done) {
          log << to_string(m) << " seed " << seed << ": complete in checkpoint\n";
          art.runs.push_back(prior->report);
          continue;
        }
        RunHooks hooks;
        hooks.resume = prior ? &*prior : nullptr;
        hooks.on_checkpoint = [&](const RunCheckpoint& ck) {
          std::filesystem::create_directories(path.parent_path());
          write_container(path.string(), to_container(ck));
          ++written;
          if (opt.stop_after != 0 && written >= opt.stop_after && ck.phase != Phase::Done) throw Interrupted();
        };
        try {
          art.runs.push_back(run_method(cfg, m, seed, env, hooks));
        } catch (const Interrupted&) {
          log << "stopped after " << written << " checkpoints; continue with --resume\n";
          art.interrupted = true;
          return art;
        }
        const auto& r = art.runs.back();
        log << to_string(m) << " seed " << seed << ": global " << format_double(r.global_accuracy) << " local "
            << format_double(r.local_accuracy_mean) << '\n';
      }
    }
    if (cfg.mode == RunMode::Drift || cfg.mode == RunMode::All) {
      art.drift.emplace_back(seed, observation_experiment(cfg, seed));
      const auto& d = art.drift.back().second;
      log << "drift seed " << seed << ": dD(A)/dD(B) " << format_double(d.direction_ratio_a_over_b) << " dM(B)/dM(A) "
          << format_double(d.magnitude_ratio_b_over_a) << '\n';
    }
  }
  return art;
}

inline std::string metrics_csv(const ExperimentConfig& cfg, const RunArtifacts& art) {
  MetricsTable t;
  for (const auto& r : art.runs) t.add_run(r);
  for (const auto& [seed, d] : art.drift) t.add_drift(config_digest(cfg), seed, d);
  return t.str();
}

inline Json report_document(const ExperimentConfig& cfg, const RunArtifacts& art) {
  Json j;
  j["schema_version"] = kReportSchemaVersion;
  j["config_digest"] = config_digest(cfg);
  j["seeds"] = cfg.seeds;
  Json runs = Json::array();
  for (const auto& r : art.runs) runs.push_back(to_json(r));
  j["runs"] = runs;
  Json drift = Json::array();
  for (const auto& [seed, d] : art.drift) {
    Json x = to_json(d);
    x["seed"] = seed;
    drift.push_back(x);
  }
  j["drift"] = drift;
  Json cmp = Json::array();
  for (const auto& row : compare(art.runs)) cmp.push_back(to_json(row));
  j["comparison"] = cmp;
  return j;
}

inline int cmd_run(const ExperimentConfig& cfg, const RunOptions& opt, std::ostream& log) {
  const std::filesystem::path out = cfg.output_dir;
  OutputLock lock(out);
  write_text(out / "resolved_config.txt", to_text(cfg));
  const RunArtifacts art = execute(cfg, opt, log);
  if (art.interrupted) return kExitOk;
  write_text(out / "metrics.csv", metrics_csv(cfg, art));
  write_text(out / "report.json", report_document(cfg, art).dump(2) + "\n");
  if (!art.runs.empty()) write_text(out / "comparison.csv", comparison_csv(config_digest(cfg), compare(art.runs)));
  for (const auto& [seed, d] : art.drift) {
    if (!ratios_valid(d)) {
      log << "drift seed " << seed << ": ratios are not finite and positive\n";
      return kExitFailure;
    }
  }
  log << "wrote " << out.string() << '\n';
  return kExitOk;
}

inline int cmd_drift(ExperimentConfig cfg, std::ostream& log) {
  cfg.mode = RunMode::Drift;
  return cmd_run(cfg, {}, log);
}

inline int cmd_gridsearch(const ExperimentConfig& cfg, std::ostream& log) {
  const std::filesystem::path out = cfg.output_dir;
  OutputLock lock(out);
  write_text(out / "resolved_config.txt", to_text(cfg));
  const auto rows = gridsearch(cfg);
  for (const auto& r : rows) {
    log << r.rank << "x" << r.heads << ": params " << format_double(r.param_pct) << "% local "
        << format_double(r.local_accuracy) << " global " << format_double(r.global_accuracy) << '\n';
  }
  write_text(out / "gridsearch.csv", gridsearch_csv(config_digest(cfg), rows));
  return kExitOk;
}

inline int cmd_fdcheck(const ExperimentConfig& cfg, bool inject_sign_flip, std::ostream& log) {
  bool ok = true;
  for (const auto& s : run_fd_checks(cfg, inject_sign_flip)) {
    log << "[" << to_string(s.mode) << "] nets " << s.nets << " coordinates " << s.coordinates << " max_rel_error "
        << format_double(s.worst.max_rel_error) << " (tol " << format_double(cfg.fd_tol) << ")\n"
        << "  worst: net " << s.worst_net << " block " << s.worst.worst_block << " index " << s.worst.worst_index
        << " analytic " << format_double(s.worst.worst_analytic) << " numeric "
        << format_double(s.worst.worst_numeric) << '\n'
        << "  " << (s.passed ? "PASS" : "FAIL") << '\n';
    ok = ok && s.passed;
  }
  return ok ? kExitOk : kExitFailure;
}

inline int cmd_validate(const ExperimentConfig& cfg, std::ostream& log) {
  log << "config ok, digest " << config_digest(cfg) << '\n';
  return kExitOk;
}

}  // namespace fedlora
