#pragma once

// Run artifacts: the JSON report document, the metrics CSV and the
// checkpoint container mapping.
//
// Metrics CSV, schema version 1. One observation per line:
//
//   schema_version,config_digest,method,seed,stage,round,client,task,metric,value
//
// `client` and `task` are empty when the metric is not per client/task.
// `round` is 0 for end-of-run metrics. Values use the shortest text that
// parses back to the same double; absent values are written as empty fields.
// Any change to columns or their meaning bumps kMetricsSchemaVersion.

#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedlora/container.hpp"
#include "fedlora/drift.hpp"
#include "fedlora/fed.hpp"
#include "fedlora/model.hpp"

namespace fedlora {

inline constexpr int kMetricsSchemaVersion = 1;
inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kMetricsHeader =
    "schema_version,config_digest,method,seed,stage,round,client,task,metric,value";

using Json = nlohmann::ordered_json;

namespace detail {

inline Json opt_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

inline std::optional<double> opt_from(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace detail

inline Json to_json(const RunReport& r) {
  Json j;
  j["schema_version"] = kReportSchemaVersion;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["config_digest"] = r.config_digest;
  Json cfg = Json::object();
  for (const auto& [k, v] : r.config) cfg[k] = v;
  j["config"] = cfg;
  j["pretrain_accuracy"] = r.pretrain_accuracy;
  j["stage1_rounds"] = r.stage1_rounds;
  j["stage2_rounds"] = r.stage2_rounds;
  Json rounds = Json::array();
  for (const auto& x : r.rounds) {
    rounds.push_back({{"stage", x.stage},
                      {"round", x.round},
                      {"global_loss", x.global_loss},
                      {"global_accuracy", x.global_accuracy},
                      {"participants", x.participants},
                      {"zero_direction_columns", x.zero_direction_columns},
                      {"drift_magnitude_a", detail::opt_json(x.drift_magnitude_a)},
                      {"drift_magnitude_b", detail::opt_json(x.drift_magnitude_b)},
                      {"drift_direction_a", detail::opt_json(x.drift_direction_a)},
                      {"drift_direction_b", detail::opt_json(x.drift_direction_b)}});
  }
  j["rounds"] = rounds;
  Json clients = Json::array();
  for (const auto& c : r.clients) {
    clients.push_back({{"client_id", c.client_id},
                       {"task_id", c.task_id},
                       {"local_loss", c.local_loss},
                       {"local_accuracy", c.local_accuracy},
                       {"delta_m_norm", c.delta_m_norm},
                       {"train_history", c.train_history},
                       {"personalize_history", c.personalize_history}});
  }
  j["clients"] = clients;
  j["global_loss"] = r.global_loss;
  j["global_accuracy"] = r.global_accuracy;
  j["local_accuracy_mean"] = r.local_accuracy_mean;
  j["task_local_accuracy"] = r.task_local_accuracy;
  j["complete"] = r.complete;
  return j;
}

inline RunReport run_report_from_json(const Json& j) {
  if (j.at("schema_version").get<int>() != kReportSchemaVersion) throw FormatError("report: unsupported schema version");
  RunReport r;
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_digest = j.at("config_digest").get<std::string>();
  for (const auto& [k, v] : j.at("config").items()) r.config.emplace_back(k, v.get<std::string>());
  r.pretrain_accuracy = j.at("pretrain_accuracy").get<double>();
  r.stage1_rounds = j.at("stage1_rounds").get<std::size_t>();
  r.stage2_rounds = j.at("stage2_rounds").get<std::size_t>();
  for (const auto& x : j.at("rounds")) {
    RoundRecord rr;
    rr.stage = x.at("stage").get<std::string>();
    rr.round = x.at("round").get<std::size_t>();
    rr.global_loss = x.at("global_loss").get<double>();
    rr.global_accuracy = x.at("global_accuracy").get<double>();
    rr.participants = x.at("participants").get<std::size_t>();
    rr.zero_direction_columns = x.at("zero_direction_columns").get<std::size_t>();
    rr.drift_magnitude_a = detail::opt_from(x.at("drift_magnitude_a"));
    rr.drift_magnitude_b = detail::opt_from(x.at("drift_magnitude_b"));
    rr.drift_direction_a = detail::opt_from(x.at("drift_direction_a"));
    rr.drift_direction_b = detail::opt_from(x.at("drift_direction_b"));
    r.rounds.push_back(std::move(rr));
  }
  for (const auto& c : j.at("clients")) {
    r.clients.push_back({c.at("client_id").get<std::size_t>(), c.at("task_id").get<std::size_t>(),
                         c.at("local_loss").get<double>(), c.at("local_accuracy").get<double>(),
                         c.at("delta_m_norm").get<double>(), c.at("train_history").get<std::vector<double>>(),
                         c.at("personalize_history").get<std::vector<double>>()});
  }
  r.global_loss = j.at("global_loss").get<double>();
  r.global_accuracy = j.at("global_accuracy").get<double>();
  r.local_accuracy_mean = j.at("local_accuracy_mean").get<double>();
  r.task_local_accuracy = j.at("task_local_accuracy").get<std::vector<double>>();
  r.complete = j.at("complete").get<bool>();
  return r;
}

inline Json to_json(const DriftReport& d) {
  Json j;
  j["schema_version"] = kReportSchemaVersion;
  Json rows = Json::array();
  for (const auto& r : d.rows) {
    rows.push_back({{"task", r.task},
                    {"factor", to_string(r.factor)},
                    {"layer", r.layer},
                    {"round", r.round},
                    {"delta_m", detail::opt_json(r.delta_m)},
                    {"delta_d", detail::opt_json(r.delta_d)}});
  }
  j["rows"] = rows;
  Json aggs = Json::array();
  for (const auto& a : d.aggregates) {
    aggs.push_back({{"task", a.task},
                    {"factor", to_string(a.factor)},
                    {"round", a.round},
                    {"delta_m", detail::opt_json(a.delta_m)},
                    {"delta_d", detail::opt_json(a.delta_d)}});
  }
  j["aggregates"] = aggs;
  j["mean_delta_d_a"] = d.mean_delta_d_a;
  j["mean_delta_d_b"] = d.mean_delta_d_b;
  j["mean_delta_m_a"] = d.mean_delta_m_a;
  j["mean_delta_m_b"] = d.mean_delta_m_b;
  j["direction_ratio_a_over_b"] = d.direction_ratio_a_over_b;
  j["magnitude_ratio_b_over_a"] = d.magnitude_ratio_b_over_a;
  return j;
}

inline Json to_json(const FdReport& r) {
  return {{"mode", to_string(r.mode)},
          {"coordinates", r.coordinates},
          {"max_rel_error", r.max_rel_error},
          {"worst_block", r.worst_block},
          {"worst_index", r.worst_index},
          {"worst_analytic", r.worst_analytic},
          {"worst_numeric", r.worst_numeric},
          {"passed", r.passed}};
}

// ---------------------------------------------------------------------------
// Metrics CSV

class MetricsTable {
 public:
  MetricsTable() { out_ << kMetricsHeader << '\n'; }

  struct Key {
    std::string digest;
    std::string method;
    std::uint64_t seed = 0;
  };

  void add(const Key& k, const std::string& stage, std::size_t round, std::optional<std::size_t> client,
           std::optional<std::size_t> task, const std::string& metric, std::optional<double> value) {
    out_ << kMetricsSchemaVersion << ',' << k.digest << ',' << k.method << ',' << k.seed << ',' << stage << ','
         << round << ',' << (client ? std::to_string(*client) : "") << ',' << (task ? std::to_string(*task) : "")
         << ',' << metric << ',' << (value ? format_double(*value) : "") << '\n';
  }

  void add_run(const RunReport& r) {
    const Key k{r.config_digest, r.method, r.seed};
    for (const auto& x : r.rounds) {
      add(k, x.stage, x.round, {}, {}, "global_loss", x.global_loss);
      add(k, x.stage, x.round, {}, {}, "global_accuracy", x.global_accuracy);
      add(k, x.stage, x.round, {}, {}, "participants", static_cast<double>(x.participants));
      add(k, x.stage, x.round, {}, {}, "zero_direction_columns", static_cast<double>(x.zero_direction_columns));
      if (x.stage == "stage1") {
        add(k, x.stage, x.round, {}, {}, "client_drift.A.delta_m", x.drift_magnitude_a);
        add(k, x.stage, x.round, {}, {}, "client_drift.A.delta_d", x.drift_direction_a);
        add(k, x.stage, x.round, {}, {}, "client_drift.B.delta_m", x.drift_magnitude_b);
        add(k, x.stage, x.round, {}, {}, "client_drift.B.delta_d", x.drift_direction_b);
      }
    }
    for (const auto& c : r.clients) {
      add(k, "final", 0, c.client_id, c.task_id, "local_loss", c.local_loss);
      add(k, "final", 0, c.client_id, c.task_id, "local_accuracy", c.local_accuracy);
      add(k, "final", 0, c.client_id, c.task_id, "delta_m_norm", c.delta_m_norm);
    }
    for (std::size_t t = 0; t < r.task_local_accuracy.size(); ++t)
      add(k, "final", 0, {}, t, "task_local_accuracy", r.task_local_accuracy[t]);
    add(k, "final", 0, {}, {}, "pretrain_accuracy", r.pretrain_accuracy);
    add(k, "final", 0, {}, {}, "global_loss", r.global_loss);
    add(k, "final", 0, {}, {}, "global_accuracy", r.global_accuracy);
    add(k, "final", 0, {}, {}, "local_accuracy_mean", r.local_accuracy_mean);
  }

  void add_drift(const std::string& digest, std::uint64_t seed, const DriftReport& d) {
    const Key k{digest, "drift", seed};
    for (const auto& r : d.rows) {
      const std::string base = std::string("drift.") + to_string(r.factor) + ".layer" + std::to_string(r.layer);
      add(k, "observation", r.round, {}, r.task, base + ".delta_m", r.delta_m);
      add(k, "observation", r.round, {}, r.task, base + ".delta_d", r.delta_d);
    }
    for (const auto& a : d.aggregates) {
      const std::string base = std::string("drift.") + to_string(a.factor);
      add(k, "observation", a.round, {}, a.task, base + ".delta_m", a.delta_m);
      add(k, "observation", a.round, {}, a.task, base + ".delta_d", a.delta_d);
    }
    add(k, "final", 0, {}, {}, "drift.direction_ratio_a_over_b", d.direction_ratio_a_over_b);
    add(k, "final", 0, {}, {}, "drift.magnitude_ratio_b_over_a", d.magnitude_ratio_b_over_a);
  }

  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

// ---------------------------------------------------------------------------
// Checkpoint container

namespace detail {

inline std::string head_key(const char* prefix, std::size_t l, std::size_t h, const char* what) {
  return std::string(prefix) + "/l" + std::to_string(l) + "/h" + std::to_string(h) + "/" + what;
}

inline std::string hex_u64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void put_shape(Container& c, const std::string& prefix, std::size_t l, const AdapterShape& s) {
  const std::string k = prefix + "/l" + std::to_string(l) + "/";
  c.meta[k + "d_out"] = std::to_string(s.d_out);
  c.meta[k + "d_in"] = std::to_string(s.d_in);
  c.meta[k + "rank"] = std::to_string(s.rank);
  c.meta[k + "heads"] = std::to_string(s.num_heads);
  c.meta[k + "alpha"] = format_double(s.alpha);
}

inline AdapterShape get_shape(const Container& c, const std::string& prefix, std::size_t l) {
  const std::string k = prefix + "/l" + std::to_string(l) + "/";
  return {std::stoull(c.get(k + "d_out")), std::stoull(c.get(k + "d_in")), std::stoull(c.get(k + "rank")),
          std::stoull(c.get(k + "heads")), std::stod(c.get(k + "alpha"))};
}

}  // namespace detail

inline Container to_container(const RunCheckpoint& ck) {
  Container c;
  c.kind = "checkpoint";
  c.meta["method"] = to_string(ck.method);
  c.meta["seed"] = std::to_string(ck.seed);
  c.meta["phase"] = to_string(ck.phase);
  c.meta["next_round"] = std::to_string(ck.next_round);
  c.meta["config_digest"] = ck.report.config_digest;
  for (std::size_t i = 0; i < ck.rng.size(); ++i) c.meta["rng/" + std::to_string(i)] = detail::hex_u64(ck.rng[i]);
  c.meta["report"] = to_json(ck.report).dump();
  c.meta["raw_layers"] = std::to_string(ck.global_raw.size());
  c.meta["component_layers"] = std::to_string(ck.components.size());
  c.meta["clients"] = std::to_string(ck.histories.size());
  for (std::size_t l = 0; l < ck.global_raw.size(); ++l) {
    detail::put_shape(c, "raw", l, ck.global_raw[l].shape);
    for (std::size_t h = 0; h < ck.global_raw[l].heads.size(); ++h) {
      c.tensors[detail::head_key("raw", l, h, "b")] = ck.global_raw[l].heads[h].b;
      c.tensors[detail::head_key("raw", l, h, "a")] = ck.global_raw[l].heads[h].a;
    }
  }
  for (std::size_t l = 0; l < ck.components.size(); ++l) {
    detail::put_shape(c, "comp", l, ck.components[l].shape);
    for (std::size_t h = 0; h < ck.components[l].heads.size(); ++h) {
      const auto& x = ck.components[l].heads[h];
      c.tensors[detail::head_key("comp", l, h, "b_direction")] = x.b.direction;
      c.tensors[detail::head_key("comp", l, h, "b_magnitude")] = as_row(x.b.magnitude);
      c.tensors[detail::head_key("comp", l, h, "a_direction")] = x.a.direction;
      c.tensors[detail::head_key("comp", l, h, "a_magnitude")] = as_row(x.a.magnitude);
    }
  }
  for (std::size_t i = 0; i < ck.histories.size(); ++i)
    c.tensors["history/" + std::to_string(i)] = as_row(ck.histories[i]);
  return c;
}

inline RunCheckpoint checkpoint_from_container(const Container& c) {
  if (c.kind != "checkpoint") throw FormatError("expected a checkpoint container, found '" + c.kind + "'");
  RunCheckpoint ck;
  ck.method = parse_method(c.get("method"));
  ck.seed = std::stoull(c.get("seed"));
  ck.phase = parse_phase(c.get("phase"));
  ck.next_round = std::stoull(c.get("next_round"));
  for (std::size_t i = 0; i < ck.rng.size(); ++i) ck.rng[i] = std::stoull(c.get("rng/" + std::to_string(i)), nullptr, 16);
  ck.report = run_report_from_json(Json::parse(c.get("report")));
  const std::size_t raw_layers = std::stoull(c.get("raw_layers"));
  for (std::size_t l = 0; l < raw_layers; ++l) {
    LoraAdapter a{detail::get_shape(c, "raw", l), {}};
    for (std::size_t h = 0; h < a.shape.num_heads; ++h)
      a.heads.push_back({c.tensor(detail::head_key("raw", l, h, "b")), c.tensor(detail::head_key("raw", l, h, "a"))});
    validate(a);
    ck.global_raw.push_back(std::move(a));
  }
  const std::size_t comp_layers = std::stoull(c.get("component_layers"));
  for (std::size_t l = 0; l < comp_layers; ++l) {
    DecomposedAdapter a{detail::get_shape(c, "comp", l), {}};
    for (std::size_t h = 0; h < a.shape.num_heads; ++h) {
      a.heads.push_back({{c.tensor(detail::head_key("comp", l, h, "b_direction")),
                          row_vector(c.tensor(detail::head_key("comp", l, h, "b_magnitude")))},
                         {c.tensor(detail::head_key("comp", l, h, "a_direction")),
                          row_vector(c.tensor(detail::head_key("comp", l, h, "a_magnitude")))}});
    }
    ck.components.push_back(std::move(a));
  }
  const std::size_t clients = std::stoull(c.get("clients"));
  for (std::size_t i = 0; i < clients; ++i) ck.histories.push_back(row_vector(c.tensor("history/" + std::to_string(i))));
  return ck;
}

}  // namespace fedlora
