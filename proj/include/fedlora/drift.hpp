#pragma once

// Magnitude and direction drift between a per-task adapter and a reference
// (all-task) adapter trained from the same base and initialisation.
//
//   dM = (1/k) * sum_n  r(m_task^n - m_ref^n)      r = mean |.| (or sum |.|)
//   dD = 1 - cos(V_task, V_ref)                    cos over flattened matrices
//
// where n runs over the k adapted (layer, head) units.

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedlora/datagen.hpp"
#include "fedlora/linalg.hpp"
#include "fedlora/lora.hpp"
#include "fedlora/model.hpp"

namespace fedlora {

enum class MagnitudeReduction { MeanAbs, SumAbs };
enum class DirectionCosine { Flat, ColumnMean };

inline double magnitude_unit_drift(const Vector& task, const Vector& ref, MagnitudeReduction red) {
  if (task.size() != ref.size()) throw DimensionError("magnitude_drift: vector length mismatch");
  if (task.empty()) throw DimensionError("magnitude_drift: empty magnitude vector");
  double acc = 0.0;
  for (std::size_t i = 0; i < task.size(); ++i) acc += std::abs(task[i] - ref[i]);
  return red == MagnitudeReduction::MeanAbs ? acc / static_cast<double>(task.size()) : acc;
}

inline double magnitude_drift(const std::vector<Vector>& task, const std::vector<Vector>& ref,
                              MagnitudeReduction red = MagnitudeReduction::MeanAbs) {
  if (task.empty()) throw DimensionError("magnitude_drift: need at least one layer");
  if (task.size() != ref.size()) throw DimensionError("magnitude_drift: layer count mismatch");
  double acc = 0.0;
  for (std::size_t n = 0; n < task.size(); ++n) acc += magnitude_unit_drift(task[n], ref[n], red);
  return acc / static_cast<double>(task.size());
}

inline double direction_drift(const Matrix& task, const Matrix& ref, DirectionCosine mode = DirectionCosine::Flat) {
  if (!same_shape(task, ref)) throw DimensionError("direction_drift: shape mismatch");
  // Identical inputs are exactly zero drift, independent of rounding in the cosine.
  if (task == ref) {
    if (frobenius_sq(task) == 0.0) throw NumericalError("direction_drift: zero input");
    return 0.0;
  }
  if (mode == DirectionCosine::Flat) return 1.0 - flat_cosine(task, ref);
  const Vector nt = column_norms(task);
  const Vector nr = column_norms(ref);
  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t j = 0; j < task.cols(); ++j) {
    if (nt[j] == 0.0 || nr[j] == 0.0) continue;
    double d = 0.0;
    for (std::size_t i = 0; i < task.rows(); ++i) d += task(i, j) * ref(i, j);
    acc += std::clamp(d / (nt[j] * nr[j]), -1.0, 1.0);
    ++used;
  }
  if (used == 0) throw NumericalError("direction_drift: no column has a defined cosine");
  return 1.0 - acc / static_cast<double>(used);
}

enum class LoraFactor { A, B };

inline const char* to_string(LoraFactor f) { return f == LoraFactor::A ? "A" : "B"; }

struct DriftRow {
  std::size_t task = 0;
  LoraFactor factor = LoraFactor::A;
  std::size_t layer = 0;
  std::size_t round = 0;
  // Absent while the factor is still all-zero (B at initialisation).
  std::optional<double> delta_m;
  std::optional<double> delta_d;
};

struct DriftReport {
  std::vector<DriftRow> rows;
  // Per (task, factor, round): cross-layer aggregates.
  struct Aggregate {
    std::size_t task = 0;
    LoraFactor factor = LoraFactor::A;
    std::size_t round = 0;
    std::optional<double> delta_m;
    std::optional<double> delta_d;
  };
  std::vector<Aggregate> aggregates;
  double direction_ratio_a_over_b = 0.0;  // mean dD(A) / mean dD(B)
  double magnitude_ratio_b_over_a = 0.0;  // mean dM(B) / mean dM(A)
  double mean_delta_d_a = 0.0, mean_delta_d_b = 0.0, mean_delta_m_a = 0.0, mean_delta_m_b = 0.0;
};

struct DriftOptions {
  MagnitudeReduction magnitude = MagnitudeReduction::MeanAbs;
  DirectionCosine direction = DirectionCosine::Flat;
};

namespace detail {

inline std::vector<const LoraAdapter*> raw_adapters(const ToyNet& net) {
  std::vector<const LoraAdapter*> out;
  for (const auto& l : net.layers) out.push_back(l.adapter ? std::get_if<LoraAdapter>(&*l.adapter) : nullptr);
  return out;
}

inline void attach(ToyNet& net, const std::vector<LoraAdapter>& adapters) {
  for (std::size_t l = 0; l < net.layers.size(); ++l) net.layers[l].adapter = adapters[l];
}

}  // namespace detail

// Trains one adapter set per task and one on `all_data`, all from the same
// base and initial adapters, for `rounds` rounds of `epochs` full-batch
// epochs, recording drift of every task against the all-task adapters after
// each round (round 0 = initial state).
inline DriftReport observe_drift(const ToyNet& base, const std::vector<TaskBatch>& task_data, const TaskBatch& all_data,
                                 const std::vector<LoraAdapter>& init, std::size_t rounds, std::size_t epochs,
                                 double lr, const DriftOptions& opt = {}) {
  if (task_data.size() < 2) throw std::invalid_argument("observation: need at least two tasks");
  if (init.size() != base.layers.size()) throw DimensionError("observation: one adapter per layer required");
  ToyNet all_net = base;
  detail::attach(all_net, init);
  std::vector<ToyNet> task_nets(task_data.size(), all_net);

  DriftReport report;
  double sum_d[2] = {0, 0}, sum_m[2] = {0, 0};
  std::size_t cnt_d[2] = {0, 0}, cnt_m[2] = {0, 0};

  for (std::size_t round = 0; round <= rounds; ++round) {
    if (round > 0) {
      train(all_net, all_data, GradMode::FullLora, epochs, lr);
      for (std::size_t t = 0; t < task_nets.size(); ++t) train(task_nets[t], task_data[t], GradMode::FullLora, epochs, lr);
    }
    const auto ref = detail::raw_adapters(all_net);
    for (std::size_t t = 0; t < task_nets.size(); ++t) {
      const auto cur = detail::raw_adapters(task_nets[t]);
      for (LoraFactor factor : {LoraFactor::A, LoraFactor::B}) {
        const int fi = factor == LoraFactor::A ? 0 : 1;
        std::vector<Vector> mags_task, mags_ref;
        double d_sum = 0.0;
        std::size_t d_units = 0;
        bool zero = false;
        for (std::size_t l = 0; l < cur.size(); ++l) {
          if (!cur[l]) continue;
          std::vector<Vector> layer_task, layer_ref;
          double layer_d = 0.0;
          bool layer_zero = false;
          for (std::size_t h = 0; h < cur[l]->heads.size(); ++h) {
            const Matrix& mt = factor == LoraFactor::A ? cur[l]->heads[h].a : cur[l]->heads[h].b;
            const Matrix& mr = factor == LoraFactor::A ? ref[l]->heads[h].a : ref[l]->heads[h].b;
            const auto dt = decompose(mt);
            const auto dr = decompose(mr);
            layer_task.push_back(dt.magnitude);
            layer_ref.push_back(dr.magnitude);
            if (frobenius_sq(dt.direction) == 0.0 || frobenius_sq(dr.direction) == 0.0) {
              layer_zero = true;
            } else {
              layer_d += direction_drift(dt.direction, dr.direction, opt.direction);
            }
          }
          DriftRow row{t, factor, l, round, std::nullopt, std::nullopt};
          zero = zero || layer_zero;
          if (!layer_zero) {
            row.delta_m = magnitude_drift(layer_task, layer_ref, opt.magnitude);
            row.delta_d = layer_d / static_cast<double>(cur[l]->heads.size());
            d_sum += layer_d;
            d_units += cur[l]->heads.size();
          }
          report.rows.push_back(row);
          mags_task.insert(mags_task.end(), layer_task.begin(), layer_task.end());
          mags_ref.insert(mags_ref.end(), layer_ref.begin(), layer_ref.end());
        }
        DriftReport::Aggregate agg{t, factor, round, std::nullopt, std::nullopt};
        if (!zero && d_units > 0) {
          agg.delta_m = magnitude_drift(mags_task, mags_ref, opt.magnitude);
          agg.delta_d = d_sum / static_cast<double>(d_units);
          if (round > 0) {
            sum_m[fi] += *agg.delta_m;
            sum_d[fi] += *agg.delta_d;
            ++cnt_m[fi];
            ++cnt_d[fi];
          }
        }
        report.aggregates.push_back(agg);
      }
    }
  }
  auto mean = [](double s, std::size_t n) { return n ? s / static_cast<double>(n) : 0.0; };
  report.mean_delta_m_a = mean(sum_m[0], cnt_m[0]);
  report.mean_delta_m_b = mean(sum_m[1], cnt_m[1]);
  report.mean_delta_d_a = mean(sum_d[0], cnt_d[0]);
  report.mean_delta_d_b = mean(sum_d[1], cnt_d[1]);
  report.direction_ratio_a_over_b = report.mean_delta_d_b > 0 ? report.mean_delta_d_a / report.mean_delta_d_b : 0.0;
  report.magnitude_ratio_b_over_a = report.mean_delta_m_a > 0 ? report.mean_delta_m_b / report.mean_delta_m_a : 0.0;
  return report;
}

}  // namespace fedlora
