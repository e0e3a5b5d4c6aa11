#pragma once

// A small frozen-base MLP with LoRA adapters on every linear layer.
//
// Layer l computes z = h * (W0 + dW)^T + b, with tanh between layers and a
// softmax over the final logits. dW is the adapter delta. Adapters come in
// two storage forms:
//
//   LoraAdapter      raw (B, A) heads, trained in GradMode::FullLora
//   FactoredAdapter  B = B_dir * diag(B_mag + dm), A = norm(V) * diag(A_mag),
//                    trained either on V (GradMode::DirectionA) or on dm
//                    (GradMode::MagnitudeB)
//
// Gradients are hand-derived by the chain rule through exactly this forward
// composition; fd_check() is the independent oracle for them.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fedlora/digest.hpp"
#include "fedlora/linalg.hpp"
#include "fedlora/lora.hpp"
#include "fedlora/rng.hpp"

namespace fedlora {

enum class GradMode { FullLora, DirectionA, MagnitudeB };

inline const char* to_string(GradMode m) {
  switch (m) {
    case GradMode::FullLora: return "full_lora";
    case GradMode::DirectionA: return "direction_a";
    case GradMode::MagnitudeB: return "magnitude_b";
  }
  return "?";
}

struct FactoredHead {
  Matrix b_direction;
  Vector b_magnitude;
  Vector b_magnitude_delta;
  Matrix a_proxy;  // unnormalised; only its column directions matter
  Vector a_magnitude;

  Vector b_magnitude_total() const {
    Vector m = b_magnitude;
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += b_magnitude_delta[j];
    return m;
  }
  Matrix a_direction() const { return normalize_columns(a_proxy); }
  Matrix effective_b() const { return scale_columns(b_direction, b_magnitude_total()); }
  Matrix effective_a() const { return scale_columns(a_direction(), a_magnitude); }

  friend bool operator==(const FactoredHead&, const FactoredHead&) = default;
};

using FactoredAdapter = BasicAdapter<FactoredHead>;

inline FactoredAdapter factor(const DecomposedAdapter& d) {
  FactoredAdapter out{d.shape, {}};
  for (const auto& h : d.heads) {
    out.heads.push_back({h.b.direction, h.b.magnitude, Vector(h.b.magnitude.size(), 0.0), h.a.direction,
                         h.a.magnitude});
  }
  return out;
}

// Raw (B, A) pairs the factored form currently evaluates to.
inline LoraAdapter effective(const FactoredAdapter& f) {
  LoraAdapter out{f.shape, {}};
  for (const auto& h : f.heads) out.heads.push_back({h.effective_b(), h.effective_a()});
  return out;
}

using Adapter = std::variant<LoraAdapter, FactoredAdapter>;

inline const AdapterShape& shape_of(const Adapter& a) {
  return std::visit([](const auto& x) -> const AdapterShape& { return x.shape; }, a);
}

inline LoraAdapter effective(const Adapter& a) {
  if (const auto* raw = std::get_if<LoraAdapter>(&a)) return *raw;
  return effective(std::get<FactoredAdapter>(a));
}

inline Matrix delta_weight(const Adapter& a) { return delta_weight(effective(a)); }

struct Layer {
  Matrix weight;  // frozen W0, d_out x d_in
  Vector bias;    // frozen
  std::optional<Adapter> adapter;
};

struct ToyNet {
  std::vector<Layer> layers;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  std::size_t num_classes() const { return layers.empty() ? 0 : layers.back().weight.rows(); }
};

struct TaskBatch {
  Matrix x;                    // batch x d_in
  std::vector<std::size_t> y;  // class indices

  std::size_t size() const { return y.size(); }
};

inline void validate(const ToyNet& net) {
  if (net.layers.empty()) throw DimensionError("net: no layers");
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    if (layer.bias.size() != layer.weight.rows()) throw DimensionError("net: bias length mismatch");
    if (l > 0 && layer.weight.cols() != net.layers[l - 1].weight.rows()) {
      throw DimensionError("net: layer " + std::to_string(l) + " input width mismatch");
    }
    if (layer.adapter) {
      const auto& s = shape_of(*layer.adapter);
      if (s.d_out != layer.weight.rows() || s.d_in != layer.weight.cols()) {
        throw DimensionError("net: adapter shape mismatch on layer " + std::to_string(l));
      }
    }
  }
}

inline void validate(const ToyNet& net, const TaskBatch& batch) {
  validate(net);
  if (batch.size() == 0) throw DimensionError("batch: empty");
  if (batch.x.rows() != batch.size()) throw DimensionError("batch: x rows != label count");
  if (batch.x.cols() != net.input_dim()) {
    throw DimensionError("batch: x has " + std::to_string(batch.x.cols()) + " features, net expects " +
                         std::to_string(net.input_dim()));
  }
  for (std::size_t c : batch.y) {
    if (c >= net.num_classes()) throw DimensionError("batch: class index out of range");
  }
}

struct ForwardOptions {
  // Inverted dropout on the adapter branch input; 0 disables it.
  double adapter_dropout = 0.0;
  std::uint64_t dropout_seed = 0;
};

namespace detail {

struct LayerTrace {
  Matrix input;          // h
  Matrix mask;           // dropout factors (0 or 1/keep); empty when dropout is off
  Matrix adapter_input;  // input * mask
  Matrix delta;          // dW, empty when the layer has no adapter
  Matrix output;         // tanh(z) for hidden layers, logits for the last one
};

struct Trace {
  std::vector<LayerTrace> layers;
  Matrix probs;
};

inline void add_bias(Matrix& z, const Vector& bias) {
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto r = z.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) sum += (p(i, j) = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < z.size(); ++j) p(i, j) /= sum;
  }
  return p;
}

inline Trace run_forward(const ToyNet& net, const Matrix& x, const ForwardOptions& opt) {
  if (x.cols() != net.input_dim()) throw DimensionError("forward: input width mismatch");
  Trace t;
  Matrix h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    LayerTrace lt;
    lt.input = h;
    Matrix z;
    if (layer.adapter) {
      lt.delta = delta_weight(*layer.adapter);
      if (opt.adapter_dropout > 0.0) {
        Rng rng(derive_seed(opt.dropout_seed, {l}));
        const double keep = 1.0 - opt.adapter_dropout;
        lt.mask = Matrix(h.rows(), h.cols());
        for (double& v : lt.mask.values()) v = rng.uniform() < keep ? 1.0 / keep : 0.0;
        lt.adapter_input = h;
        auto ai = lt.adapter_input.values();
        auto mk = lt.mask.values();
        for (std::size_t k = 0; k < ai.size(); ++k) ai[k] *= mk[k];
        z = add(matmul_nt(h, layer.weight), matmul_nt(lt.adapter_input, lt.delta));
      } else {
        z = matmul_nt(h, add(layer.weight, lt.delta));
      }
    } else {
      z = matmul_nt(h, layer.weight);
    }
    add_bias(z, layer.bias);
    const bool last = l + 1 == net.layers.size();
    if (!last) {
      for (double& v : z.values()) v = std::tanh(v);
    }
    lt.output = z;
    h = std::move(z);
    t.layers.push_back(std::move(lt));
  }
  t.probs = softmax_rows(h);
  return t;
}

inline double cross_entropy(const Matrix& logits, const std::vector<std::size_t>& y) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    total += mx + std::log(sum) - z[y[i]];
  }
  return total / static_cast<double>(logits.rows());
}

struct Backprop {
  double task_loss = 0.0;
  std::vector<Matrix> d_weight;  // dL/dW_eff, also dL/dW0
  std::vector<Matrix> d_delta;   // dL/d(dW); differs from d_weight only under dropout
  std::vector<Vector> d_bias;
};

inline Backprop backprop(const ToyNet& net, const TaskBatch& batch, const ForwardOptions& opt) {
  const Trace t = run_forward(net, batch.x, opt);
  const std::size_t n_layers = net.layers.size();
  Backprop bp;
  bp.task_loss = cross_entropy(t.layers.back().output, batch.y);
  bp.d_weight.resize(n_layers);
  bp.d_delta.resize(n_layers);
  bp.d_bias.resize(n_layers);

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  Matrix dz = t.probs;
  for (std::size_t i = 0; i < dz.rows(); ++i) {
    dz(i, batch.y[i]) -= 1.0;
    for (double& v : dz.row(i)) v *= inv_n;
  }

  for (std::size_t l = n_layers; l-- > 0;) {
    const auto& layer = net.layers[l];
    const auto& lt = t.layers[l];
    bp.d_weight[l] = matmul_tn(dz, lt.input);
    if (layer.adapter) {
      bp.d_delta[l] = lt.adapter_input.empty() ? bp.d_weight[l] : matmul_tn(dz, lt.adapter_input);
    }
    Vector db(dz.cols(), 0.0);
    for (std::size_t i = 0; i < dz.rows(); ++i)
      for (std::size_t j = 0; j < dz.cols(); ++j) db[j] += dz(i, j);
    bp.d_bias[l] = std::move(db);
    if (l == 0) break;

    Matrix dh;
    if (!layer.adapter) {
      dh = matmul(dz, layer.weight);
    } else if (lt.adapter_input.empty()) {
      dh = matmul(dz, add(layer.weight, lt.delta));
    } else {
      dh = matmul(dz, layer.weight);
      const Matrix through_adapter = matmul(dz, lt.delta);
      auto dv = dh.values();
      auto av = through_adapter.values();
      auto mk = lt.mask.values();
      for (std::size_t k = 0; k < dv.size(); ++k) dv[k] += av[k] * mk[k];
    }
    const auto& act = t.layers[l - 1].output;
    auto dv = dh.values();
    auto av = act.values();
    for (std::size_t k = 0; k < dv.size(); ++k) dv[k] *= 1.0 - av[k] * av[k];
    dz = std::move(dh);
  }
  return bp;
}

}  // namespace detail

inline Matrix forward(const ToyNet& net, const Matrix& x) { return detail::run_forward(net, x, {}).probs; }

inline double task_loss(const ToyNet& net, const TaskBatch& batch) {
  validate(net, batch);
  return detail::cross_entropy(detail::run_forward(net, batch.x, {}).layers.back().output, batch.y);
}

inline double accuracy(const ToyNet& net, const TaskBatch& batch) {
  validate(net, batch);
  const Matrix p = forward(net, batch.x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto r = p.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < r.size(); ++j)
      if (r[j] > r[best]) best = j;
    hits += best == batch.y[i];
  }
  return static_cast<double>(hits) / static_cast<double>(p.rows());
}

// Sum over adapted layers and heads of ||dm||^2.
inline double magnitude_delta_sq(const ToyNet& net) {
  double acc = 0.0;
  for (const auto& layer : net.layers) {
    if (!layer.adapter) continue;
    if (const auto* f = std::get_if<FactoredAdapter>(&*layer.adapter)) {
      for (const auto& h : f->heads) acc += norm_sq(h.b_magnitude_delta);
    }
  }
  return acc;
}

inline double local_loss(const ToyNet& net, const TaskBatch& batch, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("local_loss: lambda must be >= 0");
  return task_loss(net, batch) + 0.5 * lambda * magnitude_delta_sq(net);
}

// delta_m holds one vector per adapted layer, heads concatenated (head-major),
// added to that layer's B magnitudes. Factored adapters are required.
inline double local_loss(const ToyNet& net, const TaskBatch& batch, const std::vector<Vector>& delta_m,
                         double lambda) {
  ToyNet shifted = net;
  std::size_t k = 0;
  for (auto& layer : shifted.layers) {
    if (!layer.adapter) continue;
    auto* f = std::get_if<FactoredAdapter>(&*layer.adapter);
    if (!f) throw std::invalid_argument("local_loss: layer adapter is not factored");
    if (k >= delta_m.size()) throw DimensionError("local_loss: too few magnitude deltas");
    const Vector& dm = delta_m[k++];
    if (dm.size() != f->shape.num_heads * f->shape.rank) throw DimensionError("local_loss: delta length");
    for (std::size_t h = 0; h < f->heads.size(); ++h)
      for (std::size_t j = 0; j < f->shape.rank; ++j) f->heads[h].b_magnitude_delta[j] = dm[h * f->shape.rank + j];
  }
  if (k != delta_m.size()) throw DimensionError("local_loss: too many magnitude deltas");
  return local_loss(shifted, batch, lambda);
}

struct HeadGradient {
  Matrix b;                    // FullLora
  Matrix a;                    // FullLora
  Matrix a_proxy;              // DirectionA
  Vector b_magnitude_delta;    // MagnitudeB
};

struct Gradients {
  GradMode mode = GradMode::FullLora;
  double loss = 0.0;  // the mode's objective at the current parameters
  std::vector<std::vector<HeadGradient>> layers;
};

namespace detail {

inline const FactoredAdapter& require_factored(const Adapter& a, GradMode mode) {
  const auto* f = std::get_if<FactoredAdapter>(&a);
  if (!f) throw std::invalid_argument(std::string(to_string(mode)) + " mode needs factored adapters");
  return *f;
}

inline const LoraAdapter& require_raw(const Adapter& a) {
  const auto* r = std::get_if<LoraAdapter>(&a);
  if (!r) throw std::invalid_argument("full_lora mode needs raw adapters");
  return *r;
}

// dL/dV for A = normalize_columns(V) * diag(a_mag), given dL/dA.
inline Matrix direction_proxy_gradient(const Matrix& proxy, const Vector& a_mag, const Matrix& grad_a) {
  const Matrix g_dir = scale_columns(grad_a, a_mag);
  const Vector norms = column_norms(proxy);
  Matrix out(proxy.rows(), proxy.cols());
  for (std::size_t j = 0; j < proxy.cols(); ++j) {
    const double rho = norms[j];
    if (rho < kZeroColumnEps) continue;
    double u_dot_g = 0.0;
    for (std::size_t i = 0; i < proxy.rows(); ++i) u_dot_g += proxy(i, j) / rho * g_dir(i, j);
    for (std::size_t i = 0; i < proxy.rows(); ++i) out(i, j) = (g_dir(i, j) - proxy(i, j) / rho * u_dot_g) / rho;
  }
  return out;
}

}  // namespace detail

// Gradient of the mode's objective with respect to exactly the mode's
// trainable set. lambda only enters in MagnitudeB mode (local regulariser).
inline Gradients backward(const ToyNet& net, const TaskBatch& batch, GradMode mode, double lambda = 0.0,
                          const ForwardOptions& opt = {}) {
  validate(net, batch);
  const auto bp = detail::backprop(net, batch, opt);
  Gradients g;
  g.mode = mode;
  g.loss = bp.task_loss;
  if (mode == GradMode::MagnitudeB) g.loss += 0.5 * lambda * magnitude_delta_sq(net);
  g.layers.resize(net.layers.size());

  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    if (!layer.adapter) continue;
    const Matrix& gd = bp.d_delta[l];
    const double s = shape_of(*layer.adapter).scaling();
    auto& out = g.layers[l];
    if (mode == GradMode::FullLora) {
      for (const auto& h : detail::require_raw(*layer.adapter).heads) {
        out.push_back({scale(matmul_nt(gd, h.a), s), scale(matmul_tn(h.b, gd), s), {}, {}});
      }
      continue;
    }
    const auto& f = detail::require_factored(*layer.adapter, mode);
    for (const auto& h : f.heads) {
      HeadGradient hg;
      if (mode == GradMode::DirectionA) {
        const Matrix grad_a = scale(matmul_tn(h.effective_b(), gd), s);
        hg.a_proxy = detail::direction_proxy_gradient(h.a_proxy, h.a_magnitude, grad_a);
      } else {
        const Matrix grad_b = scale(matmul_nt(gd, h.effective_a()), s);
        hg.b_magnitude_delta.assign(f.shape.rank, 0.0);
        for (std::size_t i = 0; i < grad_b.rows(); ++i)
          for (std::size_t j = 0; j < grad_b.cols(); ++j) hg.b_magnitude_delta[j] += h.b_direction(i, j) * grad_b(i, j);
        for (std::size_t j = 0; j < f.shape.rank; ++j) hg.b_magnitude_delta[j] += lambda * h.b_magnitude_delta[j];
      }
      out.push_back(std::move(hg));
    }
  }
  return g;
}

// The mode's trainable scalars, in the same block order as gradient_blocks().
inline std::vector<std::span<double>> trainable_blocks(ToyNet& net, GradMode mode) {
  std::vector<std::span<double>> blocks;
  for (auto& layer : net.layers) {
    if (!layer.adapter) continue;
    if (mode == GradMode::FullLora) {
      auto* raw = std::get_if<LoraAdapter>(&*layer.adapter);
      if (!raw) throw std::invalid_argument("full_lora mode needs raw adapters");
      for (auto& h : raw->heads) {
        blocks.push_back(h.b.values());
        blocks.push_back(h.a.values());
      }
      continue;
    }
    auto* f = std::get_if<FactoredAdapter>(&*layer.adapter);
    if (!f) throw std::invalid_argument(std::string(to_string(mode)) + " mode needs factored adapters");
    for (auto& h : f->heads) {
      blocks.push_back(mode == GradMode::DirectionA ? h.a_proxy.values() : std::span<double>(h.b_magnitude_delta));
    }
  }
  return blocks;
}

inline std::vector<std::span<const double>> gradient_blocks(const Gradients& g) {
  std::vector<std::span<const double>> blocks;
  for (const auto& layer : g.layers) {
    for (const auto& h : layer) {
      switch (g.mode) {
        case GradMode::FullLora:
          blocks.push_back(h.b.values());
          blocks.push_back(h.a.values());
          break;
        case GradMode::DirectionA: blocks.push_back(h.a_proxy.values()); break;
        case GradMode::MagnitudeB: blocks.push_back(h.b_magnitude_delta); break;
      }
    }
  }
  return blocks;
}

inline void sgd_step(std::span<double> params, std::span<const double> grads, double lr) {
  if (lr < 0.0) throw std::invalid_argument("sgd_step: negative learning rate");
  if (params.size() != grads.size()) throw DimensionError("sgd_step: parameter/gradient length mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

inline void sgd_step(ToyNet& net, const Gradients& g, double lr) {
  auto params = trainable_blocks(net, g.mode);
  auto grads = gradient_blocks(g);
  if (params.size() != grads.size()) throw DimensionError("sgd_step: block count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) sgd_step(params[k], grads[k], lr);
}

// Gradient step on the task loss followed by the exact proximal map of the
// (lambda/2)||dm||^2 penalty: dm <- (dm - lr * grad_task) / (1 + lr * lambda).
// `g` carries the full gradient (task + lambda * dm). Stable for any lr * lambda.
inline void proximal_magnitude_step(ToyNet& net, const Gradients& g, double lr, double lambda) {
  if (g.mode != GradMode::MagnitudeB) throw std::invalid_argument("proximal_magnitude_step: magnitude mode only");
  if (lr < 0.0) throw std::invalid_argument("sgd_step: negative learning rate");
  auto params = trainable_blocks(net, g.mode);
  auto grads = gradient_blocks(g);
  if (params.size() != grads.size()) throw DimensionError("proximal_magnitude_step: block count mismatch");
  const double shrink = 1.0 + lr * lambda;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size() != grads[k].size()) throw DimensionError("proximal_magnitude_step: length mismatch");
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const double task_grad = grads[k][i] - lambda * params[k][i];
      params[k][i] = (params[k][i] - lr * task_grad) / shrink;
    }
  }
}

struct TrainOptions {
  double lambda = 0.0;
  double adapter_dropout = 0.0;
  std::uint64_t dropout_seed = 0;
};

// Full-batch gradient descent; returns the objective seen at the start of
// each epoch.
inline std::vector<double> train(ToyNet& net, const TaskBatch& batch, GradMode mode, std::size_t epochs, double lr,
                                 const TrainOptions& opt = {}) {
  std::vector<double> losses;
  losses.reserve(epochs);
  for (std::size_t e = 0; e < epochs; ++e) {
    ForwardOptions fo{opt.adapter_dropout, derive_seed(opt.dropout_seed, {e})};
    const Gradients g = backward(net, batch, mode, opt.lambda, fo);
    losses.push_back(g.loss);
    if (mode == GradMode::MagnitudeB && opt.lambda > 0.0) {
      proximal_magnitude_step(net, g, lr, opt.lambda);
    } else {
      sgd_step(net, g, lr);
    }
  }
  return losses;
}

struct FdReport {
  GradMode mode = GradMode::FullLora;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::size_t worst_block = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = false;
};

// Gradients whose scale is below this are compared in absolute terms.
inline constexpr double kFdScaleFloor = 1e-3;

inline double gradient_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kFdScaleFloor});
}

using GradientFn = std::function<Gradients(const ToyNet&, const TaskBatch&, GradMode, double)>;

inline double mode_objective(const ToyNet& net, const TaskBatch& batch, GradMode mode, double lambda) {
  return mode == GradMode::MagnitudeB ? local_loss(net, batch, lambda) : task_loss(net, batch);
}

// Central differences over every trainable scalar of `mode`.
inline FdReport fd_check(const ToyNet& net, const TaskBatch& batch, GradMode mode, double lambda, double h,
                         double tol, const GradientFn& gradient = {}) {
  if (!(h > 0.0)) throw std::invalid_argument("fd_check: step must be > 0");
  const Gradients g = gradient ? gradient(net, batch, mode, lambda) : backward(net, batch, mode, lambda);
  const auto grads = gradient_blocks(g);
  ToyNet probe = net;
  auto params = trainable_blocks(probe, mode);
  if (params.size() != grads.size()) throw DimensionError("fd_check: block count mismatch");

  FdReport r;
  r.mode = mode;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      const double saved = params[b][i];
      params[b][i] = saved + h;
      const double up = mode_objective(probe, batch, mode, lambda);
      params[b][i] = saved - h;
      const double down = mode_objective(probe, batch, mode, lambda);
      params[b][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = gradient_rel_error(grads[b][i], numeric);
      ++r.coordinates;
      if (err > r.max_rel_error || r.coordinates == 1) {
        r.max_rel_error = err;
        r.worst_block = b;
        r.worst_index = i;
        r.worst_analytic = grads[b][i];
        r.worst_numeric = numeric;
      }
    }
  }
  r.passed = r.coordinates > 0 && r.max_rel_error <= tol;
  return r;
}

enum class ParamGroup { Base, RawA, RawB, ADirection, AMagnitude, BDirection, BMagnitude, BMagnitudeDelta };

inline std::string digest(const ToyNet& net, ParamGroup group) {
  Sha256 sha;
  for (const auto& layer : net.layers) {
    if (group == ParamGroup::Base) {
      sha.update(layer.weight.values()).update(std::span<const double>(layer.bias));
      continue;
    }
    if (!layer.adapter) continue;
    if (const auto* raw = std::get_if<LoraAdapter>(&*layer.adapter)) {
      for (const auto& h : raw->heads) {
        if (group == ParamGroup::RawA) sha.update(h.a.values());
        if (group == ParamGroup::RawB) sha.update(h.b.values());
      }
      continue;
    }
    for (const auto& h : std::get<FactoredAdapter>(*layer.adapter).heads) {
      switch (group) {
        case ParamGroup::ADirection: sha.update(h.a_proxy.values()); break;
        case ParamGroup::AMagnitude: sha.update(std::span<const double>(h.a_magnitude)); break;
        case ParamGroup::BDirection: sha.update(h.b_direction.values()); break;
        case ParamGroup::BMagnitude: sha.update(std::span<const double>(h.b_magnitude)); break;
        case ParamGroup::BMagnitudeDelta: sha.update(std::span<const double>(h.b_magnitude_delta)); break;
        default: break;
      }
    }
  }
  return sha.hex();
}

// Base network: W0 ~ N(0, 1/fan_in), zero bias, no adapters.
inline ToyNet init_base(const std::vector<std::size_t>& widths, std::uint64_t seed) {
  if (widths.size() < 2) throw DimensionError("init_base: need at least input and output widths");
  ToyNet net;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    if (widths[l] == 0 || widths[l + 1] == 0) throw DimensionError("init_base: zero width");
    const double std = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    net.layers.push_back(
        {seeded_gaussian(widths[l + 1], widths[l], 0.0, std, derive_seed(seed, {l})), Vector(widths[l + 1], 0.0), {}});
  }
  return net;
}

// Full-parameter gradient descent on W0 and bias. Adapters must be absent.
inline std::vector<double> train_base(ToyNet& net, const TaskBatch& batch, std::size_t epochs, double lr) {
  validate(net, batch);
  std::vector<double> losses;
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto bp = detail::backprop(net, batch, {});
    losses.push_back(bp.task_loss);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      if (net.layers[l].adapter) throw std::invalid_argument("train_base: adapters attached");
      sgd_step(net.layers[l].weight.values(), bp.d_weight[l].values(), lr);
      sgd_step(net.layers[l].bias, bp.d_bias[l], lr);
    }
  }
  return losses;
}

inline std::size_t base_parameter_count(const ToyNet& net) {
  std::size_t n = 0;
  for (const auto& l : net.layers) n += l.weight.size() + l.bias.size();
  return n;
}

}  // namespace fedlora
