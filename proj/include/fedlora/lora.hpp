#pragma once

// Low-rank adapters and the column-wise magnitude/direction factorisation
//
//   X = D * diag(m),   m_j = ||X[:, j]||_2,   D[:, j] = X[:, j] / m_j
//
// Columns whose norm is below kZeroColumnEps are stored as an all-zero
// direction with magnitude 0, so the factorisation stays defined for the
// B = 0 initialisation and recompose(decompose(X)) is exact up to rounding.

#include <cstdint>
#include <string>
#include <vector>

#include "fedlora/linalg.hpp"
#include "fedlora/rng.hpp"

namespace fedlora {

inline constexpr double kZeroColumnEps = 1e-12;
inline constexpr double kAdapterInitStd = 0.02;

struct DecomposedMatrix {
  Matrix direction;
  Vector magnitude;

  std::size_t zero_columns() const {
    std::size_t n = 0;
    for (double m : magnitude) n += (m == 0.0);
    return n;
  }

  friend bool operator==(const DecomposedMatrix&, const DecomposedMatrix&) = default;
};

inline DecomposedMatrix decompose(const Matrix& x) {
  DecomposedMatrix out{x, column_norms(x)};
  for (std::size_t j = 0; j < x.cols(); ++j) {
    const double m = out.magnitude[j];
    if (m < kZeroColumnEps) {
      out.magnitude[j] = 0.0;
      for (std::size_t i = 0; i < x.rows(); ++i) out.direction(i, j) = 0.0;
    } else {
      for (std::size_t i = 0; i < x.rows(); ++i) out.direction(i, j) = x(i, j) / m;
    }
  }
  return out;
}

inline Matrix recompose(const DecomposedMatrix& d) { return scale_columns(d.direction, d.magnitude); }

// Direction part only; equivalent to decompose(x).direction.
inline Matrix normalize_columns(const Matrix& x) { return decompose(x).direction; }

struct LoraHead {
  Matrix b;  // d_out x r
  Matrix a;  // r x d_in

  friend bool operator==(const LoraHead&, const LoraHead&) = default;
};

struct DecomposedHead {
  DecomposedMatrix b;
  DecomposedMatrix a;

  friend bool operator==(const DecomposedHead&, const DecomposedHead&) = default;
};

struct AdapterShape {
  std::size_t d_out = 0;
  std::size_t d_in = 0;
  std::size_t rank = 0;
  std::size_t num_heads = 0;
  double alpha = 0.0;

  double scaling() const noexcept { return alpha / static_cast<double>(rank); }
  std::size_t parameter_count() const noexcept { return num_heads * rank * (d_out + d_in); }

  friend bool operator==(const AdapterShape&, const AdapterShape&) = default;
};

template <class Head>
struct BasicAdapter {
  AdapterShape shape;
  std::vector<Head> heads;

  friend bool operator==(const BasicAdapter&, const BasicAdapter&) = default;
};

// Raw storage: what clients train in full-LoRA mode.
using LoraAdapter = BasicAdapter<LoraHead>;
// Factored storage: what the server aggregates and the optimizers consume.
using DecomposedAdapter = BasicAdapter<DecomposedHead>;

inline void validate(const LoraAdapter& adapter) {
  const auto& s = adapter.shape;
  if (s.rank == 0 || s.num_heads == 0) throw DimensionError("adapter: rank and heads must be >= 1");
  if (adapter.heads.size() != s.num_heads) throw DimensionError("adapter: head count mismatch");
  for (const auto& h : adapter.heads) {
    if (h.b.rows() != s.d_out || h.b.cols() != s.rank || h.a.rows() != s.rank || h.a.cols() != s.d_in) {
      throw DimensionError("adapter: head shapes disagree with " + std::to_string(s.d_out) + "x" +
                           std::to_string(s.rank) + "x" + std::to_string(s.d_in));
    }
  }
}

inline LoraAdapter init_adapter(std::size_t d_out, std::size_t d_in, std::size_t rank, std::size_t num_heads,
                                double alpha, std::uint64_t seed) {
  if (d_out == 0 || d_in == 0) throw DimensionError("init_adapter: zero dimension");
  if (rank == 0 || num_heads == 0) throw DimensionError("init_adapter: rank and heads must be >= 1");
  LoraAdapter adapter{{d_out, d_in, rank, num_heads, alpha}, {}};
  for (std::size_t h = 0; h < num_heads; ++h) {
    adapter.heads.push_back(
        {Matrix(d_out, rank), seeded_gaussian(rank, d_in, 0.0, kAdapterInitStd, derive_seed(seed, {h}))});
  }
  return adapter;
}

inline DecomposedAdapter decompose(const LoraAdapter& adapter) {
  DecomposedAdapter out{adapter.shape, {}};
  out.heads.reserve(adapter.heads.size());
  for (const auto& h : adapter.heads) out.heads.push_back({decompose(h.b), decompose(h.a)});
  return out;
}

inline LoraAdapter recompose(const DecomposedAdapter& adapter) {
  LoraAdapter out{adapter.shape, {}};
  out.heads.reserve(adapter.heads.size());
  for (const auto& h : adapter.heads) out.heads.push_back({recompose(h.b), recompose(h.a)});
  return out;
}

// Sum over heads of (alpha / r) * B * A.
inline Matrix delta_weight(const LoraAdapter& adapter) {
  validate(adapter);
  Matrix delta(adapter.shape.d_out, adapter.shape.d_in);
  for (const auto& h : adapter.heads) axpy_inplace(delta, adapter.shape.scaling(), matmul(h.b, h.a));
  return delta;
}

inline Matrix delta_weight(const DecomposedAdapter& adapter) { return delta_weight(recompose(adapter)); }

}  // namespace fedlora
