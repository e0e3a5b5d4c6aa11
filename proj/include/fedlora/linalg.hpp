#pragma once

// Dense row-major matrices of doubles and the handful of kernels the rest of
// the library needs. Every reduction runs in a fixed order (row-major,
// left-to-right) so results do not depend on thread count or call site.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedlora {

using Vector = std::vector<double>;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericalError : std::domain_error {
  using std::domain_error::domain_error;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix payload length does not match shape");
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool same_shape(const Matrix& a, const Matrix& b) noexcept {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline bool all_finite(std::span<const double> xs) noexcept {
  for (double x : xs) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline const Matrix& require_finite(const Matrix& m, const char* op) {
  if (!all_finite(m.values())) throw NumericalError(std::string(op) + ": non-finite entry");
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_string(a) + " x " + shape_string(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

inline Matrix transpose(const Matrix& x) {
  Matrix out(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
  return out;
}

// a * b^T without materialising the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + shape_string(a) + " x " + shape_string(b) + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  require_finite(out, "matmul_nt");
  return out;
}

// a^T * b.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + shape_string(a) + "^T x " + shape_string(b));
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto a_row = a.row(k);
    auto b_row = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      if (aki == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aki * b_row[j];
    }
  }
  require_finite(out, "matmul_tn");
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  if (!same_shape(a, b)) throw DimensionError("add: " + shape_string(a) + " vs " + shape_string(b));
  Matrix out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  require_finite(out, "add");
  return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  if (!same_shape(a, b)) throw DimensionError("sub: " + shape_string(a) + " vs " + shape_string(b));
  Matrix out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  require_finite(out, "sub");
  return out;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.values()) v *= s;
  require_finite(out, "scale");
  return out;
}

inline void add_inplace(Matrix& acc, const Matrix& x) {
  if (!same_shape(acc, x)) throw DimensionError("add_inplace: " + shape_string(acc) + " vs " + shape_string(x));
  auto o = acc.values();
  auto xv = x.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += xv[i];
}

inline void axpy_inplace(Matrix& acc, double s, const Matrix& x) {
  if (!same_shape(acc, x)) throw DimensionError("axpy_inplace: " + shape_string(acc) + " vs " + shape_string(x));
  auto o = acc.values();
  auto xv = x.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += s * xv[i];
}

// Column j multiplied by s[j].
inline Matrix scale_columns(const Matrix& x, std::span<const double> s) {
  if (s.size() != x.cols()) {
    throw DimensionError("scale_columns: " + std::to_string(s.size()) + " scales for " +
                         std::to_string(x.cols()) + " columns");
  }
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] *= s[j];
  }
  require_finite(out, "scale_columns");
  return out;
}

inline Matrix map(const Matrix& x, const std::function<double(double)>& f) {
  Matrix out = x;
  for (double& v : out.values()) v = f(v);
  require_finite(out, "map");
  return out;
}

inline Vector column_norms(const Matrix& x) {
  Vector sq(x.cols(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) sq[j] += r[j] * r[j];
  }
  for (double& v : sq) v = std::sqrt(v);
  return sq;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm_sq(std::span<const double> a) { return dot(a, a); }

inline double frobenius_sq(const Matrix& x) { return norm_sq(x.values()); }

inline double flat_cosine(const Matrix& a, const Matrix& b) {
  if (!same_shape(a, b)) throw DimensionError("flat_cosine: " + shape_string(a) + " vs " + shape_string(b));
  const double na = frobenius_sq(a);
  const double nb = frobenius_sq(b);
  if (na == 0.0 || nb == 0.0) throw NumericalError("flat_cosine: cosine undefined for an all-zero matrix");
  const double c = dot(a.values(), b.values()) / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

// ||a - b||_F / ||b||_F, or the absolute error when b is zero.
inline double relative_frobenius_error(const Matrix& a, const Matrix& b) {
  const double diff = std::sqrt(frobenius_sq(sub(a, b)));
  const double ref = std::sqrt(frobenius_sq(b));
  return ref == 0.0 ? diff : diff / ref;
}

}  // namespace fedlora
