#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "polyvc/common.hpp"

namespace polyvc {

/// Dense row-major matrix. The scalar type is float for storage formats and
/// double for all model math.
template <typename T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(size_t rows, size_t cols, T fill = T{}) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  size_t rows() const { return rows_; }
  size_t cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(size_t r, size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(size_t r, size_t c) const { return data_[r * cols_ + c]; }

  T* row(size_t r) { return data_.data() + r * cols_; }
  const T* row(size_t r) const { return data_.data() + r * cols_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  size_t rows_ = 0;
  size_t cols_ = 0;
  std::vector<T> data_;
};

using MatF = Matrix<float>;
using MatD = Matrix<double>;

inline MatD widen(const MatF& m) {
  MatD out(m.rows(), m.cols());
  for (size_t i = 0; i < m.size(); ++i) out.data()[i] = static_cast<double>(m.data()[i]);
  return out;
}

inline MatF narrow(const MatD& m) {
  MatF out(m.rows(), m.cols());
  for (size_t i = 0; i < m.size(); ++i) out.data()[i] = static_cast<float>(m.data()[i]);
  return out;
}

// y[out] = w[out x in] * x[in] + b[out]; b may be empty.
inline void matvec(const MatD& w, const double* x, const double* b, double* y) {
  const size_t out_dim = w.rows(), in_dim = w.cols();
  for (size_t o = 0; o < out_dim; ++o) {
    const double* wr = w.row(o);
    double acc = b ? b[o] : 0.0;
    for (size_t i = 0; i < in_dim; ++i) acc += wr[i] * x[i];
    y[o] = acc;
  }
}

// y[out] += w[out x in] * x[in]
inline void matvec_add(const MatD& w, const double* x, double* y) {
  const size_t out_dim = w.rows(), in_dim = w.cols();
  for (size_t o = 0; o < out_dim; ++o) {
    const double* wr = w.row(o);
    double acc = 0.0;
    for (size_t i = 0; i < in_dim; ++i) acc += wr[i] * x[i];
    y[o] += acc;
  }
}

// y[in] += w^T * g for g[out]; the transpose product used by backprop.
inline void matvec_transpose_add(const MatD& w, const double* g, double* y) {
  const size_t out_dim = w.rows(), in_dim = w.cols();
  for (size_t o = 0; o < out_dim; ++o) {
    const double* wr = w.row(o);
    const double go = g[o];
    if (go == 0.0) continue;
    for (size_t i = 0; i < in_dim; ++i) y[i] += wr[i] * go;
  }
}

// dw[out x in] += g[out] (outer) x[in]
inline void outer_add(MatD& dw, const double* g, const double* x) {
  const size_t out_dim = dw.rows(), in_dim = dw.cols();
  for (size_t o = 0; o < out_dim; ++o) {
    double* dr = dw.row(o);
    const double go = g[o];
    if (go == 0.0) continue;
    for (size_t i = 0; i < in_dim; ++i) dr[i] += go * x[i];
  }
}

}  // namespace polyvc
