#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <vector>

#include "fedpdpo/errors.hpp"

namespace fedpdpo {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles. All training state (including bias
// vectors, stored as 1xN) uses this type so optimizers and serialization
// can treat parameters uniformly.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
    std::size_t r = 0;
    for (const auto& row : rows) {
      if (row.size() != m.cols_) throw ContractError("from_rows: ragged rows");
      std::size_t c = 0;
      for (double v : row) m.at(r, c++) = v;
      ++r;
    }
    return m;
  }

  static Matrix row_vector(const Vector& v) {
    Matrix m(1, v.size());
    m.data_ = v;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& storage() const { return data_; }
  std::vector<double>& storage() { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // In-place axpy: this += a * other.
  void add_scaled(const Matrix& other, double a) {
    if (!same_shape(other)) throw ContractError("add_scaled: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * other.data_[i];
  }

  void scale(double a) {
    for (double& v : data_) v *= a;
  }

  double squared_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return s;
  }

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Y = X * W^T + b, with X (T x n), W (m x n), b (1 x m or empty).
inline Matrix linear_forward(const Matrix& x, const Matrix& w, const Matrix& b) {
  if (x.cols() != w.cols()) throw ContractError("linear_forward: inner dim mismatch");
  if (!b.empty() && (b.rows() != 1 || b.cols() != w.rows()))
    throw ContractError("linear_forward: bias shape mismatch");
  Matrix y(x.rows(), w.rows());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const double* xt = x.row(t);
    double* yt = y.row(t);
    for (std::size_t o = 0; o < w.rows(); ++o) {
      const double* wo = w.row(o);
      double acc = b.empty() ? 0.0 : b.at(0, o);
      for (std::size_t i = 0; i < x.cols(); ++i) acc += wo[i] * xt[i];
      yt[o] = acc;
    }
  }
  return y;
}

// Backward of linear_forward. Given upstream G (T x m), accumulates
// dW += G^T X and db += column sums of G when the pointers are non-null,
// and returns dX = G * W.
inline Matrix linear_backward(const Matrix& g, const Matrix& x, const Matrix& w,
                              Matrix* dw, Matrix* db) {
  if (g.rows() != x.rows() || g.cols() != w.rows())
    throw ContractError("linear_backward: shape mismatch");
  if (dw != nullptr) {
    for (std::size_t t = 0; t < g.rows(); ++t) {
      const double* gt = g.row(t);
      const double* xt = x.row(t);
      for (std::size_t o = 0; o < g.cols(); ++o) {
        double* dwo = dw->row(o);
        const double go = gt[o];
        for (std::size_t i = 0; i < x.cols(); ++i) dwo[i] += go * xt[i];
      }
    }
  }
  if (db != nullptr) {
    for (std::size_t t = 0; t < g.rows(); ++t) {
      const double* gt = g.row(t);
      for (std::size_t o = 0; o < g.cols(); ++o) db->at(0, o) += gt[o];
    }
  }
  Matrix dx(x.rows(), x.cols());
  for (std::size_t t = 0; t < g.rows(); ++t) {
    const double* gt = g.row(t);
    double* dxt = dx.row(t);
    for (std::size_t o = 0; o < g.cols(); ++o) {
      const double go = gt[o];
      const double* wo = w.row(o);
      for (std::size_t i = 0; i < w.cols(); ++i) dxt[i] += go * wo[i];
    }
  }
  return dx;
}

// FNV-1a over the raw little-endian bytes of every entry. Used by the
// freeze-discipline tests; not a cryptographic digest.
inline std::uint64_t checksum(const Matrix& m) {
  std::uint64_t h = 1469598103934665603ull;
  for (double v : m.storage()) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    for (int byte = 0; byte < 8; ++byte) {
      h ^= (bits >> (8 * byte)) & 0xff;
      h *= 1099511628211ull;
    }
  }
  return h;
}

inline std::uint64_t combine_checksums(std::uint64_t a, std::uint64_t b) {
  return a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
}

}  // namespace fedpdpo
