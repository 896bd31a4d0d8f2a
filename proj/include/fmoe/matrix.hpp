#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

namespace fmoe {

// Dense row-major matrix of doubles. A row is one sample, so expert dispatch
// reduces to row-permutation copies.
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  double* row_data(std::size_t r) noexcept { return data_.data() + r * cols_; }
  const double* row_data(std::size_t r) const noexcept { return data_.data() + r * cols_; }
  std::span<double> row(std::size_t r) noexcept { return {row_data(r), cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {row_data(r), cols_}; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool operator==(const Matrix& other) const = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Row-major matrix of 64-bit indices (top-k selections, permutations).
class IndexMatrix {
public:
  IndexMatrix() = default;
  IndexMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0) {}

  static IndexMatrix from_rows(std::initializer_list<std::initializer_list<std::int64_t>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::int64_t& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  std::int64_t operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::int64_t* data() noexcept { return data_.data(); }
  const std::int64_t* data() const noexcept { return data_.data(); }

  bool operator==(const IndexMatrix& other) const = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::int64_t> data_;
};

// a[m x p] * b[p x n]. Accumulates the p terms of every output element in
// ascending-k order no matter how rows are blocked or threaded, so repeated
// calls (and row-parallel calls) are bit-identical.
Matrix matmul(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);

// Adds a 1 x n bias row to every row of a.
Matrix add_bias_rows(const Matrix& a, const Matrix& bias);

Matrix relu(const Matrix& a);
// Passes d_y where x > 0, zero elsewhere (derivative at exactly 0 is 0).
Matrix relu_backward(const Matrix& d_y, const Matrix& x);

// Per-row softmax with max-subtraction; each row sums to 1 within 1e-12.
Matrix softmax_rows(const Matrix& a);

struct TopK {
  IndexMatrix indices;  // m x k, descending value order
  Matrix values;        // m x k
};

// Per row, the k largest values in descending order; ties prefer the lower
// column index.
TopK topk_rows(const Matrix& a, std::size_t k);

// Elementwise helpers used by the backward passes and the optimizer.
void add_inplace(Matrix& a, const Matrix& b);         // a += b
void axpy_inplace(Matrix& a, double alpha, const Matrix& b);  // a += alpha * b
void scale_inplace(Matrix& a, double s);

}  // namespace fmoe
