#include "fmoe/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "fmoe/errors.hpp"
#include "fmoe/parallel.hpp"

namespace fmoe {

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Matrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged row lengths");
    std::size_t j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

IndexMatrix IndexMatrix::from_rows(
    std::initializer_list<std::initializer_list<std::int64_t>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  IndexMatrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged row lengths");
    std::size_t j = 0;
    for (std::int64_t v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

namespace {

constexpr std::size_t kRowBlock = 4;

// C rows [r0, r1) += A rows [r0, r1) * B. Every output element accumulates
// its p terms in ascending-k order whether the row lands in a 4-row block or
// the remainder loop, so any row partition gives bit-identical results.
void multiply_row_range(const Matrix& a, const Matrix& b, Matrix& out,
                        std::size_t r0, std::size_t r1) {
  const std::size_t p = a.cols();
  const std::size_t n = b.cols();
  std::size_t i = r0;
  for (; i + kRowBlock <= r1; i += kRowBlock) {
    double* o0 = out.row_data(i + 0);
    double* o1 = out.row_data(i + 1);
    double* o2 = out.row_data(i + 2);
    double* o3 = out.row_data(i + 3);
    for (std::size_t kk = 0; kk < p; ++kk) {
      const double* brow = b.row_data(kk);
      const double a0 = a(i + 0, kk);
      const double a1 = a(i + 1, kk);
      const double a2 = a(i + 2, kk);
      const double a3 = a(i + 3, kk);
      for (std::size_t j = 0; j < n; ++j) {
        o0[j] += a0 * brow[j];
        o1[j] += a1 * brow[j];
        o2[j] += a2 * brow[j];
        o3[j] += a3 * brow[j];
      }
    }
  }
  for (; i < r1; ++i) {
    double* orow = out.row_data(i);
    for (std::size_t kk = 0; kk < p; ++kk) {
      const double aik = a(i, kk);
      const double* brow = b.row_data(kk);
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
}

// Threading pays off only for panels well past L2; small problems stay on the
// calling thread.
constexpr std::size_t kParallelFlopThreshold = std::size_t{1} << 24;

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + ")");
  Matrix out(a.rows(), b.cols());
  const std::size_t m = a.rows();
  const std::size_t flops = 2 * m * a.cols() * b.cols();
  int workers = max_threads();
  if (flops < kParallelFlopThreshold || m < 2 * kRowBlock || in_parallel_region())
    workers = 1;
  if (workers <= 1) {
    multiply_row_range(a, b, out, 0, m);
    return out;
  }
  std::size_t chunk = (m + static_cast<std::size_t>(workers) - 1) / workers;
  chunk = (chunk + kRowBlock - 1) / kRowBlock * kRowBlock;
  const std::size_t pieces = (m + chunk - 1) / chunk;
  parallel_for(pieces, [&](std::size_t t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(m, lo + chunk);
    multiply_row_range(a, b, out, lo, hi);
  });
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix add_bias_rows(const Matrix& a, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw ShapeError("add_bias_rows: bias must be 1 x cols(a)");
  Matrix out = a;
  const double* brow = bias.row_data(0);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double* orow = out.row_data(i);
    for (std::size_t j = 0; j < out.cols(); ++j) orow[j] += brow[j];
  }
  return out;
}

Matrix relu(const Matrix& a) {
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out.data()[i] < 0.0) out.data()[i] = 0.0;
  return out;
}

Matrix relu_backward(const Matrix& d_y, const Matrix& x) {
  if (!d_y.same_shape(x)) throw ShapeError("relu_backward: shape mismatch");
  Matrix out(d_y.rows(), d_y.cols());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = x.data()[i] > 0.0 ? d_y.data()[i] : 0.0;
  return out;
}

Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* in = a.row_data(i);
    double* o = out.row_data(i);
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < a.cols(); ++j) hi = std::max(hi, in[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      o[j] = std::exp(in[j] - hi);
      sum += o[j];
    }
    for (std::size_t j = 0; j < a.cols(); ++j) o[j] /= sum;
  }
  return out;
}

TopK topk_rows(const Matrix& a, std::size_t k) {
  if (k < 1 || k > a.cols())
    throw ShapeError("topk_rows: k out of range [1, " + std::to_string(a.cols()) + "]");
  TopK result{IndexMatrix(a.rows(), k), Matrix(a.rows(), k)};
  std::vector<std::pair<double, std::int64_t>> order(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j)
      order[j] = {a(i, j), static_cast<std::int64_t>(j)};
    // stable sort keeps the lower column index first among equal values
    std::stable_sort(order.begin(), order.end(),
                     [](const auto& l, const auto& r) { return l.first > r.first; });
    for (std::size_t j = 0; j < k; ++j) {
      result.indices(i, j) = order[j].second;
      result.values(i, j) = order[j].first;
    }
  }
  return result;
}

void add_inplace(Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("add_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

void axpy_inplace(Matrix& a, double alpha, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("axpy_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += alpha * b.data()[i];
}

void scale_inplace(Matrix& a, double s) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] *= s;
}

}  // namespace fmoe
