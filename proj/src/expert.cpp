#include "fmoe/expert.hpp"

#include <cstring>
#include <numeric>
#include <string>

#include "fmoe/errors.hpp"
#include "fmoe/parallel.hpp"
#include "fmoe/rng.hpp"

namespace fmoe {

ExpertParams init_expert(std::size_t d_m, std::size_t d_h, std::uint64_t seed) {
  ExpertParams params{Matrix(d_m, d_h), Matrix(1, d_h), Matrix(d_h, d_m), Matrix(1, d_m),
                      ParamTag::NoSync};
  UniformRng rng(seed);
  rng.fill(params.w1, -0.1, 0.1);
  rng.fill(params.b1, -0.1, 0.1);
  rng.fill(params.w2, -0.1, 0.1);
  rng.fill(params.b2, -0.1, 0.1);
  return params;
}

std::pair<Matrix, ForwardCache> expert_forward(const Matrix& x_block,
                                               const ExpertParams& params) {
  if (x_block.cols() != params.w1.rows())
    throw ShapeError("expert_forward: input cols != d_m");
  ForwardCache cache;
  cache.input = x_block;
  cache.preact = add_bias_rows(matmul(x_block, params.w1), params.b1);
  cache.hidden = relu(cache.preact);
  Matrix y = add_bias_rows(matmul(cache.hidden, params.w2), params.b2);
  return {std::move(y), std::move(cache)};
}

std::pair<Matrix, ExpertGrads> expert_backward(const Matrix& d_y, const ForwardCache& cache,
                                               const ExpertParams& params) {
  if (d_y.rows() != cache.input.rows() || d_y.cols() != params.w2.cols())
    throw ShapeError("expert_backward: upstream gradient shape mismatch");

  ExpertGrads grads;
  grads.d_w2 = matmul(transpose(cache.hidden), d_y);
  grads.d_b2 = Matrix(1, d_y.cols());
  for (std::size_t i = 0; i < d_y.rows(); ++i)
    for (std::size_t j = 0; j < d_y.cols(); ++j) grads.d_b2(0, j) += d_y(i, j);

  const Matrix d_hidden = matmul(d_y, transpose(params.w2));
  const Matrix d_preact = relu_backward(d_hidden, cache.preact);

  grads.d_w1 = matmul(transpose(cache.input), d_preact);
  grads.d_b1 = Matrix(1, d_preact.cols());
  for (std::size_t i = 0; i < d_preact.rows(); ++i)
    for (std::size_t j = 0; j < d_preact.cols(); ++j) grads.d_b1(0, j) += d_preact(i, j);

  Matrix d_x = matmul(d_preact, transpose(params.w1));
  return {std::move(d_x), std::move(grads)};
}

namespace {

Matrix copy_rows(const Matrix& src, std::size_t row0, std::size_t nrows) {
  Matrix out(nrows, src.cols());
  if (nrows > 0)
    std::memcpy(out.data(), src.row_data(row0), nrows * src.cols() * sizeof(double));
  return out;
}

std::vector<std::int64_t> block_offsets(std::span<const std::int64_t> counts,
                                        std::size_t total_rows, const char* who) {
  std::vector<std::int64_t> offsets(counts.size(), 0);
  std::int64_t sum = 0;
  for (std::size_t e = 0; e < counts.size(); ++e) {
    if (counts[e] < 0) throw ShapeError(std::string(who) + ": negative block count");
    offsets[e] = sum;
    sum += counts[e];
  }
  if (sum != static_cast<std::int64_t>(total_rows))
    throw ShapeError(std::string(who) + ": blocks cover " + std::to_string(sum) +
                     " rows, input has " + std::to_string(total_rows));
  return offsets;
}

}  // namespace

MultiExpertResult multi_expert_forward(const Matrix& xs, std::span<const std::int64_t> counts,
                                       std::span<const ExpertParams> experts) {
  if (counts.size() != experts.size())
    throw ShapeError("multi_expert_forward: counts and experts disagree");
  const auto offsets = block_offsets(counts, xs.rows(), "multi_expert_forward");
  const std::size_t d_m = experts.empty() ? xs.cols() : experts[0].w2.cols();

  MultiExpertResult result{Matrix(xs.rows(), d_m), std::vector<ForwardCache>(experts.size())};
  parallel_for(experts.size(), [&](std::size_t e) {
    const auto row0 = static_cast<std::size_t>(offsets[e]);
    const auto nrows = static_cast<std::size_t>(counts[e]);
    auto [y, cache] = expert_forward(copy_rows(xs, row0, nrows), experts[e]);
    if (nrows > 0)
      std::memcpy(result.ys.row_data(row0), y.data(), nrows * d_m * sizeof(double));
    result.caches[e] = std::move(cache);
  });
  return result;
}

MultiExpertGrads multi_expert_backward(const Matrix& d_ys,
                                       const std::vector<ForwardCache>& caches,
                                       std::span<const ExpertParams> experts) {
  if (caches.size() != experts.size())
    throw ShapeError("multi_expert_backward: caches and experts disagree");
  std::vector<std::int64_t> counts(experts.size());
  for (std::size_t e = 0; e < experts.size(); ++e)
    counts[e] = static_cast<std::int64_t>(caches[e].input.rows());
  const auto offsets = block_offsets(counts, d_ys.rows(), "multi_expert_backward");
  const std::size_t d_m = experts.empty() ? d_ys.cols() : experts[0].w1.rows();

  MultiExpertGrads result{Matrix(d_ys.rows(), d_m), std::vector<ExpertGrads>(experts.size())};
  parallel_for(experts.size(), [&](std::size_t e) {
    const auto row0 = static_cast<std::size_t>(offsets[e]);
    const auto nrows = static_cast<std::size_t>(counts[e]);
    auto [d_x, grads] = expert_backward(copy_rows(d_ys, row0, nrows), caches[e], experts[e]);
    if (nrows > 0)
      std::memcpy(result.d_xs.row_data(row0), d_x.data(), nrows * d_m * sizeof(double));
    result.experts[e] = std::move(grads);
  });
  return result;
}

}  // namespace fmoe
