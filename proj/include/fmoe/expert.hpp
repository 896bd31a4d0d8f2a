#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "fmoe/matrix.hpp"
#include "fmoe/param_tag.hpp"

namespace fmoe {

// Two-layer FFN expert: relu(x * w1 + b1) * w2 + b2. Every worker owns its
// experts outright, hence the NoSync tag.
struct ExpertParams {
  Matrix w1;  // d_m x d_h
  Matrix b1;  // 1 x d_h
  Matrix w2;  // d_h x d_m
  Matrix b2;  // 1 x d_m
  ParamTag tag = ParamTag::NoSync;
};

struct ExpertGrads {
  Matrix d_w1;
  Matrix d_b1;
  Matrix d_w2;
  Matrix d_b2;
};

// Activations retained for the backward pass.
struct ForwardCache {
  Matrix input;   // rows x d_m
  Matrix preact;  // rows x d_h, x * w1 + b1
  Matrix hidden;  // rows x d_h, relu(preact)
};

ExpertParams init_expert(std::size_t d_m, std::size_t d_h, std::uint64_t seed);

// n_rows may be 0; a 0-row block produces a 0-row output.
std::pair<Matrix, ForwardCache> expert_forward(const Matrix& x_block,
                                               const ExpertParams& params);

std::pair<Matrix, ExpertGrads> expert_backward(const Matrix& d_y, const ForwardCache& cache,
                                               const ExpertParams& params);

// Runs every local expert on its contiguous block of xs. Blocks are disjoint
// and parameters are read-only during the pass, so concurrent execution is
// bit-identical to a sequential loop.
struct MultiExpertResult {
  Matrix ys;
  std::vector<ForwardCache> caches;
};

MultiExpertResult multi_expert_forward(const Matrix& xs, std::span<const std::int64_t> counts,
                                       std::span<const ExpertParams> experts);

struct MultiExpertGrads {
  Matrix d_xs;
  std::vector<ExpertGrads> experts;
};

MultiExpertGrads multi_expert_backward(const Matrix& d_ys,
                                       const std::vector<ForwardCache>& caches,
                                       std::span<const ExpertParams> experts);

}  // namespace fmoe
