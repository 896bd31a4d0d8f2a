#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "fmoe/matrix.hpp"

namespace fmoe {

// The scatter/gather permutation. Position p in the expanded (n_b * k)-row
// layout holds the copy of sample expanded_src_row[p] made for selection slot
// expanded_slot[p]; expert e owns the contiguous block
// [offsets[e], offsets[e] + counts[e]).
struct DispatchPlan {
  std::size_t num_experts = 0;
  std::size_t k = 0;
  std::size_t n_b = 0;
  std::vector<std::int64_t> expanded_src_row;
  std::vector<std::int64_t> expanded_slot;
  std::vector<std::int64_t> counts;   // per expert
  std::vector<std::int64_t> offsets;  // exclusive prefix sums of counts
  IndexMatrix inverse_pos;            // n_b x k -> scattered position
};

// Positions inside an expert's block are ordered by (original row, slot)
// ascending, so plans are deterministic for a given assignment.
DispatchPlan build_plan(const IndexMatrix& topk_indices, std::size_t num_experts);

// Copies each sample row into the k scattered positions chosen for it.
Matrix scatter(const Matrix& x, const DispatchPlan& plan);

// out[i] = sum_j topk_scores[i][j] * ys[inverse_pos[i][j]], accumulated in
// slot order.
Matrix gather_combine(const Matrix& ys, const DispatchPlan& plan, const Matrix& topk_scores);

// Adjoint of scatter: sums the k scattered copies of each sample's gradient.
Matrix scatter_backward(const Matrix& d_xs, const DispatchPlan& plan);

struct GatherCombineGrads {
  Matrix d_ys;           // (n_b * k) x d
  Matrix d_topk_scores;  // n_b x k
};

GatherCombineGrads gather_combine_backward(const Matrix& d_y, const Matrix& ys,
                                           const DispatchPlan& plan,
                                           const Matrix& topk_scores);

}  // namespace fmoe
