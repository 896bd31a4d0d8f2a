#include "fmoe/dispatch.hpp"

#include <cstring>
#include <string>

#include "fmoe/errors.hpp"

namespace fmoe {

DispatchPlan build_plan(const IndexMatrix& topk_indices, std::size_t num_experts) {
  DispatchPlan plan;
  plan.num_experts = num_experts;
  plan.n_b = topk_indices.rows();
  plan.k = topk_indices.cols();
  const std::size_t expanded = plan.n_b * plan.k;

  plan.counts.assign(num_experts, 0);
  for (std::size_t i = 0; i < plan.n_b; ++i)
    for (std::size_t j = 0; j < plan.k; ++j) {
      const std::int64_t e = topk_indices(i, j);
      if (e < 0 || e >= static_cast<std::int64_t>(num_experts))
        throw ShapeError("build_plan: expert index " + std::to_string(e) +
                         " out of range [0, " + std::to_string(num_experts) + ")");
      ++plan.counts[static_cast<std::size_t>(e)];
    }

  plan.offsets.assign(num_experts, 0);
  for (std::size_t e = 1; e < num_experts; ++e)
    plan.offsets[e] = plan.offsets[e - 1] + plan.counts[e - 1];

  plan.expanded_src_row.assign(expanded, 0);
  plan.expanded_slot.assign(expanded, 0);
  plan.inverse_pos = IndexMatrix(plan.n_b, plan.k);

  // Row-major walk over (row, slot) fills every expert block in stable
  // (row, slot) order.
  std::vector<std::int64_t> fill = plan.offsets;
  for (std::size_t i = 0; i < plan.n_b; ++i)
    for (std::size_t j = 0; j < plan.k; ++j) {
      const auto e = static_cast<std::size_t>(topk_indices(i, j));
      const std::int64_t pos = fill[e]++;
      plan.expanded_src_row[static_cast<std::size_t>(pos)] = static_cast<std::int64_t>(i);
      plan.expanded_slot[static_cast<std::size_t>(pos)] = static_cast<std::int64_t>(j);
      plan.inverse_pos(i, j) = pos;
    }
  return plan;
}

Matrix scatter(const Matrix& x, const DispatchPlan& plan) {
  if (x.rows() != plan.n_b)
    throw ShapeError("scatter: input rows != plan batch size");
  const std::size_t d = x.cols();
  Matrix out(plan.n_b * plan.k, d);
  for (std::size_t p = 0; p < out.rows(); ++p) {
    const auto src = static_cast<std::size_t>(plan.expanded_src_row[p]);
    std::memcpy(out.row_data(p), x.row_data(src), d * sizeof(double));
  }
  return out;
}

Matrix gather_combine(const Matrix& ys, const DispatchPlan& plan, const Matrix& topk_scores) {
  if (ys.rows() != plan.n_b * plan.k)
    throw ShapeError("gather_combine: ys rows != n_b * k");
  if (topk_scores.rows() != plan.n_b || topk_scores.cols() != plan.k)
    throw ShapeError("gather_combine: topk_scores shape mismatch");
  const std::size_t d = ys.cols();
  Matrix out(plan.n_b, d);
  for (std::size_t i = 0; i < plan.n_b; ++i) {
    double* orow = out.row_data(i);
    for (std::size_t j = 0; j < plan.k; ++j) {
      const auto pos = static_cast<std::size_t>(plan.inverse_pos(i, j));
      const double w = topk_scores(i, j);
      const double* yrow = ys.row_data(pos);
      for (std::size_t c = 0; c < d; ++c) orow[c] += w * yrow[c];
    }
  }
  return out;
}

Matrix scatter_backward(const Matrix& d_xs, const DispatchPlan& plan) {
  if (d_xs.rows() != plan.n_b * plan.k)
    throw ShapeError("scatter_backward: rows != n_b * k");
  const std::size_t d = d_xs.cols();
  Matrix out(plan.n_b, d);
  // Slot-order accumulation per sample, mirroring gather_combine.
  for (std::size_t i = 0; i < plan.n_b; ++i) {
    double* orow = out.row_data(i);
    for (std::size_t j = 0; j < plan.k; ++j) {
      const auto pos = static_cast<std::size_t>(plan.inverse_pos(i, j));
      const double* grow = d_xs.row_data(pos);
      for (std::size_t c = 0; c < d; ++c) orow[c] += grow[c];
    }
  }
  return out;
}

GatherCombineGrads gather_combine_backward(const Matrix& d_y, const Matrix& ys,
                                           const DispatchPlan& plan,
                                           const Matrix& topk_scores) {
  if (d_y.rows() != plan.n_b) throw ShapeError("gather_combine_backward: d_y rows != n_b");
  if (ys.rows() != plan.n_b * plan.k)
    throw ShapeError("gather_combine_backward: ys rows != n_b * k");
  if (d_y.cols() != ys.cols())
    throw ShapeError("gather_combine_backward: column mismatch");
  if (topk_scores.rows() != plan.n_b || topk_scores.cols() != plan.k)
    throw ShapeError("gather_combine_backward: topk_scores shape mismatch");

  const std::size_t d = d_y.cols();
  GatherCombineGrads grads{Matrix(plan.n_b * plan.k, d), Matrix(plan.n_b, plan.k)};
  for (std::size_t i = 0; i < plan.n_b; ++i) {
    const double* dyrow = d_y.row_data(i);
    for (std::size_t j = 0; j < plan.k; ++j) {
      const auto pos = static_cast<std::size_t>(plan.inverse_pos(i, j));
      const double w = topk_scores(i, j);
      double* drow = grads.d_ys.row_data(pos);
      const double* yrow = ys.row_data(pos);
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        drow[c] = w * dyrow[c];
        dot += dyrow[c] * yrow[c];
      }
      grads.d_topk_scores(i, j) = dot;
    }
  }
  return grads;
}

}  // namespace fmoe
