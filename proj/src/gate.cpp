#include "fmoe/gate.hpp"

#include <string>

#include "fmoe/errors.hpp"
#include "fmoe/rng.hpp"

namespace fmoe {

namespace {
// Stream ids 0.. are taken by experts (keyed by global index); the gate gets
// its own offset far away from any realistic expert count.
constexpr std::uint64_t kGateStream = 0x67617465;  // "gate"
}  // namespace

GateParams init_gate(std::size_t d_m, std::size_t total_experts, std::uint64_t seed) {
  GateParams params{Matrix(d_m, total_experts), ParamTag::World};
  UniformRng rng(stream_seed(seed, kGateStream));
  rng.fill(params.w_g, -0.1, 0.1);
  return params;
}

GateOutput gate_forward(const Matrix& x, const GateParams& params, std::size_t k) {
  if (x.cols() != params.w_g.rows())
    throw ShapeError("gate_forward: x cols " + std::to_string(x.cols()) +
                     " != gate rows " + std::to_string(params.w_g.rows()));
  const std::size_t total = params.w_g.cols();
  if (k < 1 || k > total) throw ShapeError("gate_forward: k out of range");
  GateOutput out;
  out.scores = softmax_rows(matmul(x, params.w_g));
  TopK top = topk_rows(out.scores, k);
  out.topk_indices = std::move(top.indices);
  out.topk_scores = std::move(top.values);
  return out;
}

GateGrads gate_backward(const Matrix& x, const GateParams& params, const GateOutput& out,
                        const Matrix& d_topk_scores) {
  const std::size_t n_b = x.rows();
  const std::size_t total = params.w_g.cols();
  if (out.scores.rows() != n_b || out.scores.cols() != total)
    throw ShapeError("gate_backward: scores shape mismatch");
  if (d_topk_scores.rows() != n_b || d_topk_scores.cols() != out.topk_indices.cols())
    throw ShapeError("gate_backward: upstream gradient shape mismatch");

  // Route the upstream gradient into the selected score slots.
  Matrix d_scores(n_b, total);
  for (std::size_t i = 0; i < n_b; ++i)
    for (std::size_t j = 0; j < d_topk_scores.cols(); ++j)
      d_scores(i, static_cast<std::size_t>(out.topk_indices(i, j))) += d_topk_scores(i, j);

  // Softmax Jacobian per row: dz = s * (ds - <ds, s>).
  Matrix d_logits(n_b, total);
  for (std::size_t i = 0; i < n_b; ++i) {
    double dot = 0.0;
    for (std::size_t e = 0; e < total; ++e) dot += d_scores(i, e) * out.scores(i, e);
    for (std::size_t e = 0; e < total; ++e)
      d_logits(i, e) = out.scores(i, e) * (d_scores(i, e) - dot);
  }

  GateGrads grads;
  grads.d_wg = matmul(transpose(x), d_logits);
  grads.d_x = matmul(d_logits, transpose(params.w_g));
  return grads;
}

}  // namespace fmoe
