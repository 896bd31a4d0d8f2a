#pragma once

#include <cstdint>
#include <utility>

#include "fmoe/matrix.hpp"
#include "fmoe/param_tag.hpp"

namespace fmoe {

// Single fully-connected scoring layer, replicated on every worker.
struct GateParams {
  Matrix w_g;  // d_m x E_total
  ParamTag tag = ParamTag::World;
};

struct GateOutput {
  Matrix scores;            // n_b x E_total, post-softmax rows
  IndexMatrix topk_indices; // n_b x k
  Matrix topk_scores;       // n_b x k, the selected post-softmax scores
};

GateParams init_gate(std::size_t d_m, std::size_t total_experts, std::uint64_t seed);

// scores = softmax(x * w_g) rowwise, then top-k. The selected scores are the
// raw softmax values; they are not renormalized before the combine.
GateOutput gate_forward(const Matrix& x, const GateParams& params, std::size_t k);

struct GateGrads {
  Matrix d_wg;
  Matrix d_x;
};

// Exact gradient of the selected scores. Each selected score depends on every
// logit through the softmax denominator, so the full softmax Jacobian is
// applied; unselected score slots carry zero upstream gradient.
GateGrads gate_backward(const Matrix& x, const GateParams& params, const GateOutput& out,
                        const Matrix& d_topk_scores);

}  // namespace fmoe
