#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fmoe/matrix.hpp"
#include "fmoe/param_tag.hpp"
#include "fmoe/transport.hpp"

namespace fmoe {

// Worker layout: consecutive ranks form model-parallel groups of
// model_parallel_size; ranks holding the same position across those groups
// form the orthogonal data-parallel groups.
struct ProcessTopology {
  int world_size = 1;
  int model_parallel_size = 1;
};

// World -> all ranks; DataParallel -> the rank's data-parallel group;
// NoSync -> nullopt.
std::optional<std::vector<int>> resolve_group(ParamTag tag, const ProcessTopology& topology,
                                              int rank);

struct TaggedGrad {
  std::string name;
  Matrix* grad = nullptr;
  ParamTag tag = ParamTag::NoSync;
};

// Replaces every tagged gradient by its group average (sum / group size).
// NoSync entries are untouched. All ranks must pass the same names and tags
// in the same order. A null transport (or world of 1) leaves everything
// unchanged.
void sync_gradients(std::vector<TaggedGrad>& grads, const ProcessTopology& topology,
                    Transport* transport);

// p <- p - lr * g
void sgd_step(Matrix& param, const Matrix& grad, double lr);

}  // namespace fmoe
