#pragma once

namespace fmoe {

// Which worker group averages a parameter's gradient:
//   World        - every rank (replicated parameters, e.g. the gate)
//   DataParallel - the rank's data-parallel group, orthogonal to its
//                  model-parallel group
//   NoSync       - owned by exactly one rank (expert weights)
enum class ParamTag { World, DataParallel, NoSync };

const char* to_string(ParamTag tag);

}  // namespace fmoe
