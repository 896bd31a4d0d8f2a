#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "fmoe/collectives.hpp"
#include "fmoe/dispatch.hpp"
#include "fmoe/expert.hpp"
#include "fmoe/gate.hpp"
#include "fmoe/param_sync.hpp"
#include "fmoe/transport.hpp"

namespace fmoe {

struct MoEConfig {
  std::size_t n_b = 0;        // local batch size
  std::size_t d_m = 0;        // model dimension
  std::size_t d_h = 0;        // expert hidden dimension
  std::size_t k = 0;          // experts selected per sample
  std::size_t n_e_local = 0;  // experts hosted per worker
  std::size_t world_size = 1;
  std::uint64_t seed = 0;

  std::size_t total_experts() const { return n_e_local * world_size; }
};

// One rank's slice of the layer. Expert with global index g lives on worker
// g / n_e_local as local slot g % n_e_local; the gate is replicated.
struct MoELayerState {
  MoEConfig config;
  ProcessTopology topology;
  int rank = 0;
  GateParams gate;
  std::vector<ExpertParams> experts;  // local experts in slot order
};

MoELayerState init_state(const MoEConfig& config, int rank = 0);

// Everything the backward pass needs from one forward call.
struct MoEForwardCache {
  Matrix input;
  GateOutput gate_out;
  DispatchPlan plan;
  std::optional<ExchangePlan> exchange;
  std::vector<std::int64_t> local_block_counts;  // rows per local expert
  Matrix expert_outputs;                         // in this rank's scatter order
  std::vector<ForwardCache> expert_caches;
};

// Literal per-sample loop over gate scores and selected experts; the
// reference all batched and distributed paths must match. Single-worker
// states only.
Matrix naive_forward(const Matrix& x, const MoELayerState& state);

// Batched path: gate -> plan -> scatter -> (count exchange + all-to-all when
// distributed) -> experts -> (reverse exchange) -> weighted gather.
// Collective when transport is non-null and world > 1.
Matrix forward(const Matrix& x, const MoELayerState& state, Transport* transport = nullptr,
               MoEForwardCache* cache = nullptr);

struct MoEGrads {
  Matrix d_wg;
  std::vector<ExpertGrads> experts;  // local experts in slot order
};

std::pair<Matrix, MoEGrads> backward(const Matrix& d_y, const MoEForwardCache& cache,
                                     const MoELayerState& state,
                                     Transport* transport = nullptr);

// Mean-squared-error training step: forward, backward, tag-based gradient
// sync, SGD update. Returns the loss averaged over the whole world's batch.
double train_step(const Matrix& x, const Matrix& target, MoELayerState& state, double lr,
                  Transport* transport = nullptr);

// Seeded synthetic regression task shared by the trainer CLI and tests.
// Generates the global batch; rank r trains on rows [r*n_b, (r+1)*n_b).
struct ToyTask {
  Matrix inputs;   // (n_b * world) x d_m
  Matrix targets;  // (n_b * world) x d_m
};
ToyTask make_toy_task(const MoEConfig& config);

}  // namespace fmoe
