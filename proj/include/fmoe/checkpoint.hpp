#pragma once

#include <span>
#include <string>
#include <vector>

#include "fmoe/moe_layer.hpp"

namespace fmoe {

// Weight checkpoint, little-endian throughout:
//   header  "FMOE-CKPT\0" (10 bytes)
//   version u32
//   config  n_b, d_m, d_h, k, n_e_local, world_size, E_total, seed (u64 each)
//   gate matrix, then experts in global index order, each matrix serialized
//   as rows u64, cols u64, f64 data
struct Checkpoint {
  MoEConfig config;
  GateParams gate;
  std::vector<ExpertParams> experts;  // global index order
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const MoEConfig& config, const GateParams& gate,
                     std::span<const ExpertParams> experts);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace fmoe
