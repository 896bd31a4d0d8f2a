#pragma once

#include <cstdint>
#include <random>

#include "fmoe/matrix.hpp"

namespace fmoe {

// Deterministic uniform generator. Draws are mapped through the 53-bit
// mantissa path so streams replay identically on any platform.
class UniformRng {
public:
  explicit UniformRng(std::uint64_t seed) : engine_(seed) {}

  double next(double lo, double hi) {
    const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return lo + u * (hi - lo);
  }

  void fill(Matrix& m, double lo, double hi) {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = next(lo, hi);
  }

private:
  std::mt19937_64 engine_;
};

// Independent substream seed for parameter group `stream_id`. Each expert
// draws from its own stream keyed by global index, so weights do not depend
// on which worker hosts the expert.
std::uint64_t stream_seed(std::uint64_t base_seed, std::uint64_t stream_id);

}  // namespace fmoe
