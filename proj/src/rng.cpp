#include "fmoe/rng.hpp"

namespace fmoe {

// splitmix64 finalizer; decorrelates adjacent stream ids.
std::uint64_t stream_seed(std::uint64_t base_seed, std::uint64_t stream_id) {
  std::uint64_t z = base_seed + 0x9E3779B97F4A7C15ULL * (stream_id + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace fmoe
