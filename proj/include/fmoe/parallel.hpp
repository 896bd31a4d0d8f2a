#pragma once

#include <cstddef>
#include <functional>

namespace fmoe {

// Worker cap for intra-op parallelism. FMOE_THREADS overrides the hardware
// count; values < 1 are clamped to 1.
int max_threads();

// True while the calling thread is executing inside a parallel_for task.
// Nested calls run inline instead of spawning a second level of threads.
bool in_parallel_region();

// Runs fn(i) for i in [0, n). Tasks must write disjoint state; assignment of
// tasks to workers is unspecified but the work done per task is fixed, so
// results are independent of scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace fmoe
