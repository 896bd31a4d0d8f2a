#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fmoe/matrix.hpp"
#include "fmoe/transport.hpp"

namespace fmoe {

// Send/receive row counts for one global exchange. Indexing is
// [worker][local expert], flattened worker-major; the global count matrix
// transposes between senders and receivers, and the same plan drives the
// forward exchange, its reverse, and the backward pass of the iteration.
struct ExchangePlan {
  int rank = 0;
  int world = 1;
  std::size_t local_experts = 0;
  std::vector<std::int64_t> send_counts;  // [dest worker][dest local expert]
  std::vector<std::int64_t> recv_counts;  // [source worker][local expert]
  std::int64_t send_total = 0;
  std::int64_t recv_total = 0;

  std::int64_t send_count(int worker, std::size_t expert) const {
    return send_counts[static_cast<std::size_t>(worker) * local_experts + expert];
  }
  std::int64_t recv_count(int worker, std::size_t expert) const {
    return recv_counts[static_cast<std::size_t>(worker) * local_experts + expert];
  }
  // Rows arriving for one local expert, summed over sources.
  std::vector<std::int64_t> local_expert_rows() const;
};

// Collective: every rank contributes its per-global-expert row counts
// (length world * local_experts, worker-major) and learns how many rows each
// (source, local expert) pair will deliver, so receive buffers can be sized
// before any row moves.
ExchangePlan exchange_counts(std::span<const std::int64_t> local_counts, Transport& transport);

// Collective. Input rows grouped by destination (worker ascending, then that
// worker's local expert, then local scatter order) — exactly the scatter
// layout over global expert indices. Output rows grouped by (local expert
// ascending, then source worker ascending, then source order). Rows staying
// on this rank are copied locally without a serialization round trip.
Matrix all_to_all_rows(const Matrix& xs, const ExchangePlan& plan, Transport& transport);

// Exact inverse routing of all_to_all_rows, reusing the same plan.
Matrix all_to_all_rows_reverse(const Matrix& ys, const ExchangePlan& plan,
                               Transport& transport);

// Elementwise sum over `group` (ascending ranks), gathered at the lowest
// rank and broadcast back, so every member sees bit-identical results.
// Every rank in `group` must call with an identically shaped matrix.
Matrix allreduce_sum(const Matrix& m, std::span<const int> group, Transport& transport);

}  // namespace fmoe
