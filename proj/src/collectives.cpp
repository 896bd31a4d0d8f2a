#include "fmoe/collectives.hpp"

#include <algorithm>
#include <cstring>
#include <string>
#include <thread>

#include "fmoe/errors.hpp"

namespace fmoe {

namespace {

// One step of the pairwise schedule: send to dst while receiving from src on
// a second thread, so a blocking transport cannot head-of-line deadlock.
std::vector<std::byte> exchange_step(Transport& t, int dst, int src, MsgType type,
                                     std::uint32_t tag, std::span<const std::byte> out) {
  std::exception_ptr send_error;
  std::thread sender([&] {
    try {
      t.send_frame(dst, type, tag, out);
    } catch (...) {
      send_error = std::current_exception();
    }
  });
  std::vector<std::byte> in;
  try {
    in = t.recv_frame(src, type, tag);
  } catch (...) {
    sender.join();
    throw;
  }
  sender.join();
  if (send_error) std::rethrow_exception(send_error);
  return in;
}

std::vector<std::byte> pack_matrix(const Matrix& m) {
  std::vector<std::byte> shape = pack_counts(std::vector<std::int64_t>{
      static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())});
  std::vector<std::byte> rows = pack_rows(m, 0, m.rows());
  shape.insert(shape.end(), rows.begin(), rows.end());
  return shape;
}

Matrix unpack_matrix(std::span<const std::byte> payload, const Matrix& expect_like) {
  if (payload.size() < 16) throw ProtocolError("allreduce payload truncated");
  const auto shape = unpack_counts(payload.subspan(0, 16));
  if (shape[0] != static_cast<std::int64_t>(expect_like.rows()) ||
      shape[1] != static_cast<std::int64_t>(expect_like.cols()))
    throw ProtocolError("allreduce shape mismatch across ranks: got " +
                        std::to_string(shape[0]) + "x" + std::to_string(shape[1]) +
                        ", expected " + std::to_string(expect_like.rows()) + "x" +
                        std::to_string(expect_like.cols()));
  Matrix m(expect_like.rows(), expect_like.cols());
  unpack_rows(payload.subspan(16), m, 0, m.rows());
  return m;
}

}  // namespace

std::vector<std::int64_t> ExchangePlan::local_expert_rows() const {
  std::vector<std::int64_t> rows(local_experts, 0);
  for (int s = 0; s < world; ++s)
    for (std::size_t e = 0; e < local_experts; ++e) rows[e] += recv_count(s, e);
  return rows;
}

ExchangePlan exchange_counts(std::span<const std::int64_t> local_counts, Transport& transport) {
  const int world = transport.world_size();
  const int rank = transport.rank();
  if (local_counts.empty() || local_counts.size() % static_cast<std::size_t>(world) != 0)
    throw ShapeError("exchange_counts: expert count " + std::to_string(local_counts.size()) +
                     " not divisible by world size " + std::to_string(world));

  ExchangePlan plan;
  plan.rank = rank;
  plan.world = world;
  plan.local_experts = local_counts.size() / static_cast<std::size_t>(world);
  plan.send_counts.assign(local_counts.begin(), local_counts.end());
  plan.recv_counts.assign(local_counts.size(), 0);

  // Own slice: rows this rank keeps for its own experts.
  for (std::size_t e = 0; e < plan.local_experts; ++e)
    plan.recv_counts[static_cast<std::size_t>(rank) * plan.local_experts + e] =
        plan.send_count(rank, e);

  const std::uint32_t tag = transport.next_tag();
  const auto payload = pack_counts(local_counts);
  for (int step = 1; step < world; ++step) {
    const int dst = (rank + step) % world;
    const int src = (rank + world - step) % world;
    const auto in = exchange_step(transport, dst, src, MsgType::Counts, tag, payload);
    const auto peer_counts = unpack_counts(in);
    if (peer_counts.size() != local_counts.size())
      throw ProtocolError("exchange_counts: rank " + std::to_string(src) + " sent " +
                          std::to_string(peer_counts.size()) + " counts, expected " +
                          std::to_string(local_counts.size()));
    for (std::size_t e = 0; e < plan.local_experts; ++e)
      plan.recv_counts[static_cast<std::size_t>(src) * plan.local_experts + e] =
          peer_counts[static_cast<std::size_t>(rank) * plan.local_experts + e];
  }

  for (std::size_t i = 0; i < plan.send_counts.size(); ++i) {
    plan.send_total += plan.send_counts[i];
    plan.recv_total += plan.recv_counts[i];
  }
  return plan;
}

namespace {

// Row offset of each destination worker's section in the send layout.
std::vector<std::int64_t> send_section_offsets(const ExchangePlan& plan) {
  std::vector<std::int64_t> offsets(static_cast<std::size_t>(plan.world) + 1, 0);
  for (int w = 0; w < plan.world; ++w) {
    std::int64_t rows = 0;
    for (std::size_t e = 0; e < plan.local_experts; ++e) rows += plan.send_count(w, e);
    offsets[static_cast<std::size_t>(w) + 1] = offsets[static_cast<std::size_t>(w)] + rows;
  }
  return offsets;
}

// Row offset of the (local expert, source worker) chunk in the recv layout:
// experts are outer, sources inner.
std::vector<std::int64_t> recv_chunk_offsets(const ExchangePlan& plan) {
  std::vector<std::int64_t> offsets(plan.local_experts * static_cast<std::size_t>(plan.world), 0);
  std::int64_t at = 0;
  for (std::size_t e = 0; e < plan.local_experts; ++e)
    for (int s = 0; s < plan.world; ++s) {
      offsets[e * static_cast<std::size_t>(plan.world) + static_cast<std::size_t>(s)] = at;
      at += plan.recv_count(s, e);
    }
  return offsets;
}

void copy_rows_block(Matrix& dst, std::size_t dst_row, const Matrix& src, std::size_t src_row,
                     std::size_t nrows) {
  if (nrows > 0)
    std::memcpy(dst.row_data(dst_row), src.row_data(src_row),
                nrows * dst.cols() * sizeof(double));
}

}  // namespace

Matrix all_to_all_rows(const Matrix& xs, const ExchangePlan& plan, Transport& transport) {
  if (xs.rows() != static_cast<std::size_t>(plan.send_total))
    throw ProtocolError("all_to_all_rows: input rows " + std::to_string(xs.rows()) +
                        " != planned send total " + std::to_string(plan.send_total));
  const std::size_t d = xs.cols();
  const auto send_off = send_section_offsets(plan);
  const auto chunk_off = recv_chunk_offsets(plan);
  Matrix out(static_cast<std::size_t>(plan.recv_total), d);

  const int rank = plan.rank;
  const int world = plan.world;

  // Self rows bypass the wire: the send section for this rank is already
  // ordered by local expert.
  {
    std::int64_t src_row = send_off[static_cast<std::size_t>(rank)];
    for (std::size_t e = 0; e < plan.local_experts; ++e) {
      const std::int64_t n = plan.send_count(rank, e);
      copy_rows_block(out,
                      static_cast<std::size_t>(
                          chunk_off[e * static_cast<std::size_t>(world) +
                                    static_cast<std::size_t>(rank)]),
                      xs, static_cast<std::size_t>(src_row), static_cast<std::size_t>(n));
      src_row += n;
    }
  }

  const std::uint32_t tag = transport.next_tag();
  for (int step = 1; step < world; ++step) {
    const int dst = (rank + step) % world;
    const int src = (rank + world - step) % world;
    const auto dst_rows = static_cast<std::size_t>(send_off[static_cast<std::size_t>(dst) + 1] -
                                                   send_off[static_cast<std::size_t>(dst)]);
    const auto payload =
        pack_rows(xs, static_cast<std::size_t>(send_off[static_cast<std::size_t>(dst)]), dst_rows);
    const auto in = exchange_step(transport, dst, src, MsgType::Data, tag, payload);

    std::int64_t expect = 0;
    for (std::size_t e = 0; e < plan.local_experts; ++e) expect += plan.recv_count(src, e);
    if (in.size() != static_cast<std::size_t>(expect) * d * 8)
      throw ProtocolError("all_to_all_rows: rank " + std::to_string(src) + " sent " +
                          std::to_string(in.size()) + " bytes, plan expects " +
                          std::to_string(expect * static_cast<std::int64_t>(d) * 8));

    // Incoming buffer is ordered by this rank's local experts; fan the
    // chunks out to their (expert, source) slots.
    std::size_t consumed = 0;
    for (std::size_t e = 0; e < plan.local_experts; ++e) {
      const auto n = static_cast<std::size_t>(plan.recv_count(src, e));
      unpack_rows(std::span<const std::byte>(in).subspan(consumed * d * 8, n * d * 8), out,
                  static_cast<std::size_t>(chunk_off[e * static_cast<std::size_t>(world) +
                                                     static_cast<std::size_t>(src)]),
                  n);
      consumed += n;
    }
  }
  return out;
}

Matrix all_to_all_rows_reverse(const Matrix& ys, const ExchangePlan& plan,
                               Transport& transport) {
  if (ys.rows() != static_cast<std::size_t>(plan.recv_total))
    throw ProtocolError("all_to_all_rows_reverse: input rows " + std::to_string(ys.rows()) +
                        " != planned recv total " + std::to_string(plan.recv_total));
  const std::size_t d = ys.cols();
  const auto send_off = send_section_offsets(plan);
  const auto chunk_off = recv_chunk_offsets(plan);
  Matrix out(static_cast<std::size_t>(plan.send_total), d);

  const int rank = plan.rank;
  const int world = plan.world;

  // Self rows straight back to the send-section layout.
  {
    std::int64_t dst_row = send_off[static_cast<std::size_t>(rank)];
    for (std::size_t e = 0; e < plan.local_experts; ++e) {
      const std::int64_t n = plan.recv_count(rank, e);
      copy_rows_block(out, static_cast<std::size_t>(dst_row), ys,
                      static_cast<std::size_t>(
                          chunk_off[e * static_cast<std::size_t>(world) +
                                    static_cast<std::size_t>(rank)]),
                      static_cast<std::size_t>(n));
      dst_row += n;
    }
  }

  const std::uint32_t tag = transport.next_tag();
  for (int step = 1; step < world; ++step) {
    const int dst = (rank + step) % world;
    const int src = (rank + world - step) % world;

    // Rows that arrived from dst, regrouped in (local expert, dst order):
    // exactly the layout dst used inside its send section for this rank.
    std::int64_t back_rows = 0;
    for (std::size_t e = 0; e < plan.local_experts; ++e) back_rows += plan.recv_count(dst, e);
    Matrix back(static_cast<std::size_t>(back_rows), d);
    std::int64_t at = 0;
    for (std::size_t e = 0; e < plan.local_experts; ++e) {
      const std::int64_t n = plan.recv_count(dst, e);
      copy_rows_block(back, static_cast<std::size_t>(at), ys,
                      static_cast<std::size_t>(
                          chunk_off[e * static_cast<std::size_t>(world) +
                                    static_cast<std::size_t>(dst)]),
                      static_cast<std::size_t>(n));
      at += n;
    }
    const auto payload = pack_rows(back, 0, back.rows());
    const auto in = exchange_step(transport, dst, src, MsgType::Data, tag, payload);

    const auto expect = static_cast<std::size_t>(send_off[static_cast<std::size_t>(src) + 1] -
                                                 send_off[static_cast<std::size_t>(src)]);
    if (in.size() != expect * d * 8)
      throw ProtocolError("all_to_all_rows_reverse: rank " + std::to_string(src) + " sent " +
                          std::to_string(in.size()) + " bytes, plan expects " +
                          std::to_string(expect * d * 8));
    unpack_rows(in, out, static_cast<std::size_t>(send_off[static_cast<std::size_t>(src)]),
                expect);
  }
  return out;
}

Matrix allreduce_sum(const Matrix& m, std::span<const int> group, Transport& transport) {
  if (group.empty()) throw ProtocolError("allreduce_sum: empty group");
  if (!std::is_sorted(group.begin(), group.end()))
    throw ProtocolError("allreduce_sum: group must be sorted ascending");
  const int rank = transport.rank();
  if (std::find(group.begin(), group.end(), rank) == group.end())
    throw ProtocolError("allreduce_sum: calling rank not in group");

  const std::uint32_t tag = transport.next_tag();
  if (group.size() == 1) return m;

  const int root = group.front();
  if (rank == root) {
    // Ascending-rank accumulation gives every member the same bytes.
    Matrix acc = m;
    for (std::size_t i = 1; i < group.size(); ++i) {
      const auto payload = transport.recv_frame(group[i], MsgType::Allreduce, tag);
      add_inplace(acc, unpack_matrix(payload, m));
    }
    const auto result = pack_matrix(acc);
    for (std::size_t i = 1; i < group.size(); ++i)
      transport.send_frame(group[i], MsgType::Allreduce, tag, result);
    return acc;
  }
  transport.send_frame(root, MsgType::Allreduce, tag, pack_matrix(m));
  return unpack_matrix(transport.recv_frame(root, MsgType::Allreduce, tag), m);
}

}  // namespace fmoe
