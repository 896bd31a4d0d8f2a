#include "fmoe/param_sync.hpp"

#include <string>

#include "fmoe/collectives.hpp"
#include "fmoe/errors.hpp"

namespace fmoe {

const char* to_string(ParamTag tag) {
  switch (tag) {
    case ParamTag::World: return "world";
    case ParamTag::DataParallel: return "data_parallel";
    case ParamTag::NoSync: return "none";
  }
  return "?";
}

std::optional<std::vector<int>> resolve_group(ParamTag tag, const ProcessTopology& topology,
                                              int rank) {
  const int world = topology.world_size;
  const int mp = topology.model_parallel_size;
  if (world < 1 || mp < 1 || world % mp != 0)
    throw ShapeError("resolve_group: model parallel size " + std::to_string(mp) +
                     " does not divide world " + std::to_string(world));
  if (rank < 0 || rank >= world) throw ShapeError("resolve_group: rank out of range");

  switch (tag) {
    case ParamTag::World: {
      std::vector<int> all(static_cast<std::size_t>(world));
      for (int r = 0; r < world; ++r) all[static_cast<std::size_t>(r)] = r;
      return all;
    }
    case ParamTag::DataParallel: {
      // Same position within each consecutive model-parallel group.
      std::vector<int> group;
      for (int r = rank % mp; r < world; r += mp) group.push_back(r);
      return group;
    }
    case ParamTag::NoSync:
      return std::nullopt;
  }
  return std::nullopt;
}

void sync_gradients(std::vector<TaggedGrad>& grads, const ProcessTopology& topology,
                    Transport* transport) {
  const int rank = transport ? transport->rank() : 0;
  if (transport && transport->world_size() != topology.world_size)
    throw ProtocolError("sync_gradients: topology world " +
                        std::to_string(topology.world_size) + " != transport world " +
                        std::to_string(transport->world_size()));
  for (auto& entry : grads) {
    if (entry.grad == nullptr) throw ShapeError("sync_gradients: null gradient " + entry.name);
    const auto group = resolve_group(entry.tag, topology, rank);
    if (!group || group->size() <= 1 || transport == nullptr) continue;
    Matrix summed = allreduce_sum(*entry.grad, *group, *transport);
    scale_inplace(summed, 1.0 / static_cast<double>(group->size()));
    *entry.grad = std::move(summed);
  }
}

void sgd_step(Matrix& param, const Matrix& grad, double lr) {
  if (!param.same_shape(grad)) throw ShapeError("sgd_step: parameter/gradient shape mismatch");
  axpy_inplace(param, -lr, grad);
}

}  // namespace fmoe
