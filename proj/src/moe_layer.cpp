#include "fmoe/moe_layer.hpp"

#include <cstring>
#include <string>

#include "fmoe/errors.hpp"
#include "fmoe/rng.hpp"

namespace fmoe {

namespace {

void validate_config(const MoEConfig& c) {
  if (c.n_b < 1 || c.d_m < 1 || c.d_h < 1 || c.n_e_local < 1 || c.world_size < 1)
    throw ShapeError("MoEConfig: all dimensions must be at least 1");
  if (c.k < 1 || c.k > c.total_experts())
    throw ShapeError("MoEConfig: k must lie in [1, total experts]");
}

Matrix single_row(const Matrix& x, std::size_t i) {
  Matrix row(1, x.cols());
  std::memcpy(row.data(), x.row_data(i), x.cols() * sizeof(double));
  return row;
}

}  // namespace

MoELayerState init_state(const MoEConfig& config, int rank) {
  validate_config(config);
  if (rank < 0 || static_cast<std::size_t>(rank) >= config.world_size)
    throw ShapeError("init_state: rank out of range");
  MoELayerState state;
  state.config = config;
  state.topology = {static_cast<int>(config.world_size), 1};
  state.rank = rank;
  state.gate = init_gate(config.d_m, config.total_experts(), config.seed);
  state.experts.reserve(config.n_e_local);
  for (std::size_t slot = 0; slot < config.n_e_local; ++slot) {
    // Stream keyed by global index keeps weights placement-independent.
    const std::uint64_t global = static_cast<std::uint64_t>(rank) * config.n_e_local + slot;
    state.experts.push_back(
        init_expert(config.d_m, config.d_h, stream_seed(config.seed, global)));
  }
  return state;
}

Matrix naive_forward(const Matrix& x, const MoELayerState& state) {
  const MoEConfig& c = state.config;
  if (c.world_size != 1 || state.experts.size() != c.total_experts())
    throw ShapeError("naive_forward: needs a single-worker state holding every expert");
  if (x.cols() != c.d_m) throw ShapeError("naive_forward: input cols != d_m");

  Matrix y(x.rows(), c.d_m);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const Matrix xi = single_row(x, i);
    const GateOutput gate_out = gate_forward(xi, state.gate, c.k);
    for (std::size_t j = 0; j < c.k; ++j) {
      const auto expert = static_cast<std::size_t>(gate_out.topk_indices(0, j));
      const auto [yi, cache] = expert_forward(xi, state.experts[expert]);
      const double score = gate_out.topk_scores(0, j);
      for (std::size_t col = 0; col < c.d_m; ++col) y(i, col) += score * yi(0, col);
    }
  }
  return y;
}

Matrix forward(const Matrix& x, const MoELayerState& state, Transport* transport,
               MoEForwardCache* cache) {
  const MoEConfig& c = state.config;
  if (x.cols() != c.d_m) throw ShapeError("forward: input cols != d_m");
  const bool distributed = transport != nullptr && c.world_size > 1;
  if (distributed && transport->world_size() != static_cast<int>(c.world_size))
    throw ProtocolError("forward: transport world != config world");
  if (!distributed && state.experts.size() != c.total_experts())
    throw ShapeError("forward: single-worker call needs all experts local");

  GateOutput gate_out = gate_forward(x, state.gate, c.k);
  DispatchPlan plan = build_plan(gate_out.topk_indices, c.total_experts());
  const Matrix xs = scatter(x, plan);

  Matrix ys;
  std::optional<ExchangePlan> exchange;
  std::vector<std::int64_t> block_counts;
  std::vector<ForwardCache> caches;
  if (distributed) {
    exchange = exchange_counts(plan.counts, *transport);
    const Matrix xs_in = all_to_all_rows(xs, *exchange, *transport);
    block_counts = exchange->local_expert_rows();
    MultiExpertResult run = multi_expert_forward(xs_in, block_counts, state.experts);
    caches = std::move(run.caches);
    ys = all_to_all_rows_reverse(run.ys, *exchange, *transport);
  } else {
    block_counts = plan.counts;
    MultiExpertResult run = multi_expert_forward(xs, block_counts, state.experts);
    caches = std::move(run.caches);
    ys = std::move(run.ys);
  }

  Matrix y = gather_combine(ys, plan, gate_out.topk_scores);
  if (cache != nullptr) {
    cache->input = x;
    cache->gate_out = std::move(gate_out);
    cache->plan = std::move(plan);
    cache->exchange = std::move(exchange);
    cache->local_block_counts = std::move(block_counts);
    cache->expert_outputs = std::move(ys);
    cache->expert_caches = std::move(caches);
  }
  return y;
}

std::pair<Matrix, MoEGrads> backward(const Matrix& d_y, const MoEForwardCache& cache,
                                     const MoELayerState& state, Transport* transport) {
  const bool distributed = cache.exchange.has_value();
  if (distributed && transport == nullptr)
    throw ProtocolError("backward: cache came from a distributed forward, transport required");

  GatherCombineGrads combine = gather_combine_backward(d_y, cache.expert_outputs, cache.plan,
                                                       cache.gate_out.topk_scores);

  Matrix d_xs;
  MoEGrads grads;
  if (distributed) {
    // Gradients ride the same routes as the activations.
    const Matrix d_ys_in = all_to_all_rows(combine.d_ys, *cache.exchange, *transport);
    MultiExpertGrads run = multi_expert_backward(d_ys_in, cache.expert_caches, state.experts);
    grads.experts = std::move(run.experts);
    d_xs = all_to_all_rows_reverse(run.d_xs, *cache.exchange, *transport);
  } else {
    MultiExpertGrads run =
        multi_expert_backward(combine.d_ys, cache.expert_caches, state.experts);
    grads.experts = std::move(run.experts);
    d_xs = std::move(run.d_xs);
  }

  Matrix d_x = scatter_backward(d_xs, cache.plan);
  GateGrads gate = gate_backward(cache.input, state.gate, cache.gate_out,
                                 combine.d_topk_scores);
  grads.d_wg = std::move(gate.d_wg);
  add_inplace(d_x, gate.d_x);
  return {std::move(d_x), std::move(grads)};
}

double train_step(const Matrix& x, const Matrix& target, MoELayerState& state, double lr,
                  Transport* transport) {
  MoEForwardCache cache;
  const Matrix y = forward(x, state, transport, &cache);
  if (!target.same_shape(y)) throw ShapeError("train_step: target shape != output shape");

  // Local mean-squared error; the reported loss is the world average.
  const double n = static_cast<double>(y.size());
  double loss = 0.0;
  Matrix d_y(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double diff = y.data()[i] - target.data()[i];
    loss += diff * diff / n;
    d_y.data()[i] = 2.0 * diff / n;
  }

  auto [d_x, grads] = backward(d_y, cache, state, transport);
  (void)d_x;

  const bool distributed = transport != nullptr && state.config.world_size > 1;
  if (distributed) {
    // Experts see the whole world's rows while each rank normalizes by its
    // local batch; rescale so NoSync gradients match the global-batch
    // objective exactly.
    const double inv_world = 1.0 / static_cast<double>(state.config.world_size);
    for (auto& e : grads.experts) {
      scale_inplace(e.d_w1, inv_world);
      scale_inplace(e.d_b1, inv_world);
      scale_inplace(e.d_w2, inv_world);
      scale_inplace(e.d_b2, inv_world);
    }
  }

  std::vector<TaggedGrad> tagged;
  tagged.push_back({"gate.w_g", &grads.d_wg, state.gate.tag});
  for (std::size_t slot = 0; slot < state.experts.size(); ++slot) {
    const std::string prefix = "expert." + std::to_string(slot) + ".";
    const ParamTag tag = state.experts[slot].tag;
    tagged.push_back({prefix + "w1", &grads.experts[slot].d_w1, tag});
    tagged.push_back({prefix + "b1", &grads.experts[slot].d_b1, tag});
    tagged.push_back({prefix + "w2", &grads.experts[slot].d_w2, tag});
    tagged.push_back({prefix + "b2", &grads.experts[slot].d_b2, tag});
  }
  sync_gradients(tagged, state.topology, distributed ? transport : nullptr);

  sgd_step(state.gate.w_g, grads.d_wg, lr);
  for (std::size_t slot = 0; slot < state.experts.size(); ++slot) {
    sgd_step(state.experts[slot].w1, grads.experts[slot].d_w1, lr);
    sgd_step(state.experts[slot].b1, grads.experts[slot].d_b1, lr);
    sgd_step(state.experts[slot].w2, grads.experts[slot].d_w2, lr);
    sgd_step(state.experts[slot].b2, grads.experts[slot].d_b2, lr);
  }

  if (distributed) {
    Matrix scalar(1, 1);
    scalar(0, 0) = loss;
    const auto group = resolve_group(ParamTag::World, state.topology, state.rank);
    const Matrix total = allreduce_sum(scalar, *group, *transport);
    loss = total(0, 0) / static_cast<double>(state.config.world_size);
  }
  return loss;
}

ToyTask make_toy_task(const MoEConfig& config) {
  validate_config(config);
  const std::size_t rows = config.n_b * config.world_size;
  ToyTask task{Matrix(rows, config.d_m), Matrix(rows, config.d_m)};
  UniformRng input_rng(stream_seed(config.seed, 0x746F7969));  // "toyi"
  input_rng.fill(task.inputs, -1.0, 1.0);
  // Deterministic smooth teacher: an affine map plus a mild nonlinearity so
  // the regression target is learnable but not trivially linear.
  Matrix teacher(config.d_m, config.d_m);
  UniformRng teacher_rng(stream_seed(config.seed, 0x746F7974));  // "toyt"
  teacher_rng.fill(teacher, -0.5, 0.5);
  task.targets = matmul(task.inputs, teacher);
  for (std::size_t i = 0; i < task.targets.size(); ++i)
    task.targets.data()[i] += 0.1 * task.inputs.data()[i] * task.inputs.data()[i];
  return task;
}

}  // namespace fmoe
