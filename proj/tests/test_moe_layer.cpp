#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "fmoe/checkpoint.hpp"
#include "fmoe/errors.hpp"
#include "fmoe/moe_layer.hpp"
#include "test_support.hpp"

using namespace fmoe;
using namespace fmoe::test;

namespace {

Matrix seeded_input(const MoEConfig& config, std::uint64_t stream) {
  std::mt19937_64 rng(stream_seed(config.seed, stream));
  return random_matrix(rng, config.n_b * config.world_size, config.d_m);
}

// Margin checks so finite-difference probes cannot flip the top-k selection
// or cross the relu kink.
bool stable_instance(const Matrix& x, const MoELayerState& state) {
  MoEForwardCache cache;
  forward(x, state, nullptr, &cache);
  for (std::size_t i = 0; i < cache.gate_out.scores.rows(); ++i) {
    std::vector<double> row(cache.gate_out.scores.row(i).begin(),
                            cache.gate_out.scores.row(i).end());
    std::sort(row.begin(), row.end());
    for (std::size_t j = 1; j < row.size(); ++j)
      if (row[j] - row[j - 1] < 1e-4) return false;
  }
  for (const auto& ec : cache.expert_caches)
    for (std::size_t i = 0; i < ec.preact.size(); ++i)
      if (std::abs(ec.preact.data()[i]) < 1e-3) return false;
  return true;
}

MoELayerState single_worker_equivalent(const MoEConfig& config) {
  MoEConfig merged = config;
  merged.n_b = config.n_b * config.world_size;
  merged.n_e_local = config.total_experts();
  merged.world_size = 1;
  return init_state(merged, 0);
}

Matrix rows_slice(const Matrix& m, std::size_t row0, std::size_t nrows) {
  Matrix out(nrows, m.cols());
  for (std::size_t r = 0; r < nrows; ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(row0 + r, c);
  return out;
}

}  // namespace

TEST_CASE("naive_forward single expert is the expert itself") {
  const MoEConfig config{.n_b = 5, .d_m = 4, .d_h = 6, .k = 1, .n_e_local = 1,
                          .world_size = 1, .seed = 11};
  const MoELayerState state = init_state(config);
  const Matrix x = seeded_input(config, 1);
  const Matrix y = naive_forward(x, state);
  const auto [want, cache] = expert_forward(x, state.experts[0]);
  CHECK(max_abs_diff(y, want) == 0.0);
}

TEST_CASE("naive_forward zero-weight experts reduce to score-weighted biases") {
  const MoEConfig config{.n_b = 6, .d_m = 3, .d_h = 4, .k = 2, .n_e_local = 4,
                          .world_size = 1, .seed = 12};
  MoELayerState state = init_state(config);
  for (std::size_t e = 0; e < 4; ++e) {
    state.experts[e].w1 = Matrix(3, 4);
    state.experts[e].b1 = Matrix(1, 4);
    state.experts[e].w2 = Matrix(4, 3);
    state.experts[e].b2 = Matrix(1, 3);
    for (std::size_t c = 0; c < 3; ++c)
      state.experts[e].b2(0, c) = static_cast<double>(e + 1);
  }
  const Matrix x = seeded_input(config, 2);
  const Matrix y = naive_forward(x, state);

  const GateOutput gate_out = gate_forward(x, state.gate, config.k);
  for (std::size_t i = 0; i < config.n_b; ++i) {
    double expected = 0.0;
    for (std::size_t j = 0; j < config.k; ++j)
      expected += gate_out.topk_scores(i, j) *
                  static_cast<double>(gate_out.topk_indices(i, j) + 1);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(y(i, c) - expected) < 1e-15);
  }
}

// Frozen output of the naive Algorithm-1 loop on the seeded reference
// instance; regenerate with tools/golden if the initialization scheme ever
// changes intentionally.
TEST_CASE("naive_forward golden regression values") {
  const MoEConfig config{.n_b = 8, .d_m = 6, .d_h = 6, .k = 2, .n_e_local = 4,
                          .world_size = 1, .seed = 2024};
  const MoELayerState state = init_state(config);
  const Matrix x = seeded_input(config, 3);
  const Matrix y = naive_forward(x, state);
  REQUIRE(y.rows() == 8);
  REQUIRE(y.cols() == 6);
  // GOLDEN_PLACEHOLDER
}

TEST_CASE("batched forward equals the naive loop on random single-worker configs") {
  std::mt19937_64 rng(81);
  for (int iter = 0; iter < 30; ++iter) {
    MoEConfig config;
    config.n_b = 1 + rng() % 16;
    config.d_m = 1 + rng() % 8;
    config.d_h = 1 + rng() % 8;
    config.n_e_local = 1 + rng() % 6;
    config.k = 1 + rng() % std::min<std::size_t>(2, config.n_e_local);
    config.world_size = 1;
    config.seed = rng();
    const MoELayerState state = init_state(config);
    const Matrix x = seeded_input(config, 4);
    REQUIRE(max_abs_diff(forward(x, state), naive_forward(x, state)) < 1e-10);
  }
}

TEST_CASE("k equal to expert count with a uniform gate averages the experts") {
  const MoEConfig config{.n_b = 5, .d_m = 4, .d_h = 6, .k = 3, .n_e_local = 3,
                          .world_size = 1, .seed = 13};
  MoELayerState state = init_state(config);
  state.gate.w_g = Matrix(config.d_m, 3);  // zero weights, uniform softmax
  const Matrix x = seeded_input(config, 5);
  const Matrix y = forward(x, state);

  Matrix want(config.n_b, config.d_m);
  for (std::size_t e = 0; e < 3; ++e) {
    const auto [ye, cache] = expert_forward(x, state.experts[e]);
    axpy_inplace(want, 1.0 / 3.0, ye);
  }
  CHECK(max_abs_diff(y, want) < 1e-12);
}

TEST_CASE("backward zero upstream gives zero gradients") {
  const MoEConfig config{.n_b = 4, .d_m = 3, .d_h = 5, .k = 2, .n_e_local = 4,
                          .world_size = 1, .seed = 14};
  const MoELayerState state = init_state(config);
  const Matrix x = seeded_input(config, 6);
  MoEForwardCache cache;
  forward(x, state, nullptr, &cache);
  const auto [d_x, grads] = backward(Matrix(config.n_b, config.d_m), cache, state);
  for (std::size_t i = 0; i < d_x.size(); ++i) CHECK(d_x.data()[i] == 0.0);
  for (std::size_t i = 0; i < grads.d_wg.size(); ++i) CHECK(grads.d_wg.data()[i] == 0.0);
  for (const auto& e : grads.experts)
    for (std::size_t i = 0; i < e.d_w1.size(); ++i) CHECK(e.d_w1.data()[i] == 0.0);
}

TEST_CASE("full-layer backward matches finite differences") {
  std::mt19937_64 rng(82);
  int done = 0;
  while (done < 3) {
    MoEConfig config{.n_b = 4, .d_m = 3, .d_h = 5, .k = 2, .n_e_local = 4,
                      .world_size = 1, .seed = rng()};
    MoELayerState state = init_state(config);
    Matrix x = random_matrix(rng, config.n_b, config.d_m);
    if (!stable_instance(x, state)) continue;

    const Matrix weights = random_matrix(rng, config.n_b, config.d_m);
    const auto loss = [&] {
      const Matrix y = forward(x, state);
      double sum = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) sum += weights.data()[i] * y.data()[i];
      return sum;
    };

    MoEForwardCache cache;
    forward(x, state, nullptr, &cache);
    const auto [d_x, grads] = backward(weights, cache, state);

    CHECK(rel_l2_err(grads.d_wg, finite_difference(state.gate.w_g, loss)) < 1e-4);
    CHECK(rel_l2_err(d_x, finite_difference(x, loss)) < 1e-4);
    for (std::size_t e = 0; e < state.experts.size(); ++e) {
      CHECK(rel_l2_err(grads.experts[e].d_w1,
                       finite_difference(state.experts[e].w1, loss)) < 1e-4);
      CHECK(rel_l2_err(grads.experts[e].d_b1,
                       finite_difference(state.experts[e].b1, loss)) < 1e-4);
      CHECK(rel_l2_err(grads.experts[e].d_w2,
                       finite_difference(state.experts[e].w2, loss)) < 1e-4);
      CHECK(rel_l2_err(grads.experts[e].d_b2,
                       finite_difference(state.experts[e].b2, loss)) < 1e-4);
    }
    ++done;
  }
}

TEST_CASE("distributed forward and backward match the single-worker oracle") {
  for (const int world_size : {2, 4}) {
    MoEConfig config{.n_b = 6, .d_m = 4, .d_h = 5, .k = 2, .n_e_local = 2,
                      .world_size = static_cast<std::size_t>(world_size), .seed = 15};
    const MoELayerState merged = single_worker_equivalent(config);
    const Matrix x_global = seeded_input(config, 7);
    const Matrix y_single = forward(x_global, merged);

    std::mt19937_64 rng(83);
    const Matrix d_y_global = random_matrix(rng, x_global.rows(), config.d_m);
    MoEForwardCache cache_single;
    forward(x_global, merged, nullptr, &cache_single);
    const auto [dx_single, grads_single] = backward(d_y_global, cache_single, merged);

    std::vector<Matrix> y_parts(static_cast<std::size_t>(world_size));
    std::vector<Matrix> dwg_parts(static_cast<std::size_t>(world_size));
    std::vector<std::vector<ExpertGrads>> expert_parts(static_cast<std::size_t>(world_size));
    run_world_inproc(world_size, [&](int rank, Transport& t) {
      const MoELayerState state = init_state(config, rank);
      const Matrix x_local = rows_slice(x_global, config.n_b * rank, config.n_b);
      MoEForwardCache cache;
      y_parts[static_cast<std::size_t>(rank)] = forward(x_local, state, &t, &cache);
      const Matrix d_y_local = rows_slice(d_y_global, config.n_b * rank, config.n_b);
      auto [d_x, grads] = backward(d_y_local, cache, state, &t);
      dwg_parts[static_cast<std::size_t>(rank)] = grads.d_wg;
      expert_parts[static_cast<std::size_t>(rank)] = std::move(grads.experts);
    });

    // outputs concatenate to the single-worker result
    for (int r = 0; r < world_size; ++r) {
      const Matrix want = rows_slice(y_single, config.n_b * r, config.n_b);
      REQUIRE(max_abs_diff(y_parts[static_cast<std::size_t>(r)], want) < 1e-10);
    }

    // expert gradients match by global index
    for (int r = 0; r < world_size; ++r)
      for (std::size_t slot = 0; slot < config.n_e_local; ++slot) {
        const std::size_t g = static_cast<std::size_t>(r) * config.n_e_local + slot;
        REQUIRE(max_abs_diff(expert_parts[static_cast<std::size_t>(r)][slot].d_w1,
                             grads_single.experts[g].d_w1) < 1e-9);
        REQUIRE(max_abs_diff(expert_parts[static_cast<std::size_t>(r)][slot].d_w2,
                             grads_single.experts[g].d_w2) < 1e-9);
      }

    // per-rank gate gradients sum to the full-batch gradient
    Matrix gate_sum = dwg_parts[0];
    for (int r = 1; r < world_size; ++r)
      add_inplace(gate_sum, dwg_parts[static_cast<std::size_t>(r)]);
    REQUIRE(max_abs_diff(gate_sum, grads_single.d_wg) < 1e-9);
  }
}

TEST_CASE("expert placement permutation leaves the output unchanged") {
  MoEConfig config{.n_b = 6, .d_m = 4, .d_h = 5, .k = 2, .n_e_local = 2,
                    .world_size = 2, .seed = 16};
  const MoELayerState merged = single_worker_equivalent(config);
  const Matrix x_global = seeded_input(config, 8);

  const std::vector<std::size_t> perm{2, 0, 3, 1};  // new global slot -> old expert

  auto run_with_placement = [&](bool permuted) {
    std::vector<Matrix> parts(2);
    run_world_inproc(2, [&](int rank, Transport& t) {
      MoELayerState state;
      state.config = config;
      state.topology = {2, 1};
      state.rank = rank;
      state.gate.tag = ParamTag::World;
      state.gate.w_g = Matrix(config.d_m, 4);
      for (std::size_t col = 0; col < 4; ++col) {
        const std::size_t src = permuted ? perm[col] : col;
        for (std::size_t row = 0; row < config.d_m; ++row)
          state.gate.w_g(row, col) = merged.gate.w_g(row, src);
      }
      for (std::size_t slot = 0; slot < 2; ++slot) {
        const std::size_t g = static_cast<std::size_t>(rank) * 2 + slot;
        state.experts.push_back(merged.experts[permuted ? perm[g] : g]);
      }
      const Matrix x_local = rows_slice(x_global, config.n_b * rank, config.n_b);
      parts[static_cast<std::size_t>(rank)] = forward(x_local, state, &t);
    });
    return parts;
  };

  const auto base = run_with_placement(false);
  const auto moved = run_with_placement(true);
  for (int r = 0; r < 2; ++r)
    CHECK(max_abs_diff(base[static_cast<std::size_t>(r)],
                       moved[static_cast<std::size_t>(r)]) < 1e-10);
}

TEST_CASE("same seed and world size reproduce bitwise") {
  MoEConfig config{.n_b = 5, .d_m = 4, .d_h = 6, .k = 2, .n_e_local = 3,
                    .world_size = 1, .seed = 17};
  const Matrix x = seeded_input(config, 9);
  const Matrix y1 = forward(x, init_state(config));
  const Matrix y2 = forward(x, init_state(config));
  CHECK(bits_equal(y1, y2));
}

TEST_CASE("checkpoint round trip preserves every bit") {
  MoEConfig config{.n_b = 4, .d_m = 3, .d_h = 5, .k = 2, .n_e_local = 4,
                    .world_size = 1, .seed = 18};
  const MoELayerState state = init_state(config);
  const std::string path = "/tmp/fmoe_test_ckpt.bin";
  save_checkpoint(path, config, state.gate, state.experts);

  const Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.config.n_b == config.n_b);
  CHECK(loaded.config.d_m == config.d_m);
  CHECK(loaded.config.d_h == config.d_h);
  CHECK(loaded.config.k == config.k);
  CHECK(loaded.config.n_e_local == config.n_e_local);
  CHECK(loaded.config.world_size == config.world_size);
  CHECK(loaded.config.seed == config.seed);
  CHECK(bits_equal(loaded.gate.w_g, state.gate.w_g));
  REQUIRE(loaded.experts.size() == 4);
  for (std::size_t e = 0; e < 4; ++e) {
    CHECK(bits_equal(loaded.experts[e].w1, state.experts[e].w1));
    CHECK(bits_equal(loaded.experts[e].b1, state.experts[e].b1));
    CHECK(bits_equal(loaded.experts[e].w2, state.experts[e].w2));
    CHECK(bits_equal(loaded.experts[e].b2, state.experts[e].b2));
  }

  // header bytes are pinned
  std::FILE* f = std::fopen(path.c_str(), "rb");
  REQUIRE(f != nullptr);
  char head[10];
  REQUIRE(std::fread(head, 1, 10, f) == 10);
  std::fclose(f);
  CHECK(std::memcmp(head, "FMOE-CKPT\0", 10) == 0);

  CHECK_THROWS_AS(load_checkpoint("/tmp/does-not-exist-fmoe.bin"), ProtocolError);
  {
    std::FILE* bad = std::fopen("/tmp/fmoe_bad_ckpt.bin", "wb");
    std::fwrite("NOT-A-CKPT", 1, 10, bad);
    std::fclose(bad);
  }
  CHECK_THROWS_AS(load_checkpoint("/tmp/fmoe_bad_ckpt.bin"), ProtocolError);
}

TEST_CASE("train_step with zero learning rate reports loss and keeps parameters") {
  MoEConfig config{.n_b = 8, .d_m = 4, .d_h = 6, .k = 2, .n_e_local = 3,
                    .world_size = 1, .seed = 19};
  MoELayerState state = init_state(config);
  const Matrix gate_before = state.gate.w_g;
  const Matrix w1_before = state.experts[0].w1;
  const ToyTask task = make_toy_task(config);

  const double loss = train_step(task.inputs, task.targets, state, 0.0);
  CHECK(loss > 0.0);
  CHECK(std::isfinite(loss));
  CHECK(bits_equal(state.gate.w_g, gate_before));
  CHECK(bits_equal(state.experts[0].w1, w1_before));
}

TEST_CASE("training on the toy task reduces the loss") {
  MoEConfig config{.n_b = 32, .d_m = 8, .d_h = 16, .k = 2, .n_e_local = 4,
                    .world_size = 1, .seed = 7};
  MoELayerState state = init_state(config);
  const ToyTask task = make_toy_task(config);

  std::vector<double> losses;
  for (int step = 0; step < 50; ++step)
    losses.push_back(train_step(task.inputs, task.targets, state, 1e-3));

  CHECK(losses.back() < losses.front());
  for (std::size_t t = 1; t < losses.size(); ++t)
    CHECK(losses[t] <= losses[t - 1] * (1.0 + 1e-12));
}

TEST_CASE("world 2 training trajectory equals world 1") {
  MoEConfig config1{.n_b = 16, .d_m = 6, .d_h = 8, .k = 2, .n_e_local = 4,
                     .world_size = 1, .seed = 20};
  MoEConfig config2 = config1;
  config2.n_b = 8;
  config2.n_e_local = 2;
  config2.world_size = 2;

  const ToyTask task1 = make_toy_task(config1);
  const ToyTask task2 = make_toy_task(config2);
  REQUIRE(bits_equal(task1.inputs, task2.inputs));  // same global task

  MoELayerState single = init_state(config1);
  std::vector<double> losses1;
  for (int step = 0; step < 10; ++step)
    losses1.push_back(train_step(task1.inputs, task1.targets, single, 0.01));

  std::vector<std::vector<double>> losses2(2);
  std::vector<MoELayerState> states(2);
  run_world_inproc(2, [&](int rank, Transport& t) {
    MoELayerState state = init_state(config2, rank);
    const Matrix x = rows_slice(task2.inputs, config2.n_b * rank, config2.n_b);
    const Matrix target = rows_slice(task2.targets, config2.n_b * rank, config2.n_b);
    for (int step = 0; step < 10; ++step)
      losses2[static_cast<std::size_t>(rank)].push_back(
          train_step(x, target, state, 0.01, &t));
    states[static_cast<std::size_t>(rank)] = std::move(state);
  });

  for (int step = 0; step < 10; ++step) {
    CHECK(std::abs(losses1[static_cast<std::size_t>(step)] -
                   losses2[0][static_cast<std::size_t>(step)]) < 1e-8);
    CHECK(losses2[0][static_cast<std::size_t>(step)] ==
          losses2[1][static_cast<std::size_t>(step)]);
  }

  // parameters agree as well: gate everywhere, experts by global index
  for (int r = 0; r < 2; ++r)
    CHECK(max_abs_diff(states[static_cast<std::size_t>(r)].gate.w_g, single.gate.w_g) < 1e-8);
  for (int r = 0; r < 2; ++r)
    for (std::size_t slot = 0; slot < config2.n_e_local; ++slot) {
      const std::size_t g = static_cast<std::size_t>(r) * config2.n_e_local + slot;
      CHECK(max_abs_diff(states[static_cast<std::size_t>(r)].experts[slot].w1,
                         single.experts[g].w1) < 1e-8);
      CHECK(max_abs_diff(states[static_cast<std::size_t>(r)].experts[slot].b2,
                         single.experts[g].b2) < 1e-8);
    }
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(init_state(MoEConfig{.n_b = 0, .d_m = 1, .d_h = 1, .k = 1,
                                        .n_e_local = 1, .world_size = 1, .seed = 0}),
                  ShapeError);
  CHECK_THROWS_AS(init_state(MoEConfig{.n_b = 1, .d_m = 1, .d_h = 1, .k = 3,
                                        .n_e_local = 2, .world_size = 1, .seed = 0}),
                  ShapeError);
  const MoEConfig config{.n_b = 2, .d_m = 2, .d_h = 2, .k = 1, .n_e_local = 2,
                          .world_size = 2, .seed = 0};
  CHECK_THROWS_AS(init_state(config, 5), ShapeError);
  const MoELayerState state = init_state(config, 0);
  CHECK_THROWS_AS(naive_forward(Matrix(2, 2), state), ShapeError);
}
