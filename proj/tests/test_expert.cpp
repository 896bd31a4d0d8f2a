#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "fmoe/errors.hpp"
#include "fmoe/expert.hpp"
#include "fmoe/rng.hpp"
#include "test_support.hpp"

using namespace fmoe;
using namespace fmoe::test;

namespace {

ExpertParams random_expert(std::mt19937_64& rng, std::size_t d_m, std::size_t d_h) {
  return ExpertParams{random_matrix(rng, d_m, d_h), random_matrix(rng, 1, d_h),
                      random_matrix(rng, d_h, d_m), random_matrix(rng, 1, d_m),
                      ParamTag::NoSync};
}

ExpertParams scalar_identity_expert() {
  return ExpertParams{Matrix::from_rows({{1}}), Matrix(1, 1), Matrix::from_rows({{1}}),
                      Matrix(1, 1), ParamTag::NoSync};
}

// Keep finite-difference probes away from the relu kink.
bool preact_clear_of_kink(const ForwardCache& cache, double margin = 1e-3) {
  for (std::size_t i = 0; i < cache.preact.size(); ++i)
    if (std::abs(cache.preact.data()[i]) < margin) return false;
  return true;
}

double weighted_output_sum(const Matrix& x, const ExpertParams& params,
                           const Matrix& weights) {
  const auto [y, cache] = expert_forward(x, params);
  double sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) sum += weights.data()[i] * y.data()[i];
  return sum;
}

}  // namespace

TEST_CASE("expert_forward zero parameters and scalar chain") {
  std::mt19937_64 rng(41);
  const Matrix x = random_matrix(rng, 4, 3);
  const ExpertParams zero{Matrix(3, 5), Matrix(1, 5), Matrix(5, 3), Matrix(1, 3),
                          ParamTag::NoSync};
  const auto [y, cache] = expert_forward(x, zero);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == 0.0);

  const ExpertParams scalar = scalar_identity_expert();
  CHECK(expert_forward(Matrix::from_rows({{2}}), scalar).first(0, 0) == 2.0);
  CHECK(expert_forward(Matrix::from_rows({{-2}}), scalar).first(0, 0) == 0.0);

  CHECK_THROWS_AS(expert_forward(Matrix(2, 4), zero), ShapeError);
}

TEST_CASE("expert_forward equals the primitive composition") {
  std::mt19937_64 rng(42);
  const Matrix x = random_matrix(rng, 5, 3);
  const ExpertParams p = random_expert(rng, 3, 7);
  const auto [y, cache] = expert_forward(x, p);
  const Matrix want =
      add_bias_rows(matmul(relu(add_bias_rows(matmul(x, p.w1), p.b1)), p.w2), p.b2);
  CHECK(bits_equal(y, want));
  CHECK(bits_equal(cache.hidden, relu(cache.preact)));
}

TEST_CASE("expert_forward keeps 0-row blocks intact") {
  std::mt19937_64 rng(43);
  const ExpertParams p = random_expert(rng, 3, 5);
  const auto [y, cache] = expert_forward(Matrix(0, 3), p);
  CHECK(y.rows() == 0);
  CHECK(y.cols() == 3);
  const auto [d_x, grads] = expert_backward(Matrix(0, 3), cache, p);
  CHECK(d_x.rows() == 0);
  for (std::size_t i = 0; i < grads.d_w1.size(); ++i) CHECK(grads.d_w1.data()[i] == 0.0);
  for (std::size_t i = 0; i < grads.d_w2.size(); ++i) CHECK(grads.d_w2.data()[i] == 0.0);
}

TEST_CASE("expert_backward hand-derived scalar case and zero upstream") {
  const ExpertParams scalar = scalar_identity_expert();
  const auto [y, cache] = expert_forward(Matrix::from_rows({{2}}), scalar);
  REQUIRE(y(0, 0) == 2.0);
  const auto [d_x, grads] = expert_backward(Matrix::from_rows({{1}}), cache, scalar);
  CHECK(d_x(0, 0) == 1.0);
  CHECK(grads.d_w1(0, 0) == 2.0);
  CHECK(grads.d_w2(0, 0) == 2.0);
  CHECK(grads.d_b1(0, 0) == 1.0);
  CHECK(grads.d_b2(0, 0) == 1.0);

  std::mt19937_64 rng(44);
  const ExpertParams p = random_expert(rng, 3, 5);
  const Matrix x = random_matrix(rng, 4, 3);
  const auto [y2, cache2] = expert_forward(x, p);
  const auto [d_x2, grads2] = expert_backward(Matrix(4, 3), cache2, p);
  for (std::size_t i = 0; i < d_x2.size(); ++i) CHECK(d_x2.data()[i] == 0.0);
  for (std::size_t i = 0; i < grads2.d_w1.size(); ++i) CHECK(grads2.d_w1.data()[i] == 0.0);
  for (std::size_t i = 0; i < grads2.d_b1.size(); ++i) CHECK(grads2.d_b1.data()[i] == 0.0);
  for (std::size_t i = 0; i < grads2.d_w2.size(); ++i) CHECK(grads2.d_w2.data()[i] == 0.0);
  for (std::size_t i = 0; i < grads2.d_b2.size(); ++i) CHECK(grads2.d_b2.data()[i] == 0.0);

  CHECK_THROWS_AS(expert_backward(Matrix(3, 3), cache2, p), ShapeError);
}

TEST_CASE("expert_backward matches finite differences") {
  std::mt19937_64 rng(45);
  int done = 0;
  while (done < 20) {
    Matrix x = random_matrix(rng, 4, 3);
    ExpertParams p = random_expert(rng, 3, 5);
    const auto [y, cache] = expert_forward(x, p);
    if (!preact_clear_of_kink(cache)) continue;

    const Matrix weights = random_matrix(rng, 4, 3);
    const auto [d_x, grads] = expert_backward(weights, cache, p);

    const auto loss = [&] { return weighted_output_sum(x, p, weights); };
    CHECK(rel_l2_err(grads.d_w1, finite_difference(p.w1, loss)) < 1e-5);
    CHECK(rel_l2_err(grads.d_b1, finite_difference(p.b1, loss)) < 1e-5);
    CHECK(rel_l2_err(grads.d_w2, finite_difference(p.w2, loss)) < 1e-5);
    CHECK(rel_l2_err(grads.d_b2, finite_difference(p.b2, loss)) < 1e-5);
    CHECK(rel_l2_err(d_x, finite_difference(x, loss)) < 1e-5);
    ++done;
  }
}

TEST_CASE("multi_expert_forward degenerate pools") {
  std::mt19937_64 rng(46);
  const ExpertParams p = random_expert(rng, 3, 5);
  const Matrix xs = random_matrix(rng, 6, 3);

  // one expert behaves exactly like expert_forward
  const std::int64_t all[] = {6};
  const ExpertParams experts1[] = {p};
  const MultiExpertResult got = multi_expert_forward(xs, all, experts1);
  CHECK(bits_equal(got.ys, expert_forward(xs, p).first));

  // a zero-count block leaves the others untouched
  std::vector<ExpertParams> experts;
  for (int e = 0; e < 4; ++e) experts.push_back(random_expert(rng, 3, 5));
  const std::vector<std::int64_t> counts{2, 0, 3, 1};
  const MultiExpertResult multi = multi_expert_forward(xs, counts, experts);
  CHECK(multi.caches[1].input.rows() == 0);
  CHECK(multi.ys.rows() == 6);

  CHECK_THROWS_AS(multi_expert_forward(xs, std::vector<std::int64_t>{2, 2}, experts),
                  ShapeError);
  CHECK_THROWS_AS(multi_expert_forward(xs, std::vector<std::int64_t>{3, 1, 1, 2}, experts),
                  ShapeError);
}

TEST_CASE("concurrent multi-expert execution is bit-identical to a sequential loop") {
  std::mt19937_64 rng(47);
  for (int iter = 0; iter < 30; ++iter) {
    const std::size_t n_experts = 1 + rng() % 6;
    const std::size_t d_m = 1 + rng() % 6;
    const std::size_t d_h = 1 + rng() % 8;
    std::vector<ExpertParams> experts;
    std::vector<std::int64_t> counts;
    std::size_t total_rows = 0;
    for (std::size_t e = 0; e < n_experts; ++e) {
      experts.push_back(random_expert(rng, d_m, d_h));
      counts.push_back(static_cast<std::int64_t>(rng() % 9));
      total_rows += static_cast<std::size_t>(counts.back());
    }
    const Matrix xs = random_matrix(rng, total_rows, d_m);

    const MultiExpertResult got = multi_expert_forward(xs, counts, experts);

    // sequential oracle
    Matrix want(total_rows, d_m);
    std::vector<ForwardCache> caches;
    std::size_t row = 0;
    for (std::size_t e = 0; e < n_experts; ++e) {
      Matrix block(static_cast<std::size_t>(counts[e]), d_m);
      for (std::size_t r = 0; r < block.rows(); ++r)
        for (std::size_t c = 0; c < d_m; ++c) block(r, c) = xs(row + r, c);
      auto [y, cache] = expert_forward(block, experts[e]);
      for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t c = 0; c < d_m; ++c) want(row + r, c) = y(r, c);
      caches.push_back(std::move(cache));
      row += static_cast<std::size_t>(counts[e]);
    }
    REQUIRE(bits_equal(got.ys, want));

    // backward mirrors the forward contract
    const Matrix d_ys = random_matrix(rng, total_rows, d_m);
    const MultiExpertGrads back = multi_expert_backward(d_ys, got.caches, experts);
    Matrix want_dx(total_rows, d_m);
    row = 0;
    for (std::size_t e = 0; e < n_experts; ++e) {
      Matrix block(static_cast<std::size_t>(counts[e]), d_m);
      for (std::size_t r = 0; r < block.rows(); ++r)
        for (std::size_t c = 0; c < d_m; ++c) block(r, c) = d_ys(row + r, c);
      auto [d_x, grads] = expert_backward(block, caches[e], experts[e]);
      for (std::size_t r = 0; r < d_x.rows(); ++r)
        for (std::size_t c = 0; c < d_m; ++c) want_dx(row + r, c) = d_x(r, c);
      REQUIRE(bits_equal(back.experts[e].d_w1, grads.d_w1));
      REQUIRE(bits_equal(back.experts[e].d_b1, grads.d_b1));
      REQUIRE(bits_equal(back.experts[e].d_w2, grads.d_w2));
      REQUIRE(bits_equal(back.experts[e].d_b2, grads.d_b2));
      row += static_cast<std::size_t>(counts[e]);
    }
    REQUIRE(bits_equal(back.d_xs, want_dx));
  }
}

TEST_CASE("init_expert streams are placement independent") {
  const ExpertParams a = init_expert(4, 6, stream_seed(123, 2));
  const ExpertParams b = init_expert(4, 6, stream_seed(123, 2));
  CHECK(bits_equal(a.w1, b.w1));
  CHECK(bits_equal(a.b2, b.b2));
  const ExpertParams c = init_expert(4, 6, stream_seed(123, 3));
  CHECK_FALSE(bits_equal(a.w1, c.w1));
}
