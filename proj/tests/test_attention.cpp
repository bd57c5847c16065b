#include <doctest.h>

#include <cmath>

#include "kroncast/attention.hpp"
#include "kroncast/rng.hpp"
#include "oracles.hpp"

using namespace kroncast;

namespace {

Tensor random_matrix(Shape shape, RngStream& rng, double scale = 1.0) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return constant(std::move(shape), std::move(v));
}

AttentionParams random_params(std::int64_t d, std::int64_t heads, RngStream& rng,
                              bool as_parameters = false) {
  AttentionParams p;
  auto make = [&](Shape s, double scale) {
    std::vector<double> v(static_cast<size_t>(numel(s)));
    for (auto& x : v) x = rng.normal(0.0, scale);
    return as_parameters ? parameter(std::move(s), std::move(v)) : constant(std::move(s), std::move(v));
  };
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  p.w_q = make({d, d}, scale);
  p.w_k = make({d, d}, scale);
  p.w_v = make({d, d}, scale);
  p.w_o = make({d, d}, scale);
  p.u = make({heads}, 0.3);
  p.v = make({heads}, 0.3);
  p.heads = heads;
  return p;
}

Tensor identity(std::int64_t n) {
  std::vector<double> v(static_cast<size_t>(n * n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i * n + i)] = 1.0;
  return constant({n, n}, std::move(v));
}

// brute-force double-loop reference for kron(G, T) with the mask() transform
void check_mask_against_oracle(const Tensor& g, const Tensor& t) {
  const std::int64_t C = g.dim(0), N = t.dim(0);
  AttentionMask mask = kronecker_mask(g, t);
  for (std::int64_t i = 0; i < C; ++i) {
    for (std::int64_t m = 0; m < N; ++m) {
      for (std::int64_t j = 0; j < C; ++j) {
        for (std::int64_t n = 0; n < N; ++n) {
          const double expect = g.at({i, j}) * t.at({m, n});
          CHECK(mask.m_raw.at({i * N + m, j * N + n}) == expect);
          CHECK(mask.m_add.at({i * N + m, j * N + n}) == (expect == 1.0 ? 0.0 : -1e9));
        }
      }
    }
  }
}

}  // namespace

TEST_CASE("temporal mask shape and content") {
  CHECK(temporal_mask(1).data() == std::vector<double>{1});
  Tensor t3 = temporal_mask(3);
  CHECK(t3.data() == std::vector<double>{1, 0, 0, 1, 1, 0, 1, 1, 1});
  Tensor t5 = temporal_mask(5);
  for (std::int64_t m = 0; m < 5; ++m) {
    double row_sum = 0.0;
    for (std::int64_t n = 0; n < 5; ++n) row_sum += t5.at({m, n});
    CHECK(row_sum == doctest::Approx(m + 1));
  }
}

TEST_CASE("kronecker mask with one variable is the temporal mask") {
  Tensor t = temporal_mask(4);
  AttentionMask m = kronecker_mask(constant({1, 1}, {1.0}), t);
  CHECK(m.m_raw.data() == t.data());
}

TEST_CASE("identity adjacency blocks every cross-variable pair") {
  Tensor t = temporal_mask(2);
  AttentionMask m = kronecker_mask(identity(2), t);
  // explicit 4x4 enumeration: block-diagonal lower triangles
  const std::vector<double> expect = {1, 0, 0, 0,
                                      1, 1, 0, 0,
                                      0, 0, 1, 0,
                                      0, 0, 1, 1};
  CHECK(m.m_raw.data() == expect);
}

TEST_CASE("all-ones adjacency exposes every causal pair in every block") {
  Tensor t = temporal_mask(2);
  AttentionMask m = kronecker_mask(constant({2, 2}, {1, 1, 1, 1}), t);
  const std::vector<double> expect = {1, 0, 1, 0,
                                      1, 1, 1, 1,
                                      1, 0, 1, 0,
                                      1, 1, 1, 1};
  CHECK(m.m_raw.data() == expect);
}

TEST_CASE("kronecker mask matches the double-loop oracle on all small graphs") {
  for (std::int64_t C : {1, 2, 3}) {
    for (std::int64_t N : {1, 2, 3, 4}) {
      const std::int64_t off_diag = C * C - C;
      for (std::int64_t bits = 0; bits < (1LL << off_diag); ++bits) {
        std::vector<double> g(static_cast<size_t>(C * C), 0.0);
        std::int64_t b = 0;
        for (std::int64_t i = 0; i < C; ++i) {
          for (std::int64_t j = 0; j < C; ++j) {
            if (i == j) g[static_cast<size_t>(i * C + j)] = 1.0;
            else g[static_cast<size_t>(i * C + j)] = (bits >> b++) & 1 ? 1.0 : 0.0;
          }
        }
        check_mask_against_oracle(constant({C, C}, g), temporal_mask(N));
      }
    }
  }
}

TEST_CASE("a zero diagonal is rejected") {
  Tensor g = constant({2, 2}, {1, 0, 0, 0});
  CHECK_THROWS_AS(kronecker_mask(g, temporal_mask(2)), std::invalid_argument);
}

TEST_CASE("self-score at equal positions is the plain dot product plus u") {
  const std::int64_t d = 4;
  AttentionParams p;
  p.w_q = identity(d);
  p.w_k = identity(d);
  p.w_v = identity(d);
  p.w_o = identity(d);
  p.u = constant({1}, {0.7});
  p.v = constant({1}, {-0.3});
  p.heads = 1;
  Tensor h = constant({1, d}, {0.5, -1.0, 2.0, 0.25});
  auto scores = attention_scores(h, p, 1, 1);
  double dot = 0.0;
  for (double x : h.data()) dot += x * x;
  CHECK(scores[0].data()[0] == doctest::Approx(dot + 0.7).epsilon(1e-12));
}

TEST_CASE("swapping variable blocks permutes the score matrix exactly") {
  const std::int64_t d = 8, C = 3, N = 2;
  RngStream rng(5);
  AttentionParams p = random_params(d, 2, rng);
  Tensor h = random_matrix({C * N, d}, rng);
  auto scores = attention_scores(h, p, C, N);

  // swap variables 0 and 2
  std::vector<std::int64_t> perm = {2, 1, 0};
  std::vector<double> hp(static_cast<size_t>(C * N * d));
  for (std::int64_t c = 0; c < C; ++c) {
    std::copy(h.data().begin() + perm[static_cast<size_t>(c)] * N * d,
              h.data().begin() + (perm[static_cast<size_t>(c)] + 1) * N * d,
              hp.begin() + c * N * d);
  }
  auto scores_p = attention_scores(constant({C * N, d}, hp), p, C, N);
  for (size_t head = 0; head < scores.size(); ++head) {
    for (std::int64_t i = 0; i < C; ++i) {
      for (std::int64_t m = 0; m < N; ++m) {
        for (std::int64_t j = 0; j < C; ++j) {
          for (std::int64_t n = 0; n < N; ++n) {
            CHECK(scores_p[head].at({i * N + m, j * N + n}) ==
                  scores[head].at({perm[static_cast<size_t>(i)] * N + m,
                                   perm[static_cast<size_t>(j)] * N + n}));
          }
        }
      }
    }
  }
}

TEST_CASE("equal identifiers collapse to a constant offset") {
  const std::int64_t d = 4, C = 2, N = 2;
  RngStream rng(9);
  AttentionParams p = random_params(d, 1, rng);
  p.u = constant({1}, {0.4});
  p.v = constant({1}, {0.4});
  AttentionParams p0 = p;
  p0.u = constant({1}, {0.0});
  p0.v = constant({1}, {0.0});
  Tensor h = random_matrix({C * N, d}, rng);
  auto with = attention_scores(h, p, C, N);
  auto without = attention_scores(h, p0, C, N);
  for (size_t i = 0; i < with[0].data().size(); ++i) {
    CHECK(with[0].data()[i] == doctest::Approx(without[0].data()[i] + 0.4).epsilon(1e-12));
  }
}

TEST_CASE("rotary scores depend only on the position offset") {
  const std::int64_t d = 8, N = 6;
  RngStream rng(11);
  AttentionParams p = random_params(d, 2, rng);
  p.u = constant({2}, {0.0, 0.0});
  p.v = constant({2}, {0.0, 0.0});
  std::vector<double> xv(static_cast<size_t>(d)), yv(static_cast<size_t>(d));
  for (auto& x : xv) x = rng.normal();
  for (auto& y : yv) y = rng.normal();
  // x at positions {0, 3}, y at {1, 4}: score(x@0, y@1) == score(x@3, y@4)
  std::vector<double> hv(static_cast<size_t>(N * d), 0.0);
  auto put = [&](std::int64_t row, const std::vector<double>& v) {
    std::copy(v.begin(), v.end(), hv.begin() + row * d);
  };
  put(0, xv);
  put(1, yv);
  put(3, xv);
  put(4, yv);
  auto scores = attention_scores(constant({N, d}, hv), p, 1, N);
  for (const auto& s : scores) {
    CHECK(s.at({0, 1}) == doctest::Approx(s.at({3, 4})).epsilon(1e-10));
    CHECK(s.at({1, 0}) == doctest::Approx(s.at({4, 3})).epsilon(1e-10));
  }
}

TEST_CASE("single token attends only to itself") {
  const std::int64_t d = 4;
  RngStream rng(13);
  AttentionParams p = random_params(d, 1, rng);
  Tensor h = random_matrix({1, d}, rng);
  AttentionMask m = kronecker_mask(constant({1, 1}, {1.0}), temporal_mask(1));
  std::vector<std::vector<double>> probs;
  Tensor out = attention_forward(h, p, m.m_add, 1, 1, false, &probs);
  REQUIRE(probs.size() == 1);
  CHECK(probs[0][0] == doctest::Approx(1.0));
  // output equals W_o . W_v h
  Tensor manual = matmul(matmul(h, p.w_v), p.w_o);
  for (size_t i = 0; i < manual.data().size(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(manual.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("identity graph makes channels independent") {
  const std::int64_t d = 8, C = 3, N = 3;
  RngStream rng(17);
  AttentionParams p = random_params(d, 2, rng);
  Tensor h = random_matrix({C * N, d}, rng);
  Tensor t = temporal_mask(N);
  Tensor joint = attention_forward(h, p, kronecker_mask(identity(C), t).m_add, C, N);
  Tensor solo_mask = kronecker_mask(constant({1, 1}, {1.0}), t).m_add;
  for (std::int64_t c = 0; c < C; ++c) {
    Tensor hc = slice(h, 0, c * N, N);
    Tensor solo = attention_forward(hc, p, solo_mask, 1, N);
    for (std::int64_t r = 0; r < N; ++r) {
      for (std::int64_t k = 0; k < d; ++k) {
        CHECK(oracles::rel_err(joint.at({c * N + r, k}), solo.at({r, k})) < 1e-6);
      }
    }
  }
}

TEST_CASE("masked positions receive exactly zero attention") {
  const std::int64_t d = 4, C = 2, N = 3;
  RngStream rng(19);
  AttentionParams p = random_params(d, 1, rng);
  Tensor h = random_matrix({C * N, d}, rng);
  AttentionMask m = kronecker_mask(identity(C), temporal_mask(N));
  std::vector<std::vector<double>> probs;
  attention_forward(h, p, m.m_add, C, N, false, &probs);
  for (const auto& head : probs) {
    for (std::int64_t r = 0; r < C * N; ++r) {
      for (std::int64_t c = 0; c < C * N; ++c) {
        if (m.m_raw.at({r, c}) == 0.0) {
          CHECK(head[static_cast<size_t>(r * C * N + c)] < 1e-30);
        }
      }
    }
  }
}

TEST_CASE("attention parameters pass the finite-difference audit") {
  const std::int64_t d = 4, C = 2, N = 2;
  RngStream rng(23);
  AttentionParams p = random_params(d, 2, rng, /*as_parameters=*/true);
  Tensor h = random_matrix({C * N, d}, rng);
  Tensor m_add = kronecker_mask(constant({2, 2}, {1, 1, 1, 1}), temporal_mask(N)).m_add;
  Tensor weights = random_matrix({C * N, d}, rng);
  auto f = [&]() { return sum_all(mul(attention_forward(h, p, m_add, C, N), weights)); };
  CHECK(finite_diff_check(f, {p.w_q, p.w_k, p.w_v, p.w_o, p.u, p.v}, 1e-5) < 1e-4);
}

TEST_CASE("blocked token pairs cannot influence the output") {
  const std::int64_t d = 8, C = 2, N = 3;
  RngStream rng(29);
  AttentionParams p = random_params(d, 2, rng);
  Tensor g = constant({2, 2}, {1, 0, 1, 1});  // variable 0 cannot see variable 1
  AttentionMask m = kronecker_mask(g, temporal_mask(N));
  std::vector<double> hv(static_cast<size_t>(C * N * d));
  for (auto& v : hv) v = rng.normal();
  Tensor base_out = attention_forward(constant({C * N, d}, hv), p, m.m_add, C, N);
  // perturb token (variable 1, position 0); tokens of variable 0 must not move
  std::vector<double> hp = hv;
  hp[static_cast<size_t>((1 * N + 0) * d + 2)] += 0.37;
  Tensor pert_out = attention_forward(constant({C * N, d}, hp), p, m.m_add, C, N);
  for (std::int64_t r = 0; r < N; ++r) {
    for (std::int64_t k = 0; k < d; ++k) {
      CHECK(std::fabs(base_out.at({r, k}) - pert_out.at({r, k})) < 1e-12);
    }
  }
}

TEST_CASE("paper scaling divides by the full model dimension") {
  const std::int64_t d = 8, N = 2;
  RngStream rng(31);
  AttentionParams p = random_params(d, 2, rng);
  Tensor h = random_matrix({N, d}, rng);
  Tensor mask = kronecker_mask(constant({1, 1}, {1.0}), temporal_mask(N)).m_add;
  std::vector<std::vector<double>> probs_head, probs_full;
  attention_forward(h, p, mask, 1, N, false, &probs_head);
  attention_forward(h, p, mask, 1, N, true, &probs_full);
  CHECK(probs_head[0] != probs_full[0]);  // different softmax temperature
}
