#include <doctest.h>

#include <cmath>

#include "kroncast/rng.hpp"
#include "kroncast/tokenizer.hpp"
#include "oracles.hpp"

using namespace kroncast;

namespace {

SeriesBatch batch_from(std::vector<double> values, std::int64_t B, std::int64_t C, std::int64_t Lw,
                       std::int64_t look_back) {
  SeriesBatch b;
  b.values = constant({B, C, Lw}, std::move(values));
  b.look_back = look_back;
  return b;
}

}  // namespace

TEST_CASE("constant channels normalize to zeros with a floored std") {
  SeriesBatch b = batch_from(std::vector<double>(8, 5.0), 1, 1, 8, 8);
  SeriesBatch n = normalize(b);
  CHECK(n.norm_mean.data()[0] == doctest::Approx(5.0));
  CHECK(n.norm_std.data()[0] == doctest::Approx(1e-6));
  CHECK(n.floored_channels.size() == 1);
  for (double v : n.values.data()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("normalize records the mean and leaves mean-zero output") {
  SeriesBatch b = batch_from({1, 2, 3, 4}, 1, 1, 4, 4);
  SeriesBatch n = normalize(b);
  CHECK(n.norm_mean.data()[0] == doctest::Approx(2.5));
  double mean = 0.0;
  for (double v : n.values.data()) mean += v;
  CHECK(std::fabs(mean / 4.0) < 1e-12);
}

TEST_CASE("normalize then denormalize is a round trip") {
  RngStream rng(5);
  std::vector<double> vals(2 * 3 * 10);
  for (auto& v : vals) v = rng.uniform(-4.0, 9.0);
  SeriesBatch b = batch_from(vals, 2, 3, 10, 10);
  SeriesBatch n = normalize(b);
  Tensor back = denormalize(n.values, n.norm_mean, n.norm_std);
  for (size_t i = 0; i < vals.size(); ++i) {
    CHECK(oracles::rel_err(back.data()[i], vals[i]) < 1e-10);
  }
  CHECK(n.normalized);
}

TEST_CASE("default geometry yields seven non-overlapping patches") {
  PatchConfig cfg{672, 96, 96, 96, 8};
  CHECK(cfg.num_patches() == 7);
  std::vector<double> vals(672);
  for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(i);
  SeriesBatch b = batch_from(vals, 1, 1, 672, 672);
  Tensor p = patchify(b, cfg);
  CHECK(p.shape() == Shape{1, 1, 7, 96});
  for (int j = 0; j < 7; ++j) {
    for (int t = 0; t < 96; ++t) {
      CHECK(p.data()[static_cast<size_t>(j * 96 + t)] == doctest::Approx(j * 96 + t));
    }
  }
}

TEST_CASE("L equal to P gives one patch equal to the series") {
  PatchConfig cfg{4, 4, 4, 4, 2};
  SeriesBatch b = batch_from({7, 8, 9, 10}, 1, 1, 4, 4);
  Tensor p = patchify(b, cfg);
  CHECK(p.shape() == Shape{1, 1, 1, 4});
  CHECK(p.data() == std::vector<double>{7, 8, 9, 10});
}

TEST_CASE("overlapping stride enumerates the hand-computed windows") {
  PatchConfig cfg{8, 4, 4, 2, 2};
  SeriesBatch b = batch_from({1, 2, 3, 4, 5, 6, 7, 8}, 1, 1, 8, 8);
  Tensor p = patchify(b, cfg);
  CHECK(p.shape() == Shape{1, 1, 3, 4});
  CHECK(p.data() == std::vector<double>{1, 2, 3, 4, 3, 4, 5, 6, 5, 6, 7, 8});
}

TEST_CASE("stride that does not tile the look-back is rejected with a hint") {
  PatchConfig cfg{10, 4, 4, 4, 2};
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("trim"), std::invalid_argument);
  PatchConfig bad_horizon{8, 2, 4, 4, 2};
  CHECK_THROWS_AS(bad_horizon.validate(), std::invalid_argument);  // F != P
}

TEST_CASE("zero patches embed to the bias row") {
  Tensor patches = zeros({1, 1, 2, 3});
  Tensor w = constant({3, 4}, std::vector<double>(12, 0.5));
  Tensor bias = constant({4}, {1, 2, 3, 4});
  Tensor tokens = embed_patches(patches, w, bias);
  CHECK(tokens.shape() == Shape{1, 1, 2, 4});
  for (int j = 0; j < 2; ++j) {
    for (int k = 0; k < 4; ++k) {
      CHECK(tokens.data()[static_cast<size_t>(j * 4 + k)] == doctest::Approx(k + 1));
    }
  }
  Tensor no_bias = embed_patches(patches, w);
  for (double v : no_bias.data()) CHECK(v == 0.0);
}

TEST_CASE("identity projector reproduces the patch and embedding is linear") {
  Tensor eye = constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  RngStream rng(9);
  std::vector<double> pv(6);
  for (auto& v : pv) v = rng.uniform(-1.0, 1.0);
  Tensor patches = constant({1, 1, 2, 3}, pv);
  Tensor tokens = embed_patches(patches, eye);
  for (size_t i = 0; i < pv.size(); ++i) CHECK(tokens.data()[i] == doctest::Approx(pv[i]));

  std::vector<double> wv(15);
  for (auto& x : wv) x = rng.uniform(-1.0, 1.0);
  Tensor w = constant({3, 5}, wv);
  std::vector<double> pv3 = pv;
  for (auto& x : pv3) x *= 3.0;
  Tensor scaled = embed_patches(constant({1, 1, 2, 3}, pv3), w);
  Tensor base = embed_patches(patches, w);
  for (size_t i = 0; i < scaled.data().size(); ++i) {
    CHECK(oracles::rel_err(scaled.data()[i], 3.0 * base.data()[i]) < 1e-12);
  }
}

TEST_CASE("output projection honors the shape contract") {
  Tensor tokens = zeros({2, 3, 4, 8});
  Tensor w = zeros({8, 5});
  Tensor out = project_output(tokens, w);
  CHECK(out.shape() == Shape{2, 3, 4, 5});
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("inverse head projection reconstructs embedded patches") {
  // orthogonal W_p: the transpose is the (pseudo-)inverse oracle at d = P
  const std::int64_t P = 4;
  RngStream rng(21);
  std::vector<std::vector<double>> basis;
  for (int i = 0; i < P; ++i) {
    std::vector<double> v(static_cast<size_t>(P));
    for (auto& x : v) x = rng.normal();
    for (const auto& u : basis) {
      double dot = 0.0;
      for (int k = 0; k < P; ++k) dot += v[static_cast<size_t>(k)] * u[static_cast<size_t>(k)];
      for (int k = 0; k < P; ++k) v[static_cast<size_t>(k)] -= dot * u[static_cast<size_t>(k)];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    basis.push_back(v);
  }
  std::vector<double> wv(static_cast<size_t>(P * P)), wt(static_cast<size_t>(P * P));
  for (int i = 0; i < P; ++i) {
    for (int j = 0; j < P; ++j) {
      wv[static_cast<size_t>(i * P + j)] = basis[static_cast<size_t>(i)][static_cast<size_t>(j)];
      wt[static_cast<size_t>(j * P + i)] = basis[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
  }
  Tensor w_p = constant({P, P}, wv);
  Tensor w_d = constant({P, P}, wt);
  std::vector<double> pv(static_cast<size_t>(2 * P));
  for (auto& v : pv) v = rng.uniform(-1.0, 1.0);
  Tensor patches = constant({1, 1, 2, P}, pv);
  Tensor rec = project_output(embed_patches(patches, w_p), w_d);
  for (size_t i = 0; i < pv.size(); ++i) {
    CHECK(std::fabs(rec.data()[i] - pv[i]) < 1e-6);
  }
}

TEST_CASE("patchify and embed are batch-order equivariant") {
  PatchConfig cfg{8, 4, 4, 4, 3};
  RngStream rng(31);
  std::vector<double> v0(8), v1(8);
  for (auto& v : v0) v = rng.uniform(-1.0, 1.0);
  for (auto& v : v1) v = rng.uniform(-1.0, 1.0);
  std::vector<double> fwd(v0), rev(v1);
  fwd.insert(fwd.end(), v1.begin(), v1.end());
  rev.insert(rev.end(), v0.begin(), v0.end());
  Tensor w = constant({4, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  Tensor t_fwd = embed_patches(patchify(batch_from(fwd, 2, 1, 8, 8), cfg), w);
  Tensor t_rev = embed_patches(patchify(batch_from(rev, 2, 1, 8, 8), cfg), w);
  const std::int64_t half = t_fwd.size() / 2;
  for (std::int64_t i = 0; i < half; ++i) {
    CHECK(t_fwd.data()[static_cast<size_t>(i)] == t_rev.data()[static_cast<size_t>(half + i)]);
    CHECK(t_fwd.data()[static_cast<size_t>(half + i)] == t_rev.data()[static_cast<size_t>(i)]);
  }
}

TEST_CASE("non-overlapping patches concatenate back to the series head") {
  PatchConfig cfg{12, 4, 4, 4, 2};
  std::vector<double> vals(12);
  for (size_t i = 0; i < vals.size(); ++i) vals[i] = std::sin(0.3 * static_cast<double>(i));
  Tensor p = patchify(batch_from(vals, 1, 1, 12, 12), cfg);
  for (size_t i = 0; i < vals.size(); ++i) CHECK(p.data()[i] == vals[i]);
}

TEST_CASE("next-patch targets shift by one patch and end at the horizon") {
  PatchConfig cfg{8, 4, 4, 4, 2};
  std::vector<double> vals(12);
  for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(i);
  Tensor t = next_patch_targets(batch_from(vals, 1, 1, 12, 8), cfg);
  CHECK(t.shape() == Shape{1, 1, 2, 4});
  CHECK(t.data() == std::vector<double>{4, 5, 6, 7, 8, 9, 10, 11});
  CHECK_THROWS_AS(next_patch_targets(batch_from(std::vector<double>(8, 0.0), 1, 1, 8, 8), cfg),
                  std::invalid_argument);
}

TEST_CASE("identity token path reproduces the repeat-last-patch forecast") {
  // W_d . W_p = I with the decoder body bypassed: the prediction at the last
  // position is the final look-back patch, so the denormalized forecast is
  // the naive repeat of the last patch
  const std::int64_t P = 4, L = 12;
  PatchConfig cfg{L, P, P, P, P};
  RngStream rng(77);
  std::vector<double> vals(static_cast<size_t>(L + P));
  for (auto& v : vals) v = rng.uniform(-3.0, 5.0);
  SeriesBatch raw = batch_from(vals, 1, 1, L + P, L);
  SeriesBatch nb = normalize(raw);

  Tensor eye = constant({P, P}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  Tensor tokens = embed_patches(patchify(nb, cfg), eye);
  Tensor pred = project_output(tokens, eye);
  const std::int64_t N = cfg.num_patches();
  Tensor horizon = denormalize(reshape(slice(pred, 2, N - 1, 1), {1, 1, P}), nb.norm_mean,
                               nb.norm_std);
  for (std::int64_t t = 0; t < P; ++t) {
    // last look-back patch occupies [L-P, L)
    CHECK(horizon.data()[static_cast<size_t>(t)] ==
          doctest::Approx(vals[static_cast<size_t>(L - P + t)]).epsilon(1e-10));
  }
}
