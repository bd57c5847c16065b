#include <doctest.h>

#include <cmath>

#include "kroncast/checkpoint.hpp"
#include "kroncast/model.hpp"
#include "kroncast/rng.hpp"
#include "oracles.hpp"

using namespace kroncast;

namespace {

ModelConfig tiny_config(std::int64_t J = 2, MoePlacement placement = MoePlacement::Every2,
                        std::int64_t d = 8, std::int64_t h = 2, std::int64_t L = 12,
                        std::int64_t P = 4) {
  ModelConfig mc;
  mc.patch = PatchConfig{L, P, P, P, d};
  mc.J = J;
  mc.placement = placement;
  mc.heads = h;
  mc.moe.n_s = 1;
  mc.moe.n_p = 2;
  mc.moe.K = 1;
  mc.j_ci = J - 1;
  mc.j_cm = 1;
  mc.graph_layers = 1;
  return mc;
}

SeriesBatch random_batch(std::int64_t B, std::int64_t C, std::int64_t L, std::int64_t F,
                         std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<double> vals(static_cast<size_t>(B * C * (L + F)));
  for (auto& v : vals) v = rng.uniform(-2.0, 2.0) + 3.0 * rng.normal();
  SeriesBatch b;
  b.values = constant({B, C, L + F}, std::move(vals));
  b.look_back = L;
  return normalize(b);
}

Tensor identity(std::int64_t n) {
  std::vector<double> v(static_cast<size_t>(n * n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i * n + i)] = 1.0;
  return constant({n, n}, std::move(v));
}

}  // namespace

TEST_CASE("placement patterns enumerate the documented layers") {
  ModelConfig cfg = tiny_config(8);
  cfg.j_ci = 7;
  cfg.j_cm = 1;
  cfg.placement = MoePlacement::Every2;
  CHECK(moe_layer_flags(cfg) ==
        std::vector<bool>{false, true, false, true, false, true, false, true});
  cfg.placement = MoePlacement::Every4;
  CHECK(moe_layer_flags(cfg) ==
        std::vector<bool>{false, false, false, true, false, false, false, true});
  cfg.placement = MoePlacement::FirstHalf;
  CHECK(moe_layer_flags(cfg) ==
        std::vector<bool>{true, true, true, true, false, false, false, false});
  cfg.placement = MoePlacement::LastHalf;
  CHECK(moe_layer_flags(cfg) ==
        std::vector<bool>{false, false, false, false, true, true, true, true});
  cfg.placement = MoePlacement::All;
  CHECK(moe_layer_flags(cfg) == std::vector<bool>(8, true));
  cfg.placement = MoePlacement::Custom;
  cfg.custom_moe_layers = {1, 5};
  CHECK(moe_layer_flags(cfg) ==
        std::vector<bool>{true, false, false, false, true, false, false, false});
  cfg.custom_moe_layers = {9};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.custom_moe_layers = {3, 3};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.custom_moe_layers = {3};
  cfg.j_ci = 3;  // no longer sums to J
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("channel-mixed forward under the identity graph equals channel independent") {
  for (std::int64_t n_cm : {std::int64_t(1), std::int64_t(2)}) {
    ModelConfig cfg = tiny_config(2, MoePlacement::Every2);
    cfg.j_ci = cfg.J - n_cm;
    cfg.j_cm = n_cm;
    Model model(cfg, RngStream(7));
    SeriesBatch batch = random_batch(2, 3, cfg.patch.L, cfg.patch.F, 11);
    Tensor pred_ci = model.forward_ci(batch);
    Tensor pred_cm = model.forward_cm(batch, {identity(3)}, n_cm);
    REQUIRE(pred_ci.shape() == pred_cm.shape());
    for (size_t i = 0; i < pred_ci.data().size(); ++i) {
      CHECK(oracles::rel_err(pred_ci.data()[i], pred_cm.data()[i]) < 1e-6);
    }
  }
}

TEST_CASE("variable permutations commute with the forward pass") {
  const std::int64_t C = 4;
  ModelConfig cfg = tiny_config(2, MoePlacement::Every2, 8, 2);
  Model model(cfg, RngStream(3));
  SeriesBatch batch = random_batch(1, C, cfg.patch.L, cfg.patch.F, 5);
  RngStream rng(17);
  std::vector<double> gv(static_cast<size_t>(C * C), 0.0);
  for (std::int64_t i = 0; i < C; ++i) {
    for (std::int64_t j = 0; j < C; ++j) {
      gv[static_cast<size_t>(i * C + j)] = (i == j || rng.uniform() > 0.5) ? 1.0 : 0.0;
    }
  }
  Tensor g = constant({C, C}, gv);
  Tensor base = model.forward_cm(batch, {g}, 1);

  const std::vector<std::int64_t> perm = {2, 0, 3, 1};
  const std::int64_t W = cfg.patch.L + cfg.patch.F;
  std::vector<double> pv(static_cast<size_t>(C * W));
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t t = 0; t < W; ++t) {
      pv[static_cast<size_t>(c * W + t)] =
          batch.values.data()[static_cast<size_t>(perm[static_cast<size_t>(c)] * W + t)];
    }
  }
  SeriesBatch permuted;
  permuted.values = constant({1, C, W}, pv);
  permuted.look_back = cfg.patch.L;
  std::vector<double> pm(static_cast<size_t>(C)), ps(static_cast<size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) {
    pm[static_cast<size_t>(c)] = batch.norm_mean.data()[static_cast<size_t>(perm[static_cast<size_t>(c)])];
    ps[static_cast<size_t>(c)] = batch.norm_std.data()[static_cast<size_t>(perm[static_cast<size_t>(c)])];
  }
  permuted.norm_mean = constant({1, C}, pm);
  permuted.norm_std = constant({1, C}, ps);
  permuted.normalized = true;
  std::vector<double> gp(static_cast<size_t>(C * C));
  for (std::int64_t i = 0; i < C; ++i) {
    for (std::int64_t j = 0; j < C; ++j) {
      gp[static_cast<size_t>(i * C + j)] =
          g.at({perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]});
    }
  }
  Tensor pg = constant({C, C}, gp);
  Tensor out_p = model.forward_cm(permuted, {pg}, 1);

  const std::int64_t N = cfg.patch.num_patches(), P = cfg.patch.P;
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t k = 0; k < N * P; ++k) {
      const double lhs = out_p.data()[static_cast<size_t>(c * N * P + k)];
      const double rhs =
          base.data()[static_cast<size_t>(perm[static_cast<size_t>(c)] * N * P + k)];
      CHECK(oracles::rel_err(lhs, rhs) < 1e-6);
    }
  }
}

TEST_CASE("whole-model gradients agree with finite differences at a small scale") {
  ModelConfig cfg = tiny_config(2, MoePlacement::Every2, 4, 2);
  Model model(cfg, RngStream(19));
  SeriesBatch batch = random_batch(1, 2, cfg.patch.L, cfg.patch.F, 23);
  Tensor g = constant({2, 2}, {1, 1, 1, 1});
  Tensor targets = next_patch_targets(batch, cfg.patch);

  SUBCASE("channel independent") {
    auto f = [&]() { return next_patch_loss(model.forward_ci(batch), targets); };
    std::vector<Tensor> params, identifiers;
    for (auto& [name, t] : model.named_parameters()) {
      if (name.rfind("graph.", 0) == 0) continue;  // not on the ci path
      // identifiers have an exactly-zero true gradient in ci mode (uniform
      // softmax shift / never-firing cross indicator); pinned below instead
      if (name.find("attn.u") != std::string::npos || name.find("attn.v") != std::string::npos) {
        identifiers.push_back(t);
        continue;
      }
      params.push_back(t);
    }
    CHECK(finite_diff_check(f, params, 1e-5) < 1e-4);
    for (auto& t : identifiers) t.zero_grad();
    backward(f());
    for (const auto& t : identifiers) {
      for (double g2 : t.grad()) CHECK(std::fabs(g2) < 1e-14);
    }
  }
  SUBCASE("channel mixed") {
    auto f = [&]() { return next_patch_loss(model.forward_cm(batch, {g}, 1), targets); };
    std::vector<Tensor> params;
    for (auto& [name, t] : model.named_parameters()) {
      if (name.rfind("graph.", 0) == 0) continue;
      params.push_back(t);
    }
    CHECK(finite_diff_check(f, params, 1e-5) < 1e-4);
  }
}

TEST_CASE("next-patch loss basics and the naive oracle") {
  RngStream rng(31);
  std::vector<double> pv(2 * 3 * 2 * 4), tv(pv.size());
  for (auto& v : pv) v = rng.uniform(-1.0, 1.0);
  for (auto& v : tv) v = rng.uniform(-1.0, 1.0);
  Tensor pred = constant({2, 3, 2, 4}, pv);
  Tensor tgt = constant({2, 3, 2, 4}, tv);
  CHECK(next_patch_loss(pred, pred).item() == 0.0);

  std::vector<double> off(pv.size());
  for (size_t i = 0; i < pv.size(); ++i) off[i] = pv[i] + 1.0;
  CHECK(next_patch_loss(constant({2, 3, 2, 4}, off), pred).item() == doctest::Approx(1.0));

  CHECK(oracles::rel_err(next_patch_loss(pred, tgt).item(), oracles::naive_mse(pv, tv)) < 1e-12);

  // last_only reduces over the final position only
  std::vector<double> pl, tl;
  for (std::int64_t b = 0; b < 2; ++b) {
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t t = 0; t < 4; ++t) {
        pl.push_back(pv[static_cast<size_t>(((b * 3 + c) * 2 + 1) * 4 + t)]);
        tl.push_back(tv[static_cast<size_t>(((b * 3 + c) * 2 + 1) * 4 + t)]);
      }
    }
  }
  CHECK(oracles::rel_err(next_patch_loss(pred, tgt, true).item(), oracles::naive_mse(pl, tl)) <
        1e-12);
}

TEST_CASE("tiny configuration parameter count matches the hand total") {
  ModelConfig cfg = tiny_config(1, MoePlacement::Custom, 4, 1, 8, 2);
  cfg.custom_moe_layers = {};  // dense only
  cfg.j_ci = 0;
  cfg.j_cm = 1;
  cfg.linear_bias = false;
  cfg.moe.d_ff_dense = 8;
  // hand count: embed 2*4=8; identifiers 2; attention 4*16=64; norms 2*4=8;
  // ffn 4*8 + 8*4 = 64; head 4*2=8  => 154
  ParamCount pc = count_parameters(cfg, /*finetune=*/false, /*include_biases=*/false);
  CHECK(pc.total == 154);
  CHECK(pc.activated == pc.total);  // dense layers activate everything

  // one more private expert of hidden width f adds exactly 2*d*f + d
  ModelConfig moe_cfg = tiny_config(1, MoePlacement::All, 4, 1, 8, 2);
  moe_cfg.j_ci = 0;
  moe_cfg.j_cm = 1;
  moe_cfg.linear_bias = false;
  moe_cfg.moe.n_p = 2;
  moe_cfg.moe.K = 1;
  moe_cfg.moe.d_ff_expert = 6;
  ParamCount before = count_parameters(moe_cfg, false, false);
  moe_cfg.moe.n_p = 3;
  ParamCount after = count_parameters(moe_cfg, false, false);
  CHECK(after.total - before.total == 2 * 4 * 6 + 4);
  // activated: still K experts, plus the one extra gating row
  CHECK(after.activated - before.activated == 4);
}

TEST_CASE("pretrain-scope count equals the actual parameter storage") {
  ModelConfig cfg = tiny_config(3, MoePlacement::LastHalf, 8, 2);
  cfg.j_ci = 2;
  cfg.j_cm = 1;
  Model model(cfg, RngStream(1));
  std::int64_t stored = 0;
  for (const auto& [name, t] : model.named_parameters()) {
    if (name.rfind("graph.", 0) == 0) continue;  // graph layer counts in finetune scope
    stored += t.size();
  }
  ParamCount pc = count_parameters(cfg, false, /*include_biases=*/true);
  CHECK(pc.total == stored);

  ParamCount ft = count_parameters(cfg, true, true);
  std::int64_t expect = 0;
  for (const auto& [name, t] : model.named_parameters()) {
    if (name.rfind("layers.2.", 0) == 0 || name.rfind("head.", 0) == 0 ||
        name.rfind("graph.", 0) == 0) {
      expect += t.size();
    }
  }
  CHECK(ft.total == expect);
}

TEST_CASE("the parameter report documents the published-total gap analysis") {
  ModelConfig cfg;  // paper-scale defaults
  cfg.norm = NormKind::LayerNorm;
  cfg.linear_bias = false;
  std::string report = parameter_report(cfg, 79911648, 16850883);
  CHECK(report.find("79911648") != std::string::npos);
  CHECK(report.find("16850883") != std::string::npos);
  CHECK(report.find("gap") != std::string::npos);
  CHECK(report.find("activated") != std::string::npos);
}

TEST_CASE("checkpoints round trip bit exactly") {
  ModelConfig cfg = tiny_config();
  Model model(cfg, RngStream(5));
  CheckpointData data = checkpoint_from_params(model.named_parameters(), "echo=1");
  const std::string path = "/tmp/kroncast_test.ckpt";
  save_checkpoint(path, data);
  CheckpointData loaded = load_checkpoint(path);
  CHECK(loaded.config_echo == "echo=1");
  REQUIRE(loaded.arrays.size() == data.arrays.size());
  for (size_t i = 0; i < data.arrays.size(); ++i) {
    CHECK(loaded.arrays[i].first == data.arrays[i].first);
    CHECK(loaded.arrays[i].second.first == data.arrays[i].second.first);
    CHECK(loaded.arrays[i].second.second == data.arrays[i].second.second);
  }
  Model other(cfg, RngStream(99));
  load_into_params(loaded, other.named_parameters());
  for (size_t i = 0; i < model.named_parameters().size(); ++i) {
    CHECK(other.named_parameters()[i].second.data() ==
          model.named_parameters()[i].second.data());
  }
}

TEST_CASE("construction is deterministic in the seed") {
  ModelConfig cfg = tiny_config();
  Model a(cfg, RngStream(42)), b(cfg, RngStream(42)), c(cfg, RngStream(43));
  bool all_equal = true, any_diff = false;
  for (size_t i = 0; i < a.named_parameters().size(); ++i) {
    if (a.named_parameters()[i].second.data() != b.named_parameters()[i].second.data()) {
      all_equal = false;
    }
    if (a.named_parameters()[i].second.data() != c.named_parameters()[i].second.data()) {
      any_diff = true;
    }
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("channel-mixed mode demands a well-shaped adjacency") {
  ModelConfig cfg = tiny_config();
  Model model(cfg, RngStream(2));
  SeriesBatch batch = random_batch(1, 3, cfg.patch.L, cfg.patch.F, 4);
  CHECK_THROWS_AS(model.forward_cm(batch, {}, 1), std::invalid_argument);
  CHECK_THROWS_AS(model.forward_cm(batch, {identity(2)}, 1), std::invalid_argument);
  SeriesBatch raw;
  raw.values = zeros({1, 3, cfg.patch.L + cfg.patch.F});
  raw.look_back = cfg.patch.L;
  CHECK_THROWS_AS(model.forward_ci(raw), std::invalid_argument);  // unnormalized input
}

TEST_CASE("no parameter depends on the channel count") {
  ModelConfig cfg = tiny_config();
  Model model(cfg, RngStream(13));
  SeriesBatch two = random_batch(1, 2, cfg.patch.L, cfg.patch.F, 1);
  SeriesBatch five = random_batch(1, 5, cfg.patch.L, cfg.patch.F, 2);
  CHECK_NOTHROW(model.forward_cm(two, {identity(2)}, 1));
  CHECK_NOTHROW(model.forward_cm(five, {identity(5)}, 1));
}
