#include "kroncast/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace kroncast {

MoePlacement placement_from_string(const std::string& s) {
  if (s == "all") return MoePlacement::All;
  if (s == "every2") return MoePlacement::Every2;
  if (s == "every4") return MoePlacement::Every4;
  if (s == "first_half") return MoePlacement::FirstHalf;
  if (s == "last_half") return MoePlacement::LastHalf;
  if (s == "custom") return MoePlacement::Custom;
  throw std::invalid_argument("unknown MoE placement '" + s + "'");
}

std::string placement_to_string(MoePlacement p) {
  switch (p) {
    case MoePlacement::All: return "all";
    case MoePlacement::Every2: return "every2";
    case MoePlacement::Every4: return "every4";
    case MoePlacement::FirstHalf: return "first_half";
    case MoePlacement::LastHalf: return "last_half";
    case MoePlacement::Custom: return "custom";
  }
  return "?";
}

void ModelConfig::validate() const {
  patch.validate();
  moe.validate();
  if (J < 1) throw std::invalid_argument("ModelConfig: J must be >= 1");
  if (heads < 1 || patch.d % heads != 0) {
    throw std::invalid_argument("ModelConfig: token dim must divide by head count");
  }
  if ((patch.d / heads) % 2 != 0) {
    throw std::invalid_argument("ModelConfig: head dim must be even (rotary pairing)");
  }
  if (j_ci < 0 || j_cm < 0 || j_ci + j_cm != J) {
    throw std::invalid_argument("ModelConfig: j_ci + j_cm must equal J");
  }
  if (graph_layers < 0 || graph_layers > J) {
    throw std::invalid_argument("ModelConfig: graph_layers out of range");
  }
  if (placement == MoePlacement::Custom) {
    std::set<std::int64_t> seen;
    for (auto l : custom_moe_layers) {
      if (l < 1 || l > J) {
        throw std::invalid_argument("ModelConfig: custom MoE layer " + std::to_string(l) +
                                    " outside 1.." + std::to_string(J));
      }
      if (!seen.insert(l).second) {
        throw std::invalid_argument("ModelConfig: duplicate custom MoE layer");
      }
    }
  }
}

std::vector<bool> moe_layer_flags(const ModelConfig& cfg) {
  std::vector<bool> flags(static_cast<size_t>(cfg.J), false);
  switch (cfg.placement) {
    case MoePlacement::All:
      std::fill(flags.begin(), flags.end(), true);
      break;
    case MoePlacement::Every2:
      for (std::int64_t i = 0; i < cfg.J; ++i) flags[static_cast<size_t>(i)] = ((i + 1) % 2 == 0);
      break;
    case MoePlacement::Every4:
      for (std::int64_t i = 0; i < cfg.J; ++i) flags[static_cast<size_t>(i)] = ((i + 1) % 4 == 0);
      break;
    case MoePlacement::FirstHalf:
      for (std::int64_t i = 0; i < (cfg.J + 1) / 2; ++i) flags[static_cast<size_t>(i)] = true;
      break;
    case MoePlacement::LastHalf:
      for (std::int64_t i = (cfg.J + 1) / 2; i < cfg.J; ++i) flags[static_cast<size_t>(i)] = true;
      break;
    case MoePlacement::Custom:
      for (auto l : cfg.custom_moe_layers) flags[static_cast<size_t>(l - 1)] = true;
      break;
  }
  return flags;
}

namespace {

std::vector<double> normal_init(RngStream rng, std::int64_t n, double stddev) {
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return v;
}

Tensor norm_apply(NormKind kind, const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (kind == NormKind::LayerNorm) return layernorm(x, gain, bias);
  return rmsnorm(x, gain);
}

}  // namespace

Tensor decoder_layer_forward(DecoderLayer& layer, const Tensor& h, const Tensor& m_add,
                             std::int64_t C, std::int64_t N, const ModelConfig& cfg,
                             bool accumulate_counts,
                             std::vector<std::vector<double>>* attn_probs) {
  Tensor attn = attention_forward(h, layer.attn, m_add, C, N, cfg.paper_scale, attn_probs);
  Tensor h_hat = norm_apply(cfg.norm, add(attn, h), layer.norm1_gain, layer.norm1_bias);
  if (!layer.is_moe) {
    Tensor f = ffn_forward(h_hat, layer.dense);
    return norm_apply(cfg.norm, add(f, h_hat), layer.norm2_gain, layer.norm2_bias);
  }
  ExpertAssignment asg =
      cfg.moe.token_routing
          ? route_tokens(h_hat, layer.router, cfg.moe.K, accumulate_counts,
                         cfg.moe.renormalize_gates)
          : route_channels(h_hat, C, N, layer.router, cfg.moe.K, accumulate_counts,
                           cfg.moe.renormalize_gates);
  return moe_forward(h_hat, C, N, asg, layer.shared_experts, layer.private_experts,
                     layer.norm2_gain, layer.norm2_bias);
}

Model::Model(ModelConfig cfg, RngStream rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::int64_t d = cfg_.patch.d, P = cfg_.patch.P, h = cfg_.heads;
  std::uint64_t salt = 0;
  auto next_rng = [&]() { return rng.split(salt++); };
  auto reg = [&](const std::string& name, Tensor t) {
    params_.emplace_back(name, t);
    return t;
  };
  auto weight = [&](const std::string& name, std::int64_t rows, std::int64_t cols) {
    return reg(name, parameter({rows, cols},
                               normal_init(next_rng(), rows * cols, 1.0 / std::sqrt(double(rows)))));
  };
  auto zero_vec = [&](const std::string& name, std::int64_t n) {
    return reg(name, parameter({n}, std::vector<double>(static_cast<size_t>(n), 0.0)));
  };
  auto ones_vec = [&](const std::string& name, std::int64_t n) {
    return reg(name, parameter({n}, std::vector<double>(static_cast<size_t>(n), 1.0)));
  };

  embed_w_ = weight("embed.w", P, d);
  embed_b_ = cfg_.linear_bias ? zero_vec("embed.b", d) : Tensor();

  auto flags = moe_layer_flags(cfg_);
  const bool ln = cfg_.norm == NormKind::LayerNorm;
  for (std::int64_t i = 0; i < cfg_.J; ++i) {
    std::string p = "layers." + std::to_string(i) + ".";
    DecoderLayer L;
    L.attn.w_q = weight(p + "attn.wq", d, d);
    L.attn.w_k = weight(p + "attn.wk", d, d);
    L.attn.w_v = weight(p + "attn.wv", d, d);
    L.attn.w_o = weight(p + "attn.wo", d, d);
    L.attn.u = zero_vec(p + "attn.u", h);
    L.attn.v = zero_vec(p + "attn.v", h);
    L.attn.heads = h;
    L.norm1_gain = ones_vec(p + "norm1.gain", d);
    if (ln) L.norm1_bias = zero_vec(p + "norm1.bias", d);
    L.is_moe = flags[static_cast<size_t>(i)];
    auto make_ffn = [&](const std::string& q, std::int64_t width) {
      FFNParams f;
      f.w1 = weight(q + ".w1", d, width);
      if (cfg_.linear_bias) f.b1 = zero_vec(q + ".b1", width);
      f.w2 = weight(q + ".w2", width, d);
      if (cfg_.linear_bias) f.b2 = zero_vec(q + ".b2", d);
      return f;
    };
    if (L.is_moe) {
      L.router.cluster = weight(p + "moe.cluster", cfg_.moe.n_p, d);
      L.router.bias.assign(static_cast<size_t>(cfg_.moe.n_p), 0.0);
      L.router.counts.assign(static_cast<size_t>(cfg_.moe.n_p), 0);
      for (std::int64_t s = 0; s < cfg_.moe.n_s; ++s) {
        L.shared_experts.push_back(make_ffn(p + "moe.shared" + std::to_string(s),
                                            cfg_.moe.shared_width(d)));
      }
      for (std::int64_t e = 0; e < cfg_.moe.n_p; ++e) {
        L.private_experts.push_back(make_ffn(p + "moe.expert" + std::to_string(e),
                                             cfg_.moe.expert_width(d)));
      }
    } else {
      L.dense = make_ffn(p + "ffn", cfg_.moe.dense_width(d));
    }
    L.norm2_gain = ones_vec(p + "norm2.gain", d);
    if (ln) L.norm2_bias = zero_vec(p + "norm2.bias", d);
    layers_.push_back(std::move(L));
  }

  head_w_ = weight("head.w", d, P);
  head_b_ = cfg_.linear_bias ? zero_vec("head.b", P) : Tensor();

  graph_params_.alpha_raw = reg("graph.alpha_raw",
                                parameter({cfg_.patch.L / 2},
                                          std::vector<double>(static_cast<size_t>(cfg_.patch.L / 2), 0.0)));
  graph_params_.edge_bias = reg("graph.edge_bias", parameter({3}, {0.0, 0.0, 0.0}));
}

Tensor Model::run_instances(Tensor h, std::int64_t first_layer, std::int64_t last_layer,
                            std::int64_t instances, std::int64_t C, std::int64_t N,
                            const std::vector<Tensor>* g_per_item) {
  if (first_layer >= last_layer) return h;
  Tensor t_mask = temporal_mask(N);
  std::vector<Tensor> masks;
  if (g_per_item == nullptr) {
    masks.push_back(kronecker_mask(constant({1, 1}, {1.0}), t_mask).m_add);
  } else {
    for (const auto& g : *g_per_item) masks.push_back(kronecker_mask(g, t_mask).m_add);
  }
  const std::int64_t rows = C * N;
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(instances));
  for (std::int64_t inst = 0; inst < instances; ++inst) {
    Tensor hi = slice(h, 0, inst * rows, rows);
    const Tensor& mask = masks[masks.size() == 1 ? 0 : static_cast<size_t>(inst)];
    for (std::int64_t li = first_layer; li < last_layer; ++li) {
      hi = decoder_layer_forward(layers_[static_cast<size_t>(li)], hi, mask, C, N, cfg_,
                                 accumulate_counts, attn_debug);
    }
    outs.push_back(hi);
  }
  return outs.size() == 1 ? outs[0] : concat(outs, 0);
}

namespace {

void check_normalized(const SeriesBatch& batch) {
  if (!batch.normalized) {
    throw std::invalid_argument("forward: batch must be normalized first (call normalize)");
  }
}

}  // namespace

Tensor Model::forward_ci(const SeriesBatch& batch) {
  check_normalized(batch);
  const std::int64_t B = batch.values.dim(0), C = batch.values.dim(1);
  const std::int64_t N = cfg_.patch.num_patches(), d = cfg_.patch.d;
  Tensor tokens = embed_patches(patchify(batch, cfg_.patch), embed_w_, embed_b_);
  Tensor h = reshape(tokens, {B * C * N, d});
  h = run_instances(h, 0, cfg_.J, B * C, 1, N, nullptr);
  return project_output(reshape(h, {B, C, N, d}), head_w_, head_b_);
}

Tensor Model::forward_cm(const SeriesBatch& batch, const std::vector<Tensor>& g_per_item,
                         std::int64_t n_cm) {
  check_normalized(batch);
  if (g_per_item.empty()) {
    throw std::invalid_argument("forward_cm: channel-mixed mode requires an adjacency matrix");
  }
  const std::int64_t B = batch.values.dim(0), C = batch.values.dim(1);
  const std::int64_t N = cfg_.patch.num_patches(), d = cfg_.patch.d;
  if (n_cm < 0 || n_cm > cfg_.J) throw std::invalid_argument("forward_cm: n_cm out of range");
  if (g_per_item.size() != 1 && g_per_item.size() != static_cast<size_t>(B)) {
    throw std::invalid_argument("forward_cm: need one adjacency total or one per batch item");
  }
  for (const auto& g : g_per_item) {
    if (!g.defined() || g.rank() != 2 || g.dim(0) != C || g.dim(1) != C) {
      throw std::invalid_argument("forward_cm: adjacency must be (C, C) with C matching the batch");
    }
  }
  Tensor tokens = embed_patches(patchify(batch, cfg_.patch), embed_w_, embed_b_);
  Tensor h = reshape(tokens, {B * C * N, d});
  h = run_instances(h, 0, cfg_.J - n_cm, B * C, 1, N, nullptr);
  h = run_instances(h, cfg_.J - n_cm, cfg_.J, B, C, N, &g_per_item);
  return project_output(reshape(h, {B, C, N, d}), head_w_, head_b_);
}

void Model::set_trainable_prefix(const std::string& prefix, bool trainable) {
  for (auto& [name, t] : params_) {
    if (name.rfind(prefix, 0) == 0) t.set_requires_grad(trainable);
  }
}

void Model::set_layer_trainable(std::int64_t i, bool trainable) {
  set_trainable_prefix("layers." + std::to_string(i) + ".", trainable);
}

void Model::set_all_trainable(bool trainable) {
  for (auto& [name, t] : params_) t.set_requires_grad(trainable);
}

void Model::zero_grad() {
  for (auto& [name, t] : params_) {
    if (t.requires_grad()) t.zero_grad();
  }
}

void Model::update_router_biases() {
  for (auto& L : layers_) {
    if (L.is_moe) update_bias(L.router, cfg_.moe.bias_rate);
  }
}

std::vector<std::vector<std::int64_t>> Model::expert_loads() const {
  std::vector<std::vector<std::int64_t>> loads;
  for (const auto& L : layers_) {
    if (L.is_moe) loads.push_back(L.router.counts);
  }
  return loads;
}

Tensor next_patch_loss(const Tensor& pred, const Tensor& targets, bool last_only) {
  if (pred.shape() != targets.shape()) {
    throw std::invalid_argument("next_patch_loss: prediction and target shapes differ, " +
                                shape_str(pred.shape()) + " vs " + shape_str(targets.shape()));
  }
  Tensor p = pred, t = targets;
  if (last_only) {
    const std::int64_t N = pred.dim(2);
    p = slice(p, 2, N - 1, 1);
    t = slice(t, 2, N - 1, 1);
  }
  Tensor diff = sub(p, t);
  return mean_all(mul(diff, diff));
}

// ---- parameter accounting ----

namespace {

struct LayerCount {
  std::int64_t attn = 0, norms = 0, ffn_total = 0, ffn_activated = 0, identifiers = 0;
};

LayerCount count_layer(const ModelConfig& cfg, bool is_moe, bool include_biases) {
  const std::int64_t d = cfg.patch.d;
  LayerCount c;
  c.attn = 4 * d * d;
  c.identifiers = 2 * cfg.heads;
  c.norms = 2 * (cfg.norm == NormKind::LayerNorm ? 2 * d : d);
  auto ffn_params = [&](std::int64_t width) {
    std::int64_t n = 2 * d * width;
    if (include_biases) n += width + d;
    return n;
  };
  if (!is_moe) {
    c.ffn_total = c.ffn_activated = ffn_params(cfg.moe.dense_width(d));
  } else {
    const std::int64_t gate = cfg.moe.n_p * d;
    const std::int64_t shared = cfg.moe.n_s * ffn_params(cfg.moe.shared_width(d));
    const std::int64_t priv_one = ffn_params(cfg.moe.expert_width(d));
    c.ffn_total = gate + shared + cfg.moe.n_p * priv_one;
    c.ffn_activated = gate + shared + cfg.moe.K * priv_one;
  }
  return c;
}

}  // namespace

ParamCount count_parameters(const ModelConfig& cfg, bool finetune_mode, bool include_biases) {
  cfg.validate();
  const std::int64_t d = cfg.patch.d, P = cfg.patch.P;
  ParamCount out;
  auto push = [&](const std::string& name, std::int64_t total, std::int64_t activated) {
    out.breakdown.emplace_back(name, total);
    out.total += total;
    out.activated += activated;
  };

  auto flags = moe_layer_flags(cfg);
  const std::int64_t first_layer = finetune_mode ? cfg.J - cfg.j_cm : 0;

  if (!finetune_mode) {
    push("patch_embedding", P * d + (include_biases ? d : 0), P * d + (include_biases ? d : 0));
  }
  for (std::int64_t i = first_layer; i < cfg.J; ++i) {
    LayerCount lc = count_layer(cfg, flags[static_cast<size_t>(i)], include_biases);
    const std::string p = "layer" + std::to_string(i + 1);
    push(p + ".identifiers", lc.identifiers, lc.identifiers);
    push(p + ".attention", lc.attn, lc.attn);
    push(p + ".norms", lc.norms, lc.norms);
    push(p + (flags[static_cast<size_t>(i)] ? ".moe" : ".ffn"), lc.ffn_total, lc.ffn_activated);
  }
  push("output_head", d * P + (include_biases ? P : 0), d * P + (include_biases ? P : 0));
  if (finetune_mode) {
    push("graph.alpha", cfg.patch.L / 2, cfg.patch.L / 2);
    push("graph.edge_biases", 3, 3);
  }
  return out;
}

std::string parameter_report(const ModelConfig& base_cfg, std::int64_t pretrain_target,
                             std::int64_t finetune_target) {
  std::ostringstream os;
  os << "Parameter accounting report\n";
  os << "===========================\n";
  os << "Base configuration: L=" << base_cfg.patch.L << " P=" << base_cfg.patch.P
     << " d=" << base_cfg.patch.d << " J=" << base_cfg.J << " h=" << base_cfg.heads
     << " placement=" << placement_to_string(base_cfg.placement)
     << " norm=" << (base_cfg.norm == NormKind::LayerNorm ? "layernorm" : "rmsnorm") << "\n\n";

  auto report_for = [&](const ModelConfig& cfg, bool finetune, std::int64_t target) {
    ParamCount pc = count_parameters(cfg, finetune, /*include_biases=*/false);
    os << (finetune ? "[finetune scope: trailing " + std::to_string(cfg.j_cm) +
                          " layer(s) + head + graph]"
                    : "[pretrain scope: full stack]")
       << " n_s=" << cfg.moe.n_s << " n_p=" << cfg.moe.n_p << " K=" << cfg.moe.K << "\n";
    for (const auto& [name, count] : pc.breakdown) os << "  " << name << " = " << count << "\n";
    os << "  total = " << pc.total << ", activated = " << pc.activated << "\n";
    os << "  published activated total = " << target << ", gap = " << (pc.activated - target)
       << "\n\n";
    return pc.activated;
  };

  report_for(base_cfg, false, pretrain_target);
  report_for(base_cfg, true, finetune_target);

  os << "Sweep over expert configurations (activated counts, pretrain scope).\n";
  os << "Attention readings: fused = one d x d matrix per projection (as built\n";
  os << "here); per-head = d x d per projection per head, the literal reading of\n";
  os << "'W_q in R^{d x d_q} ... of h heads' with d_q = d, adding (3h-3) d^2 per\n";
  os << "layer.\n";
  const std::int64_t d = base_cfg.patch.d;
  const std::int64_t per_head_extra = 3 * (base_cfg.heads - 1) * d * d * base_cfg.J;
  std::int64_t best_gap = std::numeric_limits<std::int64_t>::max();
  std::string best_desc;
  for (bool per_head : {false, true}) {
    for (std::int64_t n_s : {std::int64_t(1), std::int64_t(2)}) {
      for (std::int64_t K : {std::int64_t(1), std::int64_t(2), std::int64_t(4)}) {
        for (std::int64_t n_p : {std::int64_t(4), std::int64_t(8), std::int64_t(16), std::int64_t(32)}) {
          if (K > n_p) continue;
          ModelConfig c = base_cfg;
          c.moe.n_s = n_s;
          c.moe.n_p = n_p;
          c.moe.K = K;
          c.moe.d_ff_expert = 0;
          c.moe.d_ff_shared = 0;
          ParamCount pc = count_parameters(c, false, false);
          const std::int64_t activated = pc.activated + (per_head ? per_head_extra : 0);
          const std::int64_t gap = activated - pretrain_target;
          os << "  attn=" << (per_head ? "per-head" : "fused") << " n_s=" << n_s
             << " n_p=" << n_p << " K=" << K << " -> activated=" << activated << " gap=" << gap
             << "\n";
          if (std::abs(gap) < std::abs(best_gap)) {
            best_gap = gap;
            best_desc = std::string(per_head ? "per-head" : "fused") + " attention, n_s=" +
                        std::to_string(n_s) + " n_p=" + std::to_string(n_p) +
                        " K=" + std::to_string(K);
          }
        }
      }
    }
  }
  os << "Closest sweep point: " << best_desc << " (gap " << best_gap << ").\n";
  os << "The published totals do not pin the expert configuration (n_s, n_p, K,\n"
     << "head count or the per-head projection shapes; this report records the\n"
     << "arithmetic per component so any candidate setting can be reconciled.\n";
  return os.str();
}

}  // namespace kroncast
