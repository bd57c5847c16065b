#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kroncast/attention.hpp"
#include "kroncast/graph_learning.hpp"
#include "kroncast/moe.hpp"
#include "kroncast/rng.hpp"
#include "kroncast/tensor.hpp"
#include "kroncast/tokenizer.hpp"

namespace kroncast {

enum class MoePlacement { All, Every2, Every4, FirstHalf, LastHalf, Custom };
enum class NormKind { RmsNorm, LayerNorm };

MoePlacement placement_from_string(const std::string& s);
std::string placement_to_string(MoePlacement p);

struct ModelConfig {
  PatchConfig patch;
  std::int64_t J = 8;
  MoePlacement placement = MoePlacement::Every2;
  std::vector<std::int64_t> custom_moe_layers;  // 1-based, for Custom
  std::int64_t heads = 8;
  MoEConfig moe;
  NormKind norm = NormKind::RmsNorm;
  bool linear_bias = true;    // biases on embed / head / FFN projections
  bool paper_scale = false;   // scale scores by sqrt(d) instead of sqrt(d/h)
  std::int64_t j_ci = 7;      // frozen channel-independent layers in finetuning
  std::int64_t j_cm = 1;      // trainable channel-mixed layers
  std::int64_t graph_layers = 1;  // trailing graph-guided layers in direct cm mode
  GraphConfig graph;

  void validate() const;
};

// Which layers carry an MoE block (index 0 = first layer).
std::vector<bool> moe_layer_flags(const ModelConfig& cfg);

struct DecoderLayer {
  AttentionParams attn;
  Tensor norm1_gain, norm1_bias;  // bias defined only under LayerNorm
  Tensor norm2_gain, norm2_bias;
  bool is_moe = false;
  FFNParams dense;
  std::vector<FFNParams> shared_experts;
  std::vector<FFNParams> private_experts;
  RouterState router;
};

// H -> norm1(attn(H) + H) -> norm2(branch(.) + .) where branch is the dense
// FFN or the gated expert mixture. H is (C*N, d) variable-major; counts only
// accumulate when accumulate_counts is set.
Tensor decoder_layer_forward(DecoderLayer& layer, const Tensor& h, const Tensor& m_add,
                             std::int64_t C, std::int64_t N, const ModelConfig& cfg,
                             bool accumulate_counts,
                             std::vector<std::vector<double>>* attn_probs = nullptr);

class Model {
 public:
  Model(ModelConfig cfg, RngStream rng);

  const ModelConfig& config() const { return cfg_; }
  std::vector<std::pair<std::string, Tensor>>& named_parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& named_parameters() const { return params_; }

  DecoderLayer& layer(std::int64_t i) { return layers_[static_cast<size_t>(i)]; }
  std::int64_t num_layers() const { return static_cast<std::int64_t>(layers_.size()); }
  FreqSimilarityParams& graph_params() { return graph_params_; }

  // Channel-independent forward: every (b, c) series is its own univariate
  // instance. Input must be normalized; returns (B, C, N, P).
  Tensor forward_ci(const SeriesBatch& batch);

  // Channel-mixed forward: first J - n_cm layers run channel independently,
  // the trailing n_cm layers attend across channels under kron(G, T).
  // g_per_item holds one adjacency per batch item (or a single shared one).
  Tensor forward_cm(const SeriesBatch& batch, const std::vector<Tensor>& g_per_item,
                    std::int64_t n_cm);

  // Parameter names that belong to decoder layer `i` (0-based).
  void set_layer_trainable(std::int64_t i, bool trainable);
  void set_trainable_prefix(const std::string& prefix, bool trainable);
  void set_all_trainable(bool trainable);
  void zero_grad();
  void update_router_biases();                       // once per optimizer step
  std::vector<std::vector<std::int64_t>> expert_loads() const;  // per MoE layer snapshot

  bool accumulate_counts = false;  // training forward passes update loads
  std::vector<std::vector<double>>* attn_debug = nullptr;

 private:
  Tensor run_instances(Tensor h, std::int64_t first_layer, std::int64_t last_layer,
                       std::int64_t instances, std::int64_t C, std::int64_t N,
                       const std::vector<Tensor>* g_per_item);

  ModelConfig cfg_;
  Tensor embed_w_, embed_b_;
  std::vector<DecoderLayer> layers_;
  Tensor head_w_, head_b_;
  FreqSimilarityParams graph_params_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

// Mean squared error over every next-patch position (or only the final one).
Tensor next_patch_loss(const Tensor& pred, const Tensor& targets, bool last_only = false);

struct ParamCount {
  std::vector<std::pair<std::string, std::int64_t>> breakdown;
  std::int64_t total = 0;      // all parameters in the counted scope
  std::int64_t activated = 0;  // same, with only K of n_p private experts
};

// Parameter accounting. Pretrain scope: embedding, all layers, output head.
// Finetune scope: trailing j_cm layers, output head, graph layer (alpha and
// the 3 edge-weight biases). `activated` counts K of the n_p private experts.
ParamCount count_parameters(const ModelConfig& cfg, bool finetune_mode, bool include_biases);

// Reconciliation report against externally published totals; documents the
// per-component arithmetic and the residual gap for a sweep of expert
// configurations.
std::string parameter_report(const ModelConfig& base_cfg, std::int64_t pretrain_target,
                             std::int64_t finetune_target);

}  // namespace kroncast
