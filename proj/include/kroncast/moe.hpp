#pragma once

#include <cstdint>
#include <vector>

#include "kroncast/tensor.hpp"

namespace kroncast {

// Mixture configuration. Private experts use hidden width 4d/K so the
// activated compute matches a dense 4d FFN; shared experts default to the
// same width (override via d_ff_shared).
struct MoEConfig {
  std::int64_t n_s = 1;          // shared experts (always active, averaged)
  std::int64_t n_p = 4;          // private experts
  std::int64_t K = 2;            // active private experts per channel
  std::int64_t d_ff_dense = 0;   // dense FFN hidden; 0 -> 4d
  std::int64_t d_ff_expert = 0;  // private expert hidden; 0 -> max(1, 4d/K)
  std::int64_t d_ff_shared = 0;  // shared expert hidden; 0 -> same as expert
  double bias_rate = 1e-3;       // selection-bias update speed
  bool token_routing = false;    // ablation: route per token instead of per channel
  bool renormalize_gates = false;

  std::int64_t dense_width(std::int64_t d) const { return d_ff_dense > 0 ? d_ff_dense : 4 * d; }
  std::int64_t expert_width(std::int64_t d) const {
    return d_ff_expert > 0 ? d_ff_expert : std::max<std::int64_t>(1, 4 * d / K);
  }
  std::int64_t shared_width(std::int64_t d) const {
    return d_ff_shared > 0 ? d_ff_shared : expert_width(d);
  }
  void validate() const;
};

// Two-projection feed-forward block with SiLU activation.
struct FFNParams {
  Tensor w1, b1;  // (d, dff), (dff)   bias undefined when disabled
  Tensor w2, b2;  // (dff, d), (d)
};

Tensor ffn_forward(const Tensor& x, const FFNParams& p);

// Per-layer router memory. `bias` participates in selection only and is never
// touched by gradients; `counts` accumulate selections until update_bias.
struct RouterState {
  Tensor cluster;                    // (n_p, d) token-cluster matrix, learnable
  std::vector<double> bias;          // (n_p)
  std::vector<std::int64_t> counts;  // (n_p)
};

struct ExpertAssignment {
  Tensor gates;                            // (rows, n_p); rows = C (channel) or C*N (token)
  std::vector<std::vector<int>> selected;  // per row, K expert ids ascending
  bool token_level = false;
};

// Channel-wise routing: score every token against the cluster matrix, take the
// token-mean per channel, softmax over experts, then select the top-K of
// (gate + bias). The gate value stays the raw softmax score; ties at the K-th
// slot resolve to the lowest expert index. Counts accumulate only when
// `accumulate_counts` is set (training passes).
ExpertAssignment route_channels(const Tensor& h_hat, std::int64_t C, std::int64_t N,
                                RouterState& state, std::int64_t K, bool accumulate_counts,
                                bool renormalize_gates = false);

// Token-wise ablation: same selection rule applied independently per token.
ExpertAssignment route_tokens(const Tensor& h_hat, RouterState& state, std::int64_t K,
                              bool accumulate_counts, bool renormalize_gates = false);

// b_i += bias_rate * sign(mean(c) - c_i); sign(0) = 0; counts reset.
void update_bias(RouterState& state, double bias_rate);

// Expert mixture (no residual or norm):
//   (1/n_s) sum shared_FFN_i(H) + sum_{selected} private_FFN_e(H) * gate_e
// Only selected private experts are evaluated.
Tensor moe_combine(const Tensor& h_hat, std::int64_t C, std::int64_t N,
                   const ExpertAssignment& assignment, const std::vector<FFNParams>& shared,
                   const std::vector<FFNParams>& private_experts);

// Full MoE block per the layer recipe: norm(combine + H).
Tensor moe_forward(const Tensor& h_hat, std::int64_t C, std::int64_t N,
                   const ExpertAssignment& assignment, const std::vector<FFNParams>& shared,
                   const std::vector<FFNParams>& private_experts, const Tensor& norm_gain,
                   const Tensor& norm_bias /* undefined for rmsnorm */);

}  // namespace kroncast
