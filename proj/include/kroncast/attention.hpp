#pragma once

#include <cstdint>
#include <vector>

#include "kroncast/tensor.hpp"

namespace kroncast {

// Per-layer attention parameters. d x d projections split over h heads
// (head dim d/h, even for the rotary pairing); u/v are the per-head
// same-variable / cross-variable identifier offsets, zero-initialized so the
// identifier term vanishes at start.
struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;  // (d, d)
  Tensor u, v;                // (h,)
  std::int64_t heads = 1;
  double rope_base = 10000.0;
};

// N x N lower-triangular visibility: T[m][n] = 1 iff n <= m.
Tensor temporal_mask(std::int64_t N);

struct AttentionMask {
  Tensor m_raw;  // (C*N, C*N) 0/1: kron(G, T)
  Tensor m_add;  // 0 where visible, -1e9 where blocked; differentiable wrt G
};

// Kronecker product of the adjacency with the temporal mask. G's
// forward values must have an all-ones diagonal (otherwise whole rows would
// be blocked); gradient flows into G where it requires grad.
AttentionMask kronecker_mask(const Tensor& g, const Tensor& t);

// Raw per-head scores for the flattened (variable-major) token matrix:
// rotary dot product at intra-variable positions plus the identifier offset.
std::vector<Tensor> attention_scores(const Tensor& h_flat, const AttentionParams& params,
                                     std::int64_t C, std::int64_t N);

// Masked multi-head attention over the flattened sequence:
//   S = softmax((scores + M_add) / scale), out = concat_heads(S . V) . W_o
// scale is sqrt(d/h) by default, sqrt(d) when scale_full_dim is set.
// When attn_probs is non-null the per-head S matrices are copied out.
Tensor attention_forward(const Tensor& h_flat, const AttentionParams& params, const Tensor& m_add,
                         std::int64_t C, std::int64_t N, bool scale_full_dim = false,
                         std::vector<std::vector<double>>* attn_probs = nullptr);

}  // namespace kroncast
