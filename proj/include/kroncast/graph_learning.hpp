#pragma once

#include <cstdint>
#include <vector>

#include "kroncast/rng.hpp"
#include "kroncast/tensor.hpp"

namespace kroncast {

// How the two-class logits are formed from the similarity Z.
//   Bernoulli: [log Z, log(1-Z)]          -> hard edge frequency equals Z
//   Direct:    [logit(Z), -logit(Z)]      -> sharper; frequency sigmoid(2*logit(Z))
// Bernoulli is the default; see gumbel_adjacency.
enum class GumbelLogitForm { Bernoulli, Direct };

struct GraphConfig {
  double tau = 0.5;
  GumbelLogitForm logit_form = GumbelLogitForm::Bernoulli;
  bool use_edge_bias = false;  // wire the 3 learnable edge biases into the logits
};

// Learnable pieces of the similarity layer. alpha = sigmoid(alpha_raw) stays
// strictly inside (0,1); zero init puts every frequency weight at 0.5.
// edge_bias holds the three learnable edge-weight biases; unused unless
// GraphConfig.use_edge_bias is set (bias[0]/bias[1] shift the two off-diagonal
// logits, bias[2] shifts the diagonal keep-logit).
struct FreqSimilarityParams {
  Tensor alpha_raw;  // (L/2,)
  Tensor edge_bias;  // (3,)
};

FreqSimilarityParams make_similarity_params(std::int64_t look_back);

struct SimilarityMatrix {
  Tensor z;  // (C, C), diag forced to 1, off-diagonal in (0,1); differentiable wrt alpha_raw
};

struct AdjacencyMatrix {
  Tensor g_soft;  // (C, C) first Gumbel-Softmax component
  Tensor g_hard;  // (C, C) 0/1 constants, diag forced 1
  Tensor g_st;    // hard values forward, soft gradient backward; feed this to the mask
  double tau = 0.5;
};

// Frequency-domain similarity (window is C x L, row-major, raw values; no
// gradient flows into the series). C == 1 degenerates to [[1]]. The z-score
// std over off-diagonal entries is floored: sigma < 1e-6 -> use 1.
SimilarityMatrix similarity_matrix(const std::vector<double>& window, std::int64_t C,
                                   std::int64_t L, const FreqSimilarityParams& params);

// i.i.d. Gumbel(0,1) draws, -log(-log U) with U clamped to [1e-12, 1-1e-12].
Tensor sample_gumbel(Shape shape, RngStream& rng);

// Bernoulli resampling of edges via two-class Gumbel-Softmax.
// train: straight-through hard sample; eval: deterministic threshold Z > 0.5.
// Diagonal forced to 1 in every output. tau <= 0 is an error.
AdjacencyMatrix gumbel_adjacency(const SimilarityMatrix& z, double tau, RngStream& rng,
                                 bool train, const GraphConfig& cfg = GraphConfig(),
                                 const Tensor& edge_bias = Tensor());

// Same, with caller-provided noise (two (C, C) constants); used by tests that
// need the randomness pinned.
AdjacencyMatrix gumbel_adjacency_with_noise(const SimilarityMatrix& z, double tau,
                                            const Tensor& noise_keep, const Tensor& noise_drop,
                                            bool train, const GraphConfig& cfg = GraphConfig(),
                                            const Tensor& edge_bias = Tensor());

}  // namespace kroncast
