#pragma once

#include <cstdint>
#include <vector>

#include "kroncast/tensor.hpp"

namespace kroncast {

// Patch geometry. F == P: the model predicts exactly one next patch.
// (L - P) must divide by S so patches tile the look-back exactly; N may be 1
// (the L == P setup is used literally).
struct PatchConfig {
  std::int64_t L = 672;  // look-back length
  std::int64_t F = 96;   // horizon
  std::int64_t P = 96;   // patch length
  std::int64_t S = 96;   // stride (defaults to P: non-overlapping)
  std::int64_t d = 512;  // token dimension

  std::int64_t num_patches() const { return (L - P) / S + 1; }
  void validate() const;
};

// A batch of raw windows plus per-window normalization statistics.
// values is (B, C, Lw) with Lw >= look_back; the horizon tail, when present,
// is normalized with the same look-back stats.
struct SeriesBatch {
  Tensor values;       // (B, C, Lw)
  std::int64_t look_back = 0;
  Tensor norm_mean;    // (B, C), set by normalize()
  Tensor norm_std;     // (B, C), eps-floored
  bool normalized = false;
  std::vector<std::pair<std::int64_t, std::int64_t>> floored_channels;  // (b, c) telemetry
};

// Instance normalization per (b, c) over the look-back segment; mean 0 / std 1,
// std floored at 1e-6 (flagged). Targets reuse the look-back stats.
SeriesBatch normalize(const SeriesBatch& batch);

// Invert normalize() on a (B, C, ...) tensor of normalized values.
Tensor denormalize(const Tensor& values, const Tensor& norm_mean, const Tensor& norm_std);

// Sliding-window segmentation of the look-back: (B, C, N, P), patch j starting
// at offset j*S. Pure data rearrangement (the series carries no gradient).
Tensor patchify(const SeriesBatch& batch, const PatchConfig& cfg);

// Next-patch targets aligned with the next-token convention: the target at
// position j is the patch starting at offset (j+1)*S, the last one being the
// horizon patch. Requires Lw >= L + S.
Tensor next_patch_targets(const SeriesBatch& batch, const PatchConfig& cfg);

// h = p . W_p (+ bias): (B, C, N, P) -> (B, C, N, d).
Tensor embed_patches(const Tensor& patches, const Tensor& w_p, const Tensor& bias = Tensor());

// token -> predicted next patch: (B, C, N, d) -> (B, C, N, P).
Tensor project_output(const Tensor& tokens, const Tensor& w_d, const Tensor& bias = Tensor());

}  // namespace kroncast
