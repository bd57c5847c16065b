#include "kroncast/tokenizer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace kroncast {

void PatchConfig::validate() const {
  if (L < 1 || F < 1 || P < 1 || S < 1 || d < 1) {
    throw std::invalid_argument("PatchConfig: all of L, F, P, S, d must be positive");
  }
  if (F != P) {
    throw std::invalid_argument("PatchConfig: F must equal P (one next patch is predicted)");
  }
  if (L < P) throw std::invalid_argument("PatchConfig: look-back L must be >= patch length P");
  if ((L - P) % S != 0) {
    throw std::invalid_argument("PatchConfig: (L - P) = " + std::to_string(L - P) +
                                " is not divisible by stride " + std::to_string(S) +
                                "; trim the window head");
  }
}

namespace {

void check_batch(const SeriesBatch& batch) {
  if (!batch.values.defined() || batch.values.rank() != 3) {
    throw std::invalid_argument("SeriesBatch.values must be a (B, C, Lw) tensor");
  }
  if (batch.look_back < 1 || batch.look_back > batch.values.dim(2)) {
    throw std::invalid_argument("SeriesBatch.look_back out of range");
  }
}

}  // namespace

SeriesBatch normalize(const SeriesBatch& batch) {
  check_batch(batch);
  const std::int64_t B = batch.values.dim(0), C = batch.values.dim(1), Lw = batch.values.dim(2);
  const std::int64_t L = batch.look_back;
  const auto& v = batch.values.data();
  std::vector<double> out(v.size());
  std::vector<double> means(static_cast<size_t>(B * C)), stds(static_cast<size_t>(B * C));
  SeriesBatch result;
  result.look_back = L;
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* row = v.data() + (b * C + c) * Lw;
      double mean = 0.0;
      for (std::int64_t t = 0; t < L; ++t) {
        if (!std::isfinite(row[t])) throw std::domain_error("normalize: non-finite input value");
        mean += row[t];
      }
      mean /= static_cast<double>(L);
      double var = 0.0;
      for (std::int64_t t = 0; t < L; ++t) var += (row[t] - mean) * (row[t] - mean);
      double stddev = std::sqrt(var / static_cast<double>(L));
      if (stddev < 1e-6) {
        stddev = 1e-6;
        result.floored_channels.emplace_back(b, c);
      }
      means[static_cast<size_t>(b * C + c)] = mean;
      stds[static_cast<size_t>(b * C + c)] = stddev;
      double* orow = out.data() + (b * C + c) * Lw;
      for (std::int64_t t = 0; t < Lw; ++t) orow[t] = (row[t] - mean) / stddev;
    }
  }
  result.values = constant({B, C, Lw}, std::move(out));
  result.norm_mean = constant({B, C}, std::move(means));
  result.norm_std = constant({B, C}, std::move(stds));
  result.normalized = true;
  return result;
}

Tensor denormalize(const Tensor& values, const Tensor& norm_mean, const Tensor& norm_std) {
  if (values.rank() < 2) throw std::invalid_argument("denormalize: expects (B, C, ...)");
  const std::int64_t B = values.dim(0), C = values.dim(1);
  if (norm_mean.size() != B * C || norm_std.size() != B * C) {
    throw std::invalid_argument("denormalize: stats do not match (B, C)");
  }
  const std::int64_t inner = values.size() / (B * C);
  const auto& mv = norm_mean.data();
  const auto& sv = norm_std.data();
  // y = x * std + mean, applied blockwise over the (b, c) slabs; differentiable.
  std::vector<double> scale(static_cast<size_t>(values.size()));
  std::vector<double> shift(static_cast<size_t>(values.size()));
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    for (std::int64_t i = 0; i < inner; ++i) {
      scale[static_cast<size_t>(bc * inner + i)] = sv[static_cast<size_t>(bc)];
      shift[static_cast<size_t>(bc * inner + i)] = mv[static_cast<size_t>(bc)];
    }
  }
  return add(mul(values, constant(values.shape(), std::move(scale))),
             constant(values.shape(), std::move(shift)));
}

Tensor patchify(const SeriesBatch& batch, const PatchConfig& cfg) {
  cfg.validate();
  check_batch(batch);
  if (batch.look_back != cfg.L) {
    throw std::invalid_argument("patchify: batch look_back differs from cfg.L");
  }
  const std::int64_t B = batch.values.dim(0), C = batch.values.dim(1), Lw = batch.values.dim(2);
  const std::int64_t N = cfg.num_patches(), P = cfg.P, S = cfg.S;
  const auto& v = batch.values.data();
  std::vector<double> out(static_cast<size_t>(B * C * N * P));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* row = v.data() + (b * C + c) * Lw;
      for (std::int64_t j = 0; j < N; ++j) {
        double* dst = out.data() + ((b * C + c) * N + j) * P;
        const double* src = row + j * S;
        std::copy(src, src + P, dst);
      }
    }
  }
  return constant({B, C, N, P}, std::move(out));
}

Tensor next_patch_targets(const SeriesBatch& batch, const PatchConfig& cfg) {
  cfg.validate();
  check_batch(batch);
  const std::int64_t B = batch.values.dim(0), C = batch.values.dim(1), Lw = batch.values.dim(2);
  const std::int64_t N = cfg.num_patches(), P = cfg.P, S = cfg.S;
  if (Lw < cfg.L + S) {
    throw std::invalid_argument("next_patch_targets: window must include the horizon (Lw >= L + S)");
  }
  const auto& v = batch.values.data();
  std::vector<double> out(static_cast<size_t>(B * C * N * P));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* row = v.data() + (b * C + c) * Lw;
      for (std::int64_t j = 0; j < N; ++j) {
        double* dst = out.data() + ((b * C + c) * N + j) * P;
        const double* src = row + (j + 1) * S;
        std::copy(src, src + P, dst);
      }
    }
  }
  return constant({B, C, N, P}, std::move(out));
}

Tensor embed_patches(const Tensor& patches, const Tensor& w_p, const Tensor& bias) {
  if (patches.rank() != 4) throw std::invalid_argument("embed_patches: expects (B, C, N, P)");
  const std::int64_t B = patches.dim(0), C = patches.dim(1), N = patches.dim(2), P = patches.dim(3);
  if (w_p.rank() != 2 || w_p.dim(0) != P) {
    throw std::invalid_argument("embed_patches: W_p must be (P, d) with P = patch length");
  }
  const std::int64_t d = w_p.dim(1);
  Tensor flat = matmul(reshape(patches, {B * C * N, P}), w_p);
  if (bias.defined()) flat = add(flat, bias);
  return reshape(flat, {B, C, N, d});
}

Tensor project_output(const Tensor& tokens, const Tensor& w_d, const Tensor& bias) {
  if (tokens.rank() != 4) throw std::invalid_argument("project_output: expects (B, C, N, d)");
  const std::int64_t B = tokens.dim(0), C = tokens.dim(1), N = tokens.dim(2), d = tokens.dim(3);
  if (w_d.rank() != 2 || w_d.dim(0) != d) {
    throw std::invalid_argument("project_output: W_d must be (d, P)");
  }
  const std::int64_t P = w_d.dim(1);
  Tensor flat = matmul(reshape(tokens, {B * C * N, d}), w_d);
  if (bias.defined()) flat = add(flat, bias);
  return reshape(flat, {B, C, N, P});
}

}  // namespace kroncast
