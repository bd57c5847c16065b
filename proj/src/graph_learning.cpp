#include "kroncast/graph_learning.hpp"

#include <cmath>
#include <stdexcept>

#include "kroncast/fft.hpp"

namespace kroncast {

FreqSimilarityParams make_similarity_params(std::int64_t look_back) {
  if (look_back % 2 != 0 || look_back < 4) {
    throw std::invalid_argument("make_similarity_params: look-back must be even and >= 4");
  }
  FreqSimilarityParams p;
  p.alpha_raw = parameter({look_back / 2}, std::vector<double>(static_cast<size_t>(look_back / 2), 0.0));
  p.edge_bias = parameter({3}, {0.0, 0.0, 0.0});
  return p;
}

namespace {

Tensor clamp01(const Tensor& x, double lo, double hi) {
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = std::min(hi, std::max(lo, xv[i]));
  return make_op("clamp", x.shape(), std::move(out), {x}, [lo, hi](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      if (p.value[i] > lo && p.value[i] < hi) p.grad[i] += n.grad[i];
    }
  });
}

Tensor off_diagonal_mask(std::int64_t C) {
  std::vector<double> m(static_cast<size_t>(C * C), 1.0);
  for (std::int64_t i = 0; i < C; ++i) m[static_cast<size_t>(i * C + i)] = 0.0;
  return constant({C, C}, std::move(m));
}

Tensor identity_matrix(std::int64_t C) {
  std::vector<double> m(static_cast<size_t>(C * C), 0.0);
  for (std::int64_t i = 0; i < C; ++i) m[static_cast<size_t>(i * C + i)] = 1.0;
  return constant({C, C}, std::move(m));
}

}  // namespace

SimilarityMatrix similarity_matrix(const std::vector<double>& window, std::int64_t C,
                                   std::int64_t L, const FreqSimilarityParams& params) {
  if (C < 1) throw std::invalid_argument("similarity_matrix: C must be >= 1");
  if (static_cast<std::int64_t>(window.size()) != C * L) {
    throw std::invalid_argument("similarity_matrix: window must hold C*L values");
  }
  if (C == 1) return SimilarityMatrix{identity_matrix(1)};
  if (params.alpha_raw.size() != L / 2) {
    throw std::invalid_argument("similarity_matrix: alpha length must be L/2");
  }

  const std::int64_t H = L / 2;
  std::vector<std::vector<double>> amps(static_cast<size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) {
    amps[static_cast<size_t>(c)] =
        rfft_magnitudes(std::vector<double>(window.begin() + c * L, window.begin() + (c + 1) * L));
  }

  // log(1 + |amp_i - amp_j|) rows for every ordered pair, one constant matrix;
  // the weighted sum over frequencies is a single matmul against alpha.
  std::vector<double> dist(static_cast<size_t>(C * C * H), 0.0);
  for (std::int64_t i = 0; i < C; ++i) {
    for (std::int64_t j = 0; j < C; ++j) {
      double* row = dist.data() + (i * C + j) * H;
      const auto& ai = amps[static_cast<size_t>(i)];
      const auto& aj = amps[static_cast<size_t>(j)];
      for (std::int64_t t = 0; t < H; ++t) row[t] = std::log1p(std::fabs(ai[t] - aj[t]));
    }
  }
  Tensor dlog = constant({C * C, H}, std::move(dist));
  Tensor alpha = sigmoid(params.alpha_raw);                       // (H,)
  Tensor weighted = matmul(dlog, reshape(alpha, {H, 1}));         // (C*C, 1)
  Tensor z_tilde = divide_guarded(full({C * C, 1}, 1.0), weighted, 1e-8);
  z_tilde = reshape(z_tilde, {C, C});

  const double n_off = static_cast<double>(C * C - C);
  Tensor off = off_diagonal_mask(C);
  Tensor mu = mul_scalar(sum_all(mul(z_tilde, off)), 1.0 / n_off);          // (1,)
  Tensor centered = sub(z_tilde, mu);                                        // scalar broadcast
  Tensor var = mul_scalar(sum_all(mul(mul(centered, centered), off)), 1.0 / n_off);
  Tensor sigma;
  if (std::sqrt(var.item()) < 1e-6) {
    sigma = constant_scalar(1.0);  // degenerate spread (e.g. C == 2); see design notes
  } else {
    sigma = power(var, 0.5);
  }
  Tensor zscore = divide(centered, sigma);
  return SimilarityMatrix{add(mul(sigmoid(zscore), off), identity_matrix(C))};
}

Tensor sample_gumbel(Shape shape, RngStream& rng) {
  const std::int64_t n = numel(shape);
  std::vector<double> out(static_cast<size_t>(n));
  for (auto& v : out) v = rng.gumbel();
  return constant(std::move(shape), std::move(out));
}

namespace {

AdjacencyMatrix gumbel_impl(const SimilarityMatrix& s, double tau, const Tensor& noise_keep,
                            const Tensor& noise_drop, bool train, const GraphConfig& cfg,
                            const Tensor& edge_bias) {
  if (tau <= 0.0) throw std::invalid_argument("gumbel_adjacency: tau must be > 0");
  const Tensor& z = s.z;
  if (!z.defined() || z.rank() != 2 || z.dim(0) != z.dim(1)) {
    throw std::invalid_argument("gumbel_adjacency: Z must be square");
  }
  const std::int64_t C = z.dim(0);
  Tensor off = off_diagonal_mask(C);
  Tensor eye = identity_matrix(C);

  if (!train) {
    std::vector<double> hard(static_cast<size_t>(C * C), 0.0);
    const auto& zv = z.data();
    for (std::int64_t i = 0; i < C; ++i) {
      for (std::int64_t j = 0; j < C; ++j) {
        hard[static_cast<size_t>(i * C + j)] = (i == j || zv[static_cast<size_t>(i * C + j)] > 0.5) ? 1.0 : 0.0;
      }
    }
    Tensor g = constant({C, C}, std::move(hard));
    return AdjacencyMatrix{g, g, g, tau};
  }

  Tensor zc = clamp01(z, 1e-6, 1.0 - 1e-6);
  Tensor keep_logit, drop_logit;
  if (cfg.logit_form == GumbelLogitForm::Bernoulli) {
    keep_logit = log(zc);
    drop_logit = log(sub(full({C, C}, 1.0), zc));
  } else {
    keep_logit = sub(log(zc), log(sub(full({C, C}, 1.0), zc)));
    drop_logit = mul_scalar(keep_logit, -1.0);
  }
  if (cfg.use_edge_bias && edge_bias.defined()) {
    // bias[0]/bias[1] shift the off-diagonal keep/drop logits, bias[2] the
    // diagonal keep logit (the hard diagonal stays pinned to 1 regardless).
    keep_logit = add(keep_logit, add(mul(off, slice(edge_bias, 0, 0, 1)),
                                     mul(eye, slice(edge_bias, 0, 2, 1))));
    drop_logit = add(drop_logit, mul(off, slice(edge_bias, 0, 1, 1)));
  }
  // Two-class softmax first component == sigmoid of the logit difference.
  Tensor diff = add(sub(keep_logit, drop_logit), sub(noise_keep, noise_drop));
  Tensor g_soft = sigmoid(mul_scalar(diff, 1.0 / tau));

  std::vector<double> hard(static_cast<size_t>(C * C));
  const auto& gs = g_soft.data();
  for (std::int64_t i = 0; i < C; ++i) {
    for (std::int64_t j = 0; j < C; ++j) {
      hard[static_cast<size_t>(i * C + j)] = (i == j || gs[static_cast<size_t>(i * C + j)] > 0.5) ? 1.0 : 0.0;
    }
  }
  Tensor g_hard = constant({C, C}, std::move(hard));
  // Straight-through: hard on the forward value, soft on the backward pass;
  // the diagonal is pinned outside the gradient path.
  Tensor st = add(sub(g_hard, stop_grad(g_soft)), g_soft);
  st = add(mul(st, off), eye);
  return AdjacencyMatrix{g_soft, g_hard, st, tau};
}

}  // namespace

AdjacencyMatrix gumbel_adjacency(const SimilarityMatrix& z, double tau, RngStream& rng, bool train,
                                 const GraphConfig& cfg, const Tensor& edge_bias) {
  const std::int64_t C = z.z.dim(0);
  Tensor keep = train ? sample_gumbel({C, C}, rng) : Tensor();
  Tensor drop = train ? sample_gumbel({C, C}, rng) : Tensor();
  return gumbel_impl(z, tau, keep, drop, train, cfg, edge_bias);
}

AdjacencyMatrix gumbel_adjacency_with_noise(const SimilarityMatrix& z, double tau,
                                            const Tensor& noise_keep, const Tensor& noise_drop,
                                            bool train, const GraphConfig& cfg,
                                            const Tensor& edge_bias) {
  return gumbel_impl(z, tau, noise_keep, noise_drop, train, cfg, edge_bias);
}

}  // namespace kroncast
