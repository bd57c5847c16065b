#include "kroncast/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace kroncast {

Tensor temporal_mask(std::int64_t N) {
  if (N < 1) throw std::invalid_argument("temporal_mask: N must be >= 1");
  std::vector<double> t(static_cast<size_t>(N * N), 0.0);
  for (std::int64_t m = 0; m < N; ++m) {
    for (std::int64_t n = 0; n <= m; ++n) t[static_cast<size_t>(m * N + n)] = 1.0;
  }
  return constant({N, N}, std::move(t));
}

AttentionMask kronecker_mask(const Tensor& g, const Tensor& t) {
  if (!g.defined() || g.rank() != 2 || g.dim(0) != g.dim(1)) {
    throw std::invalid_argument("kronecker_mask: G must be square");
  }
  if (!t.defined() || t.rank() != 2 || t.dim(0) != t.dim(1)) {
    throw std::invalid_argument("kronecker_mask: T must be square");
  }
  const std::int64_t C = g.dim(0), N = t.dim(0);
  const auto& gv = g.data();
  for (std::int64_t i = 0; i < C; ++i) {
    if (gv[static_cast<size_t>(i * C + i)] != 1.0) {
      throw std::invalid_argument("kronecker_mask: G diagonal must be all ones (self-edges)");
    }
  }
  const auto& tv = t.data();
  std::vector<double> out(static_cast<size_t>(C * N * C * N));
  for (std::int64_t i = 0; i < C; ++i) {
    for (std::int64_t m = 0; m < N; ++m) {
      double* row = out.data() + (i * N + m) * C * N;
      for (std::int64_t j = 0; j < C; ++j) {
        const double gij = gv[static_cast<size_t>(i * C + j)];
        for (std::int64_t n = 0; n < N; ++n) {
          row[j * N + n] = gij * tv[static_cast<size_t>(m * N + n)];
        }
      }
    }
  }
  std::vector<double> t_copy = t.data();
  Tensor m_raw = make_op("kron_mask", {C * N, C * N}, std::move(out), {g},
                         [C, N, t_copy](detail::Node& nd) {
                           auto& pg = *nd.parents[0];
                           if (!pg.requires_grad) return;
                           pg.ensure_grad();
                           for (std::int64_t i = 0; i < C; ++i) {
                             for (std::int64_t j = 0; j < C; ++j) {
                               double acc = 0.0;
                               for (std::int64_t m = 0; m < N; ++m) {
                                 const double* grow = nd.grad.data() + (i * N + m) * C * N;
                                 for (std::int64_t n = 0; n < N; ++n) {
                                   acc += grow[j * N + n] * t_copy[static_cast<size_t>(m * N + n)];
                                 }
                               }
                               pg.grad[static_cast<size_t>(i * C + j)] += acc;
                             }
                           }
                         });
  // mask(x): 0 where visible, -1e9 where blocked (-1e9 stands in for -inf;
  // IEEE -inf would poison gradients).
  Tensor m_add = mul_scalar(add_scalar(m_raw, -1.0), 1e9);
  return AttentionMask{m_raw, m_add};
}

namespace {

struct RopeTables {
  Tensor cos_t;  // (C*N, dh/2)
  Tensor sin_t;
};

// Rotation angles use the intra-variable position (token (i, m) rotates by m),
// so the rotary inner product depends only on m - n for every variable pair.
RopeTables rope_tables(std::int64_t C, std::int64_t N, std::int64_t dh, double base) {
  const std::int64_t half = dh / 2;
  std::vector<double> cs(static_cast<size_t>(C * N * half)), sn(static_cast<size_t>(C * N * half));
  for (std::int64_t i = 0; i < C; ++i) {
    for (std::int64_t m = 0; m < N; ++m) {
      for (std::int64_t k = 0; k < half; ++k) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(dh));
        const double ang = static_cast<double>(m) * freq;
        cs[static_cast<size_t>((i * N + m) * half + k)] = std::cos(ang);
        sn[static_cast<size_t>((i * N + m) * half + k)] = std::sin(ang);
      }
    }
  }
  return {constant({C * N, half}, std::move(cs)), constant({C * N, half}, std::move(sn))};
}

// Half-split rotary rotation of each row: (x1, x2) -> (x1 c - x2 s, x1 s + x2 c).
Tensor rope_rotate(const Tensor& x, const RopeTables& t) {
  const std::int64_t half = x.dim(1) / 2;
  Tensor x1 = slice(x, 1, 0, half);
  Tensor x2 = slice(x, 1, half, half);
  Tensor r1 = sub(mul(x1, t.cos_t), mul(x2, t.sin_t));
  Tensor r2 = add(mul(x1, t.sin_t), mul(x2, t.cos_t));
  return concat({r1, r2}, 1);
}

Tensor identity_indicator(std::int64_t C, std::int64_t N, bool same) {
  std::vector<double> m(static_cast<size_t>(C * N * C * N), same ? 0.0 : 1.0);
  for (std::int64_t i = 0; i < C; ++i) {
    for (std::int64_t a = 0; a < N; ++a) {
      for (std::int64_t b = 0; b < N; ++b) {
        m[static_cast<size_t>((i * N + a) * C * N + i * N + b)] = same ? 1.0 : 0.0;
      }
    }
  }
  return constant({C * N, C * N}, std::move(m));
}

void check_params(const Tensor& h_flat, const AttentionParams& p, std::int64_t C, std::int64_t N) {
  if (!h_flat.defined() || h_flat.rank() != 2 || h_flat.dim(0) != C * N) {
    throw std::invalid_argument("attention: H must be (C*N, d), variable-major");
  }
  const std::int64_t d = h_flat.dim(1);
  if (d % p.heads != 0) throw std::invalid_argument("attention: d must divide by head count");
  if ((d / p.heads) % 2 != 0) {
    throw std::invalid_argument("attention: head dim must be even for the rotary pairing");
  }
  if (p.u.size() != p.heads || p.v.size() != p.heads) {
    throw std::invalid_argument("attention: u/v must hold one scalar per head");
  }
}

}  // namespace

std::vector<Tensor> attention_scores(const Tensor& h_flat, const AttentionParams& params,
                                     std::int64_t C, std::int64_t N) {
  check_params(h_flat, params, C, N);
  const std::int64_t d = h_flat.dim(1);
  const std::int64_t dh = d / params.heads;
  Tensor q = matmul(h_flat, params.w_q);
  Tensor k = matmul(h_flat, params.w_k);
  RopeTables tables = rope_tables(C, N, dh, params.rope_base);
  Tensor same = identity_indicator(C, N, true);
  Tensor diff = identity_indicator(C, N, false);
  std::vector<Tensor> scores;
  scores.reserve(static_cast<size_t>(params.heads));
  for (std::int64_t a = 0; a < params.heads; ++a) {
    Tensor qa = rope_rotate(slice(q, 1, a * dh, dh), tables);
    Tensor ka = rope_rotate(slice(k, 1, a * dh, dh), tables);
    Tensor raw = matmul(qa, transpose(ka));
    Tensor ua = slice(params.u, 0, a, 1);
    Tensor va = slice(params.v, 0, a, 1);
    scores.push_back(add(raw, add(mul(same, ua), mul(diff, va))));
  }
  return scores;
}

Tensor attention_forward(const Tensor& h_flat, const AttentionParams& params, const Tensor& m_add,
                         std::int64_t C, std::int64_t N, bool scale_full_dim,
                         std::vector<std::vector<double>>* attn_probs) {
  check_params(h_flat, params, C, N);
  const std::int64_t d = h_flat.dim(1);
  const std::int64_t dh = d / params.heads;
  if (m_add.defined() && (m_add.rank() != 2 || m_add.dim(0) != C * N || m_add.dim(1) != C * N)) {
    throw std::invalid_argument("attention_forward: mask must be (C*N, C*N)");
  }
  const double scale = std::sqrt(static_cast<double>(scale_full_dim ? d : dh));
  Tensor v = matmul(h_flat, params.w_v);
  auto scores = attention_scores(h_flat, params, C, N);
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(scores.size());
  for (std::int64_t a = 0; a < params.heads; ++a) {
    Tensor logits = scores[static_cast<size_t>(a)];
    if (m_add.defined()) logits = add(logits, m_add);
    Tensor probs = softmax_lastdim(mul_scalar(logits, 1.0 / scale));
    if (attn_probs) attn_probs->push_back(probs.data());
    head_outputs.push_back(matmul(probs, slice(v, 1, a * dh, dh)));
  }
  Tensor merged = head_outputs.size() == 1 ? head_outputs[0] : concat(head_outputs, 1);
  return matmul(merged, params.w_o);
}

}  // namespace kroncast
