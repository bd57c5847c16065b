#include "kroncast/moe.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace kroncast {

void MoEConfig::validate() const {
  if (n_s < 0 || n_p < 1) throw std::invalid_argument("MoEConfig: need n_p >= 1, n_s >= 0");
  if (K < 1 || K > n_p) throw std::invalid_argument("MoEConfig: need 1 <= K <= n_p");
  if (bias_rate < 0.0) throw std::invalid_argument("MoEConfig: bias_rate must be >= 0");
}

Tensor ffn_forward(const Tensor& x, const FFNParams& p) {
  Tensor h = matmul(x, p.w1);
  if (p.b1.defined()) h = add(h, p.b1);
  h = silu(h);
  Tensor out = matmul(h, p.w2);
  if (p.b2.defined()) out = add(out, p.b2);
  return out;
}

namespace {

// Top-K of (score + bias) with deterministic lowest-index tie-breaking.
std::vector<int> select_top_k(const double* scores, const std::vector<double>& bias,
                              std::int64_t n_p, std::int64_t K) {
  std::vector<int> idx(static_cast<size_t>(n_p));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    const double sa = scores[a] + bias[static_cast<size_t>(a)];
    const double sb = scores[b] + bias[static_cast<size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  std::vector<int> out(idx.begin(), idx.begin() + K);
  std::sort(out.begin(), out.end());
  return out;
}

Tensor apply_selection(const Tensor& sbar, const std::vector<std::vector<int>>& selected,
                       bool renormalize) {
  const std::int64_t rows = sbar.dim(0), n_p = sbar.dim(1);
  std::vector<double> mask(static_cast<size_t>(rows * n_p), 0.0);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (int e : selected[static_cast<size_t>(r)]) mask[static_cast<size_t>(r * n_p + e)] = 1.0;
  }
  Tensor gates = mul(sbar, constant({rows, n_p}, std::move(mask)));
  if (renormalize) {
    Tensor row_sum = reshape(sum_axis(gates, 1), {rows, 1});
    gates = divide(gates, matmul(row_sum, full({1, n_p}, 1.0)));
  }
  return gates;
}

void check_router(const Tensor& h_hat, const RouterState& state) {
  if (!h_hat.defined() || h_hat.rank() != 2) {
    throw std::invalid_argument("route: H must be (rows, d)");
  }
  if (!state.cluster.defined() || state.cluster.rank() != 2 ||
      state.cluster.dim(1) != h_hat.dim(1)) {
    throw std::invalid_argument("route: cluster must be (n_p, d)");
  }
}

}  // namespace

ExpertAssignment route_channels(const Tensor& h_hat, std::int64_t C, std::int64_t N,
                                RouterState& state, std::int64_t K, bool accumulate_counts,
                                bool renormalize_gates) {
  check_router(h_hat, state);
  if (h_hat.dim(0) != C * N) throw std::invalid_argument("route_channels: H must be (C*N, d)");
  const std::int64_t n_p = state.cluster.dim(0);
  if (K > n_p) throw std::invalid_argument("route_channels: K exceeds expert count");
  if (state.bias.size() != static_cast<size_t>(n_p)) state.bias.assign(static_cast<size_t>(n_p), 0.0);
  if (state.counts.size() != static_cast<size_t>(n_p)) state.counts.assign(static_cast<size_t>(n_p), 0);

  Tensor scores = matmul(h_hat, transpose(state.cluster));        // (C*N, n_p)
  Tensor mean_scores = mean_axis(reshape(scores, {C, N, n_p}), 1);  // (C, n_p)
  Tensor sbar = softmax_lastdim(mean_scores);

  ExpertAssignment asg;
  asg.selected.resize(static_cast<size_t>(C));
  const auto& sv = sbar.data();
  for (std::int64_t c = 0; c < C; ++c) {
    asg.selected[static_cast<size_t>(c)] = select_top_k(sv.data() + c * n_p, state.bias, n_p, K);
    if (accumulate_counts) {
      for (int e : asg.selected[static_cast<size_t>(c)]) ++state.counts[static_cast<size_t>(e)];
    }
  }
  asg.gates = apply_selection(sbar, asg.selected, renormalize_gates);
  return asg;
}

ExpertAssignment route_tokens(const Tensor& h_hat, RouterState& state, std::int64_t K,
                              bool accumulate_counts, bool renormalize_gates) {
  check_router(h_hat, state);
  const std::int64_t rows = h_hat.dim(0);
  const std::int64_t n_p = state.cluster.dim(0);
  if (K > n_p) throw std::invalid_argument("route_tokens: K exceeds expert count");
  if (state.bias.size() != static_cast<size_t>(n_p)) state.bias.assign(static_cast<size_t>(n_p), 0.0);
  if (state.counts.size() != static_cast<size_t>(n_p)) state.counts.assign(static_cast<size_t>(n_p), 0);

  Tensor sbar = softmax_lastdim(matmul(h_hat, transpose(state.cluster)));  // (rows, n_p)
  ExpertAssignment asg;
  asg.token_level = true;
  asg.selected.resize(static_cast<size_t>(rows));
  const auto& sv = sbar.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    asg.selected[static_cast<size_t>(r)] = select_top_k(sv.data() + r * n_p, state.bias, n_p, K);
    if (accumulate_counts) {
      for (int e : asg.selected[static_cast<size_t>(r)]) ++state.counts[static_cast<size_t>(e)];
    }
  }
  asg.gates = apply_selection(sbar, asg.selected, renormalize_gates);
  return asg;
}

void update_bias(RouterState& state, double bias_rate) {
  if (state.counts.empty()) return;
  double mean = 0.0;
  for (auto c : state.counts) mean += static_cast<double>(c);
  mean /= static_cast<double>(state.counts.size());
  for (size_t i = 0; i < state.counts.size(); ++i) {
    const double e = mean - static_cast<double>(state.counts[i]);
    if (e > 0.0) state.bias[i] += bias_rate;
    else if (e < 0.0) state.bias[i] -= bias_rate;
    state.counts[i] = 0;
  }
}

Tensor moe_combine(const Tensor& h_hat, std::int64_t C, std::int64_t N,
                   const ExpertAssignment& assignment, const std::vector<FFNParams>& shared,
                   const std::vector<FFNParams>& private_experts) {
  const std::int64_t n_p = assignment.gates.dim(1);
  if (static_cast<std::int64_t>(private_experts.size()) != n_p) {
    throw std::invalid_argument("moe_combine: gate width does not match private expert count");
  }
  const std::int64_t groups = assignment.token_level ? C * N : C;
  const std::int64_t rows_per_group = assignment.token_level ? 1 : N;
  if (assignment.gates.dim(0) != groups) {
    throw std::invalid_argument("moe_combine: assignment does not match (C, N)");
  }

  std::vector<Tensor> outputs;
  outputs.reserve(static_cast<size_t>(groups));
  for (std::int64_t g = 0; g < groups; ++g) {
    Tensor rows = slice(h_hat, 0, g * rows_per_group, rows_per_group);
    Tensor acc;
    if (!shared.empty()) {
      for (const auto& s : shared) {
        Tensor y = ffn_forward(rows, s);
        acc = acc.defined() ? add(acc, y) : y;
      }
      acc = mul_scalar(acc, 1.0 / static_cast<double>(shared.size()));
    }
    for (int e : assignment.selected[static_cast<size_t>(g)]) {
      Tensor gate = slice(slice(assignment.gates, 0, g, 1), 1, e, 1);  // (1,1) scalar
      Tensor y = mul(ffn_forward(rows, private_experts[static_cast<size_t>(e)]), gate);
      acc = acc.defined() ? add(acc, y) : y;
    }
    if (!acc.defined()) acc = zeros({rows_per_group, h_hat.dim(1)});
    outputs.push_back(acc);
  }
  return outputs.size() == 1 ? outputs[0] : concat(outputs, 0);
}

Tensor moe_forward(const Tensor& h_hat, std::int64_t C, std::int64_t N,
                   const ExpertAssignment& assignment, const std::vector<FFNParams>& shared,
                   const std::vector<FFNParams>& private_experts, const Tensor& norm_gain,
                   const Tensor& norm_bias) {
  Tensor mixed = moe_combine(h_hat, C, N, assignment, shared, private_experts);
  Tensor residual = add(mixed, h_hat);
  if (norm_bias.defined()) return layernorm(residual, norm_gain, norm_bias);
  return rmsnorm(residual, norm_gain);
}

}  // namespace kroncast
