#include "kroncast/train.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kroncast {

Optimizer::Optimizer(const std::vector<std::pair<std::string, Tensor>>& params,
                     const TrainSpec& spec)
    : spec_(spec) {
  for (const auto& [name, t] : params) {
    if (t.defined() && t.requires_grad()) trainable_.push_back(t);
  }
  m_.resize(trainable_.size());
  v_.resize(trainable_.size());
  for (size_t i = 0; i < trainable_.size(); ++i) {
    m_[i].assign(static_cast<size_t>(trainable_[i].size()), 0.0);
    v_[i].assign(static_cast<size_t>(trainable_[i].size()), 0.0);
  }
}

void Optimizer::step() {
  ++t_;
  // clip per tensor: the straight-through mask path can hand the graph
  // parameters gradients many orders larger than the rest of the model, and
  // a global норм would silence every other tensor
  std::vector<double> scales(trainable_.size(), 1.0);
  double norm_sq = 0.0;
  for (size_t i = 0; i < trainable_.size(); ++i) {
    double t_sq = 0.0;
    for (double g : trainable_[i].grad()) t_sq += g * g;
    norm_sq += t_sq;
    const double t_norm = std::sqrt(t_sq);
    if (spec_.clip_norm > 0.0 && t_norm > spec_.clip_norm) {
      scales[i] = spec_.clip_norm / t_norm;
    }
  }
  last_grad_norm_ = std::sqrt(norm_sq);
  if (spec_.lr == 0.0) return;  // parameters stay bit identical

  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (size_t i = 0; i < trainable_.size(); ++i) {
    auto& data = trainable_[i].leaf_data();
    const auto& grad = trainable_[i].grad();
    const double scale = scales[i];
    if (spec_.use_adam) {
      for (size_t j = 0; j < data.size(); ++j) {
        const double g = grad[j] * scale;
        m_[i][j] = beta1 * m_[i][j] + (1.0 - beta1) * g;
        v_[i][j] = beta2 * v_[i][j] + (1.0 - beta2) * g * g;
        data[j] -= spec_.lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps);
      }
    } else {
      for (size_t j = 0; j < data.size(); ++j) data[j] -= spec_.lr * grad[j] * scale;
    }
  }
}

std::vector<WindowRef> extract_pretrain_samples(const std::vector<Dataset>& segments,
                                                std::int64_t L, std::int64_t F,
                                                std::vector<std::string>* warnings) {
  std::vector<WindowRef> refs;
  for (size_t i = 0; i < segments.size(); ++i) {
    const auto& ds = segments[i];
    const std::int64_t count = ds.T - L - F;  // per-channel sample count
    if (count <= 0) {
      if (warnings) {
        warnings->push_back("subset " + std::to_string(i) + " has T=" + std::to_string(ds.T) +
                            " < L+F+1; skipped");
      }
      continue;
    }
    for (std::int64_t c = 0; c < ds.C; ++c) {
      for (std::int64_t o = 0; o < count; ++o) {
        refs.push_back({static_cast<std::int32_t>(i), c, o});
      }
    }
  }
  return refs;
}

SeriesBatch make_ci_batch(const std::vector<Dataset>& segments, const std::vector<WindowRef>& refs,
                          size_t begin, size_t count, std::int64_t L, std::int64_t F) {
  const std::int64_t W = L + F;
  std::vector<double> values(count * static_cast<size_t>(W));
  for (size_t k = 0; k < count; ++k) {
    const WindowRef& r = refs[(begin + k) % refs.size()];
    const Dataset& ds = segments[static_cast<size_t>(r.dataset)];
    for (std::int64_t t = 0; t < W; ++t) {
      values[k * static_cast<size_t>(W) + static_cast<size_t>(t)] = ds.at(r.channel, r.offset + t);
    }
  }
  SeriesBatch batch;
  batch.values = constant({static_cast<std::int64_t>(count), 1, W}, std::move(values));
  batch.look_back = L;
  return batch;
}

SeriesBatch make_cm_batch(const Dataset& segment, const std::vector<std::int64_t>& offsets,
                          std::int64_t L, std::int64_t F) {
  const std::int64_t W = L + F;
  const std::int64_t B = static_cast<std::int64_t>(offsets.size());
  std::vector<double> values(static_cast<size_t>(B * segment.C * W));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < segment.C; ++c) {
      for (std::int64_t t = 0; t < W; ++t) {
        values[static_cast<size_t>((b * segment.C + c) * W + t)] =
            segment.at(c, offsets[static_cast<size_t>(b)] + t);
      }
    }
  }
  SeriesBatch batch;
  batch.values = constant({B, segment.C, W}, std::move(values));
  batch.look_back = L;
  return batch;
}

namespace {

double validation_loss_ci(Model& model, const std::vector<Dataset>& segments,
                          const std::vector<WindowRef>& refs, const TrainSpec& spec) {
  if (refs.empty()) return -1.0;
  const auto& patch = model.config().patch;
  model.accumulate_counts = false;
  double total = 0.0;
  std::int64_t n = 0;
  for (size_t pos = 0; pos < refs.size(); pos += static_cast<size_t>(spec.batch)) {
    const size_t count = std::min(static_cast<size_t>(spec.batch), refs.size() - pos);
    SeriesBatch raw = make_ci_batch(segments, refs, pos, count, patch.L, patch.F);
    SeriesBatch batch = normalize(raw);
    Tensor pred = model.forward_ci(batch);
    Tensor loss = next_patch_loss(pred, next_patch_targets(batch, patch), spec.loss_last_only);
    total += loss.item() * static_cast<double>(count);
    n += static_cast<std::int64_t>(count);
  }
  return total / static_cast<double>(n);
}

// max |grad| over parameters that do not require grad: they sit outside the
// tape, so any allocated grad buffer must be all zeros.
double frozen_grad_norm(const Model& model) {
  double mx = 0.0;
  for (const auto& [name, t] : model.named_parameters()) {
    if (t.requires_grad()) continue;
    const auto& node = t.node();
    for (double g : node->grad) mx = std::max(mx, std::fabs(g));
  }
  return mx;
}

}  // namespace

TrainResult pretrain(Model& model, const std::vector<Dataset>& train_segments,
                     const std::vector<Dataset>& val_segments, const TrainSpec& spec) {
  const auto& patch = model.config().patch;
  TrainResult result;
  std::vector<WindowRef> refs =
      extract_pretrain_samples(train_segments, patch.L, patch.F, &result.warnings);
  if (refs.empty()) throw std::invalid_argument("pretrain: no training windows available");

  RngStream rng(spec.seed);
  for (size_t i = refs.size(); i > 1; --i) {
    std::swap(refs[i - 1], refs[static_cast<size_t>(rng.below(i))]);
  }
  std::vector<WindowRef> val_refs = extract_pretrain_samples(val_segments, patch.L, patch.F);
  {
    RngStream vrng = rng.split(0x5eed);
    for (size_t i = val_refs.size(); i > 1; --i) {
      std::swap(val_refs[i - 1], val_refs[static_cast<size_t>(vrng.below(i))]);
    }
    if (static_cast<std::int64_t>(val_refs.size()) > spec.val_windows) {
      val_refs.resize(static_cast<size_t>(spec.val_windows));
    }
  }

  result.initial_val = validation_loss_ci(model, val_segments, val_refs, spec);
  Optimizer opt(model.named_parameters(), spec);
  size_t pos = 0;
  for (std::int64_t step = 1; step <= spec.steps; ++step) {
    SeriesBatch raw =
        make_ci_batch(train_segments, refs, pos, static_cast<size_t>(spec.batch), patch.L, patch.F);
    pos = (pos + static_cast<size_t>(spec.batch)) % refs.size();
    SeriesBatch batch = normalize(raw);
    model.accumulate_counts = true;
    Tensor loss;
    try {
      Tensor pred = model.forward_ci(batch);
      loss = next_patch_loss(pred, next_patch_targets(batch, patch), spec.loss_last_only);
    } catch (const std::domain_error& e) {
      throw std::runtime_error("pretrain diverged at step " + std::to_string(step) + ": " + e.what());
    }
    result.loss_curve.push_back(loss.item());
    model.zero_grad();
    backward(loss);
    opt.step();
    if (spec.log_every > 0 && (step % spec.log_every == 0 || step == 1)) {
      result.log.push_back({step, loss.item(), model.expert_loads()});
    }
    model.update_router_biases();
  }
  model.accumulate_counts = false;
  result.final_val = validation_loss_ci(model, val_segments, val_refs, spec);
  return result;
}

namespace {

void apply_finetune_freeze(Model& model) {
  const auto& cfg = model.config();
  model.set_all_trainable(true);
  model.set_trainable_prefix("embed.", false);
  for (std::int64_t i = 0; i < cfg.j_ci; ++i) model.set_layer_trainable(i, false);
  model.set_trainable_prefix("graph.edge_bias", cfg.graph.use_edge_bias);
}

std::vector<double> item_lookback(const SeriesBatch& batch, std::int64_t b) {
  const std::int64_t C = batch.values.dim(1), Lw = batch.values.dim(2), L = batch.look_back;
  std::vector<double> window(static_cast<size_t>(C * L));
  const auto& v = batch.values.data();
  for (std::int64_t c = 0; c < C; ++c) {
    const double* row = v.data() + (b * C + c) * Lw;
    std::copy(row, row + L, window.data() + c * L);
  }
  return window;
}

TrainResult finetune_impl(Model& model, const Dataset& train_segment, const TrainSpec& spec,
                          bool channel_mixed) {
  const auto& cfg = model.config();
  const auto& patch = cfg.patch;
  if (train_segment.T < patch.L + patch.F) {
    throw std::invalid_argument("finetune: training segment shorter than L + F");
  }
  TrainResult result;
  apply_finetune_freeze(model);
  Optimizer opt(model.named_parameters(), spec);
  RngStream rng(spec.seed);
  const std::int64_t max_offset = train_segment.T - (patch.L + patch.F);

  for (std::int64_t step = 1; step <= spec.steps; ++step) {
    std::vector<std::int64_t> offsets;
    for (std::int64_t b = 0; b < spec.batch; ++b) {
      offsets.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(max_offset + 1))));
    }
    SeriesBatch batch = normalize(make_cm_batch(train_segment, offsets, patch.L, patch.F));
    model.accumulate_counts = true;
    Tensor loss;
    try {
      Tensor pred;
      if (channel_mixed) {
        const double tau = (spec.tau_end > 0.0 && spec.steps > 1)
                               ? cfg.graph.tau + (spec.tau_end - cfg.graph.tau) *
                                                     static_cast<double>(step - 1) /
                                                     static_cast<double>(spec.steps - 1)
                               : cfg.graph.tau;
        std::vector<Tensor> gs;
        for (std::int64_t b = 0; b < batch.values.dim(0); ++b) {
          auto window = item_lookback(batch, b);
          SimilarityMatrix sim =
              similarity_matrix(window, batch.values.dim(1), patch.L, model.graph_params());
          AdjacencyMatrix adj = gumbel_adjacency(sim, tau, rng, /*train=*/true, cfg.graph,
                                                 model.graph_params().edge_bias);
          gs.push_back(adj.g_st);
        }
        pred = model.forward_cm(batch, gs, cfg.j_cm);
      } else {
        pred = model.forward_ci(batch);
      }
      loss = next_patch_loss(pred, next_patch_targets(batch, patch), spec.loss_last_only);
    } catch (const std::domain_error& e) {
      throw std::runtime_error("finetune diverged at step " + std::to_string(step) + ": " + e.what());
    }
    result.loss_curve.push_back(loss.item());
    model.zero_grad();
    backward(loss);
    result.max_frozen_grad_norm = std::max(result.max_frozen_grad_norm, frozen_grad_norm(model));
    opt.step();
    if (spec.log_every > 0 && (step % spec.log_every == 0 || step == 1)) {
      result.log.push_back({step, loss.item(), model.expert_loads()});
    }
    model.update_router_biases();
  }
  model.accumulate_counts = false;
  return result;
}

}  // namespace

TrainResult finetune(Model& model, const Dataset& train_segment, const TrainSpec& spec) {
  return finetune_impl(model, train_segment, spec, /*channel_mixed=*/true);
}

TrainResult finetune_ci(Model& model, const Dataset& train_segment, const TrainSpec& spec) {
  return finetune_impl(model, train_segment, spec, /*channel_mixed=*/false);
}

MetricAccumulator::MetricAccumulator(std::int64_t channels)
    : sse_(static_cast<size_t>(channels), 0.0),
      sae_(static_cast<size_t>(channels), 0.0),
      sum_y_(static_cast<size_t>(channels), 0.0),
      sum_y2_(static_cast<size_t>(channels), 0.0),
      n_(static_cast<size_t>(channels), 0) {}

void MetricAccumulator::add(std::int64_t channel, double y_true, double y_pred) {
  const size_t c = static_cast<size_t>(channel);
  const double e = y_pred - y_true;
  sse_[c] += e * e;
  sae_[c] += std::fabs(e);
  sum_y_[c] += y_true;
  sum_y2_[c] += y_true * y_true;
  ++n_[c];
}

Metrics MetricAccumulator::finalize() const {
  Metrics m;
  double total_sse = 0.0, total_sae = 0.0;
  std::int64_t total_n = 0;
  double r2_sum = 0.0;
  std::int64_t r2_channels = 0;
  for (size_t c = 0; c < n_.size(); ++c) {
    total_sse += sse_[c];
    total_sae += sae_[c];
    total_n += n_[c];
    const double n = static_cast<double>(n_[c]);
    if (n > 0) {
      const double sst = sum_y2_[c] - sum_y_[c] * sum_y_[c] / n;
      if (sst > 1e-12) {
        r2_sum += 1.0 - sse_[c] / sst;
        ++r2_channels;
      } else if (sse_[c] <= 1e-12) {
        r2_sum += 1.0;  // flat channel predicted exactly
        ++r2_channels;
      }
    }
  }
  if (total_n > 0) {
    m.mse = total_sse / static_cast<double>(total_n);
    m.mae = total_sae / static_cast<double>(total_n);
  }
  m.r2 = r2_channels > 0 ? r2_sum / static_cast<double>(r2_channels) : 0.0;
  return m;
}

Metrics evaluate(Model& model, const Dataset& segment, std::int64_t n_cm, std::int64_t stride) {
  const auto& cfg = model.config();
  const auto& patch = cfg.patch;
  if (stride <= 0) stride = patch.F;
  if (segment.T < patch.L + patch.F) {
    throw std::invalid_argument("evaluate: segment shorter than L + F");
  }
  model.accumulate_counts = false;

  const std::int64_t C = segment.C, N = patch.num_patches();
  MetricAccumulator acc(C);
  std::int64_t window_count = 0;

  RngStream rng(0);  // eval-mode adjacency is deterministic; rng is unused noise
  for (std::int64_t off = 0; off + patch.L + patch.F <= segment.T; off += stride) {
    SeriesBatch batch = normalize(make_cm_batch(segment, {off}, patch.L, patch.F));
    Tensor pred;
    if (n_cm > 0) {
      auto window = item_lookback(batch, 0);
      SimilarityMatrix sim = similarity_matrix(window, C, patch.L, model.graph_params());
      AdjacencyMatrix adj = gumbel_adjacency(sim, cfg.graph.tau, rng, /*train=*/false, cfg.graph,
                                             model.graph_params().edge_bias);
      pred = model.forward_cm(batch, {adj.g_hard}, n_cm);
    } else {
      pred = model.forward_ci(batch);
    }
    // horizon forecast = prediction at the last token position, denormalized
    Tensor horizon = reshape(slice(pred, 2, N - 1, 1), {1, C, patch.P});
    Tensor raw = denormalize(horizon, batch.norm_mean, batch.norm_std);
    const auto& pv = raw.data();
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t t = 0; t < patch.F; ++t) {
        acc.add(c, segment.at(c, off + patch.L + t), pv[static_cast<size_t>(c * patch.P + t)]);
      }
    }
    ++window_count;
  }

  Metrics m = acc.finalize();
  m.windows = window_count;
  return m;
}

}  // namespace kroncast
