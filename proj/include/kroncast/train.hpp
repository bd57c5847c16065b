#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kroncast/config.hpp"
#include "kroncast/data.hpp"
#include "kroncast/model.hpp"

namespace kroncast {

// Adaptive-moment (default) or plain SGD updates over the trainable subset of
// the named parameters, with optional global gradient-norm clipping. The
// trainable set is captured at construction; rebuild after freezing changes.
class Optimizer {
 public:
  Optimizer(const std::vector<std::pair<std::string, Tensor>>& params, const TrainSpec& spec);
  void step();
  double last_grad_norm() const { return last_grad_norm_; }

 private:
  std::vector<Tensor> trainable_;
  std::vector<std::vector<double>> m_, v_;
  TrainSpec spec_;
  std::int64_t t_ = 0;
  double last_grad_norm_ = 0.0;
};

// One channel-independent pretraining sample: channel `channel` of dataset
// `dataset`, window starting at `offset`.
struct WindowRef {
  std::int32_t dataset = 0;
  std::int64_t channel = 0;
  std::int64_t offset = 0;
};

// Every valid start offset per channel, count = sum_i C_i * (T_i - L - F).
// Subsets shorter than L + F are skipped with a warning.
std::vector<WindowRef> extract_pretrain_samples(const std::vector<Dataset>& segments,
                                                std::int64_t L, std::int64_t F,
                                                std::vector<std::string>* warnings = nullptr);

// (count, 1, L+F) raw-value batch from refs[begin .. begin+count).
SeriesBatch make_ci_batch(const std::vector<Dataset>& segments, const std::vector<WindowRef>& refs,
                          size_t begin, size_t count, std::int64_t L, std::int64_t F);

// (offsets.size(), C, L+F) multivariate batch from one segment.
SeriesBatch make_cm_batch(const Dataset& segment, const std::vector<std::int64_t>& offsets,
                          std::int64_t L, std::int64_t F);

struct TrainLogEntry {
  std::int64_t step = 0;
  double loss = 0.0;
  std::vector<std::vector<std::int64_t>> expert_loads;  // per MoE layer at this step
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::vector<double> loss_curve;
  double initial_val = -1.0;
  double final_val = -1.0;
  double max_frozen_grad_norm = 0.0;
  std::vector<std::string> warnings;
};

// Channel-independent pretraining over the train segments; validation windows
// come from val_segments (capped at spec.val_windows).
TrainResult pretrain(Model& model, const std::vector<Dataset>& train_segments,
                     const std::vector<Dataset>& val_segments, const TrainSpec& spec);

// Channel-mixed finetuning: freezes the embedding and the first j_ci layers,
// trains the trailing j_cm layers, output head and graph parameters. The
// adjacency is resampled per forward pass from the frequency similarity of
// each normalized look-back window.
TrainResult finetune(Model& model, const Dataset& train_segment, const TrainSpec& spec);

// Continued channel-independent finetuning (same freezing, no graph path).
TrainResult finetune_ci(Model& model, const Dataset& train_segment, const TrainSpec& spec);

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
  double r2 = 0.0;
  std::int64_t windows = 0;
};

// Streaming metric math over (channel, truth, prediction) observations.
// MSE/MAE average over every observation; R-squared is computed per channel
// against that channel's own mean and averaged over channels with variance.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::int64_t channels);
  void add(std::int64_t channel, double y_true, double y_pred);
  Metrics finalize() const;

 private:
  std::vector<double> sse_, sae_, sum_y_, sum_y2_;
  std::vector<std::int64_t> n_;
};

// Rolling evaluation over the segment at the given stride (0 -> F). n_cm = 0
// runs channel independent; otherwise the trailing n_cm layers consume the
// deterministic (eval-mode) adjacency from the graph layer. Metrics are
// computed on denormalized horizon predictions.
Metrics evaluate(Model& model, const Dataset& segment, std::int64_t n_cm, std::int64_t stride = 0);

}  // namespace kroncast
