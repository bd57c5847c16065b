#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "kroncast/checkpoint.hpp"
#include "kroncast/config.hpp"
#include "kroncast/data.hpp"
#include "kroncast/graph_learning.hpp"
#include "kroncast/model.hpp"
#include "kroncast/train.hpp"

namespace fs = std::filesystem;
using namespace kroncast;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::int64_t seed = -1;  // -1: keep the config seed
  std::string checkpoint;
};

ExperimentConfig load_config(const CommonArgs& args) {
  ExperimentConfig cfg = ExperimentConfig::parse_file(args.config_path);
  if (args.seed >= 0) cfg.set("train", "seed", std::to_string(args.seed));
  return cfg;
}

Dataset dataset_from_config(const ExperimentConfig& cfg) {
  const std::string source = cfg.get("data", "source");
  if (source == "csv") {
    cfg.require({{"data", "path"}});
    return load_dataset(cfg.get("data", "path"));
  }
  if (source == "synth") {
    return synth_generate(synth_spec_from(cfg));
  }
  throw std::invalid_argument("config: data.source must be csv or synth");
}

std::string out_path(const CommonArgs& args, const std::string& name) {
  fs::create_directories(args.out_dir);
  return (fs::path(args.out_dir) / name).string();
}

Model build_model(const ExperimentConfig& cfg) {
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("train", "seed"));
  return Model(model_config_from(cfg), RngStream(seed).split(0x10de1));
}

Model load_model(const ExperimentConfig& cfg, const std::string& checkpoint_path) {
  Model model = build_model(cfg);
  CheckpointData data = load_checkpoint(checkpoint_path);
  load_into_params(data, model.named_parameters());
  return model;
}

std::string train_log_json(const TrainResult& result) {
  std::ostringstream os;
  for (const auto& entry : result.log) {
    os << "{\"step\":" << entry.step << ",\"loss\":" << format_double(entry.loss)
       << ",\"expert_loads\":[";
    for (size_t l = 0; l < entry.expert_loads.size(); ++l) {
      if (l) os << ",";
      os << "[";
      for (size_t e = 0; e < entry.expert_loads[l].size(); ++e) {
        if (e) os << ",";
        os << entry.expert_loads[l][e];
      }
      os << "]";
    }
    os << "]}\n";
  }
  return os.str();
}

std::string metrics_csv(const std::string& dataset, const std::string& mode, const Metrics& m) {
  std::ostringstream os;
  os << "dataset,mode,MSE,MAE,R2\n";
  os << dataset << "," << mode << "," << format_double(m.mse) << "," << format_double(m.mae) << ","
     << format_double(m.r2) << "\n";
  return os.str();
}

std::string matrix_csv(const Tensor& m) {
  std::ostringstream os;
  for (std::int64_t i = 0; i < m.dim(0); ++i) {
    for (std::int64_t j = 0; j < m.dim(1); ++j) {
      if (j) os << ",";
      os << format_double(m.at({i, j}));
    }
    os << "\n";
  }
  return os.str();
}

int cmd_synth(const CommonArgs& args) {
  ExperimentConfig cfg = load_config(args);
  Dataset ds = synth_generate(synth_spec_from(cfg));
  std::ostringstream os;
  for (std::int64_t c = 0; c < ds.C; ++c) {
    if (c) os << ",";
    os << ds.names[static_cast<size_t>(c)];
  }
  os << "\n";
  for (std::int64_t t = 0; t < ds.T; ++t) {
    for (std::int64_t c = 0; c < ds.C; ++c) {
      if (c) os << ",";
      os << format_double(ds.at(c, t));
    }
    os << "\n";
  }
  write_text_atomic(out_path(args, "synth.csv"), os.str());
  std::cout << "wrote " << out_path(args, "synth.csv") << " (" << ds.C << " x " << ds.T << ")\n";
  return 0;
}

int cmd_pretrain(const CommonArgs& args) {
  ExperimentConfig cfg = load_config(args);
  Dataset ds = dataset_from_config(cfg);
  const auto scheme = split_scheme_from_string(cfg.get("data", "split"));
  ModelConfig mc = model_config_from(cfg);
  SplitRanges r = split(ds.T, scheme, mc.patch.L, mc.patch.F);
  Dataset train = ds.slice_rows(r.train_begin, r.fit_end);
  Dataset val = ds.slice_rows(r.val_begin, r.val_end);
  Model model = build_model(cfg);
  TrainSpec spec = train_spec_from(cfg);
  TrainResult result = pretrain(model, {train}, {val}, spec);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
  save_checkpoint(out_path(args, "pretrained.ckpt"),
                  checkpoint_from_params(model.named_parameters(), cfg.serialize()));
  write_text_atomic(out_path(args, "train_log.jsonl"), train_log_json(result));
  std::cout << "initial_val=" << format_double(result.initial_val)
            << " final_val=" << format_double(result.final_val) << "\n";
  std::cout << "wrote " << out_path(args, "pretrained.ckpt") << "\n";
  return 0;
}

int cmd_finetune(const CommonArgs& args) {
  ExperimentConfig cfg = load_config(args);
  Dataset ds = dataset_from_config(cfg);
  const auto scheme = split_scheme_from_string(cfg.get("data", "split"));
  ModelConfig mc = model_config_from(cfg);
  SplitRanges r = split(ds.T, scheme, mc.patch.L, mc.patch.F);
  Dataset train = ds.slice_rows(r.train_begin, r.fit_end);
  Model model = load_model(cfg, args.checkpoint);
  TrainSpec spec = train_spec_from(cfg);
  TrainResult result = finetune(model, train, spec);
  save_checkpoint(out_path(args, "finetuned.ckpt"),
                  checkpoint_from_params(model.named_parameters(), cfg.serialize()));
  write_text_atomic(out_path(args, "train_log.jsonl"), train_log_json(result));
  std::cout << "max_frozen_grad_norm=" << format_double(result.max_frozen_grad_norm) << "\n";
  std::cout << "wrote " << out_path(args, "finetuned.ckpt") << "\n";
  return 0;
}

int cmd_predict(const CommonArgs& args, const std::string& mode, bool dump_attention) {
  ExperimentConfig cfg = load_config(args);
  Dataset ds = dataset_from_config(cfg);
  Model model = load_model(cfg, args.checkpoint);
  const auto& patch = model.config().patch;
  if (ds.T < patch.L) throw std::invalid_argument("predict: dataset shorter than the look-back");
  Dataset tail = ds.slice_rows(ds.T - patch.L, ds.T);

  // forecast window: look-back only; the horizon comes from the model
  std::vector<double> values(static_cast<size_t>(ds.C * (patch.L + patch.F)), 0.0);
  for (std::int64_t c = 0; c < ds.C; ++c) {
    for (std::int64_t t = 0; t < patch.L; ++t) {
      values[static_cast<size_t>(c * (patch.L + patch.F) + t)] = tail.at(c, t);
    }
  }
  SeriesBatch raw;
  raw.values = constant({1, ds.C, patch.L + patch.F}, std::move(values));
  raw.look_back = patch.L;
  SeriesBatch batch = normalize(raw);

  std::vector<std::vector<double>> attn;
  if (dump_attention) model.attn_debug = &attn;
  Tensor pred;
  if (mode == "cm") {
    std::vector<double> window(static_cast<size_t>(ds.C * patch.L));
    for (std::int64_t c = 0; c < ds.C; ++c) {
      for (std::int64_t t = 0; t < patch.L; ++t) {
        window[static_cast<size_t>(c * patch.L + t)] =
            batch.values.data()[static_cast<size_t>(c * (patch.L + patch.F) + t)];
      }
    }
    SimilarityMatrix sim = similarity_matrix(window, ds.C, patch.L, model.graph_params());
    RngStream rng(0);
    AdjacencyMatrix adj = gumbel_adjacency(sim, model.config().graph.tau, rng, false,
                                           model.config().graph, model.graph_params().edge_bias);
    pred = model.forward_cm(batch, {adj.g_hard}, model.config().graph_layers);
  } else {
    pred = model.forward_ci(batch);
  }
  model.attn_debug = nullptr;

  const std::int64_t N = patch.num_patches();
  Tensor horizon = denormalize(reshape(slice(pred, 2, N - 1, 1), {1, ds.C, patch.P}),
                               batch.norm_mean, batch.norm_std);
  std::ostringstream os;
  for (std::int64_t c = 0; c < ds.C; ++c) {
    os << ds.names[static_cast<size_t>(c)];
    for (std::int64_t t = 0; t < patch.F; ++t) {
      os << "," << format_double(horizon.data()[static_cast<size_t>(c * patch.P + t)]);
    }
    os << "\n";
  }
  write_text_atomic(out_path(args, "forecast.csv"), os.str());
  if (dump_attention) {
    std::ostringstream as;
    for (size_t h = 0; h < attn.size(); ++h) {
      as << "# head_matrix " << h << "\n";
      std::int64_t rows = 1;
      while (rows * rows < static_cast<std::int64_t>(attn[h].size())) ++rows;
      for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < rows; ++j) {
          if (j) as << ",";
          as << format_double(attn[h][static_cast<size_t>(i * rows + j)]);
        }
        as << "\n";
      }
    }
    write_text_atomic(out_path(args, "attention.csv"), as.str());
  }
  std::cout << "wrote " << out_path(args, "forecast.csv") << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& mode) {
  ExperimentConfig cfg = load_config(args);
  Dataset ds = dataset_from_config(cfg);
  const auto scheme = split_scheme_from_string(cfg.get("data", "split"));
  Model model = load_model(cfg, args.checkpoint);
  const auto& patch = model.config().patch;
  SplitRanges r = split(ds.T, scheme, patch.L, patch.F);
  Dataset test = ds.slice_rows(r.test_begin, r.test_end);
  const std::int64_t n_cm = mode == "cm" ? model.config().graph_layers : 0;
  Metrics m = evaluate(model, test, n_cm, cfg.get_int("data", "eval_stride"));
  const std::string name = cfg.get("data", "source") == "csv"
                               ? fs::path(cfg.get("data", "path")).stem().string()
                               : "synth";
  write_text_atomic(out_path(args, "metrics.csv"), metrics_csv(name, mode, m));
  std::cout << "windows=" << m.windows << " MSE=" << format_double(m.mse)
            << " MAE=" << format_double(m.mae) << " R2=" << format_double(m.r2) << "\n";
  return 0;
}

int cmd_inspect_graph(const CommonArgs& args, std::int64_t window_offset) {
  ExperimentConfig cfg = load_config(args);
  Dataset ds = dataset_from_config(cfg);
  ModelConfig mc = model_config_from(cfg);
  const auto& patch = mc.patch;
  if (window_offset < 0 || window_offset + patch.L > ds.T) {
    throw std::invalid_argument("inspect-graph: window offset out of range");
  }
  FreqSimilarityParams params = make_similarity_params(patch.L);
  if (!args.checkpoint.empty()) {
    Model model = load_model(cfg, args.checkpoint);
    params.alpha_raw.leaf_data() = model.graph_params().alpha_raw.data();
    params.edge_bias.leaf_data() = model.graph_params().edge_bias.data();
  }
  // normalized look-back, matching what the model sees
  std::vector<double> raw(static_cast<size_t>(ds.C * patch.L));
  for (std::int64_t c = 0; c < ds.C; ++c) {
    for (std::int64_t t = 0; t < patch.L; ++t) {
      raw[static_cast<size_t>(c * patch.L + t)] = ds.at(c, window_offset + t);
    }
  }
  SeriesBatch b;
  b.values = constant({1, ds.C, patch.L}, raw);
  b.look_back = patch.L;
  SeriesBatch nb = normalize(b);
  SimilarityMatrix sim = similarity_matrix(nb.values.data(), ds.C, patch.L, params);
  RngStream rng(static_cast<std::uint64_t>(cfg.get_int("train", "seed")));
  AdjacencyMatrix adj = gumbel_adjacency(sim, mc.graph.tau, rng, false, mc.graph, params.edge_bias);
  write_text_atomic(out_path(args, "graph_z.csv"), matrix_csv(sim.z));
  write_text_atomic(out_path(args, "graph_g.csv"), matrix_csv(adj.g_hard));
  std::cout << "wrote " << out_path(args, "graph_z.csv") << " and "
            << out_path(args, "graph_g.csv") << "\n";
  return 0;
}

int cmd_inspect_experts(const CommonArgs& args) {
  ExperimentConfig cfg = load_config(args);
  Dataset ds = dataset_from_config(cfg);
  Model model = args.checkpoint.empty() ? build_model(cfg) : load_model(cfg, args.checkpoint);
  const auto& patch = model.config().patch;
  const std::int64_t W = patch.L + patch.F;
  if (ds.T < W) throw std::invalid_argument("inspect-experts: dataset shorter than one window");
  model.accumulate_counts = true;
  std::int64_t batches = 0;
  for (std::int64_t off = 0; off + W <= ds.T; off += patch.F) {
    SeriesBatch batch = normalize(make_cm_batch(ds, {off}, patch.L, patch.F));
    model.forward_ci(batch);
    ++batches;
  }
  model.accumulate_counts = false;
  // aggregate across MoE layers (one layer in the reference configs)
  std::vector<std::int64_t> totals;
  for (const auto& loads : model.expert_loads()) {
    if (totals.size() < loads.size()) totals.resize(loads.size(), 0);
    for (size_t e = 0; e < loads.size(); ++e) totals[e] += loads[e];
  }
  std::ostringstream os;
  os << "expert_id,count\n";
  for (size_t e = 0; e < totals.size(); ++e) os << e << "," << totals[e] << "\n";
  write_text_atomic(out_path(args, "experts.csv"), os.str());
  std::cout << "batches=" << batches << " channels=" << ds.C << "\n";
  std::cout << "wrote " << out_path(args, "experts.csv") << "\n";
  return 0;
}

int cmd_param_count(const CommonArgs& args, bool paper_mode) {
  ExperimentConfig cfg = load_config(args);
  ModelConfig mc = model_config_from(cfg);
  for (bool finetune_scope : {false, true}) {
    ParamCount pc = count_parameters(mc, finetune_scope, mc.linear_bias);
    std::cout << (finetune_scope ? "[finetune scope]\n" : "[pretrain scope]\n");
    for (const auto& [name, count] : pc.breakdown) {
      std::cout << "  " << name << " = " << count << "\n";
    }
    std::cout << "  total = " << pc.total << "\n  activated = " << pc.activated << "\n";
  }
  if (paper_mode) {
    ModelConfig paper = mc;
    paper.norm = NormKind::LayerNorm;
    paper.linear_bias = false;
    const std::string report = parameter_report(paper, 79911648, 16850883);
    write_text_atomic(out_path(args, "param_report.txt"), report);
    std::cout << report;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kroncast: decoder-only multivariate forecaster with graph-gated attention"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string mode = "ci";
  std::int64_t window_offset = 0;
  bool paper_mode = false;
  bool dump_attention = false;

  auto add_common = [&](CLI::App* cmd, bool needs_checkpoint) {
    cmd->add_option("--config", args.config_path, "experiment config file")->required();
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "override train.seed");
    if (needs_checkpoint) {
      cmd->add_option("--checkpoint", args.checkpoint, "checkpoint file")->required();
    }
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset CSV");
  add_common(synth, false);
  CLI::App* pre = app.add_subcommand("pretrain", "channel-independent pretraining");
  add_common(pre, false);
  CLI::App* fin = app.add_subcommand("finetune", "channel-mixed finetuning from a checkpoint");
  add_common(fin, true);
  CLI::App* prd = app.add_subcommand("predict", "forecast the next horizon from a checkpoint");
  add_common(prd, true);
  prd->add_option("--mode", mode, "ci or cm")->check(CLI::IsMember({"ci", "cm"}));
  prd->add_flag("--dump-attention", dump_attention, "write per-layer attention weights");
  CLI::App* evl = app.add_subcommand("eval", "metrics on the test split");
  add_common(evl, true);
  evl->add_option("--mode", mode, "ci or cm")->check(CLI::IsMember({"ci", "cm"}));
  CLI::App* ig = app.add_subcommand("inspect-graph", "dump Z and the sampled adjacency");
  add_common(ig, false);
  ig->add_option("--checkpoint", args.checkpoint, "optional checkpoint for learned alpha");
  ig->add_option("--window", window_offset, "window start offset");
  CLI::App* ie = app.add_subcommand("inspect-experts", "per-expert load histogram over a pass");
  add_common(ie, false);
  ie->add_option("--checkpoint", args.checkpoint, "optional checkpoint");
  CLI::App* pcnt = app.add_subcommand("param-count", "parameter breakdown for the config");
  add_common(pcnt, false);
  pcnt->add_flag("--paper", paper_mode, "emit the published-totals reconciliation report");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(args);
    if (pre->parsed()) return cmd_pretrain(args);
    if (fin->parsed()) return cmd_finetune(args);
    if (prd->parsed()) return cmd_predict(args, mode, dump_attention);
    if (evl->parsed()) return cmd_eval(args, mode);
    if (ig->parsed()) return cmd_inspect_graph(args, window_offset);
    if (ie->parsed()) return cmd_inspect_experts(args);
    if (pcnt->parsed()) return cmd_param_count(args, paper_mode);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
