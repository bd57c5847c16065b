#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "kroncast/checkpoint.hpp"
#include "kroncast/config.hpp"
#include "kroncast/data.hpp"
#include "kroncast/fft.hpp"
#include "kroncast/graph_learning.hpp"
#include "kroncast/model.hpp"
#include "kroncast/train.hpp"

namespace py = pybind11;
using namespace kroncast;

namespace {

std::pair<Shape, std::vector<double>> from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return {shape, std::move(data)};
}

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<double> vec_to_numpy(const std::vector<double>& v) {
  std::vector<py::ssize_t> shape = {static_cast<py::ssize_t>(v.size())};
  py::array_t<double> out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Tensor tensor_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  auto [shape, data] = from_numpy(a);
  return constant(std::move(shape), std::move(data));
}

GraphConfig graph_config_of(const std::string& logit_form) {
  GraphConfig g;
  if (logit_form == "bernoulli") g.logit_form = GumbelLogitForm::Bernoulli;
  else if (logit_form == "direct") g.logit_form = GumbelLogitForm::Direct;
  else throw std::invalid_argument("logit_form must be 'bernoulli' or 'direct'");
  return g;
}

// Python-facing wrapper around the model plus its training pipelines.
class Forecaster {
 public:
  explicit Forecaster(const std::string& config_text)
      : cfg_(ExperimentConfig::parse(config_text)),
        model_(model_config_from(cfg_),
               RngStream(static_cast<std::uint64_t>(cfg_.get_int("train", "seed"))).split(0x10de1)) {}

  py::array_t<double> forward(
      const py::array_t<double, py::array::c_style | py::array::forcecast>& values,
      const std::string& mode,
      std::optional<py::array_t<double, py::array::c_style | py::array::forcecast>> adjacency) {
    if (values.ndim() != 3) throw std::invalid_argument("values must be (B, C, L+F)");
    SeriesBatch raw;
    raw.values = tensor_from_numpy(values);
    raw.look_back = model_.config().patch.L;
    SeriesBatch batch = normalize(raw);
    if (mode == "ci") return to_numpy(model_.forward_ci(batch));
    if (mode != "cm") throw std::invalid_argument("mode must be 'ci' or 'cm'");
    std::vector<Tensor> gs;
    if (adjacency) {
      gs.push_back(tensor_from_numpy(*adjacency));
    } else {
      // deterministic eval-mode adjacency from the frequency similarity
      const auto& patch = model_.config().patch;
      const std::int64_t C = values.shape(1);
      RngStream rng(0);
      for (std::int64_t b = 0; b < values.shape(0); ++b) {
        std::vector<double> window(static_cast<size_t>(C * patch.L));
        const auto& v = batch.values.data();
        for (std::int64_t c = 0; c < C; ++c) {
          for (std::int64_t t = 0; t < patch.L; ++t) {
            window[static_cast<size_t>(c * patch.L + t)] =
                v[static_cast<size_t>((b * C + c) * values.shape(2) + t)];
          }
        }
        SimilarityMatrix sim = similarity_matrix(window, C, patch.L, model_.graph_params());
        gs.push_back(gumbel_adjacency(sim, model_.config().graph.tau, rng, false,
                                      model_.config().graph, model_.graph_params().edge_bias)
                         .g_hard);
      }
    }
    return to_numpy(model_.forward_cm(batch, gs, model_.config().graph_layers));
  }

  py::dict pretrain_on(const py::array_t<double, py::array::c_style | py::array::forcecast>& series) {
    Dataset ds = dataset_of(series);
    TrainSpec spec = train_spec_from(cfg_);
    TrainResult r = pretrain(model_, {ds}, {}, spec);
    py::dict out;
    out["loss_curve"] = r.loss_curve;
    out["initial_val"] = r.initial_val;
    out["final_val"] = r.final_val;
    return out;
  }

  py::dict finetune_on(const py::array_t<double, py::array::c_style | py::array::forcecast>& series) {
    Dataset ds = dataset_of(series);
    TrainSpec spec = train_spec_from(cfg_);
    TrainResult r = finetune(model_, ds, spec);
    py::dict out;
    out["loss_curve"] = r.loss_curve;
    out["max_frozen_grad_norm"] = r.max_frozen_grad_norm;
    return out;
  }

  py::dict evaluate_on(const py::array_t<double, py::array::c_style | py::array::forcecast>& series,
                       const std::string& mode) {
    Dataset ds = dataset_of(series);
    const std::int64_t n_cm = mode == "cm" ? model_.config().graph_layers : 0;
    Metrics m = evaluate(model_, ds, n_cm, cfg_.get_int("data", "eval_stride"));
    py::dict out;
    out["mse"] = m.mse;
    out["mae"] = m.mae;
    out["r2"] = m.r2;
    out["windows"] = m.windows;
    return out;
  }

  void save(const std::string& path) {
    save_checkpoint(path, checkpoint_from_params(model_.named_parameters(), cfg_.serialize()));
  }

  void load(const std::string& path) {
    load_into_params(load_checkpoint(path), model_.named_parameters());
  }

  py::dict param_count(bool finetune_scope) {
    ParamCount pc = count_parameters(model_.config(), finetune_scope, model_.config().linear_bias);
    py::dict out;
    py::dict breakdown;
    for (const auto& [name, count] : pc.breakdown) breakdown[py::str(name)] = count;
    out["breakdown"] = breakdown;
    out["total"] = pc.total;
    out["activated"] = pc.activated;
    return out;
  }

  std::vector<std::vector<std::int64_t>> expert_loads() const { return model_.expert_loads(); }

  std::string config_text() const { return cfg_.serialize(); }

 private:
  Dataset dataset_of(const py::array_t<double, py::array::c_style | py::array::forcecast>& series) {
    if (series.ndim() != 2) throw std::invalid_argument("series must be (C, T)");
    Dataset ds;
    ds.C = series.shape(0);
    ds.T = series.shape(1);
    ds.values.assign(series.data(), series.data() + series.size());
    for (std::int64_t c = 0; c < ds.C; ++c) ds.names.push_back("ch" + std::to_string(c));
    return ds;
  }

  ExperimentConfig cfg_;
  Model model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "kroncast core operations";

  m.def("rfft_magnitudes", [](const std::vector<double>& x) {
    return vec_to_numpy(rfft_magnitudes(x));
  }, py::arg("x"), "Real-DFT magnitudes at bins 1..L/2 (DC dropped)");

  m.def("temporal_mask", [](std::int64_t n) { return to_numpy(temporal_mask(n)); }, py::arg("n"));

  m.def("kronecker_mask",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& g, std::int64_t n) {
          AttentionMask mask = kronecker_mask(tensor_from_numpy(g), temporal_mask(n));
          return py::make_tuple(to_numpy(mask.m_raw), to_numpy(mask.m_add));
        },
        py::arg("g"), py::arg("n"), "Returns (raw 0/1 mask, additive mask)");

  m.def("similarity_matrix",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& window,
           std::optional<std::vector<double>> alpha_raw) {
          if (window.ndim() != 2) throw std::invalid_argument("window must be (C, L)");
          const std::int64_t C = window.shape(0), L = window.shape(1);
          FreqSimilarityParams params = make_similarity_params(L);
          if (alpha_raw) {
            if (static_cast<std::int64_t>(alpha_raw->size()) != L / 2) {
              throw std::invalid_argument("alpha_raw must have length L/2");
            }
            params.alpha_raw.leaf_data() = *alpha_raw;
          }
          std::vector<double> w(window.data(), window.data() + window.size());
          return to_numpy(similarity_matrix(w, C, L, params).z);
        },
        py::arg("window"), py::arg("alpha_raw") = std::nullopt);

  m.def("sample_gumbel", [](std::vector<std::int64_t> shape, std::uint64_t seed) {
    RngStream rng(seed);
    return to_numpy(sample_gumbel(Shape(shape.begin(), shape.end()), rng));
  }, py::arg("shape"), py::arg("seed"));

  m.def("gumbel_adjacency",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& z, double tau,
           std::uint64_t seed, bool train, const std::string& logit_form) {
          SimilarityMatrix sim{tensor_from_numpy(z)};
          RngStream rng(seed);
          AdjacencyMatrix adj = gumbel_adjacency(sim, tau, rng, train, graph_config_of(logit_form));
          return py::make_tuple(to_numpy(adj.g_soft), to_numpy(adj.g_hard));
        },
        py::arg("z"), py::arg("tau"), py::arg("seed"), py::arg("train") = true,
        py::arg("logit_form") = "bernoulli");

  m.def("synth_generate", [](const std::string& config_text) {
    Dataset ds = synth_generate(synth_spec_from(ExperimentConfig::parse(config_text)));
    py::array_t<double> out({static_cast<py::ssize_t>(ds.C), static_cast<py::ssize_t>(ds.T)});
    std::copy(ds.values.begin(), ds.values.end(), out.mutable_data());
    return out;
  }, py::arg("config_text"));

  m.def("default_config", []() { return ExperimentConfig().serialize(); });

  m.def("parameter_report", [](const std::string& config_text, std::int64_t pretrain_target,
                               std::int64_t finetune_target) {
    return parameter_report(model_config_from(ExperimentConfig::parse(config_text)),
                            pretrain_target, finetune_target);
  }, py::arg("config_text"), py::arg("pretrain_target") = 79911648,
        py::arg("finetune_target") = 16850883);

  py::class_<Forecaster>(m, "Forecaster")
      .def(py::init<const std::string&>(), py::arg("config_text"))
      .def("forward", &Forecaster::forward, py::arg("values"), py::arg("mode") = "ci",
           py::arg("adjacency") = std::nullopt)
      .def("pretrain", &Forecaster::pretrain_on, py::arg("series"))
      .def("finetune", &Forecaster::finetune_on, py::arg("series"))
      .def("evaluate", &Forecaster::evaluate_on, py::arg("series"), py::arg("mode") = "ci")
      .def("save", &Forecaster::save, py::arg("path"))
      .def("load", &Forecaster::load, py::arg("path"))
      .def("param_count", &Forecaster::param_count, py::arg("finetune_scope") = false)
      .def("expert_loads", &Forecaster::expert_loads)
      .def("config_text", &Forecaster::config_text);
}
