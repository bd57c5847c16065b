#include "kroncast/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kroncast {

namespace {

struct KeyDef {
  const char* section;
  const char* key;
  const char* def;  // default value
};

// The full schema with defaults; serialize() emits keys in this order.
const std::vector<KeyDef>& schema() {
  static const std::vector<KeyDef> defs = {
      {"data", "source", "synth"},
      {"data", "path", ""},
      {"data", "split", "standard"},
      {"data", "eval_stride", "0"},
      {"data", "synth_channels", "1"},
      {"data", "synth_length", "256"},
      {"data", "synth_seed", "1"},
      {"model", "L", "672"},
      {"model", "F", "96"},
      {"model", "P", "96"},
      {"model", "S", "96"},
      {"model", "d", "512"},
      {"model", "h", "8"},
      {"model", "J", "8"},
      {"model", "placement", "every2"},
      {"model", "moe_layers", ""},
      {"model", "norm", "rmsnorm"},
      {"model", "linear_bias", "true"},
      {"model", "paper_scale", "false"},
      {"model", "j_ci", "7"},
      {"model", "j_cm", "1"},
      {"model", "graph_layers", "1"},
      {"train", "lr", "0.001"},
      {"train", "batch", "32"},
      {"train", "steps", "100"},
      {"train", "seed", "0"},
      {"train", "optimizer", "adam"},
      {"train", "clip_norm", "1"},
      {"train", "loss", "all"},
      {"train", "log_every", "100"},
      {"train", "val_windows", "64"},
      {"moe", "n_s", "1"},
      {"moe", "n_p", "4"},
      {"moe", "K", "2"},
      {"moe", "bias_rate", "0.001"},
      {"moe", "routing", "channel"},
      {"moe", "renormalize_gates", "false"},
      {"moe", "d_ff_dense", "0"},
      {"moe", "d_ff_expert", "0"},
      {"moe", "d_ff_shared", "0"},
      {"graph", "tau", "0.5"},
      {"graph", "tau_end", "0"},
      {"graph", "logit_form", "bernoulli"},
      {"graph", "edge_bias", "false"},
  };
  return defs;
}

bool is_channel_key(const std::string& section, const std::string& key) {
  if (section != "data" || key.rfind("channel", 0) != 0 || key.size() <= 7) return false;
  return std::all_of(key.begin() + 7, key.end(), [](char c) { return c >= '0' && c <= '9'; });
}

bool schema_has(const std::string& section, const std::string& key) {
  for (const auto& d : schema()) {
    if (section == d.section && key == d.key) return true;
  }
  return is_channel_key(section, key);
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  for (const auto& d : schema()) values_[d.section][d.key] = d.def;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  std::vector<std::string> unknown;
  std::int64_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw std::invalid_argument("config line " + std::to_string(line_no) + ": malformed section");
      }
      section = trim(line.substr(1, line.size() - 2));
      if (section != "data" && section != "model" && section != "train" && section != "moe" &&
          section != "graph") {
        unknown.push_back("[" + section + "]");
      }
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (section.empty()) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": key before any section");
    }
    if (!schema_has(section, key)) {
      unknown.push_back(section + "." + key);
      continue;
    }
    cfg.values_[section][key] = value;
  }
  if (!unknown.empty()) {
    std::string joined;
    for (const auto& u : unknown) joined += (joined.empty() ? "" : ", ") + u;
    throw std::invalid_argument("config: unknown keys: " + joined);
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::parse_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string ExperimentConfig::serialize() const {
  std::ostringstream os;
  std::string current;
  for (const auto& d : schema()) {
    if (current != d.section) {
      if (!current.empty()) os << "\n";
      current = d.section;
      os << "[" << current << "]\n";
    }
    os << d.key << " = " << values_.at(d.section).at(d.key) << "\n";
    // channel keys live between synth_seed and the next section
    if (std::string(d.key) == "synth_seed") {
      for (const auto& [k, v] : values_.at("data")) {
        if (is_channel_key("data", k)) os << k << " = " << v << "\n";
      }
    }
  }
  return os.str();
}

bool ExperimentConfig::has(const std::string& section, const std::string& key) const {
  auto s = values_.find(section);
  return s != values_.end() && s->second.count(key) > 0;
}

std::string ExperimentConfig::get(const std::string& section, const std::string& key) const {
  if (!has(section, key)) {
    throw std::invalid_argument("config: no value for " + section + "." + key);
  }
  return values_.at(section).at(key);
}

void ExperimentConfig::set(const std::string& section, const std::string& key,
                           const std::string& value) {
  if (!schema_has(section, key)) {
    throw std::invalid_argument("config: unknown key " + section + "." + key);
  }
  values_[section][key] = value;
}

std::int64_t ExperimentConfig::get_int(const std::string& section, const std::string& key) const {
  const std::string v = get(section, key);
  try {
    size_t pos;
    const std::int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    throw std::invalid_argument("config: " + section + "." + key + " is not an integer: '" + v + "'");
  }
}

double ExperimentConfig::get_double(const std::string& section, const std::string& key) const {
  const std::string v = get(section, key);
  try {
    size_t pos;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    throw std::invalid_argument("config: " + section + "." + key + " is not a number: '" + v + "'");
  }
}

bool ExperimentConfig::get_bool(const std::string& section, const std::string& key) const {
  const std::string v = get(section, key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config: " + section + "." + key + " is not a boolean: '" + v + "'");
}

void ExperimentConfig::require(const std::vector<std::pair<std::string, std::string>>& keys) const {
  std::vector<std::string> missing;
  for (const auto& [section, key] : keys) {
    if (!has(section, key) || get(section, key).empty()) missing.push_back(section + "." + key);
  }
  if (!missing.empty()) {
    std::string joined;
    for (const auto& m : missing) joined += (joined.empty() ? "" : ", ") + m;
    throw std::invalid_argument("config: missing required keys: " + joined);
  }
}

ModelConfig model_config_from(const ExperimentConfig& cfg) {
  ModelConfig mc;
  mc.patch.L = cfg.get_int("model", "L");
  mc.patch.F = cfg.get_int("model", "F");
  mc.patch.P = cfg.get_int("model", "P");
  mc.patch.S = cfg.get_int("model", "S");
  mc.patch.d = cfg.get_int("model", "d");
  mc.heads = cfg.get_int("model", "h");
  mc.J = cfg.get_int("model", "J");
  mc.placement = placement_from_string(cfg.get("model", "placement"));
  const std::string layers = cfg.get("model", "moe_layers");
  if (!layers.empty()) {
    std::stringstream ss(layers);
    std::string tok;
    while (std::getline(ss, tok, ',')) mc.custom_moe_layers.push_back(std::stoll(trim(tok)));
  }
  const std::string norm = cfg.get("model", "norm");
  if (norm == "rmsnorm") mc.norm = NormKind::RmsNorm;
  else if (norm == "layernorm") mc.norm = NormKind::LayerNorm;
  else throw std::invalid_argument("config: model.norm must be rmsnorm or layernorm");
  mc.linear_bias = cfg.get_bool("model", "linear_bias");
  mc.paper_scale = cfg.get_bool("model", "paper_scale");
  mc.j_ci = cfg.get_int("model", "j_ci");
  mc.j_cm = cfg.get_int("model", "j_cm");
  mc.graph_layers = cfg.get_int("model", "graph_layers");

  mc.moe.n_s = cfg.get_int("moe", "n_s");
  mc.moe.n_p = cfg.get_int("moe", "n_p");
  mc.moe.K = cfg.get_int("moe", "K");
  mc.moe.bias_rate = cfg.get_double("moe", "bias_rate");
  const std::string routing = cfg.get("moe", "routing");
  if (routing == "channel") mc.moe.token_routing = false;
  else if (routing == "token") mc.moe.token_routing = true;
  else throw std::invalid_argument("config: moe.routing must be channel or token");
  mc.moe.renormalize_gates = cfg.get_bool("moe", "renormalize_gates");
  mc.moe.d_ff_dense = cfg.get_int("moe", "d_ff_dense");
  mc.moe.d_ff_expert = cfg.get_int("moe", "d_ff_expert");
  mc.moe.d_ff_shared = cfg.get_int("moe", "d_ff_shared");

  mc.graph.tau = cfg.get_double("graph", "tau");
  const std::string lf = cfg.get("graph", "logit_form");
  if (lf == "bernoulli") mc.graph.logit_form = GumbelLogitForm::Bernoulli;
  else if (lf == "direct") mc.graph.logit_form = GumbelLogitForm::Direct;
  else throw std::invalid_argument("config: graph.logit_form must be bernoulli or direct");
  mc.graph.use_edge_bias = cfg.get_bool("graph", "edge_bias");
  mc.validate();
  return mc;
}

TrainSpec train_spec_from(const ExperimentConfig& cfg) {
  TrainSpec ts;
  ts.lr = cfg.get_double("train", "lr");
  ts.batch = cfg.get_int("train", "batch");
  ts.steps = cfg.get_int("train", "steps");
  ts.seed = static_cast<std::uint64_t>(cfg.get_int("train", "seed"));
  const std::string opt = cfg.get("train", "optimizer");
  if (opt == "adam") ts.use_adam = true;
  else if (opt == "sgd") ts.use_adam = false;
  else throw std::invalid_argument("config: train.optimizer must be adam or sgd");
  ts.clip_norm = cfg.get_double("train", "clip_norm");
  const std::string loss = cfg.get("train", "loss");
  if (loss == "all") ts.loss_last_only = false;
  else if (loss == "last_only") ts.loss_last_only = true;
  else throw std::invalid_argument("config: train.loss must be all or last_only");
  ts.log_every = cfg.get_int("train", "log_every");
  ts.val_windows = cfg.get_int("train", "val_windows");
  ts.tau_end = cfg.get_double("graph", "tau_end");
  return ts;
}

SynthChannel parse_channel_spec(const std::string& text) {
  SynthChannel ch;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '+')) {
    part = trim(part);
    if (part.empty()) continue;
    auto open = part.find('(');
    auto close = part.rfind(')');
    if (open == std::string::npos || close == std::string::npos || close < open) {
      throw std::invalid_argument("channel spec: malformed component '" + part + "'");
    }
    const std::string name = trim(part.substr(0, open));
    std::vector<double> args;
    std::stringstream as(part.substr(open + 1, close - open - 1));
    std::string a;
    while (std::getline(as, a, ';')) {
      std::stringstream bs(a);
      std::string b;
      while (std::getline(bs, b, ',')) {
        b = trim(b);
        if (!b.empty()) args.push_back(std::stod(b));
      }
    }
    if (name == "sin") {
      if (args.size() != 3) throw std::invalid_argument("channel spec: sin(period,amplitude,phase)");
      ch.sinusoids.push_back({args[0], args[1], args[2]});
    } else if (name == "ar1") {
      if (args.size() != 2) throw std::invalid_argument("channel spec: ar1(coeff,sigma)");
      ch.ar1_coeff = args[0];
      ch.ar1_sigma = args[1];
    } else if (name == "copy") {
      if (args.size() != 3) throw std::invalid_argument("channel spec: copy(source,delay,sigma)");
      ch.has_copy = true;
      ch.copy_source = static_cast<std::int64_t>(args[0]);
      ch.copy_delay = static_cast<std::int64_t>(args[1]);
      ch.copy_sigma = args[2];
    } else {
      throw std::invalid_argument("channel spec: unknown component '" + name + "'");
    }
  }
  return ch;
}

SynthSpec synth_spec_from(const ExperimentConfig& cfg) {
  SynthSpec spec;
  spec.C = cfg.get_int("data", "synth_channels");
  spec.T = cfg.get_int("data", "synth_length");
  spec.seed = static_cast<std::uint64_t>(cfg.get_int("data", "synth_seed"));
  bool any = false;
  for (std::int64_t c = 0; c < spec.C; ++c) {
    const std::string key = "channel" + std::to_string(c);
    if (cfg.has("data", key)) any = true;
  }
  if (any) {
    spec.channels.resize(static_cast<size_t>(spec.C));
    for (std::int64_t c = 0; c < spec.C; ++c) {
      const std::string key = "channel" + std::to_string(c);
      if (cfg.has("data", key)) {
        spec.channels[static_cast<size_t>(c)] = parse_channel_spec(cfg.get("data", key));
      } else {
        spec.channels[static_cast<size_t>(c)].sinusoids.push_back({24.0, 1.0, 0.0});
      }
    }
  }
  spec.validate();
  return spec;
}

}  // namespace kroncast
