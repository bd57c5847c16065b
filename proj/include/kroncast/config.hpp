#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kroncast/data.hpp"
#include "kroncast/model.hpp"

namespace kroncast {

// INI-style experiment configuration with a closed key schema: sections
// [data] [model] [train] [moe] [graph]; unknown keys are rejected (listing
// every offender), and serialize() materializes all defaults so
// parse(serialize(x)) is a fixed point.
class ExperimentConfig {
 public:
  ExperimentConfig();  // all defaults

  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig parse_file(const std::string& path);
  std::string serialize() const;

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key) const;
  void set(const std::string& section, const std::string& key, const std::string& value);

  std::int64_t get_int(const std::string& section, const std::string& key) const;
  double get_double(const std::string& section, const std::string& key) const;
  bool get_bool(const std::string& section, const std::string& key) const;

  // Throws listing every missing key at once.
  void require(const std::vector<std::pair<std::string, std::string>>& keys) const;

 private:
  // section -> key -> value; only schema keys (plus data.channel<k>) allowed
  std::map<std::string, std::map<std::string, std::string>> values_;
};

struct TrainSpec {
  double lr = 1e-3;
  std::int64_t batch = 32;
  std::int64_t steps = 100;
  std::uint64_t seed = 0;
  bool use_adam = true;  // false: plain SGD
  double clip_norm = 1.0;  // 0 disables clipping
  bool loss_last_only = false;
  std::int64_t log_every = 100;
  std::int64_t val_windows = 64;
  double tau_end = 0.0;  // graph temperature anneal target; 0 keeps tau fixed
};

ModelConfig model_config_from(const ExperimentConfig& cfg);
TrainSpec train_spec_from(const ExperimentConfig& cfg);
SynthSpec synth_spec_from(const ExperimentConfig& cfg);

// Parse one channel component spec, e.g.
//   "sin(24,1.0,0)+sin(7,0.5,1.2)+ar1(0.9,0.1)+copy(0,8,0.05)"
SynthChannel parse_channel_spec(const std::string& text);

}  // namespace kroncast
