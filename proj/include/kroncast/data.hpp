#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kroncast {

// Channel-major multivariate series: values[c*T + t].
struct Dataset {
  std::vector<double> values;
  std::int64_t C = 0;
  std::int64_t T = 0;
  std::vector<std::string> names;

  double at(std::int64_t c, std::int64_t t) const { return values[static_cast<size_t>(c * T + t)]; }
  Dataset slice_rows(std::int64_t begin, std::int64_t end) const;  // [begin, end) time range
};

// CSV layout: header row of variable names, one row per time step. A leading
// timestamp column (non-numeric first data cell) is detected and dropped.
// Ragged rows or unparseable cells raise with the row/column location.
Dataset load_dataset(const std::string& path);

struct SynthChannel {
  struct Sinusoid {
    double period = 24.0;
    double amplitude = 1.0;
    double phase = 0.0;
  };
  std::vector<Sinusoid> sinusoids;
  double ar1_coeff = 0.0;  // x_t = coeff * x_{t-1} + N(0, ar1_sigma)
  double ar1_sigma = 0.0;
  bool has_copy = false;
  std::int64_t copy_source = -1;
  std::int64_t copy_delay = 0;
  double copy_sigma = 0.0;
};

struct SynthSpec {
  std::int64_t C = 1;
  std::int64_t T = 256;
  std::uint64_t seed = 0;
  std::vector<SynthChannel> channels;  // one per channel; missing entries default

  void validate() const;  // copy map must be acyclic, delays < T
};

// Deterministic per seed. Channels compose sinusoids + AR(1) noise + lag copy;
// a copy channel reads its source at t - delay (sources are generated with a
// warm-up tail so the shift is exact from t = 0).
Dataset synth_generate(const SynthSpec& spec);

enum class SplitScheme { Standard, Fewshot };
SplitScheme split_scheme_from_string(const std::string& s);

// Chronological index ranges, no shuffling. Standard: 70/10/20. Fewshot:
// first 20% train, last 20% test; validation is the last tenth of the train
// segment (train_for_fit ends where validation begins).
struct SplitRanges {
  std::int64_t train_begin = 0, train_end = 0;
  std::int64_t val_begin = 0, val_end = 0;
  std::int64_t test_begin = 0, test_end = 0;
  std::int64_t fit_end = 0;  // train rows actually used for optimization
};

SplitRanges split(std::int64_t T, SplitScheme scheme, std::int64_t L, std::int64_t F);

// Atomic text write (temp file + rename).
void write_text_atomic(const std::string& path, const std::string& content);

// Full-precision decimal formatting (17 significant digits).
std::string format_double(double v);

}  // namespace kroncast
