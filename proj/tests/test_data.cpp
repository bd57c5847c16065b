#include <doctest.h>

#include <cmath>
#include <fstream>

#include "kroncast/data.hpp"
#include "kroncast/rng.hpp"
#include "oracles.hpp"

using namespace kroncast;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  const std::string path = "/tmp/" + name;
  std::ofstream os(path, std::ios::trunc);
  os << content;
  return path;
}

}  // namespace

TEST_CASE("csv loading detects and drops a timestamp column") {
  auto path = write_temp("kc_toy.csv",
                         "date,a,b\n"
                         "2020-01-01,1.5,2\n"
                         "2020-01-02,2.5,3\n"
                         "2020-01-03,3.5,4\n"
                         "2020-01-04,4.5,5\n"
                         "2020-01-05,5.5,6\n");
  Dataset ds = load_dataset(path);
  CHECK(ds.C == 2);
  CHECK(ds.T == 5);
  CHECK(ds.names == std::vector<std::string>{"a", "b"});
  CHECK(ds.at(0, 0) == 1.5);
  CHECK(ds.at(1, 4) == 6.0);
}

TEST_CASE("csv loading keeps a numeric first column") {
  auto path = write_temp("kc_numeric.csv", "x,y\n1,2\n3,4\n");
  Dataset ds = load_dataset(path);
  CHECK(ds.C == 2);
  CHECK(ds.T == 2);
}

TEST_CASE("ragged and unparseable rows report their location") {
  auto ragged = write_temp("kc_ragged.csv", "a,b\n1,2\n3\n");
  CHECK_THROWS_WITH_AS(load_dataset(ragged), doctest::Contains("row 3"), std::runtime_error);
  auto bad = write_temp("kc_bad.csv", "a,b\n1,2\n3,oops\n");
  CHECK_THROWS_WITH_AS(load_dataset(bad), doctest::Contains("column 2"), std::runtime_error);
}

TEST_CASE("pure sinusoid channels are exact") {
  SynthSpec spec;
  spec.C = 1;
  spec.T = 64;
  spec.channels.resize(1);
  spec.channels[0].sinusoids.push_back({16.0, 2.0, 0.7});
  Dataset ds = synth_generate(spec);
  for (std::int64_t t = 0; t < spec.T; ++t) {
    const double expect = 2.0 * std::sin(2.0 * M_PI * t / 16.0 + 0.7);
    CHECK(ds.at(0, t) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("noise-free lag copies shift the source exactly") {
  SynthSpec spec;
  spec.C = 2;
  spec.T = 100;
  spec.seed = 5;
  spec.channels.resize(2);
  spec.channels[0].sinusoids.push_back({12.0, 1.0, 0.0});
  spec.channels[0].ar1_coeff = 0.7;
  spec.channels[0].ar1_sigma = 0.2;
  spec.channels[1].has_copy = true;
  spec.channels[1].copy_source = 0;
  spec.channels[1].copy_delay = 9;
  Dataset ds = synth_generate(spec);
  for (std::int64_t t = 9; t < spec.T; ++t) {
    CHECK(ds.at(1, t) == doctest::Approx(ds.at(0, t - 9)).epsilon(1e-12));
  }
}

TEST_CASE("ar(1) noise shows the analytic lag-one autocorrelation") {
  SynthSpec spec;
  spec.C = 1;
  spec.T = 10000;
  spec.seed = 11;
  spec.channels.resize(1);
  spec.channels[0].ar1_coeff = 0.9;
  spec.channels[0].ar1_sigma = 1.0;
  Dataset ds = synth_generate(spec);
  double mean = 0.0;
  for (std::int64_t t = 0; t < spec.T; ++t) mean += ds.at(0, t);
  mean /= static_cast<double>(spec.T);
  double num = 0.0, den = 0.0;
  for (std::int64_t t = 1; t < spec.T; ++t) {
    num += (ds.at(0, t) - mean) * (ds.at(0, t - 1) - mean);
  }
  for (std::int64_t t = 0; t < spec.T; ++t) {
    den += (ds.at(0, t) - mean) * (ds.at(0, t) - mean);
  }
  CHECK(std::fabs(num / den - 0.9) < 0.05);
}

TEST_CASE("lag copies stay strongly correlated under mild noise") {
  SynthSpec spec;
  spec.C = 2;
  spec.T = 2000;
  spec.seed = 13;
  spec.channels.resize(2);
  spec.channels[0].sinusoids.push_back({24.0, 1.0, 0.0});
  spec.channels[0].sinusoids.push_back({7.0, 0.5, 1.0});
  spec.channels[1].has_copy = true;
  spec.channels[1].copy_source = 0;
  spec.channels[1].copy_delay = 8;
  spec.channels[1].copy_sigma = 0.1;  // 0.1 * dominant amplitude
  Dataset ds = synth_generate(spec);
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  const std::int64_t n = spec.T - 8;
  for (std::int64_t t = 8; t < spec.T; ++t) {
    const double x = ds.at(0, t - 8), y = ds.at(1, t);
    sx += x;
    sy += y;
    sxx += x * x;
    syy += y * y;
    sxy += x * y;
  }
  const double cov = sxy / n - (sx / n) * (sy / n);
  const double vx = sxx / n - (sx / n) * (sx / n);
  const double vy = syy / n - (sy / n) * (sy / n);
  CHECK(cov / std::sqrt(vx * vy) > 0.9);
}

TEST_CASE("copy cycles and bad delays are rejected") {
  SynthSpec spec;
  spec.C = 2;
  spec.T = 50;
  spec.channels.resize(2);
  spec.channels[0].has_copy = true;
  spec.channels[0].copy_source = 1;
  spec.channels[0].copy_delay = 1;
  spec.channels[1].has_copy = true;
  spec.channels[1].copy_source = 0;
  spec.channels[1].copy_delay = 1;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.channels[0].has_copy = false;
  spec.channels[1].copy_delay = 50;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("synthetic generation is deterministic per seed") {
  SynthSpec spec;
  spec.C = 3;
  spec.T = 128;
  spec.seed = 21;
  spec.channels.resize(3);
  for (auto& ch : spec.channels) {
    ch.sinusoids.push_back({10.0, 1.0, 0.0});
    ch.ar1_coeff = 0.5;
    ch.ar1_sigma = 0.3;
  }
  Dataset a = synth_generate(spec);
  Dataset b = synth_generate(spec);
  CHECK(a.values == b.values);
  spec.seed = 22;
  CHECK(synth_generate(spec).values != a.values);
}

TEST_CASE("standard split follows the 70/10/20 convention") {
  SplitRanges r = split(100, SplitScheme::Standard, 8, 4);
  CHECK(r.train_begin == 0);
  CHECK(r.train_end == 70);
  CHECK(r.val_begin == 70);
  CHECK(r.val_end == 80);
  CHECK(r.test_begin == 80);
  CHECK(r.test_end == 100);
  CHECK(r.fit_end == 70);
}

TEST_CASE("fewshot split trains on the first fifth and tests on the last") {
  SplitRanges r = split(100, SplitScheme::Fewshot, 8, 4);
  CHECK(r.train_begin == 0);
  CHECK(r.train_end == 20);   // rows 1..20
  CHECK(r.test_begin == 80);  // rows 81..100
  CHECK(r.test_end == 100);
  // validation is the trailing tenth of the train segment
  CHECK(r.val_begin == 18);
  CHECK(r.val_end == 20);
  CHECK(r.fit_end == 18);
}

TEST_CASE("segments shorter than a window are rejected") {
  CHECK_THROWS_AS(split(30, SplitScheme::Fewshot, 8, 4), std::invalid_argument);
}

TEST_CASE("windows never straddle split boundaries") {
  // enumeration: fit windows live in [0, fit_end), test windows in [test_begin, T)
  const std::int64_t T = 200, L = 16, F = 8;
  SplitRanges r = split(T, SplitScheme::Standard, L, F);
  Dataset ds;
  ds.C = 1;
  ds.T = T;
  ds.values.resize(static_cast<size_t>(T));
  for (std::int64_t t = 0; t < T; ++t) ds.values[static_cast<size_t>(t)] = double(t);
  Dataset train = ds.slice_rows(r.train_begin, r.fit_end);
  // every extracted window must end before fit_end
  auto refs = std::vector<std::int64_t>{};
  for (std::int64_t o = 0; o + L + F <= train.T; ++o) refs.push_back(o);
  for (auto o : refs) CHECK(train.at(0, o + L + F - 1) < double(r.fit_end));
}

TEST_CASE("atomic writes land complete files") {
  const std::string path = "/tmp/kc_atomic.txt";
  write_text_atomic(path, "hello\n");
  std::ifstream is(path);
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  CHECK(content == "hello\n");
}

TEST_CASE("doubles format at full precision") {
  const double v = 0.12345678901234567;
  CHECK(std::stod(format_double(v)) == v);
}
