#include "kroncast/data.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "kroncast/rng.hpp"

namespace kroncast {

Dataset Dataset::slice_rows(std::int64_t begin, std::int64_t end) const {
  if (begin < 0 || end > T || begin > end) {
    throw std::invalid_argument("Dataset::slice_rows: range out of bounds");
  }
  Dataset out;
  out.C = C;
  out.T = end - begin;
  out.names = names;
  out.values.resize(static_cast<size_t>(C * out.T));
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t t = 0; t < out.T; ++t) {
      out.values[static_cast<size_t>(c * out.T + t)] = at(c, begin + t);
    }
  }
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && (*b == ' ' || *b == '\t' || *b == '\r')) ++b;
  while (e > b && (*(e - 1) == ' ' || *(e - 1) == '\t' || *(e - 1) == '\r')) --e;
  if (b == e) return false;
  auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e;
}

}  // namespace

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_dataset: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("load_dataset: '" + path + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header = split_csv_line(line);
  const std::int64_t cols = static_cast<std::int64_t>(header.size());
  if (cols == 0) throw std::runtime_error("load_dataset: header row has no columns");

  std::vector<std::vector<double>> rows;
  std::int64_t line_no = 1;
  bool skip_first_col = false;
  bool first_data_row = true;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (static_cast<std::int64_t>(cells.size()) != cols) {
      throw std::runtime_error("load_dataset: row " + std::to_string(line_no) + " has " +
                               std::to_string(cells.size()) + " cells, expected " +
                               std::to_string(cols));
    }
    if (first_data_row) {
      double probe;
      skip_first_col = !parse_double(cells[0], probe);
      first_data_row = false;
    }
    std::vector<double> row;
    row.reserve(static_cast<size_t>(cols - (skip_first_col ? 1 : 0)));
    for (std::int64_t j = skip_first_col ? 1 : 0; j < cols; ++j) {
      double v;
      if (!parse_double(cells[static_cast<size_t>(j)], v) || !std::isfinite(v)) {
        throw std::runtime_error("load_dataset: cannot parse cell at row " +
                                 std::to_string(line_no) + ", column " + std::to_string(j + 1) +
                                 " ('" + cells[static_cast<size_t>(j)] + "')");
      }
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  Dataset out;
  out.C = cols - (skip_first_col ? 1 : 0);
  out.T = static_cast<std::int64_t>(rows.size());
  for (std::int64_t j = skip_first_col ? 1 : 0; j < cols; ++j) {
    out.names.push_back(header[static_cast<size_t>(j)]);
  }
  out.values.resize(static_cast<size_t>(out.C * out.T));
  for (std::int64_t t = 0; t < out.T; ++t) {
    for (std::int64_t c = 0; c < out.C; ++c) {
      out.values[static_cast<size_t>(c * out.T + t)] = rows[static_cast<size_t>(t)][static_cast<size_t>(c)];
    }
  }
  return out;
}

void SynthSpec::validate() const {
  if (C < 1 || T < 1) throw std::invalid_argument("SynthSpec: C and T must be positive");
  if (!channels.empty() && static_cast<std::int64_t>(channels.size()) != C) {
    throw std::invalid_argument("SynthSpec: channel spec count must equal C");
  }
  // copy map must be acyclic with in-range delays
  for (size_t j = 0; j < channels.size(); ++j) {
    const auto& ch = channels[j];
    if (!ch.has_copy) continue;
    if (ch.copy_source < 0 || ch.copy_source >= C) {
      throw std::invalid_argument("SynthSpec: copy source out of range");
    }
    if (ch.copy_delay < 0 || ch.copy_delay >= T) {
      throw std::invalid_argument("SynthSpec: copy delay must be in [0, T)");
    }
    // follow the chain; a cycle returns to j
    std::int64_t cur = ch.copy_source;
    std::int64_t hops = 0;
    while (hops++ <= C) {
      if (cur == static_cast<std::int64_t>(j)) {
        throw std::invalid_argument("SynthSpec: copy map has a cycle");
      }
      if (static_cast<size_t>(cur) >= channels.size() || !channels[static_cast<size_t>(cur)].has_copy) break;
      cur = channels[static_cast<size_t>(cur)].copy_source;
    }
  }
}

Dataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  const std::int64_t C = spec.C, T = spec.T;
  std::vector<SynthChannel> chans = spec.channels;
  if (chans.empty()) chans.resize(static_cast<size_t>(C));

  std::int64_t warm = 0;
  for (const auto& ch : chans) {
    if (ch.has_copy) warm = std::max(warm, ch.copy_delay);
  }
  // chains of copies need the combined delay available
  warm *= static_cast<std::int64_t>(C);

  const std::int64_t ext = T + warm;
  std::vector<std::vector<double>> buf(static_cast<size_t>(C),
                                       std::vector<double>(static_cast<size_t>(ext), 0.0));
  std::vector<bool> done(static_cast<size_t>(C), false);
  RngStream root(spec.seed);

  // generate in dependency order (validate() guarantees acyclicity)
  std::vector<std::int64_t> order;
  std::vector<bool> queued(static_cast<size_t>(C), false);
  std::function<void(std::int64_t)> visit = [&](std::int64_t c) {
    if (queued[static_cast<size_t>(c)]) return;
    queued[static_cast<size_t>(c)] = true;
    if (chans[static_cast<size_t>(c)].has_copy) visit(chans[static_cast<size_t>(c)].copy_source);
    order.push_back(c);
  };
  for (std::int64_t c = 0; c < C; ++c) visit(c);

  constexpr double kTwoPi = 6.283185307179586476925286766559;
  for (std::int64_t c : order) {
    const auto& ch = chans[static_cast<size_t>(c)];
    RngStream rng = root.split(static_cast<std::uint64_t>(c));
    auto& row = buf[static_cast<size_t>(c)];
    double ar_state = 0.0;
    for (std::int64_t k = 0; k < ext; ++k) {
      const std::int64_t t = k - warm;  // warm-up indices are negative time
      double v = 0.0;
      for (const auto& s : ch.sinusoids) {
        v += s.amplitude * std::sin(kTwoPi * static_cast<double>(t) / s.period + s.phase);
      }
      if (ch.ar1_sigma > 0.0 || ch.ar1_coeff != 0.0) {
        ar_state = ch.ar1_coeff * ar_state + rng.normal(0.0, ch.ar1_sigma);
        v += ar_state;
      }
      if (ch.has_copy) {
        const std::int64_t src_k = k - ch.copy_delay;
        if (src_k >= 0) v += buf[static_cast<size_t>(ch.copy_source)][static_cast<size_t>(src_k)];
        if (ch.copy_sigma > 0.0) v += rng.normal(0.0, ch.copy_sigma);
      }
      row[static_cast<size_t>(k)] = v;
    }
    done[static_cast<size_t>(c)] = true;
  }

  Dataset out;
  out.C = C;
  out.T = T;
  out.values.resize(static_cast<size_t>(C * T));
  for (std::int64_t c = 0; c < C; ++c) {
    out.names.push_back("ch" + std::to_string(c));
    for (std::int64_t t = 0; t < T; ++t) {
      out.values[static_cast<size_t>(c * T + t)] = buf[static_cast<size_t>(c)][static_cast<size_t>(t + warm)];
    }
  }
  return out;
}

SplitScheme split_scheme_from_string(const std::string& s) {
  if (s == "standard") return SplitScheme::Standard;
  if (s == "fewshot") return SplitScheme::Fewshot;
  throw std::invalid_argument("unknown split scheme '" + s + "'");
}

SplitRanges split(std::int64_t T, SplitScheme scheme, std::int64_t L, std::int64_t F) {
  SplitRanges r;
  if (scheme == SplitScheme::Standard) {
    r.train_begin = 0;
    r.train_end = (7 * T) / 10;
    r.val_begin = r.train_end;
    r.val_end = (8 * T) / 10;
    r.test_begin = r.val_end;
    r.test_end = T;
    r.fit_end = r.train_end;
  } else {
    r.train_begin = 0;
    r.train_end = T / 5;
    // validation: last tenth of the training segment; fitting stops there
    r.val_begin = r.train_end - (r.train_end - r.train_begin) / 10;
    r.val_end = r.train_end;
    r.test_begin = T - T / 5;
    r.test_end = T;
    r.fit_end = r.val_begin;
  }
  const std::int64_t need = L + F;
  if (r.train_end - r.train_begin < need) {
    throw std::invalid_argument("split: train segment shorter than L + F");
  }
  if (r.test_end - r.test_begin < need) {
    throw std::invalid_argument("split: test segment shorter than L + F");
  }
  return r;
}

void write_text_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    os << content;
    if (!os) throw std::runtime_error("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot move '" + tmp + "' into place");
  }
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace kroncast
