#include "kroncast/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace kroncast {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

constexpr char kMagic[6] = {'K', 'C', 'K', 'P', 'T', '\n'};

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void write_bytes(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_bytes(std::istream& is) {
  std::uint64_t n = read_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + tmp + "' for writing");
    os.write(kMagic, sizeof(kMagic));
    write_u64(os, data.version);
    write_bytes(os, data.config_echo);
    write_u64(os, data.arrays.size());
    for (const auto& [name, array] : data.arrays) {
      const auto& [shape, values] = array;
      write_bytes(os, name);
      write_u64(os, shape.size());
      for (auto d : shape) write_u64(os, static_cast<std::uint64_t>(d));
      os.write(reinterpret_cast<const char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("checkpoint: cannot move '" + tmp + "' into place");
  }
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[6];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file");
  }
  CheckpointData data;
  data.version = read_u64(is);
  if (data.version != 1) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(data.version));
  }
  data.config_echo = read_bytes(is);
  const std::uint64_t count = read_u64(is);
  data.arrays.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = read_bytes(is);
    const std::uint64_t rank = read_u64(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(read_u64(is));
    std::vector<double> values(static_cast<size_t>(numel(shape)));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated array payload");
    data.arrays.emplace_back(std::move(name), std::make_pair(std::move(shape), std::move(values)));
  }
  return data;
}

CheckpointData checkpoint_from_params(const std::vector<std::pair<std::string, Tensor>>& params,
                                      const std::string& config_echo) {
  CheckpointData data;
  data.config_echo = config_echo;
  for (const auto& [name, t] : params) {
    data.arrays.emplace_back(name, std::make_pair(t.shape(), t.data()));
  }
  return data;
}

void load_into_params(const CheckpointData& data,
                      std::vector<std::pair<std::string, Tensor>>& params) {
  std::map<std::string, const std::pair<Shape, std::vector<double>>*> index;
  for (const auto& [name, array] : data.arrays) index[name] = &array;
  for (auto& [name, t] : params) {
    auto it = index.find(name);
    if (it == index.end()) {
      throw std::runtime_error("checkpoint: missing array '" + name + "'");
    }
    if (it->second->first != t.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': file " +
                               shape_str(it->second->first) + " vs model " + shape_str(t.shape()));
    }
    t.leaf_data() = it->second->second;
  }
}

}  // namespace kroncast
