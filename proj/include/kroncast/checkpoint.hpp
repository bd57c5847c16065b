#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kroncast/tensor.hpp"

namespace kroncast {

// Versioned binary container of named arrays. Layout (all integers 64-bit
// little endian, payloads raw little-endian float64):
//   magic "KCKPT\n", version u64, config-echo length + bytes,
//   array count, then per array: name length + bytes, rank, dims, payload.
// Round-trips are bit identical.
struct CheckpointData {
  std::uint64_t version = 1;
  std::string config_echo;
  std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>> arrays;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

CheckpointData checkpoint_from_params(const std::vector<std::pair<std::string, Tensor>>& params,
                                      const std::string& config_echo);

// Copies array values into the matching named parameters; missing or
// shape-mismatched names are an error.
void load_into_params(const CheckpointData& data,
                      std::vector<std::pair<std::string, Tensor>>& params);

}  // namespace kroncast
