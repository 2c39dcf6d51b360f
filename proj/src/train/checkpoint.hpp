#pragma once
// Versioned binary snapshot container: magic "SSGF", a format version, one
// JSON metadata block, and a named tensor table with raw little-endian
// values. Writing is atomic (tmp file + rename) and loading never mutates
// caller state on failure.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace ssgan {

struct TensorBlob {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::string dtype;  // "f32" or "f64"
  std::vector<std::uint8_t> bytes;
};

struct CheckpointData {
  std::uint32_t version = 1;
  nlohmann::json metadata;
  std::vector<TensorBlob> tensors;
};

void save_checkpoint_file(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint_file(const std::string& path);

}  // namespace ssgan
