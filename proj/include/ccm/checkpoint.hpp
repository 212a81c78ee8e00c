#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "ccm/parameters.hpp"

namespace ccm {

using TensorMap = std::map<std::string, Tensor>;

// Binary layout, all integers little-endian:
//   "CCM1" | u32 count | per tensor: u16 name_len, name bytes (UTF-8),
//   u8 rank, rank x u64 dims, float32 payload.
std::string encode_checkpoint(const TensorMap& tensors);
TensorMap decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_checkpoint(const std::filesystem::path& path);

inline void save_params(const std::filesystem::path& path, const ParameterSet& ps) {
  save_checkpoint(path, ps.snapshot());
}

// Loads into an existing network; an architecture mismatch throws StructuralError.
inline void load_params(const std::filesystem::path& path, ParameterSet& ps) {
  ps.load(load_checkpoint(path));
}

}  // namespace ccm
