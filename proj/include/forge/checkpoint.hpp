#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "forge/graph.hpp"

namespace forge::ckpt {

// Single-file parameter checkpoint: an 8-byte magic, a little-endian uint64
// header length, a JSON header listing {name, shape} in registration order,
// then the raw float64 little-endian values in the same order. Identical
// stores produce identical bytes.
std::vector<uint8_t> serialize(const nn::ParamStore& ps);

// Strict inverse: bad magic, version, shape/size mismatch, duplicate names,
// or trailing bytes all raise checkpoint_error.
nn::ParamStore deserialize(const std::vector<uint8_t>& bytes);

void save(const nn::ParamStore& ps, const std::string& path);
nn::ParamStore load(const std::string& path);

}  // namespace forge::ckpt
