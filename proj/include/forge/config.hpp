#pragma once

#include <cstdint>
#include <string>

#include "forge/adapt.hpp"
#include "forge/datagen.hpp"
#include "forge/describe.hpp"
#include "forge/detector.hpp"

namespace forge::harness {

struct OptimizerConfig {
  double learning_rate = 1e-2;
  int steps = 200;
  int batch_size = 8;
  uint64_t seed = 0;
};

struct AblationFlags {
  bool adapt_enabled = true;
  bool mars_enabled = true;
};

// The single configuration object every verb consumes. Serialized as JSON
// with exactly these field names; unknown fields anywhere are a hard error.
struct ExperimentConfig {
  datagen::DatagenConfig datagen;
  det::DetectorConfig detector;
  adapt::AdaptConfig adapt;
  desc::MarsConfig mars;
  OptimizerConfig optimizer;
  AblationFlags ablation;
};

// Parse from JSON text; missing fields keep their defaults, unknown fields
// raise config_error, type mismatches raise config_error.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

// Canonical serialization: every field, fixed key order, round-trips
// losslessly through parse_config.
std::string serialize_config(const ExperimentConfig& cfg);

// FNV-1a over the canonical serialization.
uint64_t config_hash(const ExperimentConfig& cfg);

// Cheap structural validation (ranges the modules would reject later anyway).
void validate_config(const ExperimentConfig& cfg);

}  // namespace forge::harness
