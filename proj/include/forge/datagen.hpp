#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "forge/image.hpp"
#include "forge/rng.hpp"

namespace forge::datagen {

constexpr int kNumClasses = 3;  // 0 = crater, 1 = mountain, 2 = dune

struct LandmarkSpec {
  int landmark_id = 0;
  int class_id = 0;
  double x = 0.0;  // world units
  double y = 0.0;
  double radius = 1.0;  // world units; profile support is strictly inside it
  double relief = 0.0;  // signed height; negative = depression
};

struct ViewParams {
  double sun_azimuth = 0.8;
  double sun_elevation = 0.9;  // must stay strictly positive
  double camera_offset_x = 0.0;
  double camera_offset_y = 0.0;
  double camera_scale = 1.0;  // clamped to [0.5, 2.0]
  double camera_rotation = 0.0;
};

// Photometric gap between the labeled and unlabeled domains. The identity
// shift is (gamma=1, noise_sigma=0, texture_gain=1, haze=0).
struct DomainShift {
  double gamma = 1.0;
  double noise_sigma = 0.0;
  double texture_gain = 1.0;
  double haze = 0.0;
};

struct Box {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  double area() const { return (x1 - x0) * (y1 - y0); }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
};

enum Domain : int { kSource = 0, kTarget = 1 };

struct SceneSample {
  Image image;
  std::vector<Box> boxes;
  std::vector<int> instance_ids;
  std::vector<int> class_ids;
  int domain = kSource;
  int view_group = 0;
  uint64_t seed = 0;
};

// Uniform ranges the dataset builder draws views from.
struct ViewRange {
  double azimuth_min = 0.0, azimuth_max = 6.283185307179586;
  double elevation_min = 0.55, elevation_max = 1.15;
  double scale_min = 0.85, scale_max = 1.2;
  double rotation_min = -3.141592653589793, rotation_max = 3.141592653589793;
  double offset_jitter = 1.2;  // world units, per axis
};

// Per-pair view perturbation; min_delta is the required difference between
// the two views in azimuth, rotation, or log-scale.
struct PairJitter {
  double d_azimuth = 0.8;
  double d_elevation = 0.15;
  double d_scale = 0.25;  // log-scale half-range
  double d_rotation = 0.6;
  double d_offset = 0.8;
  double min_delta = 0.1;
};

struct DatagenConfig {
  int image_h = 128;
  int image_w = 128;
  double world_extent = 16.0;
  int num_landmarks = 6;
  double radius_min = 1.3;
  double radius_max = 2.1;
  int n_source = 16;
  int n_target = 16;
  int n_frames = 0;
  int n_pair_worlds = 0;
  int pairs_per_landmark = 1;
  double seq_drift = 0.0;  // world units of camera drift per frame
  ViewRange view;
  PairJitter pair_jitter;
  DomainShift shift{1.8, 0.05, 0.3, 0.3};
};

// Places num_landmarks non-overlapping landmarks (centers >= 1.5 x max radius
// apart), classes balanced round-robin then shuffled. Pure function of seed.
std::vector<LandmarkSpec> generate_world(int num_landmarks, uint64_t seed,
                                         double world_extent = 16.0, double radius_min = 1.3,
                                         double radius_max = 2.1);

// Renders one view of a world. Terrain is keyed off the world content, so
// every view of the same world sees the same surface; `seed` only drives the
// sensor noise. Landmarks outside the frame are dropped from the box list.
SceneSample render_view(const std::vector<LandmarkSpec>& world, const ViewParams& view,
                        const DomainShift& shift, int h, int w, uint64_t seed,
                        int domain = kSource, int view_group = 0);

// Two jittered views of the same world that both contain landmark_id and
// differ by at least jitter.min_delta in azimuth, rotation, or log-scale.
std::pair<SceneSample, SceneSample> make_view_pair(const std::vector<LandmarkSpec>& world,
                                                   int landmark_id, const ViewParams& base_view,
                                                   const PairJitter& jitter,
                                                   const DomainShift& shift, int h, int w,
                                                   uint64_t seed, int view_group = 0);

ViewParams draw_view(const ViewRange& range, Rng& rng);

// In-memory sample production shared by the dataset writer and the training
// harness, so both see identical data at a given (config, seed).
SceneSample make_source_sample(const DatagenConfig& cfg, uint64_t seed, int index);
SceneSample make_target_sample(const DatagenConfig& cfg, uint64_t seed, int index);
std::pair<SceneSample, SceneSample> make_pair_sample(const DatagenConfig& cfg, uint64_t seed,
                                                     int world_index, int landmark_id,
                                                     int pair_index);
std::vector<SceneSample> make_sequence(const DatagenConfig& cfg, uint64_t seed);

// Writes images plus line-delimited manifests under out_dir:
//   manifest.jsonl  n_source + n_target detection samples
//   pairs.jsonl     positive view pairs (two consecutive records per pair)
//   sequence.jsonl  n_frames tracking frames
void build_dataset(const DatagenConfig& cfg, uint64_t seed, const std::string& out_dir);

// Reads any of the manifests build_dataset wrote back into samples. Image
// paths resolve relative to the manifest's directory; pixels round-trip
// through the 8-bit files, so they match the rendered originals to within one
// quantization step while annotations match exactly.
std::vector<SceneSample> load_manifest(const std::string& manifest_path);

}  // namespace forge::datagen
