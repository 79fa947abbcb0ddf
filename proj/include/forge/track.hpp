#pragma once

#include <utility>
#include <vector>

#include "forge/datagen.hpp"
#include "forge/describe.hpp"
#include "forge/detector.hpp"
#include "forge/graph.hpp"

namespace forge::track {

struct TrackerConfig {
  double ratio = 0.8;      // matched distance must beat ratio x runner-up distance
  double min_sim = 0.5;    // cosine floor for accepting a match
  double momentum = 0.7;   // weight of the old embedding in the update blend
  int max_age = 3;         // frames a track may go unmatched before retiring
  det::DetectorConfig detector;  // decode thresholds for the detector-driven step
};

// One observation a track made: which frame, what the detector saw, and the
// ground-truth landmark behind it when the frame carries annotations (-1
// otherwise).
struct Observation {
  int frame_index = 0;
  det::Detection detection;
  int landmark_id = -1;
};

struct Track {
  int track_id = -1;
  std::vector<double> last_embedding;  // unit norm
  std::vector<Observation> history;    // non-empty, frame indices strictly increasing
  int age = 0;                         // frames since the last match
};

// Pairs hold (track_id, detection_index); every track id and detection index
// lands in exactly one of the three fields.
struct MatchResult {
  std::vector<std::pair<int, int>> pairs;
  std::vector<int> unmatched_tracks;      // track ids
  std::vector<int> unmatched_detections;  // detection indices
};

// Mutual-nearest-neighbor association on a precomputed similarity matrix
// sims[i][j] (rows: tracks, columns: detections). A pair is kept iff both
// sides pick each other, similarity >= min_sim, and its distance (1 - sim)
// beats ratio x the runner-up distance on both sides (a missing runner-up
// counts as distance 2). Pair "track ids" are row indices here.
MatchResult match_scores(const std::vector<std::vector<double>>& sims, double ratio,
                         double min_sim);

// Cosine-similarity association of live tracks against detection embeddings.
MatchResult match(const std::vector<Track>& tracks,
                  const std::vector<std::vector<double>>& embeddings, double ratio,
                  double min_sim);

// Convex blend m x old + (1 - m) x observed, re-normalized. m = 1 returns the
// old embedding untouched; a vanishing blend falls back to the old embedding.
std::vector<double> blend_embedding(const std::vector<double>& old_embedding,
                                    const std::vector<double>& observed, double momentum);

// Ground-truth landmark behind a detection box: the annotated instance with
// the highest IoU when that IoU reaches 0.5, else -1.
int truth_landmark(const datagen::SceneSample& frame, const datagen::Box& box);

struct TrackerState {
  TrackerConfig cfg;
  std::vector<Track> tracks;   // live
  std::vector<Track> retired;  // kept for metrics
  int next_track_id = 0;
  int frame_index = 0;  // index the next step will stamp
};

TrackerState tracker_init(const TrackerConfig& cfg);

struct StepResult {
  int frame_index = 0;
  std::vector<det::Detection> detections;
  MatchResult match;
};

// Core association/update step on externally supplied detections and their
// embeddings: matched tracks blend embeddings and reset age, unmatched tracks
// age (retiring past max_age), unmatched detections spawn tracks.
StepResult tracker_step(TrackerState& state, const datagen::SceneSample& frame,
                        const std::vector<det::Detection>& detections,
                        const std::vector<std::vector<double>>& embeddings);

// Full step: detector decode on the frame, descriptor forward on the
// detection crops, then the core step.
StepResult tracker_step(TrackerState& state, const datagen::SceneSample& frame,
                        nn::ParamStore& det_ps, const det::DetectorNet& det_net,
                        nn::ParamStore& desc_ps, const desc::DescriptorNet& desc_net);

struct TrackingMetrics {
  int identity_switches = 0;
  double match_precision = 0.0;  // observations backed by an annotated landmark
  double match_recall = 0.0;     // annotated landmark observations covered by a track
};

// Scores a finished run against the sequence's instance annotations. A
// switch is a ground-truth landmark changing hands between tracks across its
// consecutive observations. Errors when the sequence carries no annotations.
TrackingMetrics tracking_metrics(const TrackerState& state,
                                 const std::vector<datagen::SceneSample>& sequence);

}  // namespace forge::track
