#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "forge/config.hpp"
#include "forge/graph.hpp"
#include "forge/track.hpp"

namespace forge::harness {

// One optimizer step's loss breakdown. `base` is the task loss (supervised
// detection loss or the contrastive loss); `extra` is whatever the enabled
// mechanism added on top, so total == base + extra.
struct StepLoss {
  int step = 0;
  double total = 0.0;
  double base = 0.0;
  double extra = 0.0;
};

struct RunReport {
  std::vector<StepLoss> losses;  // one entry per applied update
  uint64_t config_hash = 0;
  uint64_t seed = 0;
  int completed_steps = 0;  // updates actually applied
  bool diverged = false;    // stopped early on a non-finite loss or gradient
  double wall_clock_sec = 0.0;  // informational; everything else is deterministic
};

struct TrainResult {
  RunReport report;
  nn::ParamStore params;
};

// Trains the detector with SGD on freshly generated scenes. With adaptation
// enabled the step loss is the combined alignment objective under the
// reversal warm-up schedule; disabled, it is the plain supervised loss built
// through the identical source pass, so a zero-weight adaptation run and a
// disabled run produce bit-identical histories and parameters. A divergent
// step (non-finite loss or gradient) stops training before touching the
// parameters.
TrainResult train_detector(const ExperimentConfig& cfg);

// Trains the descriptor on positive crop pairs drawn from paired views.
// Disabling the attention regularizer keeps the projection parameters
// registered but zero-weighted, matching an alpha-zero run bit for bit.
TrainResult train_descriptor(const ExperimentConfig& cfg);

struct EvalMetrics {
  double source_precision = 0.0;  // detection, labelled domain
  double source_recall = 0.0;
  double target_precision = 0.0;  // detection, shifted domain
  double target_recall = 0.0;
  double recall_at_1 = 0.0;  // descriptor retrieval on held-out landmarks
  double recall_at_5 = 0.0;
  double attention_consistency = 0.0;  // mean over held-out view pairs
  double identity_switches = 0.0;      // tracking on a held-out sequence
  double match_precision = 0.0;
  double match_recall = 0.0;
};

// Held-out evaluation: detection precision/recall at IoU 0.5 per domain,
// landmark retrieval recall@k, attention-map consistency across view pairs,
// and tracker metrics on a generated sequence. Pure: runs forward passes
// only and leaves both stores byte-identical.
EvalMetrics evaluate(const ExperimentConfig& cfg, nn::ParamStore& det_params,
                     nn::ParamStore& desc_params);

// The counting rule behind the precision/recall metrics: detections visit in
// score order and greedily claim the not-yet-claimed annotation of their class
// with the highest IoU, needing IoU >= 0.5. Detections that claim nothing are
// false positives; annotations left unclaimed are false negatives. Feeding the
// annotations back as detections therefore yields precision = recall = 1.
struct DetectionCounts {
  int tp = 0;
  int fp = 0;
  int fn = 0;
};
DetectionCounts count_detections(const datagen::SceneSample& sample,
                                 const std::vector<det::Detection>& detections);

// Which half of the pipeline an A/B comparison retrains. The untouched half
// uses a fresh fixed-seed initialization shared by both arms.
enum class AbMode { kDetector, kDescriptor };

struct AbRow {
  std::string metric;
  double baseline = 0.0;  // median over seeds
  double variant = 0.0;
  double delta = 0.0;  // variant - baseline
};

struct AbReport {
  AbMode mode = AbMode::kDetector;
  std::vector<uint64_t> seeds;
  std::vector<AbRow> rows;
  std::vector<RunReport> baseline_runs;  // one per seed
  std::vector<RunReport> variant_runs;
  std::vector<EvalMetrics> baseline_evals;
  std::vector<EvalMetrics> variant_evals;
};

// Trains and evaluates both configurations at seeds {s, s+1, s+2} (s from the
// baseline optimizer config) and reports per-metric medians plus deltas.
// Identical configurations yield deltas of exactly zero.
AbReport ab_compare(const ExperimentConfig& baseline, const ExperimentConfig& variant,
                    AbMode mode);

// ---- file-level entry points used by the command-line tool ----

// Writes config.json, metrics.jsonl (one line per step plus a final summary
// line), and a parameter checkpoint under out_dir.
RunReport run_train_detector(const ExperimentConfig& cfg, const std::string& out_dir);
RunReport run_train_descriptor(const ExperimentConfig& cfg, const std::string& out_dir);

// Loads both checkpoints, evaluates, and (when out_path is non-empty) writes
// the metrics as a single JSON object.
EvalMetrics run_evaluate(const ExperimentConfig& cfg, const std::string& det_ckpt,
                         const std::string& desc_ckpt, const std::string& out_path);

// Restores both networks from their checkpoints, runs the tracker over a
// sequence manifest written by the dataset builder, and writes tracks.jsonl
// under out_dir: one record per frame (detections, matches with their
// ground-truth landmarks, spawned and retired tracks) followed by a summary
// record carrying the tracking metrics.
track::TrackingMetrics run_track(const ExperimentConfig& cfg, const std::string& det_ckpt,
                                 const std::string& desc_ckpt,
                                 const std::string& sequence_manifest,
                                 const std::string& out_dir);

// ab_compare plus ab_summary.json, loss_curves.png, and metrics_bars.png
// under out_dir.
AbReport run_ab(const ExperimentConfig& baseline, const ExperimentConfig& variant, AbMode mode,
                const std::string& out_dir);

struct ConsistencyRecord {
  int pair = 0;
  double score = 0.0;  // consistency averaged over the configured stages
};

// Renders side-by-side crop/attention montages for held-out view pairs and
// writes attn_<i>.png plus attn_consistency.jsonl under out_dir.
std::vector<ConsistencyRecord> run_attention_maps(const ExperimentConfig& cfg,
                                                  const std::string& desc_ckpt, int num_pairs,
                                                  const std::string& out_dir);

// Fixed metric order shared by reports, bar charts, and the summary files.
std::vector<std::pair<std::string, double>> metric_items(const EvalMetrics& m);
std::string metrics_json(const EvalMetrics& m);  // single line

}  // namespace forge::harness
