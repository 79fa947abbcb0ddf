#include "forge/track.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <tuple>

#include "forge/common.hpp"

namespace forge::track {

using datagen::SceneSample;
using det::Detection;
using nn::Graph;
using nn::ParamStore;
using nn::Tensor;

namespace {

constexpr double kMissingRunnerUpDist = 2.0;  // farther than any real cosine distance

void validate(const TrackerConfig& cfg) {
  require(cfg.ratio > 0.0 && cfg.ratio <= 1.0, "config_error", "ratio must sit in (0,1]");
  require(cfg.min_sim >= -1.0 && cfg.min_sim <= 1.0, "config_error",
          "min_sim must sit in [-1,1]");
  require(cfg.momentum >= 0.0 && cfg.momentum <= 1.0, "config_error",
          "momentum must sit in [0,1]");
  require(cfg.max_age >= 0, "config_error", "max_age must be >= 0");
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return dot / (std::max(std::sqrt(na), 1e-12) * std::max(std::sqrt(nb), 1e-12));
}

// Best and runner-up similarity along one axis of the matrix; first index
// wins a tied best.
struct AxisBest {
  int arg = -1;
  double best = -std::numeric_limits<double>::infinity();
  double second = -std::numeric_limits<double>::infinity();
};

AxisBest scan(const std::vector<std::vector<double>>& sims, int fixed, bool fixed_is_row,
              int count) {
  AxisBest out;
  for (int k = 0; k < count; ++k) {
    const double s = fixed_is_row ? sims[static_cast<size_t>(fixed)][static_cast<size_t>(k)]
                                  : sims[static_cast<size_t>(k)][static_cast<size_t>(fixed)];
    if (s > out.best) {
      out.second = out.best;
      out.best = s;
      out.arg = k;
    } else if (s > out.second) {
      out.second = s;
    }
  }
  return out;
}

double runner_up_dist(const AxisBest& b, int count) {
  if (count < 2) return kMissingRunnerUpDist;
  return 1.0 - b.second;
}

}  // namespace

MatchResult match_scores(const std::vector<std::vector<double>>& sims, double ratio,
                         double min_sim) {
  require(ratio > 0.0 && ratio <= 1.0, "config_error", "ratio must sit in (0,1]");
  require(min_sim >= -1.0 && min_sim <= 1.0, "config_error", "min_sim must sit in [-1,1]");
  const int nt = static_cast<int>(sims.size());
  const int nd = nt == 0 ? 0 : static_cast<int>(sims[0].size());
  for (const auto& row : sims) {
    require(static_cast<int>(row.size()) == nd, "shape_error", "ragged similarity matrix");
  }

  struct Candidate {
    double sim;
    int i, j;
  };
  std::vector<Candidate> cands;
  if (nd > 0) {
    for (int i = 0; i < nt; ++i) {
      const AxisBest row = scan(sims, i, true, nd);
      const int j = row.arg;
      const AxisBest col = scan(sims, j, false, nt);
      if (col.arg != i) continue;  // not mutual
      if (row.best < min_sim) continue;
      const double dist = 1.0 - row.best;
      if (dist > ratio * runner_up_dist(row, nd)) continue;
      if (dist > ratio * runner_up_dist(col, nt)) continue;
      cands.push_back({row.best, i, j});
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });

  MatchResult out;
  std::vector<char> track_used(static_cast<size_t>(nt), 0);
  std::vector<char> det_used(static_cast<size_t>(nd), 0);
  for (const Candidate& c : cands) {
    if (track_used[static_cast<size_t>(c.i)] || det_used[static_cast<size_t>(c.j)]) continue;
    track_used[static_cast<size_t>(c.i)] = 1;
    det_used[static_cast<size_t>(c.j)] = 1;
    out.pairs.emplace_back(c.i, c.j);
  }
  for (int i = 0; i < nt; ++i) {
    if (!track_used[static_cast<size_t>(i)]) out.unmatched_tracks.push_back(i);
  }
  for (int j = 0; j < nd; ++j) {
    if (!det_used[static_cast<size_t>(j)]) out.unmatched_detections.push_back(j);
  }
  return out;
}

MatchResult match(const std::vector<Track>& tracks,
                  const std::vector<std::vector<double>>& embeddings, double ratio,
                  double min_sim) {
  require(ratio > 0.0 && ratio <= 1.0, "config_error", "ratio must sit in (0,1]");
  require(min_sim >= -1.0 && min_sim <= 1.0, "config_error", "min_sim must sit in [-1,1]");
  if (tracks.empty()) {
    // A similarity matrix with no rows cannot carry the detection count.
    MatchResult out;
    for (size_t j = 0; j < embeddings.size(); ++j) {
      out.unmatched_detections.push_back(static_cast<int>(j));
    }
    return out;
  }
  std::vector<std::vector<double>> sims(tracks.size(),
                                        std::vector<double>(embeddings.size(), 0.0));
  for (size_t i = 0; i < tracks.size(); ++i) {
    for (size_t j = 0; j < embeddings.size(); ++j) {
      require(embeddings[j].size() == tracks[i].last_embedding.size(), "shape_error",
              "embedding widths differ between tracks and detections");
      sims[i][j] = cosine(tracks[i].last_embedding, embeddings[j]);
    }
  }
  MatchResult by_row = match_scores(sims, ratio, min_sim);
  for (auto& p : by_row.pairs) p.first = tracks[static_cast<size_t>(p.first)].track_id;
  for (int& i : by_row.unmatched_tracks) i = tracks[static_cast<size_t>(i)].track_id;
  return by_row;
}

std::vector<double> blend_embedding(const std::vector<double>& old_embedding,
                                    const std::vector<double>& observed, double momentum) {
  require(old_embedding.size() == observed.size(), "shape_error",
          "blend needs equally sized embeddings");
  require(momentum >= 0.0 && momentum <= 1.0, "config_error", "momentum must sit in [0,1]");
  if (momentum == 1.0) return old_embedding;
  std::vector<double> out(old_embedding.size());
  double norm = 0.0;
  for (size_t k = 0; k < out.size(); ++k) {
    out[k] = momentum * old_embedding[k] + (1.0 - momentum) * observed[k];
    norm += out[k] * out[k];
  }
  norm = std::sqrt(norm);
  if (norm < 1e-9) return old_embedding;  // opposing views cancelled out
  for (double& x : out) x /= norm;
  return out;
}

int truth_landmark(const SceneSample& frame, const datagen::Box& box) {
  double best = 0.5;
  int hit = -1;
  for (size_t k = 0; k < frame.boxes.size(); ++k) {
    const double ov = det::iou(box, frame.boxes[k]);
    if (ov >= best && (hit < 0 || ov > best)) {
      best = ov;
      hit = k < frame.instance_ids.size() ? frame.instance_ids[k] : -1;
    }
  }
  return hit;
}

TrackerState tracker_init(const TrackerConfig& cfg) {
  validate(cfg);
  TrackerState st;
  st.cfg = cfg;
  return st;
}

StepResult tracker_step(TrackerState& state, const SceneSample& frame,
                        const std::vector<Detection>& detections,
                        const std::vector<std::vector<double>>& embeddings) {
  validate(state.cfg);
  require(detections.size() == embeddings.size(), "shape_error",
          "each detection needs exactly one embedding");
  StepResult out;
  out.frame_index = state.frame_index;
  out.detections = detections;
  out.match = match(state.tracks, embeddings, state.cfg.ratio, state.cfg.min_sim);

  std::vector<char> matched(state.tracks.size(), 0);
  for (const auto& [track_id, j] : out.match.pairs) {
    for (size_t t = 0; t < state.tracks.size(); ++t) {
      Track& tr = state.tracks[t];
      if (tr.track_id != track_id) continue;
      tr.last_embedding =
          blend_embedding(tr.last_embedding, embeddings[static_cast<size_t>(j)],
                          state.cfg.momentum);
      tr.age = 0;
      tr.history.push_back({state.frame_index, detections[static_cast<size_t>(j)],
                            truth_landmark(frame, detections[static_cast<size_t>(j)].box)});
      matched[t] = 1;
      break;
    }
  }

  std::vector<Track> survivors;
  survivors.reserve(state.tracks.size());
  for (size_t t = 0; t < state.tracks.size(); ++t) {
    Track& tr = state.tracks[t];
    if (!matched[t]) {
      tr.age += 1;
      if (tr.age > state.cfg.max_age) {
        state.retired.push_back(std::move(tr));
        continue;
      }
    }
    survivors.push_back(std::move(tr));
  }
  state.tracks = std::move(survivors);

  for (int j : out.match.unmatched_detections) {
    Track tr;
    tr.track_id = state.next_track_id++;
    double norm = 0.0;
    for (double x : embeddings[static_cast<size_t>(j)]) norm += x * x;
    norm = std::max(std::sqrt(norm), 1e-12);
    tr.last_embedding = embeddings[static_cast<size_t>(j)];
    for (double& x : tr.last_embedding) x /= norm;
    tr.age = 0;
    tr.history.push_back({state.frame_index, detections[static_cast<size_t>(j)],
                          truth_landmark(frame, detections[static_cast<size_t>(j)].box)});
    state.tracks.push_back(std::move(tr));
  }

  state.frame_index += 1;
  return out;
}

StepResult tracker_step(TrackerState& state, const SceneSample& frame, ParamStore& det_ps,
                        const det::DetectorNet& det_net, ParamStore& desc_ps,
                        const desc::DescriptorNet& desc_net) {
  std::vector<Detection> dets;
  {
    Graph g(&det_ps);
    Graph::Id x = g.input(det::images_to_tensor({&frame.image}));
    Graph::Id grid = det::detect_head(g, det_net, det::backbone_forward(g, det_net, x).s2);
    dets = det::decode(det::slice_sample_grid(g.value(grid), 0), state.cfg.detector,
                       frame.image.w);
  }
  std::vector<std::vector<double>> embeddings;
  if (!dets.empty()) {
    std::vector<Image> crops;
    crops.reserve(dets.size());
    for (const Detection& d : dets) crops.push_back(desc::landmark_crop(frame.image, d.box));
    Graph g(&desc_ps);
    const Tensor z =
        g.value(desc::describe_forward(g, desc_net, g.input(desc::crops_to_tensor(crops))).z);
    for (int i = 0; i < z.dim(0); ++i) {
      embeddings.emplace_back(z.v.begin() + static_cast<int64_t>(i) * z.dim(1),
                              z.v.begin() + static_cast<int64_t>(i + 1) * z.dim(1));
    }
  }
  return tracker_step(state, frame, dets, embeddings);
}

TrackingMetrics tracking_metrics(const TrackerState& state,
                                 const std::vector<SceneSample>& sequence) {
  require(!sequence.empty(), "eval_error", "metrics need a non-empty sequence");
  int64_t truth_total = 0;
  for (const SceneSample& s : sequence) {
    require(s.boxes.size() == s.instance_ids.size(), "eval_error",
            "sequence frames must carry instance annotations");
    truth_total += static_cast<int64_t>(s.boxes.size());
  }
  require(truth_total > 0, "eval_error", "sequence carries no ground-truth landmarks");

  // (frame, landmark) -> track that observed it; (landmark) -> observation
  // chain for switch counting.
  std::map<std::pair<int, int>, int> covered;
  std::map<int, std::vector<std::pair<int, int>>> chains;  // landmark -> (frame, track)
  int64_t obs_total = 0, obs_with_truth = 0;

  auto absorb = [&](const Track& tr) {
    for (const Observation& ob : tr.history) {
      obs_total += 1;
      if (ob.landmark_id < 0) continue;
      obs_with_truth += 1;
      covered.emplace(std::make_pair(ob.frame_index, ob.landmark_id), tr.track_id);
      chains[ob.landmark_id].emplace_back(ob.frame_index, tr.track_id);
    }
  };
  for (const Track& tr : state.tracks) absorb(tr);
  for (const Track& tr : state.retired) absorb(tr);

  TrackingMetrics m;
  for (auto& [landmark, chain] : chains) {
    std::sort(chain.begin(), chain.end());
    for (size_t k = 1; k < chain.size(); ++k) {
      if (chain[k].first != chain[k - 1].first && chain[k].second != chain[k - 1].second) {
        m.identity_switches += 1;
      }
    }
  }

  int64_t truth_covered = 0;
  for (size_t f = 0; f < sequence.size(); ++f) {
    for (int inst : sequence[f].instance_ids) {
      if (covered.count({static_cast<int>(f), inst})) truth_covered += 1;
    }
  }
  m.match_precision =
      obs_total == 0 ? 1.0 : static_cast<double>(obs_with_truth) / static_cast<double>(obs_total);
  m.match_recall = static_cast<double>(truth_covered) / static_cast<double>(truth_total);
  return m;
}

}  // namespace forge::track
