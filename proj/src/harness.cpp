#include "forge/harness.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "forge/adapt.hpp"
#include "forge/checkpoint.hpp"
#include "forge/common.hpp"
#include "forge/describe.hpp"
#include "forge/detector.hpp"
#include "forge/plot.hpp"
#include "forge/track.hpp"
#include "json.hpp"

namespace forge::harness {

using nlohmann::ordered_json;

namespace {

// Stream ids for deriving independent generator seeds from the run seed.
constexpr uint64_t kDetInitStream = 11;
constexpr uint64_t kHeadInitStream = 12;
constexpr uint64_t kDescInitStream = 21;
constexpr uint64_t kDetEvalStream = 101;
constexpr uint64_t kRetrievalStream = 102;
constexpr uint64_t kTrackEvalStream = 103;
constexpr uint64_t kAttnStream = 104;
constexpr uint64_t kFreshDetStream = 111;
constexpr uint64_t kFreshDescStream = 112;

constexpr int kDetEvalImages = 24;   // per domain
constexpr int kRetrievalWorlds = 8;  // held-out worlds; 2 pairs -> 4 views each
constexpr int kEvalFrames = 20;      // sequence length when the config leaves it 0
constexpr int kEvalBatch = 8;

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool grads_finite(nn::ParamStore& ps) {
  for (int i = 0; i < ps.size(); ++i) {
    if (!ps.grad(i).all_finite()) return false;
  }
  return true;
}

int schedule_index(int step, int batch_size, int slot, int pool) {
  return static_cast<int>((static_cast<int64_t>(step) * batch_size + slot) % pool);
}

// The crop around landmark `landmark_id` inside a sample known to contain it.
Image crop_of(const datagen::SceneSample& s, int landmark_id) {
  for (size_t k = 0; k < s.instance_ids.size(); ++k) {
    if (s.instance_ids[k] == landmark_id) return desc::landmark_crop(s.image, s.boxes[k]);
  }
  fail("datagen_error",
       "paired view lost landmark " + std::to_string(landmark_id) + " from its annotations");
}

nn::Tensor slice_batch_row(const nn::Tensor& t, int n) {
  const int c = t.dim(1), h = t.dim(2), w = t.dim(3);
  const int64_t plane = static_cast<int64_t>(c) * h * w;
  nn::Tensor out({1, c, h, w});
  std::copy(t.v.begin() + n * plane, t.v.begin() + (n + 1) * plane, out.v.begin());
  return out;
}

std::vector<int> consistency_stages(const desc::MarsConfig& cfg) {
  if (cfg.stages.empty()) return {0, 1, 2};
  return cfg.stages;
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  return xs[xs.size() / 2];
}

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void make_dirs(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, "io_error", "cannot create directory " + dir);
}

void write_text_file(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) make_dirs(parent.string());
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "io_error", "cannot open " + path + " for writing");
  f << text;
  f.flush();
  require(f.good(), "io_error", "short write to " + path);
}

void write_run_files(const ExperimentConfig& cfg, const TrainResult& result,
                     const std::string& out_dir, const std::string& ckpt_name) {
  make_dirs(out_dir);
  write_text_file(out_dir + "/config.json", serialize_config(cfg));
  std::ostringstream lines;
  for (const auto& s : result.report.losses) {
    ordered_json j;
    j["step"] = s.step;
    j["total"] = s.total;
    j["base"] = s.base;
    j["extra"] = s.extra;
    lines << j.dump() << "\n";
  }
  ordered_json fin;
  fin["final"] = true;
  fin["completed_steps"] = result.report.completed_steps;
  fin["diverged"] = result.report.diverged;
  fin["config_hash"] = hash_hex(result.report.config_hash);
  fin["seed"] = result.report.seed;
  fin["wall_clock_sec"] = result.report.wall_clock_sec;
  lines << fin.dump() << "\n";
  write_text_file(out_dir + "/metrics.jsonl", lines.str());
  ckpt::save(result.params, out_dir + "/" + ckpt_name);
}

// Nearest-neighbor blit of src scaled to tile x tile at (y, x); shades pass
// through untouched so attention magnitudes stay readable.
void blit_scaled(Image& dst, const Image& src, int y, int x, int tile) {
  for (int r = 0; r < tile; ++r) {
    for (int c = 0; c < tile; ++c) {
      const int sr = std::min(src.h - 1, r * src.h / tile);
      const int sc = std::min(src.w - 1, c * src.w / tile);
      if (y + r < dst.h && x + c < dst.w) dst.at(y + r, x + c) = src.at(sr, sc);
    }
  }
}

Image tensor_plane_image(const nn::Tensor& t) {
  const int h = t.dim(2), w = t.dim(3);
  Image img(h, w);
  std::copy(t.v.begin(), t.v.begin() + static_cast<int64_t>(h) * w, img.px.begin());
  return img;
}

}  // namespace

DetectionCounts count_detections(const datagen::SceneSample& sample,
                                 const std::vector<det::Detection>& detections) {
  DetectionCounts out;
  std::vector<bool> used(sample.boxes.size(), false);
  for (const auto& d : detections) {
    int best = -1;
    double best_iou = 0.0;
    for (size_t k = 0; k < sample.boxes.size(); ++k) {
      if (used[k] || sample.class_ids[k] != d.class_id) continue;
      const double ov = det::iou(d.box, sample.boxes[k]);
      if (ov > best_iou) {
        best_iou = ov;
        best = static_cast<int>(k);
      }
    }
    if (best >= 0 && best_iou >= 0.5) {
      used[static_cast<size_t>(best)] = true;
      ++out.tp;
    } else {
      ++out.fp;
    }
  }
  for (bool u : used) {
    if (!u) ++out.fn;
  }
  return out;
}

TrainResult train_detector(const ExperimentConfig& cfg) {
  validate_config(cfg);
  require(cfg.datagen.n_source >= 1, "config_error", "detector training needs n_source >= 1");
  if (cfg.ablation.adapt_enabled) {
    require(cfg.datagen.n_target >= 1, "config_error",
            "domain adaptation needs n_target >= 1; set ablation.adapt_enabled false to train "
            "on source only");
  }

  TrainResult out;
  out.report.config_hash = config_hash(cfg);
  out.report.seed = cfg.optimizer.seed;
  const auto t0 = std::chrono::steady_clock::now();

  Rng det_rng(Rng::mix(cfg.optimizer.seed, kDetInitStream));
  const det::DetectorNet net = det::detector_init(out.params, det_rng);
  adapt::AdaptHeads heads;
  if (cfg.ablation.adapt_enabled) {
    Rng head_rng(Rng::mix(cfg.optimizer.seed, kHeadInitStream));
    heads = adapt::adapt_init(out.params, head_rng);
  }

  std::vector<datagen::SceneSample> source;
  source.reserve(static_cast<size_t>(cfg.datagen.n_source));
  for (int i = 0; i < cfg.datagen.n_source; ++i) {
    source.push_back(datagen::make_source_sample(cfg.datagen, cfg.optimizer.seed, i));
  }
  std::vector<datagen::SceneSample> target;
  if (cfg.ablation.adapt_enabled) {
    target.reserve(static_cast<size_t>(cfg.datagen.n_target));
    for (int i = 0; i < cfg.datagen.n_target; ++i) {
      target.push_back(datagen::make_target_sample(cfg.datagen, cfg.optimizer.seed, i));
    }
  }

  const int bsz = cfg.optimizer.batch_size;
  for (int step = 0; step < cfg.optimizer.steps; ++step) {
    nn::Graph g(&out.params);
    StepLoss rec;
    rec.step = step;
    nn::Graph::Id root = -1;
    if (cfg.ablation.adapt_enabled) {
      adapt::AdaptBatch batch;
      for (int b = 0; b < bsz; ++b) {
        batch.source.push_back(
            &source[static_cast<size_t>(schedule_index(step, bsz, b, cfg.datagen.n_source))]);
      }
      for (int b = 0; b < bsz; ++b) {
        batch.target.push_back(
            &target[static_cast<size_t>(schedule_index(step, bsz, b, cfg.datagen.n_target))]);
      }
      adapt::AdaptConfig acfg = cfg.adapt;
      acfg.lambda_grl = cfg.adapt.lambda_grl * adapt::grl_warmup(step, cfg.optimizer.steps);
      const adapt::AdaptReport rep =
          adapt::total_adapt_loss(g, net, heads, batch, cfg.detector, acfg);
      root = rep.total;
      rec.base = g.value(rep.supervised.total)[0];
    } else {
      // Same source pass, op for op, as the combined objective's supervised
      // branch, so a zero-weight adaptation run reproduces this bit for bit.
      std::vector<const datagen::SceneSample*> batch;
      for (int b = 0; b < bsz; ++b) {
        batch.push_back(
            &source[static_cast<size_t>(schedule_index(step, bsz, b, cfg.datagen.n_source))]);
      }
      const int image_size = batch[0]->image.w;
      std::vector<const Image*> imgs;
      for (const auto* s : batch) imgs.push_back(&s->image);
      const nn::Graph::Id x = g.input(det::images_to_tensor(imgs));
      const det::Stages st = det::backbone_forward(g, net, x);
      const nn::Graph::Id grid = det::detect_head(g, net, st.s2);
      const det::SupervisedLoss sup =
          det::supervised_loss(g, grid, batch, cfg.detector, image_size);
      root = sup.total;
      rec.base = g.value(sup.total)[0];
    }
    rec.total = g.value(root)[0];
    rec.extra = rec.total - rec.base;
    if (!std::isfinite(rec.total)) {
      out.report.diverged = true;
      break;
    }
    out.params.zero_grads();
    g.backward(root);
    if (!grads_finite(out.params)) {
      out.report.diverged = true;
      break;
    }
    out.params.sgd_step(cfg.optimizer.learning_rate);
    out.report.losses.push_back(rec);
    ++out.report.completed_steps;
  }
  out.report.wall_clock_sec = seconds_since(t0);
  return out;
}

TrainResult train_descriptor(const ExperimentConfig& cfg) {
  validate_config(cfg);
  require(cfg.datagen.n_pair_worlds >= 1, "config_error",
          "descriptor training needs n_pair_worlds >= 1");
  require(cfg.optimizer.batch_size >= 2, "config_error",
          "contrastive batches need at least two pairs");

  desc::MarsConfig mcfg = cfg.mars;
  if (!cfg.ablation.mars_enabled) {
    mcfg.alpha_channel = 0.0;
    mcfg.alpha_spatial = 0.0;
  }

  TrainResult out;
  out.report.config_hash = config_hash(cfg);
  out.report.seed = cfg.optimizer.seed;
  const auto t0 = std::chrono::steady_clock::now();

  Rng rng(Rng::mix(cfg.optimizer.seed, kDescInitStream));
  const desc::DescriptorNet net = desc::descriptor_init(out.params, rng, mcfg);

  const int num_landmarks = cfg.datagen.num_landmarks;
  const int per_landmark = cfg.datagen.pairs_per_landmark;
  const int total = cfg.datagen.n_pair_worlds * num_landmarks * per_landmark;

  // Render every positive pair once; batches cycle through the cached crops.
  std::vector<std::pair<Image, Image>> pairs;
  pairs.reserve(static_cast<size_t>(total));
  for (int w = 0; w < cfg.datagen.n_pair_worlds; ++w) {
    for (int l = 0; l < num_landmarks; ++l) {
      for (int p = 0; p < per_landmark; ++p) {
        const auto pr = datagen::make_pair_sample(cfg.datagen, cfg.optimizer.seed, w, l, p);
        pairs.emplace_back(crop_of(pr.first, l), crop_of(pr.second, l));
      }
    }
  }

  const int bsz = cfg.optimizer.batch_size;
  for (int step = 0; step < cfg.optimizer.steps; ++step) {
    std::vector<Image> crops_a, crops_b;
    for (int b = 0; b < bsz; ++b) {
      const auto& pr = pairs[static_cast<size_t>(schedule_index(step, bsz, b, total))];
      crops_a.push_back(pr.first);
      crops_b.push_back(pr.second);
    }
    nn::Graph g(&out.params);
    const nn::Graph::Id xa = g.input(desc::crops_to_tensor(crops_a));
    const nn::Graph::Id xb = g.input(desc::crops_to_tensor(crops_b));
    const desc::DescriptorLoss loss = desc::descriptor_total_loss(g, net, xa, xb, mcfg);
    StepLoss rec;
    rec.step = step;
    rec.total = g.value(loss.total)[0];
    rec.base = g.value(loss.ntxent)[0];
    rec.extra = rec.total - rec.base;
    if (!std::isfinite(rec.total)) {
      out.report.diverged = true;
      break;
    }
    out.params.zero_grads();
    g.backward(loss.total);
    if (!grads_finite(out.params)) {
      out.report.diverged = true;
      break;
    }
    out.params.sgd_step(cfg.optimizer.learning_rate);
    out.report.losses.push_back(rec);
    ++out.report.completed_steps;
  }
  out.report.wall_clock_sec = seconds_since(t0);
  return out;
}

EvalMetrics evaluate(const ExperimentConfig& cfg, nn::ParamStore& det_params,
                     nn::ParamStore& desc_params) {
  validate_config(cfg);
  EvalMetrics m;
  const det::DetectorNet det_net = det::detector_bind(det_params);
  const desc::DescriptorNet desc_net = desc::descriptor_bind(desc_params);

  // Detection precision/recall at IoU 0.5, per domain, on fresh worlds.
  const uint64_t det_seed = Rng::mix(cfg.optimizer.seed, kDetEvalStream);
  for (int domain = 0; domain < 2; ++domain) {
    std::vector<datagen::SceneSample> samples;
    samples.reserve(kDetEvalImages);
    for (int i = 0; i < kDetEvalImages; ++i) {
      samples.push_back(domain == 0 ? datagen::make_source_sample(cfg.datagen, det_seed, i)
                                    : datagen::make_target_sample(cfg.datagen, det_seed, i));
    }
    int tp = 0, fp = 0, fn = 0;
    for (size_t off = 0; off < samples.size(); off += kEvalBatch) {
      const size_t end = std::min(samples.size(), off + kEvalBatch);
      std::vector<const Image*> imgs;
      for (size_t i = off; i < end; ++i) imgs.push_back(&samples[i].image);
      nn::Graph g(&det_params);
      const nn::Graph::Id x = g.input(det::images_to_tensor(imgs));
      const det::Stages st = det::backbone_forward(g, det_net, x);
      const nn::Tensor grid = g.value(det::detect_head(g, det_net, st.s2));
      for (size_t i = off; i < end; ++i) {
        const auto dets = det::decode(det::slice_sample_grid(grid, static_cast<int>(i - off)),
                                      cfg.detector, samples[i].image.w);
        const DetectionCounts c = count_detections(samples[i], dets);
        tp += c.tp;
        fp += c.fp;
        fn += c.fn;
      }
    }
    const double precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 1.0;
    const double recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 1.0;
    if (domain == 0) {
      m.source_precision = precision;
      m.source_recall = recall;
    } else {
      m.target_precision = precision;
      m.target_recall = recall;
    }
  }

  // Retrieval and attention consistency over held-out paired views.
  const uint64_t retr_seed = Rng::mix(cfg.optimizer.seed, kRetrievalStream);
  std::vector<Image> crops;
  std::vector<int> crop_landmark;
  for (int w = 0; w < kRetrievalWorlds; ++w) {
    for (int l = 0; l < cfg.datagen.num_landmarks; ++l) {
      for (int p = 0; p < 2; ++p) {
        const auto pr = datagen::make_pair_sample(cfg.datagen, retr_seed, w, l, p);
        crops.push_back(crop_of(pr.first, l));
        crops.push_back(crop_of(pr.second, l));
        crop_landmark.push_back(w * 1024 + l);
        crop_landmark.push_back(w * 1024 + l);
      }
    }
  }
  std::vector<std::vector<double>> z;
  std::vector<std::array<nn::Tensor, desc::kNumStages>> sigma;
  z.reserve(crops.size());
  sigma.reserve(crops.size());
  for (size_t off = 0; off < crops.size(); off += kEvalBatch) {
    const size_t end = std::min(crops.size(), off + kEvalBatch);
    std::vector<Image> chunk(crops.begin() + static_cast<int64_t>(off),
                             crops.begin() + static_cast<int64_t>(end));
    nn::Graph g(&desc_params);
    const desc::DescribeOut fwd =
        desc::describe_forward(g, desc_net, g.input(desc::crops_to_tensor(chunk)));
    const nn::Tensor& zt = g.value(fwd.z);
    for (size_t i = off; i < end; ++i) {
      const int row = static_cast<int>(i - off);
      z.emplace_back(zt.v.begin() + row * desc::kEmbedDim,
                     zt.v.begin() + (row + 1) * desc::kEmbedDim);
      std::array<nn::Tensor, desc::kNumStages> maps;
      for (int s = 0; s < desc::kNumStages; ++s) {
        maps[static_cast<size_t>(s)] = slice_batch_row(g.value(fwd.attn.sigma[s]), row);
      }
      sigma.push_back(std::move(maps));
    }
  }
  std::vector<desc::GalleryEntry> gallery;
  std::vector<desc::Query> queries;
  for (size_t i = 0; i < crops.size(); ++i) {
    gallery.push_back({crop_landmark[i], z[i]});
    queries.push_back({crop_landmark[i], z[i], static_cast<int>(i)});
  }
  const desc::RetrievalResult rr = desc::retrieval_eval(gallery, queries);
  m.recall_at_1 = rr.recall_at_1;
  m.recall_at_5 = rr.recall_at_5;

  const std::vector<int> stages = consistency_stages(cfg.mars);
  double acc = 0.0;
  const size_t num_pairs = crops.size() / 2;
  for (size_t k = 0; k < num_pairs; ++k) {
    double s = 0.0;
    for (int st : stages) {
      s += desc::attention_consistency(sigma[2 * k][static_cast<size_t>(st)],
                                       sigma[2 * k + 1][static_cast<size_t>(st)]);
    }
    acc += s / static_cast<double>(stages.size());
  }
  m.attention_consistency = num_pairs > 0 ? acc / static_cast<double>(num_pairs) : 0.0;

  // Tracking on a held-out sequence.
  datagen::DatagenConfig seq_cfg = cfg.datagen;
  if (seq_cfg.n_frames <= 0) seq_cfg.n_frames = kEvalFrames;
  const std::vector<datagen::SceneSample> seq =
      datagen::make_sequence(seq_cfg, Rng::mix(cfg.optimizer.seed, kTrackEvalStream));
  track::TrackerConfig tcfg;
  tcfg.detector = cfg.detector;
  track::TrackerState state = track::tracker_init(tcfg);
  for (const auto& frame : seq) {
    track::tracker_step(state, frame, det_params, det_net, desc_params, desc_net);
  }
  const track::TrackingMetrics tm = track::tracking_metrics(state, seq);
  m.identity_switches = tm.identity_switches;
  m.match_precision = tm.match_precision;
  m.match_recall = tm.match_recall;
  return m;
}

AbReport ab_compare(const ExperimentConfig& baseline, const ExperimentConfig& variant,
                    AbMode mode) {
  AbReport rep;
  rep.mode = mode;
  for (int k = 0; k < 3; ++k) {
    const uint64_t sk = baseline.optimizer.seed + static_cast<uint64_t>(k);
    rep.seeds.push_back(sk);
    for (int side = 0; side < 2; ++side) {
      ExperimentConfig c = side == 0 ? baseline : variant;
      c.optimizer.seed = sk;
      TrainResult tr;
      nn::ParamStore other;
      EvalMetrics ev;
      if (mode == AbMode::kDetector) {
        tr = train_detector(c);
        Rng r(Rng::mix(sk, kFreshDescStream));
        desc::descriptor_init(other, r, c.mars);
        ev = evaluate(c, tr.params, other);
      } else {
        tr = train_descriptor(c);
        Rng r(Rng::mix(sk, kFreshDetStream));
        det::detector_init(other, r);
        ev = evaluate(c, other, tr.params);
      }
      (side == 0 ? rep.baseline_runs : rep.variant_runs).push_back(tr.report);
      (side == 0 ? rep.baseline_evals : rep.variant_evals).push_back(ev);
    }
  }
  const auto names = metric_items(rep.baseline_evals[0]);
  for (size_t mi = 0; mi < names.size(); ++mi) {
    std::vector<double> bs, vs;
    for (int k = 0; k < 3; ++k) {
      bs.push_back(metric_items(rep.baseline_evals[static_cast<size_t>(k)])[mi].second);
      vs.push_back(metric_items(rep.variant_evals[static_cast<size_t>(k)])[mi].second);
    }
    AbRow row;
    row.metric = names[mi].first;
    row.baseline = median(bs);
    row.variant = median(vs);
    row.delta = row.variant - row.baseline;
    rep.rows.push_back(row);
  }
  return rep;
}

RunReport run_train_detector(const ExperimentConfig& cfg, const std::string& out_dir) {
  const TrainResult res = train_detector(cfg);
  write_run_files(cfg, res, out_dir, "detector.ckpt");
  return res.report;
}

RunReport run_train_descriptor(const ExperimentConfig& cfg, const std::string& out_dir) {
  const TrainResult res = train_descriptor(cfg);
  write_run_files(cfg, res, out_dir, "descriptor.ckpt");
  return res.report;
}

EvalMetrics run_evaluate(const ExperimentConfig& cfg, const std::string& det_ckpt,
                         const std::string& desc_ckpt, const std::string& out_path) {
  nn::ParamStore det_ps = ckpt::load(det_ckpt);
  nn::ParamStore desc_ps = ckpt::load(desc_ckpt);
  const EvalMetrics m = evaluate(cfg, det_ps, desc_ps);
  if (!out_path.empty()) {
    ordered_json j;
    for (const auto& [name, value] : metric_items(m)) j[name] = value;
    write_text_file(out_path, j.dump(2) + "\n");
  }
  return m;
}

track::TrackingMetrics run_track(const ExperimentConfig& cfg, const std::string& det_ckpt,
                                 const std::string& desc_ckpt,
                                 const std::string& sequence_manifest,
                                 const std::string& out_dir) {
  validate_config(cfg);
  nn::ParamStore det_ps = ckpt::load(det_ckpt);
  nn::ParamStore desc_ps = ckpt::load(desc_ckpt);
  const det::DetectorNet det_net = det::detector_bind(det_ps);
  const desc::DescriptorNet desc_net = desc::descriptor_bind(desc_ps);
  const std::vector<datagen::SceneSample> frames = datagen::load_manifest(sequence_manifest);
  require(!frames.empty(), "datagen_error", "sequence manifest is empty: " + sequence_manifest);

  track::TrackerConfig tcfg;
  tcfg.detector = cfg.detector;
  track::TrackerState state = track::tracker_init(tcfg);
  std::ostringstream lines;
  for (const auto& frame : frames) {
    const int id_before = state.next_track_id;
    const size_t retired_before = state.retired.size();
    const track::StepResult step =
        track::tracker_step(state, frame, det_ps, det_net, desc_ps, desc_net);
    ordered_json rec;
    rec["frame"] = step.frame_index;
    rec["detections"] = step.detections.size();
    ordered_json matches = ordered_json::array();
    for (const auto& [track_id, det_index] : step.match.pairs) {
      ordered_json mrec;
      mrec["track"] = track_id;
      mrec["detection"] = det_index;
      mrec["landmark"] =
          track::truth_landmark(frame, step.detections[static_cast<size_t>(det_index)].box);
      matches.push_back(mrec);
    }
    rec["matches"] = matches;
    ordered_json spawned = ordered_json::array();
    for (int id = id_before; id < state.next_track_id; ++id) spawned.push_back(id);
    rec["spawned"] = spawned;
    rec["retired"] = state.retired.size() - retired_before;
    lines << rec.dump() << "\n";
  }
  const track::TrackingMetrics tm = track::tracking_metrics(state, frames);
  ordered_json fin;
  fin["final"] = true;
  fin["frames"] = frames.size();
  fin["tracks"] = state.next_track_id;
  fin["identity_switches"] = tm.identity_switches;
  fin["match_precision"] = tm.match_precision;
  fin["match_recall"] = tm.match_recall;
  lines << fin.dump() << "\n";
  make_dirs(out_dir);
  write_text_file(out_dir + "/tracks.jsonl", lines.str());
  return tm;
}

AbReport run_ab(const ExperimentConfig& baseline, const ExperimentConfig& variant, AbMode mode,
                const std::string& out_dir) {
  const AbReport rep = ab_compare(baseline, variant, mode);
  make_dirs(out_dir);

  ordered_json j;
  j["mode"] = mode == AbMode::kDetector ? "detector" : "descriptor";
  j["seeds"] = rep.seeds;
  j["metrics"] = ordered_json::array();
  for (const auto& row : rep.rows) {
    ordered_json r;
    r["metric"] = row.metric;
    r["baseline"] = row.baseline;
    r["variant"] = row.variant;
    r["delta"] = row.delta;
    j["metrics"].push_back(r);
  }
  write_text_file(out_dir + "/ab_summary.json", j.dump(2) + "\n");

  std::vector<plot::Series> series;
  for (int k = 0; k < 3; ++k) {
    plot::Series sb, sv;
    sb.label = "BASE S" + std::to_string(k);
    sb.shade = 0.55;
    for (const auto& s : rep.baseline_runs[static_cast<size_t>(k)].losses) sb.y.push_back(s.total);
    sv.label = "VAR S" + std::to_string(k);
    sv.shade = 0.0;
    for (const auto& s : rep.variant_runs[static_cast<size_t>(k)].losses) sv.y.push_back(s.total);
    series.push_back(std::move(sb));
    series.push_back(std::move(sv));
  }
  plot::line_plot(out_dir + "/loss_curves.png", "TRAINING LOSS", series);

  std::vector<plot::BarGroup> groups;
  for (const auto& row : rep.rows) {
    if (row.metric == "identity_switches") continue;  // count, not a rate
    std::string label;
    if (row.metric == "source_precision") label = "S-P";
    else if (row.metric == "source_recall") label = "S-R";
    else if (row.metric == "target_precision") label = "T-P";
    else if (row.metric == "target_recall") label = "T-R";
    else if (row.metric == "recall_at_1") label = "R@1";
    else if (row.metric == "recall_at_5") label = "R@5";
    else if (row.metric == "attention_consistency") label = "CONS";
    else if (row.metric == "match_precision") label = "M-P";
    else if (row.metric == "match_recall") label = "M-R";
    else label = row.metric;
    groups.push_back({label, row.baseline, row.variant});
  }
  plot::bar_chart(out_dir + "/metrics_bars.png", "EVAL METRIC MEDIANS", "BASELINE", "VARIANT",
                  groups);
  return rep;
}

std::vector<ConsistencyRecord> run_attention_maps(const ExperimentConfig& cfg,
                                                  const std::string& desc_ckpt, int num_pairs,
                                                  const std::string& out_dir) {
  validate_config(cfg);
  require(num_pairs >= 1, "config_error", "attention maps need num_pairs >= 1");
  nn::ParamStore ps = ckpt::load(desc_ckpt);
  const desc::DescriptorNet net = desc::descriptor_bind(ps);
  make_dirs(out_dir);

  const uint64_t seed = Rng::mix(cfg.optimizer.seed, kAttnStream);
  const std::vector<int> stages = consistency_stages(cfg.mars);
  const int tile = desc::kCropSize, gap = 2;
  const int cols = 1 + static_cast<int>(stages.size());

  std::vector<ConsistencyRecord> records;
  std::ostringstream lines;
  for (int i = 0; i < num_pairs; ++i) {
    const int landmark = i % cfg.datagen.num_landmarks;
    const auto pr = datagen::make_pair_sample(cfg.datagen, seed, i, landmark, 0);
    const std::vector<Image> pair_crops = {crop_of(pr.first, landmark),
                                           crop_of(pr.second, landmark)};
    nn::Graph g(&ps);
    const desc::DescribeOut fwd =
        desc::describe_forward(g, net, g.input(desc::crops_to_tensor(pair_crops)));

    Image montage(2 * tile + 3 * gap, cols * (tile + gap) + gap);
    std::fill(montage.px.begin(), montage.px.end(), 1.0);
    double score = 0.0;
    for (int row = 0; row < 2; ++row) {
      blit_scaled(montage, pair_crops[static_cast<size_t>(row)], gap + row * (tile + gap), gap,
                  tile);
      for (size_t c = 0; c < stages.size(); ++c) {
        const nn::Tensor map = slice_batch_row(g.value(fwd.attn.sigma[stages[c]]), row);
        blit_scaled(montage, tensor_plane_image(map), gap + row * (tile + gap),
                    gap + (static_cast<int>(c) + 1) * (tile + gap), tile);
      }
    }
    for (int st : stages) {
      score += desc::attention_consistency(slice_batch_row(g.value(fwd.attn.sigma[st]), 0),
                                           slice_batch_row(g.value(fwd.attn.sigma[st]), 1));
    }
    score /= static_cast<double>(stages.size());

    char name[32];
    std::snprintf(name, sizeof(name), "attn_%03d.png", i);
    write_png_gray8(out_dir + "/" + name, montage);
    records.push_back({i, score});
    ordered_json rec;
    rec["pair"] = i;
    rec["score"] = score;
    lines << rec.dump() << "\n";
  }
  write_text_file(out_dir + "/attn_consistency.jsonl", lines.str());
  return records;
}

std::vector<std::pair<std::string, double>> metric_items(const EvalMetrics& m) {
  return {
      {"source_precision", m.source_precision},
      {"source_recall", m.source_recall},
      {"target_precision", m.target_precision},
      {"target_recall", m.target_recall},
      {"recall_at_1", m.recall_at_1},
      {"recall_at_5", m.recall_at_5},
      {"attention_consistency", m.attention_consistency},
      {"identity_switches", m.identity_switches},
      {"match_precision", m.match_precision},
      {"match_recall", m.match_recall},
  };
}

std::string metrics_json(const EvalMetrics& m) {
  ordered_json j;
  for (const auto& [name, value] : metric_items(m)) j[name] = value;
  return j.dump();
}

}  // namespace forge::harness
