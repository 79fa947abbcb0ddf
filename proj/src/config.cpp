#include "forge/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "forge/common.hpp"
#include "json.hpp"

namespace forge::harness {

namespace {

using nlohmann::ordered_json;

// Wraps one JSON object; every key must be consumed by a typed read or the
// wrapper errors on finish(). This is what makes unknown fields hard errors.
class StrictObject {
 public:
  StrictObject(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j_.is_object(), "config_error", path_ + ": expected an object");
  }

  void read(const char* key, double& into) {
    const ordered_json* v = take(key);
    if (!v) return;
    require(v->is_number(), "config_error", at(key) + ": expected a number");
    into = v->get<double>();
  }

  void read(const char* key, int& into) {
    const ordered_json* v = take(key);
    if (!v) return;
    require(v->is_number_integer(), "config_error", at(key) + ": expected an integer");
    into = v->get<int>();
  }

  void read(const char* key, uint64_t& into) {
    const ordered_json* v = take(key);
    if (!v) return;
    require(v->is_number_integer() || v->is_number_unsigned(), "config_error",
            at(key) + ": expected an integer");
    into = v->get<uint64_t>();
  }

  void read(const char* key, bool& into) {
    const ordered_json* v = take(key);
    if (!v) return;
    require(v->is_boolean(), "config_error", at(key) + ": expected a boolean");
    into = v->get<bool>();
  }

  void read(const char* key, std::vector<int>& into) {
    const ordered_json* v = take(key);
    if (!v) return;
    require(v->is_array(), "config_error", at(key) + ": expected an array of integers");
    std::vector<int> out;
    for (const auto& e : *v) {
      require(e.is_number_integer(), "config_error", at(key) + ": expected integers");
      out.push_back(e.get<int>());
    }
    into = std::move(out);
  }

  // Nested object; absent -> nullptr (defaults stand).
  const ordered_json* object(const char* key) {
    const ordered_json* v = take(key);
    if (!v) return nullptr;
    require(v->is_object(), "config_error", at(key) + ": expected an object");
    return v;
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      require(consumed_.count(it.key()) > 0, "config_error",
              at(it.key().c_str()) + ": unknown field");
    }
  }

 private:
  const ordered_json* take(const char* key) {
    consumed_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string at(const char* key) const { return path_ + "." + key; }

  const ordered_json& j_;
  std::string path_;
  std::set<std::string> consumed_;
};

void parse_view(const ordered_json& j, datagen::ViewRange& v) {
  StrictObject o(j, "datagen.view");
  o.read("azimuth_min", v.azimuth_min);
  o.read("azimuth_max", v.azimuth_max);
  o.read("elevation_min", v.elevation_min);
  o.read("elevation_max", v.elevation_max);
  o.read("scale_min", v.scale_min);
  o.read("scale_max", v.scale_max);
  o.read("rotation_min", v.rotation_min);
  o.read("rotation_max", v.rotation_max);
  o.read("offset_jitter", v.offset_jitter);
  o.finish();
}

void parse_pair_jitter(const ordered_json& j, datagen::PairJitter& p) {
  StrictObject o(j, "datagen.pair_jitter");
  o.read("d_azimuth", p.d_azimuth);
  o.read("d_elevation", p.d_elevation);
  o.read("d_scale", p.d_scale);
  o.read("d_rotation", p.d_rotation);
  o.read("d_offset", p.d_offset);
  o.read("min_delta", p.min_delta);
  o.finish();
}

void parse_shift(const ordered_json& j, datagen::DomainShift& s) {
  StrictObject o(j, "datagen.shift");
  o.read("gamma", s.gamma);
  o.read("noise_sigma", s.noise_sigma);
  o.read("texture_gain", s.texture_gain);
  o.read("haze", s.haze);
  o.finish();
}

void parse_datagen(const ordered_json& j, datagen::DatagenConfig& d) {
  StrictObject o(j, "datagen");
  o.read("image_h", d.image_h);
  o.read("image_w", d.image_w);
  o.read("world_extent", d.world_extent);
  o.read("num_landmarks", d.num_landmarks);
  o.read("radius_min", d.radius_min);
  o.read("radius_max", d.radius_max);
  o.read("n_source", d.n_source);
  o.read("n_target", d.n_target);
  o.read("n_frames", d.n_frames);
  o.read("n_pair_worlds", d.n_pair_worlds);
  o.read("pairs_per_landmark", d.pairs_per_landmark);
  o.read("seq_drift", d.seq_drift);
  if (const ordered_json* v = o.object("view")) parse_view(*v, d.view);
  if (const ordered_json* v = o.object("pair_jitter")) parse_pair_jitter(*v, d.pair_jitter);
  if (const ordered_json* v = o.object("shift")) parse_shift(*v, d.shift);
  o.finish();
}

void parse_detector(const ordered_json& j, det::DetectorConfig& d) {
  StrictObject o(j, "detector");
  o.read("w_box", d.w_box);
  o.read("w_obj", d.w_obj);
  o.read("w_class", d.w_class);
  o.read("conf_threshold", d.conf_threshold);
  o.read("nms_iou", d.nms_iou);
  o.finish();
}

void parse_adapt(const ordered_json& j, adapt::AdaptConfig& a) {
  StrictObject o(j, "adapt");
  o.read("lambda_grl", a.lambda_grl);
  o.read("w_global", a.w_global);
  o.read("w_reg", a.w_reg);
  o.read("w_vsa_adv", a.w_vsa_adv);
  o.read("w_vsa_con", a.w_vsa_con);
  o.read("top_k", a.top_k);
  o.read("sim_threshold", a.sim_threshold);
  o.read("temperature", a.temperature);
  o.read("instance_conf", a.instance_conf);
  o.finish();
}

void parse_mars(const ordered_json& j, desc::MarsConfig& m) {
  StrictObject o(j, "mars");
  o.read("alpha_channel", m.alpha_channel);
  o.read("alpha_spatial", m.alpha_spatial);
  o.read("tau", m.tau);
  o.read("stages", m.stages);
  o.finish();
}

void parse_optimizer(const ordered_json& j, OptimizerConfig& op) {
  StrictObject o(j, "optimizer");
  o.read("learning_rate", op.learning_rate);
  o.read("steps", op.steps);
  o.read("batch_size", op.batch_size);
  o.read("seed", op.seed);
  o.finish();
}

void parse_ablation(const ordered_json& j, AblationFlags& a) {
  StrictObject o(j, "ablation");
  o.read("adapt_enabled", a.adapt_enabled);
  o.read("mars_enabled", a.mars_enabled);
  o.finish();
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail("config_error", std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  StrictObject o(j, "config");
  if (const ordered_json* v = o.object("datagen")) parse_datagen(*v, cfg.datagen);
  if (const ordered_json* v = o.object("detector")) parse_detector(*v, cfg.detector);
  if (const ordered_json* v = o.object("adapt")) parse_adapt(*v, cfg.adapt);
  if (const ordered_json* v = o.object("mars")) parse_mars(*v, cfg.mars);
  if (const ordered_json* v = o.object("optimizer")) parse_optimizer(*v, cfg.optimizer);
  if (const ordered_json* v = o.object("ablation")) parse_ablation(*v, cfg.ablation);
  o.finish();
  validate_config(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "config_error", "cannot open config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  ordered_json j;
  {
    ordered_json d;
    d["image_h"] = cfg.datagen.image_h;
    d["image_w"] = cfg.datagen.image_w;
    d["world_extent"] = cfg.datagen.world_extent;
    d["num_landmarks"] = cfg.datagen.num_landmarks;
    d["radius_min"] = cfg.datagen.radius_min;
    d["radius_max"] = cfg.datagen.radius_max;
    d["n_source"] = cfg.datagen.n_source;
    d["n_target"] = cfg.datagen.n_target;
    d["n_frames"] = cfg.datagen.n_frames;
    d["n_pair_worlds"] = cfg.datagen.n_pair_worlds;
    d["pairs_per_landmark"] = cfg.datagen.pairs_per_landmark;
    d["seq_drift"] = cfg.datagen.seq_drift;
    ordered_json view;
    view["azimuth_min"] = cfg.datagen.view.azimuth_min;
    view["azimuth_max"] = cfg.datagen.view.azimuth_max;
    view["elevation_min"] = cfg.datagen.view.elevation_min;
    view["elevation_max"] = cfg.datagen.view.elevation_max;
    view["scale_min"] = cfg.datagen.view.scale_min;
    view["scale_max"] = cfg.datagen.view.scale_max;
    view["rotation_min"] = cfg.datagen.view.rotation_min;
    view["rotation_max"] = cfg.datagen.view.rotation_max;
    view["offset_jitter"] = cfg.datagen.view.offset_jitter;
    d["view"] = std::move(view);
    ordered_json pj;
    pj["d_azimuth"] = cfg.datagen.pair_jitter.d_azimuth;
    pj["d_elevation"] = cfg.datagen.pair_jitter.d_elevation;
    pj["d_scale"] = cfg.datagen.pair_jitter.d_scale;
    pj["d_rotation"] = cfg.datagen.pair_jitter.d_rotation;
    pj["d_offset"] = cfg.datagen.pair_jitter.d_offset;
    pj["min_delta"] = cfg.datagen.pair_jitter.min_delta;
    d["pair_jitter"] = std::move(pj);
    ordered_json sh;
    sh["gamma"] = cfg.datagen.shift.gamma;
    sh["noise_sigma"] = cfg.datagen.shift.noise_sigma;
    sh["texture_gain"] = cfg.datagen.shift.texture_gain;
    sh["haze"] = cfg.datagen.shift.haze;
    d["shift"] = std::move(sh);
    j["datagen"] = std::move(d);
  }
  {
    ordered_json d;
    d["w_box"] = cfg.detector.w_box;
    d["w_obj"] = cfg.detector.w_obj;
    d["w_class"] = cfg.detector.w_class;
    d["conf_threshold"] = cfg.detector.conf_threshold;
    d["nms_iou"] = cfg.detector.nms_iou;
    j["detector"] = std::move(d);
  }
  {
    ordered_json a;
    a["lambda_grl"] = cfg.adapt.lambda_grl;
    a["w_global"] = cfg.adapt.w_global;
    a["w_reg"] = cfg.adapt.w_reg;
    a["w_vsa_adv"] = cfg.adapt.w_vsa_adv;
    a["w_vsa_con"] = cfg.adapt.w_vsa_con;
    a["top_k"] = cfg.adapt.top_k;
    a["sim_threshold"] = cfg.adapt.sim_threshold;
    a["temperature"] = cfg.adapt.temperature;
    a["instance_conf"] = cfg.adapt.instance_conf;
    j["adapt"] = std::move(a);
  }
  {
    ordered_json m;
    m["alpha_channel"] = cfg.mars.alpha_channel;
    m["alpha_spatial"] = cfg.mars.alpha_spatial;
    m["tau"] = cfg.mars.tau;
    m["stages"] = cfg.mars.stages;
    j["mars"] = std::move(m);
  }
  {
    ordered_json op;
    op["learning_rate"] = cfg.optimizer.learning_rate;
    op["steps"] = cfg.optimizer.steps;
    op["batch_size"] = cfg.optimizer.batch_size;
    op["seed"] = cfg.optimizer.seed;
    j["optimizer"] = std::move(op);
  }
  {
    ordered_json ab;
    ab["adapt_enabled"] = cfg.ablation.adapt_enabled;
    ab["mars_enabled"] = cfg.ablation.mars_enabled;
    j["ablation"] = std::move(ab);
  }
  return j.dump(2) + "\n";
}

uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string text = serialize_config(cfg);
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void validate_config(const ExperimentConfig& cfg) {
  require(cfg.optimizer.learning_rate > 0.0, "config_error", "learning_rate must be > 0");
  require(cfg.optimizer.steps >= 0, "config_error", "steps must be >= 0");
  require(cfg.optimizer.batch_size >= 1, "config_error", "batch_size must be >= 1");
  require(cfg.datagen.image_h >= 32 && cfg.datagen.image_w >= 32, "config_error",
          "images must be at least 32 px");
  require(cfg.datagen.num_landmarks >= 1, "config_error", "num_landmarks must be >= 1");
  require(cfg.datagen.radius_min > 0.0 && cfg.datagen.radius_max >= cfg.datagen.radius_min,
          "config_error", "landmark radius range is empty");
  require(cfg.datagen.n_source >= 0 && cfg.datagen.n_target >= 0 && cfg.datagen.n_frames >= 0 &&
              cfg.datagen.n_pair_worlds >= 0 && cfg.datagen.pairs_per_landmark >= 1,
          "config_error", "dataset sizes must be non-negative");
  require(cfg.detector.conf_threshold >= 0.0 && cfg.detector.conf_threshold <= 1.0,
          "config_error", "conf_threshold must sit in [0,1]");
  require(cfg.detector.nms_iou >= 0.0 && cfg.detector.nms_iou <= 1.0, "config_error",
          "nms_iou must sit in [0,1]");
  require(cfg.adapt.lambda_grl >= 0.0, "config_error", "lambda_grl must be >= 0");
  require(cfg.adapt.w_global >= 0.0 && cfg.adapt.w_reg >= 0.0 && cfg.adapt.w_vsa_adv >= 0.0 &&
              cfg.adapt.w_vsa_con >= 0.0,
          "config_error", "adaptation weights must be >= 0");
  require(cfg.adapt.top_k >= 1, "config_error", "top_k must be >= 1");
  require(cfg.adapt.sim_threshold >= -1.0 && cfg.adapt.sim_threshold <= 1.0, "config_error",
          "sim_threshold must sit in [-1,1]");
  require(cfg.adapt.temperature > 0.0, "config_error", "temperature must be > 0");
  require(cfg.adapt.instance_conf >= 0.0 && cfg.adapt.instance_conf <= 1.0, "config_error",
          "instance_conf must sit in [0,1]");
  require(cfg.mars.alpha_channel >= 0.0 && cfg.mars.alpha_spatial >= 0.0, "config_error",
          "attention loss weights must be >= 0");
  require(cfg.mars.tau > 0.0, "config_error", "tau must be > 0");
  for (int s : cfg.mars.stages) {
    require(s >= 0 && s < desc::kNumStages, "config_error", "mars stage out of range");
  }
}

}  // namespace forge::harness
