#include "forge/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "forge/common.hpp"
#include "json.hpp"

namespace forge::datagen {

namespace {

constexpr double kPi = 3.141592653589793;
constexpr double kAmbient = 0.25;

uint64_t hash_double(uint64_t h, double x) {
  return Rng::mix(h, std::bit_cast<uint64_t>(x));
}

// Terrain is a pure function of the landmark list, so all views of one world
// share a surface no matter which sample seed renders them.
uint64_t world_key(const std::vector<LandmarkSpec>& world) {
  uint64_t h = 0x7465727261696Eull;
  for (const auto& s : world) {
    h = Rng::mix(h, static_cast<uint64_t>(s.landmark_id) * 0x10001 +
                        static_cast<uint64_t>(s.class_id));
    h = hash_double(h, s.x);
    h = hash_double(h, s.y);
    h = hash_double(h, s.radius);
    h = hash_double(h, s.relief);
  }
  return h;
}

double lattice_value(int64_t xi, int64_t yi, uint64_t key, int octave) {
  uint64_t h = Rng::mix(key, static_cast<uint64_t>(octave) * 0x9E37u);
  h = Rng::mix(h, static_cast<uint64_t>(xi) * 0x8DA6B343ull ^
                      static_cast<uint64_t>(yi) * 0xD8163841ull);
  return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;  // [-1, 1)
}

double quintic(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

double value_noise(double x, double y, uint64_t key, int octave) {
  const double fx = std::floor(x), fy = std::floor(y);
  const int64_t xi = static_cast<int64_t>(fx), yi = static_cast<int64_t>(fy);
  const double tx = quintic(x - fx), ty = quintic(y - fy);
  const double v00 = lattice_value(xi, yi, key, octave);
  const double v10 = lattice_value(xi + 1, yi, key, octave);
  const double v01 = lattice_value(xi, yi + 1, key, octave);
  const double v11 = lattice_value(xi + 1, yi + 1, key, octave);
  const double a = v00 + (v10 - v00) * tx;
  const double b = v01 + (v11 - v01) * tx;
  return a + (b - a) * ty;
}

double fractal_height(double x, double y, uint64_t key, double texture_gain) {
  double base = 0.55 * value_noise(x * 0.15, y * 0.15, key, 0) +
                0.28 * value_noise(x * 0.30, y * 0.30, key, 1);
  double detail = 0.14 * value_noise(x * 0.60, y * 0.60, key, 2) +
                  0.07 * value_noise(x * 1.20, y * 1.20, key, 3) +
                  0.035 * value_noise(x * 2.40, y * 2.40, key, 4);
  return base + texture_gain * detail;
}

// Dune ridge orientation, a stable function of the landmark itself.
double dune_orientation(const LandmarkSpec& s) {
  uint64_t h = hash_double(hash_double(static_cast<uint64_t>(s.landmark_id) + 0x64756E65ull, s.x),
                           s.y);
  return static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 * kPi;
}

double landmark_height(const LandmarkSpec& s, double wx, double wy) {
  const double dx = wx - s.x, dy = wy - s.y;
  const double r2 = dx * dx + dy * dy;
  const double rr = s.radius * s.radius;
  if (r2 >= rr) return 0.0;
  const double t = std::sqrt(r2) / s.radius;
  switch (s.class_id) {
    case 0: {  // crater: bowl plus rim, windowed smoothly to 0 at the radius
      double bowl = 0.0;
      if (t < 0.78) {
        double q = 1.0 - (t / 0.78) * (t / 0.78);
        bowl = s.relief * q * q;
      }
      double u = std::clamp((1.0 - t) / 0.1, 0.0, 1.0);
      double win = u * u * (3.0 - 2.0 * u);
      double g = (t - 0.82) / 0.10;
      double rim = 0.45 * std::abs(s.relief) * std::exp(-g * g) * win;
      return bowl + rim;
    }
    case 1: {  // mountain: smooth peak
      double q = 1.0 - t * t;
      return s.relief * q * q;
    }
    default: {  // dune: rotated ridge with a soft cross-section
      const double th = dune_orientation(s);
      const double ca = std::cos(th), sa = std::sin(th);
      const double a = ca * dx + sa * dy;
      const double b = -sa * dx + ca * dy;
      if (std::abs(a) >= s.radius) return 0.0;
      const double along = std::cos(kPi * a / (2.0 * s.radius));
      const double across = b / (0.32 * s.radius);
      return s.relief * along * along * std::exp(-across * across);
    }
  }
}

double height_at(const std::vector<LandmarkSpec>& world, uint64_t key, double texture_gain,
                 double wx, double wy) {
  double h = fractal_height(wx, wy, key, texture_gain);
  for (const auto& s : world) h += landmark_height(s, wx, wy);
  return h;
}

void validate_view(const ViewParams& v) {
  require(v.camera_scale >= 0.5 && v.camera_scale <= 2.0, "view_error",
          "camera_scale out of [0.5, 2.0]");
  require(v.sun_elevation > 0.0 && v.sun_elevation <= kPi / 2.0, "view_error",
          "sun_elevation out of (0, pi/2]");
}

void validate_shift(const DomainShift& s) {
  require(s.gamma > 0.0, "shift_error", "gamma must be positive");
  require(s.noise_sigma >= 0.0, "shift_error", "noise_sigma must be >= 0");
  require(s.texture_gain >= 0.0 && s.texture_gain <= 1.0, "shift_error",
          "texture_gain out of [0,1]");
  require(s.haze >= 0.0 && s.haze <= 1.0, "shift_error", "haze out of [0,1]");
}

}  // namespace

std::vector<LandmarkSpec> generate_world(int num_landmarks, uint64_t seed, double world_extent,
                                         double radius_min, double radius_max) {
  require(num_landmarks >= 0, "value_error", "num_landmarks must be >= 0");
  require(radius_min > 0.0 && radius_max >= radius_min, "value_error", "bad radius range");
  Rng rng(Rng::mix(seed, 0x574F524Cull));

  std::vector<double> radii(static_cast<size_t>(num_landmarks));
  double max_r = 0.0;
  for (auto& r : radii) {
    r = rng.uniform(radius_min, radius_max);
    max_r = std::max(max_r, r);
  }
  const double min_sep = 1.5 * max_r;

  std::vector<LandmarkSpec> world;
  world.reserve(static_cast<size_t>(num_landmarks));
  for (int i = 0; i < num_landmarks; ++i) {
    const double r = radii[static_cast<size_t>(i)];
    const double margin = 1.1 * r;
    require(world_extent > 2.0 * margin, "placement_error", "world too small for landmark radius");
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      double x = rng.uniform(margin, world_extent - margin);
      double y = rng.uniform(margin, world_extent - margin);
      bool ok = true;
      for (const auto& s : world) {
        double dx = x - s.x, dy = y - s.y;
        if (dx * dx + dy * dy < min_sep * min_sep) {
          ok = false;
          break;
        }
      }
      if (ok) {
        LandmarkSpec s;
        s.landmark_id = i;
        s.x = x;
        s.y = y;
        s.radius = r;
        world.push_back(s);
        placed = true;
      }
    }
    require(placed, "placement_error",
            "could not place landmark " + std::to_string(i) + " under the separation rule");
  }

  // Balanced classes: round-robin assignment, shuffled by seed.
  std::vector<int> classes(static_cast<size_t>(num_landmarks));
  for (int i = 0; i < num_landmarks; ++i) classes[static_cast<size_t>(i)] = i % kNumClasses;
  rng.shuffle(classes);
  for (int i = 0; i < num_landmarks; ++i) {
    LandmarkSpec& s = world[static_cast<size_t>(i)];
    s.class_id = classes[static_cast<size_t>(i)];
    double mag = rng.uniform(0.5, 0.85);
    s.relief = s.class_id == 0 ? -mag : (s.class_id == 1 ? mag : 0.5 * mag);
  }
  return world;
}

SceneSample render_view(const std::vector<LandmarkSpec>& world, const ViewParams& view,
                        const DomainShift& shift, int h, int w, uint64_t seed, int domain,
                        int view_group) {
  require(h >= 32 && w >= 32, "size_error", "image size must be at least 32x32");
  validate_view(view);
  validate_shift(shift);

  // World extent covered by the frame at scale 1 is fixed by convention: the
  // image width spans 16 world units.
  const double ppu = (static_cast<double>(w) / 16.0) * view.camera_scale;
  const double cx_world = 8.0 + view.camera_offset_x;
  const double cy_world = 8.0 + view.camera_offset_y;
  const double cr = std::cos(view.camera_rotation), sr = std::sin(view.camera_rotation);
  const uint64_t key = world_key(world);
  const double delta = 0.5 / ppu;

  const double lx = std::cos(view.sun_elevation) * std::cos(view.sun_azimuth);
  const double ly = std::cos(view.sun_elevation) * std::sin(view.sun_azimuth);
  const double lz = std::sin(view.sun_elevation);

  SceneSample sample;
  sample.image = Image(h, w);
  sample.domain = domain;
  sample.view_group = view_group;
  sample.seed = seed;

  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double px = (j + 0.5 - w / 2.0) / ppu;
      const double py = (i + 0.5 - h / 2.0) / ppu;
      const double wx = cx_world + cr * px - sr * py;
      const double wy = cy_world + sr * px + cr * py;
      const double hx1 = height_at(world, key, shift.texture_gain, wx + delta, wy);
      const double hx0 = height_at(world, key, shift.texture_gain, wx - delta, wy);
      const double hy1 = height_at(world, key, shift.texture_gain, wx, wy + delta);
      const double hy0 = height_at(world, key, shift.texture_gain, wx, wy - delta);
      const double gx = (hx1 - hx0) / (2.0 * delta);
      const double gy = (hy1 - hy0) / (2.0 * delta);
      const double inv_n = 1.0 / std::sqrt(gx * gx + gy * gy + 1.0);
      const double ndotl = (-gx * lx - gy * ly + lz) * inv_n;
      sample.image.at(i, j) = kAmbient + (1.0 - kAmbient) * std::max(0.0, ndotl);
    }
  }

  // Photometric domain shift: gamma curve, haze blend, sensor noise.
  for (auto& p : sample.image.px) p = std::pow(std::clamp(p, 0.0, 1.0), shift.gamma);
  if (shift.haze > 0.0) {
    for (auto& p : sample.image.px) p = (1.0 - shift.haze) * p + shift.haze * 0.75;
  }
  if (shift.noise_sigma > 0.0) {
    Rng noise(Rng::mix(seed, 0x6E6F6973ull));
    for (auto& p : sample.image.px) p += shift.noise_sigma * noise.normal();
  }
  for (auto& p : sample.image.px) p = std::clamp(p, 0.0, 1.0);

  // Project each landmark; the height profile lives strictly inside its
  // radius, so an axis-aligned square around the projected center bounds it
  // under any camera rotation.
  for (const auto& s : world) {
    const double dx = s.x - cx_world, dy = s.y - cy_world;
    const double ux = cr * dx + sr * dy;   // inverse rotation
    const double uy = -sr * dx + cr * dy;
    const double pcx = ux * ppu + w / 2.0;
    const double pcy = uy * ppu + h / 2.0;
    const double half = s.radius * ppu;
    Box b{pcx - half, pcy - half, pcx + half, pcy + half};
    b.x0 = std::max(b.x0, 0.0);
    b.y0 = std::max(b.y0, 0.0);
    b.x1 = std::min(b.x1, static_cast<double>(w));
    b.y1 = std::min(b.y1, static_cast<double>(h));
    if (b.x0 >= b.x1 || b.y0 >= b.y1) continue;  // fully outside the frame
    sample.boxes.push_back(b);
    sample.instance_ids.push_back(s.landmark_id);
    sample.class_ids.push_back(s.class_id);
  }
  return sample;
}

ViewParams draw_view(const ViewRange& range, Rng& rng) {
  ViewParams v;
  v.sun_azimuth = rng.uniform(range.azimuth_min, range.azimuth_max);
  v.sun_elevation = rng.uniform(range.elevation_min, range.elevation_max);
  v.camera_scale = rng.uniform(range.scale_min, range.scale_max);
  v.camera_rotation = rng.uniform(range.rotation_min, range.rotation_max);
  v.camera_offset_x = rng.uniform(-range.offset_jitter, range.offset_jitter);
  v.camera_offset_y = rng.uniform(-range.offset_jitter, range.offset_jitter);
  return v;
}

namespace {

ViewParams jitter_view(const ViewParams& base, const PairJitter& jit, Rng& rng) {
  ViewParams v = base;
  v.sun_azimuth += rng.uniform(-jit.d_azimuth, jit.d_azimuth);
  v.sun_elevation =
      std::clamp(base.sun_elevation + rng.uniform(-jit.d_elevation, jit.d_elevation), 0.2,
                 kPi / 2.0);
  v.camera_scale = std::clamp(base.camera_scale * std::exp(rng.uniform(-jit.d_scale, jit.d_scale)),
                              0.5, 2.0);
  v.camera_rotation += rng.uniform(-jit.d_rotation, jit.d_rotation);
  v.camera_offset_x += rng.uniform(-jit.d_offset, jit.d_offset);
  v.camera_offset_y += rng.uniform(-jit.d_offset, jit.d_offset);
  return v;
}

bool contains_landmark(const SceneSample& s, int landmark_id) {
  for (size_t i = 0; i < s.instance_ids.size(); ++i) {
    if (s.instance_ids[i] == landmark_id) return true;
  }
  return false;
}

}  // namespace

std::pair<SceneSample, SceneSample> make_view_pair(const std::vector<LandmarkSpec>& world,
                                                   int landmark_id, const ViewParams& base_view,
                                                   const PairJitter& jitter,
                                                   const DomainShift& shift, int h, int w,
                                                   uint64_t seed, int view_group) {
  Rng rng(Rng::mix(seed, 0x70616972ull));
  const uint64_t sample_seed = Rng::mix(seed, 0x76696577ull);
  for (int attempt = 0; attempt < 50; ++attempt) {
    ViewParams va = jitter_view(base_view, jitter, rng);
    ViewParams vb = jitter_view(base_view, jitter, rng);
    if (jitter.min_delta > 0.0) {
      const double daz = std::abs(va.sun_azimuth - vb.sun_azimuth);
      const double drot = std::abs(va.camera_rotation - vb.camera_rotation);
      const double dscale = std::abs(std::log(va.camera_scale / vb.camera_scale));
      if (daz < jitter.min_delta && drot < jitter.min_delta && dscale < jitter.min_delta) continue;
    }
    SceneSample a = render_view(world, va, shift, h, w, sample_seed, kSource, view_group);
    if (!contains_landmark(a, landmark_id)) continue;
    SceneSample b = render_view(world, vb, shift, h, w, sample_seed, kSource, view_group);
    if (!contains_landmark(b, landmark_id)) continue;
    return {std::move(a), std::move(b)};
  }
  fail("visibility_error",
       "landmark " + std::to_string(landmark_id) + " not visible in both jittered views");
}

SceneSample make_source_sample(const DatagenConfig& cfg, uint64_t seed, int index) {
  auto world = generate_world(cfg.num_landmarks, Rng::mix(seed, 1000 + index), cfg.world_extent,
                              cfg.radius_min, cfg.radius_max);
  Rng vr(Rng::mix(seed, 2000 + index));
  ViewParams view = draw_view(cfg.view, vr);
  return render_view(world, view, DomainShift{}, cfg.image_h, cfg.image_w,
                     Rng::mix(seed, 3000 + index), kSource, index);
}

SceneSample make_target_sample(const DatagenConfig& cfg, uint64_t seed, int index) {
  auto world = generate_world(cfg.num_landmarks, Rng::mix(seed, 5000 + index), cfg.world_extent,
                              cfg.radius_min, cfg.radius_max);
  Rng vr(Rng::mix(seed, 6000 + index));
  ViewParams view = draw_view(cfg.view, vr);
  return render_view(world, view, cfg.shift, cfg.image_h, cfg.image_w,
                     Rng::mix(seed, 7000 + index), kTarget, cfg.n_source + index);
}

std::pair<SceneSample, SceneSample> make_pair_sample(const DatagenConfig& cfg, uint64_t seed,
                                                     int world_index, int landmark_id,
                                                     int pair_index) {
  auto world = generate_world(cfg.num_landmarks, Rng::mix(seed, 11000 + world_index),
                              cfg.world_extent, cfg.radius_min, cfg.radius_max);
  Rng vr(Rng::mix(seed, 12000 + world_index));
  ViewParams base = draw_view(cfg.view, vr);
  base.camera_offset_x = 0.0;
  base.camera_offset_y = 0.0;
  const uint64_t pair_seed =
      Rng::mix(seed, 13000 + (world_index * 131 + landmark_id) * 131 + pair_index);
  return make_view_pair(world, landmark_id, base, cfg.pair_jitter, DomainShift{}, cfg.image_h,
                        cfg.image_w, pair_seed, 100000 + world_index);
}

std::vector<SceneSample> make_sequence(const DatagenConfig& cfg, uint64_t seed) {
  auto world = generate_world(cfg.num_landmarks, Rng::mix(seed, 9000), cfg.world_extent,
                              cfg.radius_min, cfg.radius_max);
  const uint64_t frame_seed = Rng::mix(seed, 9100);
  const int group = cfg.n_source + cfg.n_target;
  std::vector<SceneSample> frames;
  frames.reserve(static_cast<size_t>(cfg.n_frames));
  for (int k = 0; k < cfg.n_frames; ++k) {
    ViewParams view;  // fixed nadir-style view; optional slow drift
    view.camera_offset_x = cfg.seq_drift * k;
    view.camera_offset_y = 0.5 * cfg.seq_drift * k;
    frames.push_back(
        render_view(world, view, DomainShift{}, cfg.image_h, cfg.image_w, frame_seed, kSource,
                    group));
  }
  return frames;
}

namespace {

nlohmann::json sample_record(const SceneSample& s, const std::string& rel_path) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : s.boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
  return nlohmann::json{{"image", rel_path},
                        {"boxes", boxes},
                        {"instance_ids", s.instance_ids},
                        {"class_ids", s.class_ids},
                        {"domain", s.domain == kSource ? "source" : "target"},
                        {"view_group", s.view_group},
                        {"seed", s.seed}};
}

std::string zero_pad(int value, int width) {
  std::string s = std::to_string(value);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

}  // namespace

void build_dataset(const DatagenConfig& cfg, uint64_t seed, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  require(!ec, "io_error", "cannot create output directory: " + out_dir);

  auto emit = [&](std::ofstream& manifest, const SceneSample& s, const std::string& name) {
    const std::string rel = "images/" + name;
    write_png_gray8((fs::path(out_dir) / rel).string(), s.image);
    manifest << sample_record(s, rel).dump() << "\n";
  };

  {
    std::ofstream manifest(fs::path(out_dir) / "manifest.jsonl");
    require(manifest.good(), "io_error", "cannot write manifest in " + out_dir);
    for (int i = 0; i < cfg.n_source; ++i) {
      emit(manifest, make_source_sample(cfg, seed, i), "src_" + zero_pad(i, 5) + ".png");
    }
    for (int i = 0; i < cfg.n_target; ++i) {
      emit(manifest, make_target_sample(cfg, seed, i), "tgt_" + zero_pad(i, 5) + ".png");
    }
  }

  if (cfg.n_pair_worlds > 0 && cfg.pairs_per_landmark > 0) {
    std::ofstream manifest(fs::path(out_dir) / "pairs.jsonl");
    require(manifest.good(), "io_error", "cannot write pairs manifest in " + out_dir);
    for (int wi = 0; wi < cfg.n_pair_worlds; ++wi) {
      for (int li = 0; li < cfg.num_landmarks; ++li) {
        for (int pi = 0; pi < cfg.pairs_per_landmark; ++pi) {
          auto [a, b] = make_pair_sample(cfg, seed, wi, li, pi);
          const std::string stem =
              "pair_" + zero_pad(wi, 3) + "_" + zero_pad(li, 2) + "_" + zero_pad(pi, 2);
          emit(manifest, a, stem + "_a.png");
          emit(manifest, b, stem + "_b.png");
        }
      }
    }
  }

  if (cfg.n_frames > 0) {
    std::ofstream manifest(fs::path(out_dir) / "sequence.jsonl");
    require(manifest.good(), "io_error", "cannot write sequence manifest in " + out_dir);
    auto frames = make_sequence(cfg, seed);
    for (size_t k = 0; k < frames.size(); ++k) {
      emit(manifest, frames[k], "seq_" + zero_pad(static_cast<int>(k), 3) + ".png");
    }
  }
}

std::vector<SceneSample> load_manifest(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path, std::ios::binary);
  require(in.good(), "io_error", "cannot open manifest: " + manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();

  std::vector<SceneSample> samples;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = manifest_path + ":" + std::to_string(line_no);
    const nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
    require(rec.is_object(), "datagen_error", "manifest record is not an object at " + where);
    for (const char* key :
         {"image", "boxes", "instance_ids", "class_ids", "domain", "view_group", "seed"}) {
      require(rec.contains(key), "datagen_error",
              std::string("manifest record missing '") + key + "' at " + where);
    }
    const bool typed = rec["image"].is_string() && rec["boxes"].is_array() &&
                       rec["instance_ids"].is_array() && rec["class_ids"].is_array() &&
                       rec["domain"].is_string() && rec["view_group"].is_number_integer() &&
                       rec["seed"].is_number_integer();
    require(typed, "datagen_error", "manifest record has a mistyped field at " + where);

    SceneSample s;
    for (const auto& b : rec["boxes"]) {
      const bool box_ok = b.is_array() && b.size() == 4 && b[0].is_number() &&
                          b[1].is_number() && b[2].is_number() && b[3].is_number();
      require(box_ok, "datagen_error", "manifest box is not four numbers at " + where);
      s.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                         b[3].get<double>()});
    }
    for (const auto& v : rec["instance_ids"]) {
      require(v.is_number_integer(), "datagen_error", "non-integer instance id at " + where);
      s.instance_ids.push_back(v.get<int>());
    }
    for (const auto& v : rec["class_ids"]) {
      require(v.is_number_integer(), "datagen_error", "non-integer class id at " + where);
      s.class_ids.push_back(v.get<int>());
    }
    require(s.instance_ids.size() == s.boxes.size() && s.class_ids.size() == s.boxes.size(),
            "datagen_error", "annotation arrays disagree on length at " + where);
    const std::string dom = rec["domain"].get<std::string>();
    require(dom == "source" || dom == "target", "datagen_error",
            "unknown domain '" + dom + "' at " + where);
    s.domain = dom == "source" ? kSource : kTarget;
    s.view_group = rec["view_group"].get<int>();
    s.seed = rec["seed"].get<uint64_t>();
    s.image = read_png_gray8((base / rec["image"].get<std::string>()).string());
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace forge::datagen
