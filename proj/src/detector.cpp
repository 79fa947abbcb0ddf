#include "forge/detector.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "forge/common.hpp"

namespace forge::det {

using nn::Graph;
using nn::ParamStore;
using nn::Tensor;

namespace {

struct ConvSpec {
  const char* name;
  int cin, cout, k, stride, pad;
};

// Backbone: strides 4/8/16 tapped after blocks 1, 3, 5. Head: 3x3 mixer plus
// 1x1 projection to the grid channels.
constexpr ConvSpec kConvSpecs[DetectorNet::kConvs] = {
    {"det.conv0", 1, 16, 3, 2, 1},  {"det.conv1", 16, 16, 3, 2, 1},
    {"det.conv2", 16, 32, 3, 1, 1}, {"det.conv3", 32, 32, 3, 2, 1},
    {"det.conv4", 32, 64, 3, 1, 1}, {"det.conv5", 64, 64, 3, 2, 1},
    {"det.head0", 64, 32, 3, 1, 1}, {"det.head1", 32, kGridChannels, 1, 1, 0},
};

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

DetectorNet detector_init(ParamStore& ps, Rng& rng) {
  DetectorNet net;
  for (int i = 0; i < DetectorNet::kConvs; ++i) {
    const ConvSpec& s = kConvSpecs[i];
    Tensor w({s.cout, s.cin, s.k, s.k});
    const double std = std::sqrt(2.0 / (s.cin * s.k * s.k));
    for (auto& x : w.v) x = rng.normal() * std;
    net.w[i] = ps.add(std::string(s.name) + ".w", std::move(w));
    net.b[i] = ps.add(std::string(s.name) + ".b", Tensor::zeros({s.cout}));
  }
  return net;
}

DetectorNet detector_bind(const ParamStore& ps) {
  DetectorNet net;
  for (int i = 0; i < DetectorNet::kConvs; ++i) {
    net.w[i] = ps.find(std::string(kConvSpecs[i].name) + ".w");
    net.b[i] = ps.find(std::string(kConvSpecs[i].name) + ".b");
    require(net.w[i] >= 0 && net.b[i] >= 0, "checkpoint_error",
            std::string("missing detector parameter: ") + kConvSpecs[i].name);
  }
  return net;
}

Stages backbone_forward(Graph& g, const DetectorNet& net, Graph::Id x) {
  const Tensor& xv = g.value(x);
  require(xv.ndim() == 4 && xv.dim(1) == 1, "shape_error", "backbone expects [N,1,H,W]");
  require(xv.dim(2) == xv.dim(3), "shape_error", "backbone expects square input");
  require(xv.dim(2) % 16 == 0, "shape_error", "backbone input size must be a multiple of 16");

  auto block = [&](Graph::Id in, int i) {
    return g.silu(g.conv2d(in, g.param(net.w[i]), g.param(net.b[i]), kConvSpecs[i].stride,
                           kConvSpecs[i].pad));
  };
  Stages st;
  Graph::Id t = block(x, 0);
  st.s0 = block(t, 1);
  t = block(st.s0, 2);
  st.s1 = block(t, 3);
  t = block(st.s1, 4);
  st.s2 = block(t, 5);
  return st;
}

Graph::Id detect_head(Graph& g, const DetectorNet& net, Graph::Id deepest) {
  Graph::Id t = g.silu(g.conv2d(deepest, g.param(net.w[6]), g.param(net.b[6]),
                                kConvSpecs[6].stride, kConvSpecs[6].pad));
  return g.conv2d(t, g.param(net.w[7]), g.param(net.b[7]), kConvSpecs[7].stride,
                  kConvSpecs[7].pad);
}

double iou(const datagen::Box& a, const datagen::Box& b) {
  const double area_a = a.area(), area_b = b.area();
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  const double ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (area_a + area_b - inter);
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

Tensor slice_sample_grid(const Tensor& batch_grid, int n) {
  require(batch_grid.ndim() == 4, "shape_error", "expected [N,C,S,S] grid");
  const int c = batch_grid.dim(1), s1 = batch_grid.dim(2), s2 = batch_grid.dim(3);
  const int64_t count = static_cast<int64_t>(c) * s1 * s2;
  Tensor out({c, s1, s2});
  std::copy(batch_grid.v.begin() + n * count, batch_grid.v.begin() + (n + 1) * count,
            out.v.begin());
  return out;
}

std::vector<Detection> decode(const Tensor& grid, const DetectorConfig& cfg, int image_size) {
  require(grid.ndim() == 3 && grid.dim(0) == kGridChannels && grid.dim(1) == grid.dim(2),
          "shape_error", "decode expects a [5+K, S, S] grid");
  require(cfg.conf_threshold >= 0.0 && cfg.conf_threshold <= 1.0, "value_error",
          "conf_threshold out of [0,1]");
  require(cfg.nms_iou >= 0.0 && cfg.nms_iou <= 1.0, "value_error", "nms_iou out of [0,1]");
  const int S = grid.dim(1);
  const double stride = static_cast<double>(image_size) / S;
  const int64_t plane = static_cast<int64_t>(S) * S;
  auto at = [&](int c, int y, int x) { return grid[c * plane + static_cast<int64_t>(y) * S + x]; };

  std::vector<Detection> dets;
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double obj = stable_sigmoid(at(4, y, x));
      double m = at(5, y, x);
      for (int k = 1; k < kNumClasses; ++k) m = std::max(m, at(5 + k, y, x));
      double denom = 0.0;
      for (int k = 0; k < kNumClasses; ++k) denom += std::exp(at(5 + k, y, x) - m);
      double best_p = 0.0;
      int best_k = 0;
      for (int k = 0; k < kNumClasses; ++k) {
        const double p = std::exp(at(5 + k, y, x) - m) / denom;
        if (p > best_p) {
          best_p = p;
          best_k = k;
        }
      }
      const double score = obj * best_p;
      if (score < cfg.conf_threshold) continue;

      const double cx = (x + stable_sigmoid(at(0, y, x))) * stride;
      const double cy = (y + stable_sigmoid(at(1, y, x))) * stride;
      const double bw = kAnchor * std::exp(at(2, y, x));
      const double bh = kAnchor * std::exp(at(3, y, x));
      datagen::Box b{cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0};
      b.x0 = std::max(b.x0, 0.0);
      b.y0 = std::max(b.y0, 0.0);
      b.x1 = std::min(b.x1, static_cast<double>(image_size));
      b.y1 = std::min(b.y1, static_cast<double>(image_size));
      if (b.x0 >= b.x1 || b.y0 >= b.y1) continue;
      dets.push_back({b, score, best_k});
    }
  }
  return nms(std::move(dets), cfg.nms_iou);
}

CellTarget encode_box(const datagen::Box& box, int sample, int class_id, int S, int image_size) {
  const double stride = static_cast<double>(image_size) / S;
  CellTarget t;
  t.sample = sample;
  t.class_id = class_id;
  const double cx = box.cx(), cy = box.cy();
  t.cell_x = std::clamp(static_cast<int>(std::floor(cx / stride)), 0, S - 1);
  t.cell_y = std::clamp(static_cast<int>(std::floor(cy / stride)), 0, S - 1);
  auto encode_offset = [](double frac) {
    const double c = std::clamp(frac, 1e-6, 1.0 - 1e-6);
    return std::log(c / (1.0 - c));
  };
  t.tx = encode_offset(cx / stride - t.cell_x);
  t.ty = encode_offset(cy / stride - t.cell_y);
  t.tw = std::log((box.x1 - box.x0) / kAnchor);
  t.th = std::log((box.y1 - box.y0) / kAnchor);
  return t;
}

std::vector<CellTarget> assign_cells(const std::vector<const datagen::SceneSample*>& truths,
                                     int S, int image_size, int* tie_events) {
  std::vector<CellTarget> targets;
  std::vector<double> areas;
  for (size_t n = 0; n < truths.size(); ++n) {
    const auto& truth = *truths[n];
    for (size_t i = 0; i < truth.boxes.size(); ++i) {
      CellTarget t = encode_box(truth.boxes[i], static_cast<int>(n), truth.class_ids[i], S,
                                image_size);
      const double area = truth.boxes[i].area();
      bool collided = false;
      for (size_t j = 0; j < targets.size(); ++j) {
        if (targets[j].sample == t.sample && targets[j].cell_x == t.cell_x &&
            targets[j].cell_y == t.cell_y) {
          if (tie_events) ++(*tie_events);
          if (area > areas[j]) {
            targets[j] = t;
            areas[j] = area;
          }
          collided = true;
          break;
        }
      }
      if (!collided) {
        targets.push_back(t);
        areas.push_back(area);
      }
    }
  }
  return targets;
}

SupervisedLoss supervised_loss(Graph& g, Graph::Id grid,
                               const std::vector<const datagen::SceneSample*>& truths,
                               const DetectorConfig& cfg, int image_size) {
  const Tensor& gv = g.value(grid);
  require(gv.ndim() == 4 && gv.dim(1) == kGridChannels && gv.dim(2) == gv.dim(3), "shape_error",
          "supervised_loss expects a [N, 5+K, S, S] grid");
  require(gv.dim(0) == static_cast<int>(truths.size()), "shape_error",
          "grid batch does not match truth batch");
  for (const auto* t : truths) {
    require(t->domain == datagen::kSource, "domain_error",
            "supervised loss only consumes labeled source samples");
  }
  const int N = gv.dim(0), S = gv.dim(2);
  const int64_t plane = static_cast<int64_t>(S) * S;

  SupervisedLoss out;
  std::vector<CellTarget> targets = assign_cells(truths, S, image_size, &out.tie_events);
  out.num_targets = static_cast<int>(targets.size());

  Tensor obj_target = Tensor::zeros({N, 1, S, S});
  for (const auto& t : targets) {
    obj_target[static_cast<int64_t>(t.sample) * plane + static_cast<int64_t>(t.cell_y) * S +
               t.cell_x] = 1.0;
  }
  out.obj_term = g.bce_logits_mean(g.channel_slice(grid, 4, 5), std::move(obj_target));
  Graph::Id total = g.scale(out.obj_term, cfg.w_obj);

  if (!targets.empty()) {
    const int R = static_cast<int>(targets.size());
    auto flat = [&](const CellTarget& t, int c) {
      return (static_cast<int64_t>(t.sample) * kGridChannels + c) * plane +
             static_cast<int64_t>(t.cell_y) * S + t.cell_x;
    };
    std::vector<int64_t> box_idx;
    Tensor box_target({R, 4});
    std::vector<int64_t> cls_idx;
    std::vector<int> labels;
    for (int r = 0; r < R; ++r) {
      const CellTarget& t = targets[static_cast<size_t>(r)];
      for (int c = 0; c < 4; ++c) box_idx.push_back(flat(t, c));
      box_target[static_cast<int64_t>(r) * 4 + 0] = t.tx;
      box_target[static_cast<int64_t>(r) * 4 + 1] = t.ty;
      box_target[static_cast<int64_t>(r) * 4 + 2] = t.tw;
      box_target[static_cast<int64_t>(r) * 4 + 3] = t.th;
      for (int c = 0; c < kNumClasses; ++c) cls_idx.push_back(flat(t, 5 + c));
      labels.push_back(t.class_id);
    }
    Graph::Id box_pred = g.reshape(g.gather(grid, std::move(box_idx)), {R, 4});
    out.box_term = g.scale(g.sse(box_pred, std::move(box_target)), 1.0 / R);
    Graph::Id cls_pred = g.reshape(g.gather(grid, std::move(cls_idx)), {R, kNumClasses});
    out.class_term = g.softmax_ce_mean(cls_pred, std::move(labels));
    total = g.add(total, g.scale(out.box_term, cfg.w_box));
    total = g.add(total, g.scale(out.class_term, cfg.w_class));
  }
  out.total = total;
  return out;
}

Tensor images_to_tensor(const std::vector<const Image*>& images) {
  require(!images.empty(), "shape_error", "empty image batch");
  const int h = images[0]->h, w = images[0]->w;
  Tensor t({static_cast<int>(images.size()), 1, h, w});
  int64_t o = 0;
  for (const Image* img : images) {
    require(img->h == h && img->w == w, "shape_error", "mixed image sizes in one batch");
    std::copy(img->px.begin(), img->px.end(), t.v.begin() + o);
    o += static_cast<int64_t>(h) * w;
  }
  return t;
}

}  // namespace forge::det
