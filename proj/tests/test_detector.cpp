#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "forge/common.hpp"
#include "forge/detector.hpp"
#include "testutil.hpp"

using namespace forge::det;
using forge::Rng;
using forge::datagen::Box;
using forge::datagen::SceneSample;
using forge::nn::Graph;
using forge::nn::ParamStore;
using forge::nn::Tensor;

namespace {

// Independent decode + suppression reference, O(n^2), written against the
// documented contract rather than the implementation.
namespace ref {

double sig(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double iou(const Box& a, const Box& b) {
  double aa = (a.x1 - a.x0) * (a.y1 - a.y0);
  double ab = (b.x1 - b.x0) * (b.y1 - b.y0);
  if (aa <= 0.0 || ab <= 0.0) return 0.0;
  double ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  double iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  return ix * iy / (aa + ab - ix * iy);
}

std::vector<Detection> decode(const Tensor& grid, double conf, double nms_iou, int image_size) {
  const int S = grid.dim(1);
  const double stride = static_cast<double>(image_size) / S;
  auto at = [&](int c, int y, int x) {
    return grid[(static_cast<int64_t>(c) * S + y) * S + x];
  };
  std::vector<Detection> cands;
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      double m = at(5, y, x);
      for (int k = 1; k < 3; ++k) m = std::max(m, at(5 + k, y, x));
      double denom = 0.0;
      for (int k = 0; k < 3; ++k) denom += std::exp(at(5 + k, y, x) - m);
      int best_k = 0;
      double best_p = 0.0;
      for (int k = 0; k < 3; ++k) {
        double p = std::exp(at(5 + k, y, x) - m) / denom;
        if (p > best_p) {
          best_p = p;
          best_k = k;
        }
      }
      double score = sig(at(4, y, x)) * best_p;
      if (score < conf) continue;
      double cx = (x + sig(at(0, y, x))) * stride;
      double cy = (y + sig(at(1, y, x))) * stride;
      double bw = 32.0 * std::exp(at(2, y, x));
      double bh = 32.0 * std::exp(at(3, y, x));
      Box b{cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0};
      b.x0 = std::max(b.x0, 0.0);
      b.y0 = std::max(b.y0, 0.0);
      b.x1 = std::min(b.x1, static_cast<double>(image_size));
      b.y1 = std::min(b.y1, static_cast<double>(image_size));
      if (b.x0 >= b.x1 || b.y0 >= b.y1) continue;
      cands.push_back({b, score, best_k});
    }
  }
  // Selection "sort" by descending score, earliest-first on ties.
  std::vector<Detection> ordered;
  std::vector<bool> used(cands.size(), false);
  for (size_t n = 0; n < cands.size(); ++n) {
    int best = -1;
    for (size_t i = 0; i < cands.size(); ++i) {
      if (used[i]) continue;
      if (best < 0 || cands[i].score > cands[static_cast<size_t>(best)].score) {
        best = static_cast<int>(i);
      }
    }
    used[static_cast<size_t>(best)] = true;
    ordered.push_back(cands[static_cast<size_t>(best)]);
  }
  std::vector<Detection> kept;
  for (const auto& d : ordered) {
    bool drop = false;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) > nms_iou) drop = true;
    }
    if (!drop) kept.push_back(d);
  }
  return kept;
}

}  // namespace ref

bool same_detections(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].score != b[i].score || a[i].class_id != b[i].class_id ||
        a[i].box.x0 != b[i].box.x0 || a[i].box.y0 != b[i].box.y0 ||
        a[i].box.x1 != b[i].box.x1 || a[i].box.y1 != b[i].box.y1) {
      return false;
    }
  }
  return true;
}

SceneSample source_truth(std::vector<Box> boxes, std::vector<int> classes) {
  SceneSample s;
  s.domain = forge::datagen::kSource;
  s.boxes = std::move(boxes);
  s.class_ids = std::move(classes);
  for (size_t i = 0; i < s.boxes.size(); ++i) s.instance_ids.push_back(static_cast<int>(i));
  return s;
}

}  // namespace

TEST_SUITE("detector") {

TEST_CASE("backbone emits three stages at strides 4, 8, 16") {
  ParamStore ps;
  Rng rng(0);
  DetectorNet net = detector_init(ps, rng);
  Graph g(&ps);
  Graph::Id x = g.input(Tensor::zeros({1, 1, 128, 128}));
  Stages st = backbone_forward(g, net, x);
  CHECK(g.value(st.s0).shape == std::vector<int>{1, 16, 32, 32});
  CHECK(g.value(st.s1).shape == std::vector<int>{1, 32, 16, 16});
  CHECK(g.value(st.s2).shape == std::vector<int>{1, 64, 8, 8});
  Graph::Id grid = detect_head(g, net, st.s2);
  CHECK(g.value(grid).shape == std::vector<int>{1, 8, 8, 8});
}

TEST_CASE("backbone rejects non-square or non-multiple-of-16 input") {
  ParamStore ps;
  Rng rng(0);
  DetectorNet net = detector_init(ps, rng);
  Graph g(&ps);
  CHECK_THROWS_AS(backbone_forward(g, net, g.input(Tensor::zeros({1, 1, 120, 120}))),
                  forge::Error);
  CHECK_THROWS_AS(backbone_forward(g, net, g.input(Tensor::zeros({1, 1, 128, 64}))),
                  forge::Error);
}

TEST_CASE("zero parameters map any input to an all-zero grid") {
  ParamStore ps;
  Rng rng(0);
  DetectorNet net = detector_init(ps, rng);
  for (int p = 0; p < ps.size(); ++p) {
    std::fill(ps.value(p).v.begin(), ps.value(p).v.end(), 0.0);
  }
  Graph g(&ps);
  Tensor img = testutil::random_tensor({1, 1, 32, 32}, rng, 0.3);
  Stages st = backbone_forward(g, net, g.input(img));
  Graph::Id grid = detect_head(g, net, st.s2);
  for (double v : g.value(st.s2).v) CHECK(v == 0.0);
  for (double v : g.value(grid).v) CHECK(v == 0.0);
}

TEST_CASE("forward passes are deterministic and finite") {
  ParamStore ps;
  Rng rng(3);
  DetectorNet net = detector_init(ps, rng);
  Tensor img = testutil::random_tensor({2, 1, 64, 64}, rng, 0.2);
  auto run = [&]() {
    Graph g(&ps);
    return g.value(detect_head(g, net, backbone_forward(g, net, g.input(img)).s2));
  };
  Tensor a = run(), b = run();
  CHECK(a.v == b.v);
  CHECK(a.all_finite());
}

TEST_CASE("iou hand values") {
  Box a{0, 0, 2, 2};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{5, 5, 7, 7}) == 0.0);
  CHECK(iou(a, Box{1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(iou(Box{1, 1, 1, 5}, a) == 0.0);  // degenerate box
}

TEST_CASE("nms keeps the best of identical boxes and respects classes") {
  Box b{10, 10, 42, 42};
  std::vector<Detection> dets = {{b, 0.8, 0}, {b, 0.9, 0}};
  auto kept = nms(dets, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);

  std::vector<Detection> cross = {{b, 0.9, 0}, {b, 0.8, 1}};
  CHECK(nms(cross, 0.5).size() == 2);  // per-class suppression only
}

TEST_CASE("decode drops everything when objectness is very negative") {
  Tensor grid = Tensor::zeros({8, 8, 8});
  for (int i = 0; i < 64; ++i) grid[4 * 64 + i] = -50.0;
  CHECK(decode(grid, DetectorConfig{}, 128).empty());
}

TEST_CASE("decode hand example: one live cell scores sigmoid(0) * 1/3") {
  Tensor grid = Tensor::zeros({8, 8, 8});
  for (int i = 0; i < 64; ++i) grid[4 * 64 + i] = -50.0;
  grid[4 * 64 + 2 * 8 + 3] = 0.0;  // obj logit 0 at cell (y=2, x=3)
  DetectorConfig cfg;
  cfg.conf_threshold = 0.1;
  auto dets = decode(grid, cfg, 128);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].score == doctest::Approx(0.5 / 3.0).epsilon(1e-12));
  CHECK(dets[0].class_id == 0);
  CHECK(dets[0].box.cx() == doctest::Approx((3 + 0.5) * 16.0).epsilon(1e-12));
  CHECK(dets[0].box.cy() == doctest::Approx((2 + 0.5) * 16.0).epsilon(1e-12));
  CHECK(dets[0].box.x1 - dets[0].box.x0 == doctest::Approx(32.0).epsilon(1e-12));
}

TEST_CASE("encode/decode round trip recovers boxes within 1e-5 px") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const double w = rng.uniform(10.0, 60.0);
    const double h = rng.uniform(10.0, 60.0);
    const double cx = rng.uniform(w / 2 + 1.0, 127.0 - w / 2);
    const double cy = rng.uniform(h / 2 + 1.0, 127.0 - h / 2);
    Box box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    const int cls = rng.uniform_int(3);

    CellTarget t = encode_box(box, 0, cls, 8, 128);
    Tensor grid = Tensor::zeros({8, 8, 8});
    for (int i = 0; i < 64; ++i) grid[4 * 64 + i] = -50.0;
    auto put = [&](int c, double v) { grid[(c * 8 + t.cell_y) * 8 + t.cell_x] = v; };
    put(0, t.tx);
    put(1, t.ty);
    put(2, t.tw);
    put(3, t.th);
    put(4, 10.0);
    put(5 + cls, 8.0);
    DetectorConfig cfg;
    cfg.conf_threshold = 0.5;
    auto dets = decode(grid, cfg, 128);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].class_id == cls);
    CHECK(std::abs(dets[0].box.x0 - box.x0) < 1e-5);
    CHECK(std::abs(dets[0].box.y0 - box.y0) < 1e-5);
    CHECK(std::abs(dets[0].box.x1 - box.x1) < 1e-5);
    CHECK(std::abs(dets[0].box.y1 - box.y1) < 1e-5);
  }
}

TEST_CASE("decode agrees exactly with the brute-force reference") {
  Rng rng(23);
  DetectorConfig cfg;
  cfg.conf_threshold = 0.25;
  cfg.nms_iou = 0.45;
  for (int trial = 0; trial < 200; ++trial) {
    Tensor grid({8, 8, 8});
    for (int64_t i = 0; i < grid.numel(); ++i) grid[i] = rng.normal();
    // Mix of confident and background cells, sizes spread around the anchor.
    for (int i = 0; i < 64; ++i) {
      grid[4 * 64 + i] = rng.normal() * 2.0 - 1.0;
      grid[2 * 64 + i] = rng.normal() * 0.6;
      grid[3 * 64 + i] = rng.normal() * 0.6;
    }
    auto got = decode(grid, cfg, 128);
    auto expect = ref::decode(grid, cfg.conf_threshold, cfg.nms_iou, 128);
    CHECK(same_detections(got, expect));
  }
}

TEST_CASE("assign_cells keeps the larger box when centers share a cell") {
  SceneSample s = source_truth({Box{2, 2, 14, 14}, Box{7, 7, 13, 13}}, {0, 1});
  int ties = 0;
  auto targets = assign_cells({&s}, 2, 32, &ties);
  REQUIRE(targets.size() == 1);
  CHECK(ties == 1);
  CHECK(targets[0].class_id == 0);  // the 12x12 box wins over the 6x6 one
  CHECK(targets[0].tw == doctest::Approx(std::log(12.0 / 32.0)).epsilon(1e-12));
}

TEST_CASE("supervised loss on empty truth is only the background term") {
  Graph g;
  Tensor grid = Tensor::zeros({1, 8, 2, 2});
  for (int i = 0; i < 4; ++i) grid[4 * 4 + i] = -10.0;
  SceneSample empty = source_truth({}, {});
  auto loss = supervised_loss(g, g.input(grid), {&empty}, DetectorConfig{}, 32);
  CHECK(loss.num_targets == 0);
  CHECK(loss.box_term == -1);
  CHECK(g.value(loss.total)[0] < 0.01);
  CHECK(g.value(loss.total)[0] > 0.0);
}

TEST_CASE("perfect box predictions zero the regression term") {
  SceneSample s = source_truth({Box{6, 4, 22, 24}}, {2});
  CellTarget t = encode_box(s.boxes[0], 0, 2, 2, 32);
  Tensor grid = Tensor::zeros({1, 8, 2, 2});
  auto put = [&](int c, double v) { grid[(c * 2 + t.cell_y) * 2 + t.cell_x] = v; };
  put(0, t.tx);
  put(1, t.ty);
  put(2, t.tw);
  put(3, t.th);
  Graph g;
  auto loss = supervised_loss(g, g.input(grid), {&s}, DetectorConfig{}, 32);
  REQUIRE(loss.box_term >= 0);
  CHECK(g.value(loss.box_term)[0] == 0.0);
}

TEST_CASE("supervised loss refuses target-domain truth") {
  SceneSample s = source_truth({Box{6, 4, 22, 24}}, {1});
  s.domain = forge::datagen::kTarget;
  Graph g;
  Graph::Id grid = g.input(Tensor::zeros({1, 8, 2, 2}));
  CHECK_THROWS_AS(supervised_loss(g, grid, {&s}, DetectorConfig{}, 32), forge::Error);
}

TEST_CASE("supervised loss is finite and non-negative on random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor grid = testutil::random_tensor({2, 8, 2, 2}, rng, 2.0);
    SceneSample a = source_truth({Box{2, 2, 14, 14}}, {rng.uniform_int(3)});
    SceneSample b = source_truth({Box{17, 3, 31, 15}, Box{1, 17, 15, 31}},
                                 {rng.uniform_int(3), rng.uniform_int(3)});
    Graph g;
    auto loss = supervised_loss(g, g.input(grid), {&a, &b}, DetectorConfig{}, 32);
    const double v = g.value(loss.total)[0];
    CHECK(std::isfinite(v));
    CHECK(v >= 0.0);
  }
}

TEST_CASE("full detector loss gradients match finite differences") {
  Rng rng(29);
  for (int trial = 0; trial < 3; ++trial) {
    ParamStore ps;
    Rng init(100 + trial);
    DetectorNet net = detector_init(ps, init);
    int img_id = ps.add("test.images", testutil::random_tensor({2, 1, 32, 32}, rng, 0.3));
    SceneSample a = source_truth({Box{4, 6, 20, 22}}, {trial % 3});
    SceneSample b = source_truth({Box{15, 14, 29, 30}}, {(trial + 1) % 3});

    auto build = [&](Graph& g) {
      Stages st = backbone_forward(g, net, g.param(img_id));
      Graph::Id grid = detect_head(g, net, st.s2);
      return supervised_loss(g, grid, {&a, &b}, DetectorConfig{}, 32).total;
    };
    CHECK(testutil::max_grad_rel_err_sampled(ps, build, 4, 900 + trial) < 1e-4);
  }
}

}  // TEST_SUITE
