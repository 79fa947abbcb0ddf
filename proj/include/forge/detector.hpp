#pragma once

#include <vector>

#include "forge/datagen.hpp"
#include "forge/graph.hpp"
#include "forge/rng.hpp"

namespace forge::det {

constexpr int kNumClasses = datagen::kNumClasses;
constexpr int kGridChannels = 5 + kNumClasses;  // tx ty tw th obj + class logits
constexpr double kAnchor = 32.0;                // pixels, single square anchor
constexpr int kStride = 16;                     // deepest-stage stride

struct DetectorConfig {
  double w_box = 5.0;
  double w_obj = 1.0;
  double w_class = 1.0;
  double conf_threshold = 0.25;
  double nms_iou = 0.45;
};

struct Detection {
  datagen::Box box;
  double score = 0.0;
  int class_id = 0;
};

// Parameter ids of the detection network inside one ParamStore. Layout:
// six stride-labelled backbone conv blocks (widths 16/16/32/32/64/64) plus a
// two-conv detection head.
struct DetectorNet {
  static constexpr int kConvs = 8;
  int w[kConvs];
  int b[kConvs];
};

DetectorNet detector_init(nn::ParamStore& ps, Rng& rng);
DetectorNet detector_bind(const nn::ParamStore& ps);  // resolve by name

struct Stages {
  nn::Graph::Id s0, s1, s2;  // strides 4, 8, 16
};

// x: [N,1,H,W] with H = W, a multiple of 16, values in [0,1].
Stages backbone_forward(nn::Graph& g, const DetectorNet& net, nn::Graph::Id x);

// deepest stage -> raw grid [N, 5+K, S, S]
nn::Graph::Id detect_head(nn::Graph& g, const DetectorNet& net, nn::Graph::Id deepest);

double iou(const datagen::Box& a, const datagen::Box& b);

// Greedy per-class suppression: walk detections in descending score order and
// drop any same-class box overlapping a kept one with IoU > threshold.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

// One sample's raw grid [5+K, S, S] -> thresholded, suppressed detections
// sorted by descending score. Boxes are clipped to the frame.
std::vector<Detection> decode(const nn::Tensor& grid, const DetectorConfig& cfg, int image_size);

nn::Tensor slice_sample_grid(const nn::Tensor& batch_grid, int n);

struct CellTarget {
  int sample = 0;
  int cell_x = 0, cell_y = 0;
  double tx = 0, ty = 0, tw = 0, th = 0;
  int class_id = 0;
};

// Encodes a box against its responsible cell (the one holding the center).
CellTarget encode_box(const datagen::Box& box, int sample, int class_id, int S, int image_size);

// Responsible-cell assignment for a batch; a same-cell collision keeps the
// larger-area box and bumps *tie_events.
std::vector<CellTarget> assign_cells(const std::vector<const datagen::SceneSample*>& truths,
                                     int S, int image_size, int* tie_events);

struct SupervisedLoss {
  nn::Graph::Id total = -1;
  nn::Graph::Id obj_term = -1;
  nn::Graph::Id box_term = -1;    // -1 when the batch has no boxes
  nn::Graph::Id class_term = -1;  // -1 when the batch has no boxes
  int num_targets = 0;
  int tie_events = 0;
};

// Objectness BCE over every cell + box SSE and class CE at responsible cells,
// combined with the configured weights. All truths must be source-domain.
SupervisedLoss supervised_loss(nn::Graph& g, nn::Graph::Id grid,
                               const std::vector<const datagen::SceneSample*>& truths,
                               const DetectorConfig& cfg, int image_size);

// [N,1,H,W] batch tensor from images.
nn::Tensor images_to_tensor(const std::vector<const Image*>& images);

}  // namespace forge::det
