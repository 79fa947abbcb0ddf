#pragma once

#include <vector>

#include "forge/datagen.hpp"
#include "forge/graph.hpp"
#include "forge/image.hpp"
#include "forge/rng.hpp"

namespace forge::desc {

constexpr int kCropSize = 64;   // descriptor input resolution
constexpr int kEmbedDim = 64;   // landmark embedding width D
constexpr int kAttnDim = 32;    // channel/spatial attention embedding width
constexpr int kNumStages = 3;

// Weights for the attention-divergence regularizer added to the contrastive
// base loss, plus the contrastive temperature and the stages that carry
// attention projections.
struct MarsConfig {
  double alpha_channel = 0.5;
  double alpha_spatial = 0.5;
  double tau = 0.2;
  std::vector<int> stages = {1, 2};  // deepest two stages by default
};

// Parameter ids of the descriptor network: a three-stage conv backbone where
// every stage output passes channel attention (squeeze-excitation) followed
// by spatial attention (mean/smooth-max maps -> 7x7 conv), a linear embedding
// head, and one pair of attention projections per configured stage.
struct DescriptorNet {
  static constexpr int kConvs = 6;
  int conv_w[kConvs], conv_b[kConvs];
  int se_w0[kNumStages], se_b0[kNumStages], se_w1[kNumStages], se_b1[kNumStages];
  int sp_w[kNumStages], sp_b[kNumStages];
  int head_w = -1, head_b = -1;
  int proj_c[kNumStages] = {-1, -1, -1};  // -1: stage carries no projections
  int proj_s[kNumStages] = {-1, -1, -1};
};

DescriptorNet descriptor_init(nn::ParamStore& ps, Rng& rng, const MarsConfig& cfg);
DescriptorNet descriptor_bind(const nn::ParamStore& ps);  // resolve by name

// Per-stage attention scalings captured during a forward pass.
// gamma[i]: [N,C_i] in (0,1); sigma[i]: [N,1,h_i,w_i] in (0,1).
struct AttentionState {
  nn::Graph::Id gamma[kNumStages] = {-1, -1, -1};
  nn::Graph::Id sigma[kNumStages] = {-1, -1, -1};
};

// Channel scaling factors for stage `stage` computed from feature map x.
nn::Graph::Id channel_attention(nn::Graph& g, const DescriptorNet& net, int stage,
                                nn::Graph::Id x);
// Location scaling factors computed from the channel-scaled map.
nn::Graph::Id spatial_attention(nn::Graph& g, const DescriptorNet& net, int stage,
                                nn::Graph::Id x);
// x -> x*gamma -> x*sigma, recording both scalings.
nn::Graph::Id apply_attention(nn::Graph& g, const DescriptorNet& net, int stage, nn::Graph::Id x,
                              nn::Graph::Id* gamma_out, nn::Graph::Id* sigma_out);

struct DescribeOut {
  nn::Graph::Id z = -1;  // [N,D], unit rows
  AttentionState attn;
};

// crops: [N,1,64,64] in [0,1]. Raises a numeric error naming the stage if a
// stage output stops being finite.
DescribeOut describe_forward(nn::Graph& g, const DescriptorNet& net, nn::Graph::Id crops);

struct AttnEmbed {
  nn::Graph::Id u = -1;  // [N,kAttnDim], unit rows (channel space)
  nn::Graph::Id v = -1;  // [N,kAttnDim], unit rows (spatial space)
};

// Projects one stage's attention state into its metric spaces. The stage must
// be listed in cfg.stages and carry projections in the network.
AttnEmbed embed_attention(nn::Graph& g, const DescriptorNet& net, const AttentionState& state,
                          int stage, const MarsConfig& cfg);

// Normalized-temperature cross-entropy over the 2N embeddings of N positive
// pairs; cosine similarities, self-similarity excluded. N >= 2.
nn::Graph::Id ntxent_loss(nn::Graph& g, nn::Graph::Id za, nn::Graph::Id zb, double tau);

// Sum over stages of alpha_channel * half squared distance between the unit
// channel embeddings (equal to one minus their cosine) plus the spatial
// counterpart, averaged over the batch. Exactly zero for identical inputs.
nn::Graph::Id mars_loss(nn::Graph& g, const std::vector<AttnEmbed>& ea,
                        const std::vector<AttnEmbed>& eb, const MarsConfig& cfg);

struct DescriptorLoss {
  nn::Graph::Id total = -1;
  nn::Graph::Id ntxent = -1;
  nn::Graph::Id mars = -1;  // -1 when both alphas are zero
};

// Contrastive base loss plus the attention regularizer over a batch of
// positive crop pairs. With both alphas zero the total IS the base-loss node,
// so the ablation reproduces the baseline bit for bit.
DescriptorLoss descriptor_total_loss(nn::Graph& g, const DescriptorNet& net,
                                     nn::Graph::Id crops_a, nn::Graph::Id crops_b,
                                     const MarsConfig& cfg);

// Cosine similarity of two mean-centered attention maps (any equal shapes);
// zero-variance maps score 0.
double attention_consistency(const nn::Tensor& map_a, const nn::Tensor& map_b);

struct GalleryEntry {
  int landmark_id = -1;
  std::vector<double> z;
};

struct Query {
  int landmark_id = -1;
  std::vector<double> z;
  int self_index = -1;  // gallery slot to exclude (the query itself), -1: none
};

struct RetrievalResult {
  double recall_at_1 = 0.0;
  double recall_at_5 = 0.0;
  int num_queries = 0;
};

// Cosine nearest-neighbor retrieval; recall@k counts queries whose landmark
// id appears among the k most similar gallery entries.
RetrievalResult retrieval_eval(const std::vector<GalleryEntry>& gallery,
                               const std::vector<Query>& queries);

// Square crop around a box (side = the larger box side, clamped into the
// frame), resampled to kCropSize.
Image landmark_crop(const Image& img, const datagen::Box& box);

// [N,1,64,64] batch tensor from crops, standardized per crop to zero mean and
// unit variance (a flat crop maps to all zeros). Stripping the shared
// brightness component keeps fresh embeddings from starting on the
// contrastive loss's uniform plateau.
nn::Tensor crops_to_tensor(const std::vector<Image>& crops);

}  // namespace forge::desc
