#include "forge/describe.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "forge/common.hpp"

namespace forge::desc {

using nn::Graph;
using nn::ParamStore;
using nn::Tensor;

namespace {

constexpr double kSmoothmaxBeta = 10.0;  // sharpness of the differentiable max map

struct ConvSpec {
  const char* name;
  int cin, cout, stride;
};

// 3x3 convolutions; stages are tapped after blocks 1, 3, 5 at strides 4/8/16.
constexpr ConvSpec kConvSpecs[DescriptorNet::kConvs] = {
    {"desc.conv0", 1, 16, 2},  {"desc.conv1", 16, 16, 2}, {"desc.conv2", 16, 32, 1},
    {"desc.conv3", 32, 32, 2}, {"desc.conv4", 32, 64, 1}, {"desc.conv5", 64, 64, 2},
};

constexpr int kStageChannels[kNumStages] = {16, 32, 64};
constexpr int kStageSide[kNumStages] = {kCropSize / 4, kCropSize / 8, kCropSize / 16};

int add_tensor(ParamStore& ps, Rng& rng, const std::string& name, std::vector<int> shape,
               double std) {
  Tensor w(std::move(shape));
  for (auto& x : w.v) x = rng.normal() * std;
  return ps.add(name, std::move(w));
}

void validate_mars(const MarsConfig& cfg) {
  require(cfg.alpha_channel >= 0.0 && cfg.alpha_spatial >= 0.0, "config_error",
          "attention loss weights must be >= 0");
  require(cfg.tau > 0.0, "config_error", "temperature must be > 0");
  std::vector<int> seen;
  for (int s : cfg.stages) {
    require(s >= 0 && s < kNumStages, "config_error", "attention stage out of range");
    require(std::find(seen.begin(), seen.end(), s) == seen.end(), "config_error",
            "duplicate attention stage");
    seen.push_back(s);
  }
  if (cfg.alpha_channel > 0.0 || cfg.alpha_spatial > 0.0) {
    require(!cfg.stages.empty(), "config_error",
            "active attention loss weights need at least one stage");
  }
}

}  // namespace

DescriptorNet descriptor_init(ParamStore& ps, Rng& rng, const MarsConfig& cfg) {
  validate_mars(cfg);
  DescriptorNet net;
  for (int i = 0; i < DescriptorNet::kConvs; ++i) {
    const ConvSpec& s = kConvSpecs[i];
    const double std = std::sqrt(2.0 / (s.cin * 9.0));
    net.conv_w[i] = add_tensor(ps, rng, std::string(s.name) + ".w", {s.cout, s.cin, 3, 3}, std);
    net.conv_b[i] = ps.add(std::string(s.name) + ".b", Tensor::zeros({s.cout}));
  }
  for (int i = 0; i < kNumStages; ++i) {
    const int c = kStageChannels[i];
    const int mid = c / 4;
    const std::string se = "desc.se" + std::to_string(i);
    net.se_w0[i] = add_tensor(ps, rng, se + ".l0.w", {mid, c}, std::sqrt(2.0 / c));
    net.se_b0[i] = ps.add(se + ".l0.b", Tensor::zeros({mid}));
    net.se_w1[i] = add_tensor(ps, rng, se + ".l1.w", {c, mid}, std::sqrt(2.0 / mid));
    net.se_b1[i] = ps.add(se + ".l1.b", Tensor::zeros({c}));
    const std::string sp = "desc.sp" + std::to_string(i);
    net.sp_w[i] = add_tensor(ps, rng, sp + ".w", {1, 2, 7, 7}, std::sqrt(2.0 / (2.0 * 49.0)));
    net.sp_b[i] = ps.add(sp + ".b", Tensor::zeros({1}));
  }
  net.head_w = add_tensor(ps, rng, "desc.head.w", {kEmbedDim, kStageChannels[kNumStages - 1]},
                          std::sqrt(2.0 / kStageChannels[kNumStages - 1]));
  net.head_b = ps.add("desc.head.b", Tensor::zeros({kEmbedDim}));
  for (int i = 0; i < kNumStages; ++i) {
    if (std::find(cfg.stages.begin(), cfg.stages.end(), i) == cfg.stages.end()) continue;
    const std::string mars = "desc.mars" + std::to_string(i);
    const int c = kStageChannels[i];
    const int hw = kStageSide[i] * kStageSide[i];
    net.proj_c[i] = add_tensor(ps, rng, mars + ".pc", {kAttnDim, c}, std::sqrt(1.0 / c));
    net.proj_s[i] = add_tensor(ps, rng, mars + ".ps", {kAttnDim, hw}, std::sqrt(1.0 / hw));
  }
  return net;
}

DescriptorNet descriptor_bind(const ParamStore& ps) {
  DescriptorNet net;
  auto need = [&](const std::string& name) {
    int id = ps.find(name);
    require(id >= 0, "checkpoint_error", "missing descriptor parameter: " + name);
    return id;
  };
  for (int i = 0; i < DescriptorNet::kConvs; ++i) {
    net.conv_w[i] = need(std::string(kConvSpecs[i].name) + ".w");
    net.conv_b[i] = need(std::string(kConvSpecs[i].name) + ".b");
  }
  for (int i = 0; i < kNumStages; ++i) {
    const std::string se = "desc.se" + std::to_string(i);
    net.se_w0[i] = need(se + ".l0.w");
    net.se_b0[i] = need(se + ".l0.b");
    net.se_w1[i] = need(se + ".l1.w");
    net.se_b1[i] = need(se + ".l1.b");
    const std::string sp = "desc.sp" + std::to_string(i);
    net.sp_w[i] = need(sp + ".w");
    net.sp_b[i] = need(sp + ".b");
    const std::string mars = "desc.mars" + std::to_string(i);
    net.proj_c[i] = ps.find(mars + ".pc");  // optional
    net.proj_s[i] = ps.find(mars + ".ps");
  }
  net.head_w = need("desc.head.w");
  net.head_b = need("desc.head.b");
  return net;
}

Graph::Id channel_attention(Graph& g, const DescriptorNet& net, int stage, Graph::Id x) {
  require(stage >= 0 && stage < kNumStages, "config_error", "stage out of range");
  Graph::Id pooled = g.global_avg_pool(x);
  Graph::Id mid =
      g.silu(g.linear(pooled, g.param(net.se_w0[stage]), g.param(net.se_b0[stage])));
  return g.sigmoid(g.linear(mid, g.param(net.se_w1[stage]), g.param(net.se_b1[stage])));
}

Graph::Id spatial_attention(Graph& g, const DescriptorNet& net, int stage, Graph::Id x) {
  require(stage >= 0 && stage < kNumStages, "config_error", "stage out of range");
  Graph::Id maps =
      g.concat_channels(g.channel_mean_map(x), g.channel_smoothmax_map(x, kSmoothmaxBeta));
  // Edge-replicated padding keeps a constant map constant all the way to the
  // border instead of darkening it against implicit zeros.
  Graph::Id padded = g.replicate_pad(maps, 3);
  return g.sigmoid(g.conv2d(padded, g.param(net.sp_w[stage]), g.param(net.sp_b[stage]), 1, 0));
}

Graph::Id apply_attention(Graph& g, const DescriptorNet& net, int stage, Graph::Id x,
                          Graph::Id* gamma_out, Graph::Id* sigma_out) {
  Graph::Id gamma = channel_attention(g, net, stage, x);
  Graph::Id scaled = g.scale_channels(x, gamma);
  Graph::Id sigma = spatial_attention(g, net, stage, scaled);
  if (gamma_out) *gamma_out = gamma;
  if (sigma_out) *sigma_out = sigma;
  return g.scale_spatial(scaled, sigma);
}

DescribeOut describe_forward(Graph& g, const DescriptorNet& net, Graph::Id crops) {
  {
    const Tensor& cv = g.value(crops);
    require(cv.ndim() == 4 && cv.dim(1) == 1 && cv.dim(2) == kCropSize && cv.dim(3) == kCropSize,
            "shape_error", "describe_forward: expects [N,1,64,64] crops");
  }
  DescribeOut out;
  Graph::Id x = crops;
  int stage = 0;
  for (int i = 0; i < DescriptorNet::kConvs; ++i) {
    x = g.silu(
        g.conv2d(x, g.param(net.conv_w[i]), g.param(net.conv_b[i]), kConvSpecs[i].stride, 1));
    if (i % 2 == 1) {
      x = apply_attention(g, net, stage, x, &out.attn.gamma[stage], &out.attn.sigma[stage]);
      require(g.value(x).all_finite(), "numeric_error",
              "non-finite activations at stage " + std::to_string(stage));
      ++stage;
    }
  }
  out.z = g.rows_l2_normalize(
      g.linear(g.global_avg_pool(x), g.param(net.head_w), g.param(net.head_b)));
  return out;
}

AttnEmbed embed_attention(Graph& g, const DescriptorNet& net, const AttentionState& state,
                          int stage, const MarsConfig& cfg) {
  require(stage >= 0 && stage < kNumStages, "config_error", "stage out of range");
  require(std::find(cfg.stages.begin(), cfg.stages.end(), stage) != cfg.stages.end(),
          "config_error", "stage carries no attention projections in this configuration");
  require(net.proj_c[stage] >= 0 && net.proj_s[stage] >= 0, "checkpoint_error",
          "attention projections missing for stage " + std::to_string(stage));
  require(state.gamma[stage] >= 0 && state.sigma[stage] >= 0, "shape_error",
          "attention state missing for stage " + std::to_string(stage));
  AttnEmbed e;
  e.u = g.rows_l2_normalize(g.matmul_nt(state.gamma[stage], g.param(net.proj_c[stage])));
  const int n = g.value(state.sigma[stage]).dim(0);
  const int hw = g.value(state.sigma[stage]).dim(2) * g.value(state.sigma[stage]).dim(3);
  Graph::Id flat = g.reshape(state.sigma[stage], {n, hw});
  e.v = g.rows_l2_normalize(g.matmul_nt(flat, g.param(net.proj_s[stage])));
  return e;
}

Graph::Id ntxent_loss(Graph& g, Graph::Id za, Graph::Id zb, double tau) {
  require(tau > 0.0, "config_error", "temperature must be > 0");
  const int n = g.value(za).dim(0);
  {
    const Tensor& av = g.value(za);
    const Tensor& bv = g.value(zb);
    require(av.ndim() == 2 && bv.ndim() == 2 && av.dim(0) == bv.dim(0) && av.dim(1) == bv.dim(1),
            "shape_error", "ntxent_loss: embedding batches must match");
  }
  require(n >= 2, "batch_error", "contrastive loss needs at least two pairs");
  const int m = 2 * n;
  Graph::Id z = g.rows_l2_normalize(g.concat_rows(za, zb));
  Graph::Id s = g.scale(g.matmul_nt(z, z), 1.0 / tau);
  Tensor diag_mask = Tensor::zeros({m, m});
  for (int i = 0; i < m; ++i) diag_mask[static_cast<int64_t>(i) * m + i] = -1e9;
  Graph::Id lse = g.logsumexp_rows(g.add_const(s, diag_mask));
  std::vector<int64_t> pos;
  pos.reserve(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const int partner = i < n ? i + n : i - n;
    pos.push_back(static_cast<int64_t>(i) * m + partner);
  }
  Tensor w({m});
  std::fill(w.v.begin(), w.v.end(), 1.0 / m);
  Graph::Id pos_part = g.dot_const(g.gather(s, std::move(pos)), std::move(w));
  return g.sub(g.mean_all(lse), pos_part);
}

Graph::Id mars_loss(Graph& g, const std::vector<AttnEmbed>& ea, const std::vector<AttnEmbed>& eb,
                    const MarsConfig& cfg) {
  require(cfg.alpha_channel >= 0.0 && cfg.alpha_spatial >= 0.0, "config_error",
          "attention loss weights must be >= 0");
  require(ea.size() == eb.size(), "shape_error", "attention embedding lists must pair up");
  Graph::Id acc = -1;
  auto add_term = [&](Graph::Id a, Graph::Id b, double alpha) {
    if (alpha <= 0.0) return;
    const int n = g.value(a).dim(0);
    // Half squared distance between unit rows equals 1 - cosine and is
    // exactly zero for identical inputs.
    Graph::Id term = g.scale(g.sum_all(g.square(g.sub(a, b))), 0.5 * alpha / n);
    acc = acc < 0 ? term : g.add(acc, term);
  };
  for (size_t i = 0; i < ea.size(); ++i) {
    add_term(ea[i].u, eb[i].u, cfg.alpha_channel);
    add_term(ea[i].v, eb[i].v, cfg.alpha_spatial);
  }
  if (acc < 0) acc = g.input(Tensor::zeros({1}));
  return acc;
}

DescriptorLoss descriptor_total_loss(Graph& g, const DescriptorNet& net, Graph::Id crops_a,
                                     Graph::Id crops_b, const MarsConfig& cfg) {
  validate_mars(cfg);
  DescribeOut a = describe_forward(g, net, crops_a);
  DescribeOut b = describe_forward(g, net, crops_b);
  DescriptorLoss out;
  out.ntxent = ntxent_loss(g, a.z, b.z, cfg.tau);
  out.total = out.ntxent;
  if (cfg.alpha_channel > 0.0 || cfg.alpha_spatial > 0.0) {
    std::vector<AttnEmbed> ea, eb;
    for (int stage : cfg.stages) {
      ea.push_back(embed_attention(g, net, a.attn, stage, cfg));
      eb.push_back(embed_attention(g, net, b.attn, stage, cfg));
    }
    out.mars = mars_loss(g, ea, eb, cfg);
    out.total = g.add(out.ntxent, out.mars);
  }
  return out;
}

double attention_consistency(const Tensor& map_a, const Tensor& map_b) {
  require(map_a.shape == map_b.shape && map_a.numel() > 0, "shape_error",
          "consistency score needs two equally shaped maps");
  const int64_t n = map_a.numel();
  double ma = 0.0, mb = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    ma += map_a[i];
    mb += map_b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double a = map_a[i] - ma;
    const double b = map_b[i] - mb;
    dot += a * b;
    na += a * a;
    nb += b * b;
  }
  if (na <= 1e-24 || nb <= 1e-24) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

RetrievalResult retrieval_eval(const std::vector<GalleryEntry>& gallery,
                               const std::vector<Query>& queries) {
  require(!gallery.empty(), "eval_error", "retrieval needs a non-empty gallery");
  require(!queries.empty(), "eval_error", "retrieval needs at least one query");
  const size_t dim = gallery[0].z.size();
  for (const auto& e : gallery) {
    require(e.z.size() == dim, "shape_error", "gallery embedding widths differ");
  }
  auto cosine = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t k = 0; k < dim; ++k) {
      dot += a[k] * b[k];
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    return dot / (std::max(std::sqrt(na), 1e-12) * std::max(std::sqrt(nb), 1e-12));
  };

  int hit1 = 0, hit5 = 0;
  for (const auto& q : queries) {
    require(q.z.size() == dim, "shape_error", "query embedding width differs from gallery");
    std::vector<std::pair<double, int>> ranked;
    for (size_t j = 0; j < gallery.size(); ++j) {
      if (static_cast<int>(j) == q.self_index) continue;
      ranked.emplace_back(cosine(q.z, gallery[j].z), static_cast<int>(j));
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    bool in1 = false, in5 = false;
    for (size_t r = 0; r < ranked.size() && r < 5; ++r) {
      if (gallery[static_cast<size_t>(ranked[r].second)].landmark_id == q.landmark_id) {
        in5 = true;
        if (r == 0) in1 = true;
        break;
      }
    }
    hit1 += in1 ? 1 : 0;
    hit5 += in5 ? 1 : 0;
  }
  RetrievalResult res;
  res.num_queries = static_cast<int>(queries.size());
  res.recall_at_1 = static_cast<double>(hit1) / res.num_queries;
  res.recall_at_5 = static_cast<double>(hit5) / res.num_queries;
  return res;
}

Image landmark_crop(const Image& img, const datagen::Box& box) {
  require(img.w >= 8 && img.h >= 8, "size_error", "image too small to crop");
  double side = std::max(box.x1 - box.x0, box.y1 - box.y0);
  side = std::max(side, 8.0);
  side = std::min(side, static_cast<double>(std::min(img.w, img.h)));
  double x0 = std::clamp(box.cx() - side / 2.0, 0.0, img.w - side);
  double y0 = std::clamp(box.cy() - side / 2.0, 0.0, img.h - side);
  return crop_resize(img, x0, y0, x0 + side, y0 + side, kCropSize, kCropSize);
}

Tensor crops_to_tensor(const std::vector<Image>& crops) {
  require(!crops.empty(), "shape_error", "crop batch is empty");
  const int n = static_cast<int>(crops.size());
  const int64_t plane = static_cast<int64_t>(kCropSize) * kCropSize;
  Tensor out({n, 1, kCropSize, kCropSize});
  for (int i = 0; i < n; ++i) {
    const Image& c = crops[static_cast<size_t>(i)];
    require(c.h == kCropSize && c.w == kCropSize, "shape_error", "crops must be 64x64");
    // Per-crop standardization. Raw terrain crops share most of their energy
    // in a common brightness component; feeding that to the embedding stack
    // collapses the contrastive loss onto its uniform plateau, so remove the
    // mean and rescale to unit variance (flat crops become all zeros).
    double mean = 0.0;
    for (double p : c.px) mean += p;
    mean /= static_cast<double>(plane);
    double var = 0.0;
    for (double p : c.px) var += (p - mean) * (p - mean);
    const double scale = 1.0 / std::max(std::sqrt(var / static_cast<double>(plane)), 1e-6);
    for (int64_t k = 0; k < plane; ++k) {
      out.v[i * plane + k] = (c.px[static_cast<size_t>(k)] - mean) * scale;
    }
  }
  return out;
}

}  // namespace forge::desc
