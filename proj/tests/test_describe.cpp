#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "forge/common.hpp"
#include "forge/datagen.hpp"
#include "forge/describe.hpp"
#include "forge/image.hpp"
#include "testutil.hpp"

using namespace forge::desc;
using forge::Error;
using forge::Image;
using forge::Rng;
using forge::datagen::Box;
using forge::nn::Graph;
using forge::nn::ParamStore;
using forge::nn::Tensor;

namespace {

constexpr double kGradTol = 1e-4;

void zero_params(ParamStore& ps) {
  for (int p = 0; p < ps.size(); ++p) {
    std::fill(ps.value(p).v.begin(), ps.value(p).v.end(), 0.0);
  }
}

Tensor random_crops(int n, Rng& rng) {
  Tensor t({n, 1, kCropSize, kCropSize});
  for (auto& x : t.v) x = rng.uniform();
  return t;
}

// Unit row along axis `axis` repeated n times.
Tensor axis_rows(int n, int dim, int axis, double sign = 1.0) {
  Tensor t = Tensor::zeros({n, dim});
  for (int i = 0; i < n; ++i) t[static_cast<int64_t>(i) * dim + axis] = sign;
  return t;
}

double row_norm(const Tensor& t, int row) {
  const int d = t.dim(1);
  double acc = 0.0;
  for (int k = 0; k < d; ++k) {
    const double x = t[static_cast<int64_t>(row) * d + k];
    acc += x * x;
  }
  return std::sqrt(acc);
}

}  // namespace

TEST_SUITE("describe") {

TEST_CASE("initialization registers every stage and binding resolves the same slots") {
  ParamStore ps;
  Rng rng(7);
  MarsConfig cfg;  // stages {1,2}
  DescriptorNet net = descriptor_init(ps, rng, cfg);
  // 6 conv pairs + 3 stages x (4 SE + 2 spatial) + head pair + 2 stages x 2 projections.
  CHECK(ps.size() == 12 + 18 + 2 + 4);
  CHECK(net.proj_c[0] == -1);
  CHECK(net.proj_s[0] == -1);
  CHECK(net.proj_c[1] >= 0);
  CHECK(net.proj_s[2] >= 0);

  DescriptorNet bound = descriptor_bind(ps);
  for (int i = 0; i < DescriptorNet::kConvs; ++i) {
    CHECK(bound.conv_w[i] == net.conv_w[i]);
    CHECK(bound.conv_b[i] == net.conv_b[i]);
  }
  for (int i = 0; i < kNumStages; ++i) {
    CHECK(bound.se_w0[i] == net.se_w0[i]);
    CHECK(bound.se_b1[i] == net.se_b1[i]);
    CHECK(bound.sp_w[i] == net.sp_w[i]);
    CHECK(bound.proj_c[i] == net.proj_c[i]);
    CHECK(bound.proj_s[i] == net.proj_s[i]);
  }
  CHECK(bound.head_w == net.head_w);

  // Same seed, same draws.
  ParamStore ps2;
  Rng rng2(7);
  descriptor_init(ps2, rng2, cfg);
  REQUIRE(ps2.size() == ps.size());
  for (int p = 0; p < ps.size(); ++p) {
    CHECK(ps.value(p).v == ps2.value(p).v);
  }

  ParamStore empty;
  CHECK_THROWS_AS(descriptor_bind(empty), Error);

  MarsConfig bad;
  bad.stages = {};  // active weights but nowhere to attach them
  CHECK_THROWS_AS(descriptor_init(empty, rng, bad), Error);
}

TEST_CASE("zero parameters open every attention gate exactly half way") {
  ParamStore ps;
  Rng rng(11);
  DescriptorNet net = descriptor_init(ps, rng, MarsConfig{});
  zero_params(ps);
  Graph g(&ps);
  Rng data_rng(3);
  Graph::Id x = g.input(testutil::random_tensor({2, 32, 8, 8}, data_rng));
  const Tensor gamma = g.value(channel_attention(g, net, 1, x));
  for (double v : gamma.v) CHECK(v == 0.5);
  const Tensor sigma = g.value(spatial_attention(g, net, 1, x));
  CHECK(sigma.shape == std::vector<int>{2, 1, 8, 8});
  for (double v : sigma.v) CHECK(v == 0.5);
}

TEST_CASE("attention scalings stay strictly inside the unit interval") {
  ParamStore ps;
  Rng rng(13);
  DescriptorNet net = descriptor_init(ps, rng, MarsConfig{});
  Graph g(&ps);
  Rng data_rng(5);
  Graph::Id x = g.input(testutil::random_tensor({3, 16, 6, 6}, data_rng));
  Graph::Id gamma = -1, sigma = -1;
  Graph::Id y = apply_attention(g, net, 0, x, &gamma, &sigma);
  const Tensor& gv = g.value(gamma);
  for (double v : gv.v) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  const Tensor& sv = g.value(sigma);
  for (double v : sv.v) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK(g.value(y).same_shape(g.value(x)));
}

TEST_CASE("a constant feature map earns a spatially constant attention map") {
  ParamStore ps;
  Rng rng(17);
  DescriptorNet net = descriptor_init(ps, rng, MarsConfig{});
  Graph g(&ps);
  Tensor flat({1, 32, 8, 8});
  std::fill(flat.v.begin(), flat.v.end(), 0.37);
  Graph::Id sigma = spatial_attention(g, net, 1, g.input(std::move(flat)));
  const Tensor& sv = g.value(sigma);
  for (double v : sv.v) CHECK(v == sv[0]);
}

TEST_CASE("attention blocks pass finite-difference checks") {
  // A compact store holding only the fields one stage needs keeps the check
  // exhaustive.
  ParamStore ps;
  Rng rng(19);
  const int stage_c = 16;
  DescriptorNet net;
  int fmap = ps.add("fmap", testutil::random_tensor({2, stage_c, 5, 5}, rng, 0.6));
  net.se_w0[0] = ps.add("se.w0", testutil::random_tensor({4, stage_c}, rng, 0.4));
  net.se_b0[0] = ps.add("se.b0", testutil::random_tensor({4}, rng, 0.1));
  net.se_w1[0] = ps.add("se.w1", testutil::random_tensor({stage_c, 4}, rng, 0.4));
  net.se_b1[0] = ps.add("se.b1", testutil::random_tensor({stage_c}, rng, 0.1));
  net.sp_w[0] = ps.add("sp.w", testutil::random_tensor({1, 2, 7, 7}, rng, 0.2));
  net.sp_b[0] = ps.add("sp.b", testutil::random_tensor({1}, rng, 0.1));

  const double err = testutil::max_grad_rel_err(ps, [&](Graph& g) {
    Graph::Id y = apply_attention(g, net, 0, g.param(fmap), nullptr, nullptr);
    return g.sum_all(g.square(y));
  });
  CHECK(err < kGradTol);
}

TEST_CASE("descriptor forward produces unit-length embeddings deterministically") {
  ParamStore ps;
  Rng rng(23);
  DescriptorNet net = descriptor_init(ps, rng, MarsConfig{});
  Rng data_rng(29);
  const Tensor crops = random_crops(3, data_rng);

  Tensor z1, z2;
  {
    Graph g(&ps);
    DescribeOut out = describe_forward(g, net, g.input(crops));
    z1 = g.value(out.z);
    for (int i = 0; i < kNumStages; ++i) {
      CHECK(out.attn.gamma[i] >= 0);
      CHECK(out.attn.sigma[i] >= 0);
    }
    CHECK(g.value(out.attn.gamma[0]).shape == std::vector<int>{3, 16});
    CHECK(g.value(out.attn.sigma[0]).shape == std::vector<int>{3, 1, 16, 16});
    CHECK(g.value(out.attn.gamma[2]).shape == std::vector<int>{3, 64});
    CHECK(g.value(out.attn.sigma[2]).shape == std::vector<int>{3, 1, 4, 4});
  }
  {
    Graph g(&ps);
    z2 = g.value(describe_forward(g, net, g.input(crops)).z);
  }
  CHECK(z1.shape == std::vector<int>{3, kEmbedDim});
  CHECK(z1.v == z2.v);
  for (int i = 0; i < 3; ++i) CHECK(row_norm(z1, i) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("different crops land on different embeddings") {
  for (uint64_t seed : {101ULL, 102ULL, 103ULL}) {
    ParamStore ps;
    Rng rng(seed);
    DescriptorNet net = descriptor_init(ps, rng, MarsConfig{});
    Rng data_rng(seed + 7);
    Graph g(&ps);
    const Tensor z = g.value(describe_forward(g, net, g.input(random_crops(2, data_rng))).z);
    double dist = 0.0;
    for (int k = 0; k < kEmbedDim; ++k) {
      const double d = z[k] - z[kEmbedDim + k];
      dist += d * d;
    }
    CHECK(dist > 1e-8);
  }
}

TEST_CASE("descriptor forward rejects bad inputs and names the failing stage") {
  ParamStore ps;
  Rng rng(31);
  DescriptorNet net = descriptor_init(ps, rng, MarsConfig{});
  Graph g(&ps);
  CHECK_THROWS_AS(describe_forward(g, net, g.input(Tensor::zeros({2, 1, 32, 32}))), Error);
  CHECK_THROWS_AS(describe_forward(g, net, g.input(Tensor::zeros({2, 3, 64, 64}))), Error);

  Tensor poisoned = Tensor::zeros({1, 1, kCropSize, kCropSize});
  poisoned[5] = std::numeric_limits<double>::quiet_NaN();
  Graph g2(&ps);
  bool caught = false;
  try {
    describe_forward(g2, net, g2.input(std::move(poisoned)));
  } catch (const Error& e) {
    caught = true;
    CHECK(std::string(e.code()) == "numeric_error");
    CHECK(std::string(e.what()).find("stage 0") != std::string::npos);
  }
  CHECK(caught);
}

TEST_CASE("attention embeddings are unit rows and demand configured stages") {
  ParamStore ps;
  Rng rng(37);
  MarsConfig cfg;
  DescriptorNet net = descriptor_init(ps, rng, cfg);
  Rng data_rng(41);
  Graph g(&ps);
  DescribeOut out = describe_forward(g, net, g.input(random_crops(2, data_rng)));
  AttnEmbed e = embed_attention(g, net, out.attn, 1, cfg);
  const Tensor u = g.value(e.u);
  const Tensor v = g.value(e.v);
  CHECK(u.shape == std::vector<int>{2, kAttnDim});
  CHECK(v.shape == std::vector<int>{2, kAttnDim});
  for (int i = 0; i < 2; ++i) {
    CHECK(row_norm(u, i) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(row_norm(v, i) == doctest::Approx(1.0).epsilon(1e-9));
  }
  // Stage 0 carries no projections under the default configuration.
  CHECK_THROWS_AS(embed_attention(g, net, out.attn, 0, cfg), Error);
}

TEST_CASE("attention embedding gradients pass a finite-difference check") {
  ParamStore ps;
  Rng rng(43);
  MarsConfig cfg;
  DescriptorNet net = descriptor_init(ps, rng, cfg);
  const int c = 32, side = 8;  // stage 1 widths
  int pg = ps.add("probe.gamma", testutil::random_tensor({3, c}, rng, 0.3));
  int psig = ps.add("probe.sigma", testutil::random_tensor({3, 1, side, side}, rng, 0.3));
  Rng pick_rng(47);
  Tensor target = testutil::random_tensor({3, kAttnDim}, pick_rng, 0.5);

  const double err = testutil::max_grad_rel_err_sampled(
      ps,
      [&](Graph& g) {
        AttentionState st;
        st.gamma[1] = g.param(pg);
        st.sigma[1] = g.param(psig);
        AttnEmbed e = embed_attention(g, net, st, 1, cfg);
        Graph::Id tgt = g.input(target);
        return g.add(g.sum_all(g.square(g.sub(e.u, tgt))),
                     g.sum_all(g.square(g.sub(e.v, tgt))));
      },
      8, 53, 1e-5, {pg, psig, net.proj_c[1], net.proj_s[1]});
  CHECK(err < kGradTol);
}

TEST_CASE("contrastive loss hits its closed forms") {
  // All four embeddings identical: every similarity ties, so each row's loss
  // is log(batch size minus one).
  for (double tau : {0.07, 0.2, 1.0}) {
    Graph g(nullptr);
    Graph::Id za = g.input(axis_rows(2, 8, 0));
    Graph::Id zb = g.input(axis_rows(2, 8, 0));
    const double loss = g.value(ntxent_loss(g, za, zb, tau))[0];
    CHECK(loss == doctest::Approx(std::log(3.0)).epsilon(1e-9));
  }

  // Orthogonal pairs at tau = 0.1: positives score 10, the two negatives 0.
  {
    Graph g(nullptr);
    Tensor a = Tensor::zeros({2, 8});
    a[0] = 1.0;       // row 0 -> e0
    a[8 + 1] = 1.0;   // row 1 -> e1
    Graph::Id za = g.input(a);
    Graph::Id zb = g.input(a);
    const double loss = g.value(ntxent_loss(g, za, zb, 0.1))[0];
    const double expect = std::log(1.0 + 2.0 * std::exp(-10.0));
    CHECK(loss == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("contrastive loss normalizes, stays non-negative, and respects symmetry") {
  Rng rng(59);
  const Tensor a = testutil::random_tensor({4, 8}, rng);
  const Tensor b = testutil::random_tensor({4, 8}, rng);

  auto eval = [&](const Tensor& x, const Tensor& y, double tau) {
    Graph g(nullptr);
    return g.value(ntxent_loss(g, g.input(x), g.input(y), tau))[0];
  };

  const double base = eval(a, b, 0.2);
  CHECK(base > 0.0);

  // Row-wise rescaling is absorbed by the internal normalization.
  Tensor a_scaled = a;
  for (auto& x : a_scaled.v) x *= 3.7;
  CHECK(eval(a_scaled, b, 0.2) == doctest::Approx(base).epsilon(1e-9));

  // Reordering the pairs leaves the mean untouched.
  Tensor a_perm({4, 8}), b_perm({4, 8});
  const int perm[4] = {2, 0, 3, 1};
  for (int i = 0; i < 4; ++i) {
    for (int k = 0; k < 8; ++k) {
      a_perm[static_cast<int64_t>(i) * 8 + k] = a[static_cast<int64_t>(perm[i]) * 8 + k];
      b_perm[static_cast<int64_t>(i) * 8 + k] = b[static_cast<int64_t>(perm[i]) * 8 + k];
    }
  }
  CHECK(eval(a_perm, b_perm, 0.2) == doctest::Approx(base).epsilon(1e-12));

  // Swapping the two views of every pair is symmetric by construction.
  CHECK(eval(b, a, 0.2) == doctest::Approx(base).epsilon(1e-12));

  Graph g(nullptr);
  CHECK_THROWS_AS(ntxent_loss(g, g.input(testutil::random_tensor({1, 8}, rng)),
                              g.input(testutil::random_tensor({1, 8}, rng)), 0.2),
                  Error);
  CHECK_THROWS_AS(ntxent_loss(g, g.input(testutil::random_tensor({2, 8}, rng)),
                              g.input(testutil::random_tensor({3, 8}, rng)), 0.2),
                  Error);
  CHECK_THROWS_AS(ntxent_loss(g, g.input(a), g.input(b), 0.0), Error);
}

TEST_CASE("contrastive loss matches finite differences") {
  ParamStore ps;
  Rng rng(61);
  int pa = ps.add("za", testutil::random_tensor({3, 6}, rng));
  int pb = ps.add("zb", testutil::random_tensor({3, 6}, rng));
  const double err = testutil::max_grad_rel_err(ps, [&](Graph& g) {
    return ntxent_loss(g, g.param(pa), g.param(pb), 0.2);
  });
  CHECK(err < kGradTol);
  (void)pa;
  (void)pb;
}

TEST_CASE("attention divergence is zero on agreement and two on reversal") {
  Graph g(nullptr);
  MarsConfig cfg;
  cfg.alpha_channel = 1.0;
  cfg.alpha_spatial = 0.0;
  cfg.stages = {1};

  AttnEmbed same;
  same.u = g.input(axis_rows(4, kAttnDim, 2));
  same.v = g.input(axis_rows(4, kAttnDim, 3));
  CHECK(g.value(mars_loss(g, {same}, {same}, cfg))[0] == 0.0);

  AttnEmbed pos, neg;
  pos.u = g.input(axis_rows(4, kAttnDim, 0, 1.0));
  pos.v = g.input(axis_rows(4, kAttnDim, 0, 1.0));
  neg.u = g.input(axis_rows(4, kAttnDim, 0, -1.0));
  neg.v = g.input(axis_rows(4, kAttnDim, 0, -1.0));
  CHECK(g.value(mars_loss(g, {pos}, {neg}, cfg))[0] == 2.0);

  // The spatial weight alone must see only v.
  MarsConfig sp_only = cfg;
  sp_only.alpha_channel = 0.0;
  sp_only.alpha_spatial = 1.0;
  AttnEmbed mixed = pos;
  mixed.u = g.input(axis_rows(4, kAttnDim, 5));  // u disagrees, v agrees
  CHECK(g.value(mars_loss(g, {mixed}, {pos}, sp_only))[0] == 0.0);

  // Both weights zero: a plain zero node, no error.
  MarsConfig off = cfg;
  off.alpha_channel = 0.0;
  off.alpha_spatial = 0.0;
  CHECK(g.value(mars_loss(g, {pos}, {neg}, off))[0] == 0.0);
}

TEST_CASE("attention divergence scales linearly in its weights") {
  Rng rng(67);
  auto embed = [&](Graph& g) {
    AttnEmbed e;
    e.u = g.rows_l2_normalize(g.input(testutil::random_tensor({3, kAttnDim}, rng)));
    e.v = g.rows_l2_normalize(g.input(testutil::random_tensor({3, kAttnDim}, rng)));
    return e;
  };
  Graph g(nullptr);
  std::vector<AttnEmbed> ea = {embed(g), embed(g)};
  std::vector<AttnEmbed> eb = {embed(g), embed(g)};

  auto eval = [&](double ac, double as) {
    MarsConfig cfg;
    cfg.alpha_channel = ac;
    cfg.alpha_spatial = as;
    cfg.stages = {1, 2};
    return g.value(mars_loss(g, ea, eb, cfg))[0];
  };
  const double c1 = eval(1.0, 0.0);
  const double s1 = eval(0.0, 1.0);
  CHECK(eval(2.0, 0.0) == doctest::Approx(2.0 * c1).epsilon(1e-12));
  CHECK(eval(0.5, 0.5) == doctest::Approx(0.5 * c1 + 0.5 * s1).epsilon(1e-12));
  CHECK(c1 >= 0.0);
  CHECK(s1 >= 0.0);
}

TEST_CASE("attention divergence matches finite differences") {
  ParamStore ps;
  Rng rng(71);
  int ua = ps.add("ua", testutil::random_tensor({3, 8}, rng));
  int va = ps.add("va", testutil::random_tensor({3, 8}, rng));
  int ub = ps.add("ub", testutil::random_tensor({3, 8}, rng));
  int vb = ps.add("vb", testutil::random_tensor({3, 8}, rng));
  MarsConfig cfg;
  cfg.stages = {0};
  const double err = testutil::max_grad_rel_err(ps, [&](Graph& g) {
    // Normalization inside the builder mirrors how stage embeddings arrive.
    AttnEmbed ea{g.rows_l2_normalize(g.param(ua)), g.rows_l2_normalize(g.param(va))};
    AttnEmbed eb{g.rows_l2_normalize(g.param(ub)), g.rows_l2_normalize(g.param(vb))};
    return mars_loss(g, {ea}, {eb}, cfg);
  });
  CHECK(err < kGradTol);
}

TEST_CASE("with the regularizer disabled the total is the base loss itself") {
  Rng data_rng(73);
  const Tensor crops_a = random_crops(2, data_rng);
  const Tensor crops_b = random_crops(2, data_rng);

  MarsConfig off;
  off.alpha_channel = 0.0;
  off.alpha_spatial = 0.0;

  ParamStore ps;
  Rng rng(79);
  DescriptorNet net = descriptor_init(ps, rng, off);
  Graph g(&ps);
  DescriptorLoss loss = descriptor_total_loss(g, net, g.input(crops_a), g.input(crops_b), off);
  CHECK(loss.total == loss.ntxent);  // the same node, not merely the same value
  CHECK(loss.mars == -1);

  // A store initialized with projection stages present gives bit-identical
  // totals when the weights are zero, because the extra parameters are drawn
  // after all shared ones.
  MarsConfig off_with_stages = off;
  off_with_stages.stages = {1, 2};
  ParamStore ps2;
  Rng rng2(79);
  DescriptorNet net2 = descriptor_init(ps2, rng2, off_with_stages);
  Graph g2(&ps2);
  DescriptorLoss loss2 =
      descriptor_total_loss(g2, net2, g2.input(crops_a), g2.input(crops_b), off_with_stages);
  CHECK(g2.value(loss2.total)[0] == g.value(loss.total)[0]);
}

TEST_CASE("full descriptor loss adds the divergence on top of the base loss") {
  ParamStore ps;
  Rng rng(83);
  MarsConfig cfg;
  DescriptorNet net = descriptor_init(ps, rng, cfg);
  Rng data_rng(89);
  Graph g(&ps);
  DescriptorLoss loss = descriptor_total_loss(g, net, g.input(random_crops(2, data_rng)),
                                              g.input(random_crops(2, data_rng)), cfg);
  REQUIRE(loss.mars >= 0);
  const double total = g.value(loss.total)[0];
  const double base = g.value(loss.ntxent)[0];
  const double mars = g.value(loss.mars)[0];
  CHECK(total == base + mars);
  CHECK(mars >= 0.0);
  CHECK(total >= base);
  CHECK(std::isfinite(total));

  MarsConfig bad = cfg;
  bad.stages = {};
  Graph g2(&ps);
  CHECK_THROWS_AS(descriptor_total_loss(g2, net, g2.input(random_crops(2, data_rng)),
                                        g2.input(random_crops(2, data_rng)), bad),
                  Error);
}

TEST_CASE("full descriptor loss gradients pass a sampled finite-difference check") {
  ParamStore ps;
  Rng rng(97);
  MarsConfig cfg;
  cfg.stages = {1};  // one stage keeps the probe affordable
  DescriptorNet net = descriptor_init(ps, rng, cfg);
  Rng data_rng(101);
  int ca = ps.add("probe.crops_a", random_crops(2, data_rng));
  int cb = ps.add("probe.crops_b", random_crops(2, data_rng));

  const std::vector<int> probes = {net.conv_w[0], net.conv_b[2], net.se_w1[1], net.sp_w[1],
                                   net.head_w,    net.proj_c[1], net.proj_s[1], ca, cb};
  const double err = testutil::max_grad_rel_err_sampled(
      ps,
      [&](Graph& g) {
        return descriptor_total_loss(g, net, g.param(ca), g.param(cb), cfg).total;
      },
      3, 103, 1e-5, probes);
  CHECK(err < kGradTol);
}

TEST_CASE("map agreement scores one, minus one, and zero where it should") {
  Rng rng(107);
  Tensor a = testutil::random_tensor({1, 1, 8, 8}, rng);
  CHECK(attention_consistency(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  // Positive affine remaps preserve the score; reflections about the mean
  // negate it.
  Tensor shifted = a;
  for (auto& x : shifted.v) x = 2.0 * x + 5.0;
  CHECK(attention_consistency(a, shifted) == doctest::Approx(1.0).epsilon(1e-12));
  Tensor negated = a;
  for (auto& x : negated.v) x = -x;
  CHECK(attention_consistency(a, negated) == doctest::Approx(-1.0).epsilon(1e-12));

  Tensor flat({1, 1, 8, 8});
  std::fill(flat.v.begin(), flat.v.end(), 0.25);
  CHECK(attention_consistency(a, flat) == 0.0);
  CHECK(attention_consistency(flat, flat) == 0.0);

  CHECK_THROWS_AS(attention_consistency(a, Tensor::zeros({1, 1, 4, 4})), Error);

  // Independent maps hover near zero.
  int small = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    Tensor x = testutil::random_tensor({1, 1, 8, 8}, rng);
    Tensor y = testutil::random_tensor({1, 1, 8, 8}, rng);
    if (std::abs(attention_consistency(x, y)) < 0.5) ++small;
  }
  CHECK(small >= trials - 4);
}

TEST_CASE("retrieval scoring ranks by cosine and excludes the query slot") {
  std::vector<GalleryEntry> gallery;
  auto unit = [](int axis) {
    std::vector<double> z(8, 0.0);
    z[static_cast<size_t>(axis)] = 1.0;
    return z;
  };
  for (int i = 0; i < 3; ++i) gallery.push_back({i, unit(i)});

  std::vector<Query> qs;
  for (int i = 0; i < 3; ++i) qs.push_back({i, unit(i), -1});
  RetrievalResult r = retrieval_eval(gallery, qs);
  CHECK(r.recall_at_1 == 1.0);
  CHECK(r.recall_at_5 == 1.0);
  CHECK(r.num_queries == 3);

  // One view per landmark and self-exclusion: no correct candidate remains.
  std::vector<Query> self_qs;
  for (int i = 0; i < 3; ++i) self_qs.push_back({i, unit(i), i});
  RetrievalResult r2 = retrieval_eval(gallery, self_qs);
  CHECK(r2.recall_at_1 == 0.0);
  CHECK(r2.recall_at_5 == 0.0);

  // Ties resolve by gallery order, deterministically: the query's second
  // view ties with a decoy at similarity one, and the decoy sits earlier.
  std::vector<GalleryEntry> tied = {{7, unit(0)}, {8, unit(0)}, {8, unit(0)}};
  std::vector<Query> tq = {{8, unit(0), 1}};
  RetrievalResult r3 = retrieval_eval(tied, tq);
  CHECK(r3.recall_at_1 == 0.0);  // slot 0 (landmark 7) wins the tie
  CHECK(r3.recall_at_5 == 1.0);  // the remaining view of landmark 8 ranks second

  CHECK_THROWS_AS(retrieval_eval({}, qs), Error);
  CHECK_THROWS_AS(retrieval_eval(gallery, {}), Error);
}

TEST_CASE("retrieval on random embeddings sits at the permutation baseline") {
  Rng rng(109);
  const int landmarks = 8, views = 4, dim = 16;
  int hits = 0, total = 0;
  double r5_acc = 0.0;
  const int trials = 250;
  for (int t = 0; t < trials; ++t) {
    std::vector<GalleryEntry> gallery;
    for (int l = 0; l < landmarks; ++l) {
      for (int v = 0; v < views; ++v) {
        std::vector<double> z(dim);
        for (auto& x : z) x = rng.normal();
        gallery.push_back({l, std::move(z)});
      }
    }
    std::vector<Query> qs;
    for (size_t j = 0; j < gallery.size(); ++j) {
      qs.push_back({gallery[j].landmark_id, gallery[j].z, static_cast<int>(j)});
    }
    RetrievalResult r = retrieval_eval(gallery, qs);
    hits += static_cast<int>(std::lround(r.recall_at_1 * r.num_queries));
    total += r.num_queries;
    r5_acc += r.recall_at_5;
    CHECK(r.recall_at_5 >= r.recall_at_1);
  }
  // Chance level: (views-1)/(gallery-1) = 3/31.
  const double rate = static_cast<double>(hits) / total;
  CHECK(rate == doctest::Approx(3.0 / 31.0).epsilon(0.2));
  // Recall@5 chance level: 1 - C(28,5)/C(31,5) ~= 0.4026.
  CHECK(r5_acc / trials == doctest::Approx(0.4026).epsilon(0.08));
}

TEST_CASE("landmark crops are square windows resampled to the working size") {
  Image img(96, 128);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) img.at(y, x) = (y + 2.0 * x) / 400.0;
  }
  Box box{40.0, 30.0, 72.0, 54.0};  // 32x24 -> side 32
  Image crop = landmark_crop(img, box);
  REQUIRE(crop.h == kCropSize);
  REQUIRE(crop.w == kCropSize);
  // The crop center tracks the box center on a smooth ramp.
  CHECK(crop.at(kCropSize / 2, kCropSize / 2) ==
        doctest::Approx(img.at(42, 56)).epsilon(0.05));

  // A constant image stays constant through resampling.
  Image flat(64, 64);
  std::fill(flat.px.begin(), flat.px.end(), 0.6);
  Image flat_crop = landmark_crop(flat, Box{10.0, 10.0, 30.0, 26.0});
  for (double v : flat_crop.px) CHECK(v == doctest::Approx(0.6).epsilon(1e-12));

  // Boxes hanging over the border clamp back inside the frame.
  Image near_edge = landmark_crop(img, Box{-10.0, -8.0, 14.0, 12.0});
  CHECK(near_edge.h == kCropSize);
  for (double v : near_edge.px) CHECK(std::isfinite(v));

  // Boxes larger than the frame shrink to fit.
  Image huge = landmark_crop(img, Box{-50.0, -50.0, 500.0, 500.0});
  CHECK(huge.w == kCropSize);
}

TEST_CASE("crop batches pack into the network input layout") {
  Image a(kCropSize, kCropSize), b(kCropSize, kCropSize);
  std::fill(a.px.begin(), a.px.end(), 0.25);
  for (size_t i = 0; i < b.px.size(); ++i) b.px[i] = static_cast<double>(i % 7) / 7.0;
  Tensor t = crops_to_tensor({a, b});
  CHECK(t.shape == std::vector<int>{2, 1, kCropSize, kCropSize});
  const int64_t plane = static_cast<int64_t>(kCropSize) * kCropSize;
  // A flat crop standardizes to all zeros.
  for (int64_t i = 0; i < plane; ++i) CHECK(t[i] == 0.0);
  // A varied crop standardizes to zero mean and unit variance, keeping the
  // ordering of its pixels.
  double mean = 0.0, var = 0.0;
  for (int64_t i = 0; i < plane; ++i) mean += t[plane + i];
  mean /= static_cast<double>(plane);
  for (int64_t i = 0; i < plane; ++i) {
    var += (t[plane + i] - mean) * (t[plane + i] - mean);
  }
  var /= static_cast<double>(plane);
  CHECK(std::abs(mean) < 1e-12);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-9));
  CHECK((b.px[1] < b.px[2]) == (t[plane + 1] < t[plane + 2]));
  // Standardization is per crop: batching with another crop changes nothing.
  Tensor alone = crops_to_tensor({b});
  for (int64_t i = 0; i < plane; ++i) CHECK(alone[i] == t[plane + i]);

  CHECK_THROWS_AS(crops_to_tensor({}), Error);
  CHECK_THROWS_AS(crops_to_tensor({Image(32, 32)}), Error);
}

}  // TEST_SUITE
