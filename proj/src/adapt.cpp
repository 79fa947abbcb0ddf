#include "forge/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "forge/common.hpp"

namespace forge::adapt {

using nn::Graph;
using nn::ParamStore;
using nn::PoolSpec;
using nn::Tensor;

namespace {

constexpr int kFeatureDim = 64;  // deepest detector stage width
constexpr int kHidden = 32;

int add_linear(ParamStore& ps, Rng& rng, const std::string& name, int dout, int din, int* bid) {
  Tensor w({dout, din});
  const double std = std::sqrt(2.0 / din);
  for (auto& x : w.v) x = rng.normal() * std;
  int wid = ps.add(name + ".w", std::move(w));
  *bid = ps.add(name + ".b", Tensor::zeros({dout}));
  return wid;
}

int bind_linear(const ParamStore& ps, const std::string& name, int* bid) {
  int wid = ps.find(name + ".w");
  *bid = ps.find(name + ".b");
  require(wid >= 0 && *bid >= 0, "checkpoint_error", "missing adaptation parameter: " + name);
  return wid;
}

void validate(const AdaptConfig& c) {
  require(c.lambda_grl >= 0.0, "config_error", "lambda_grl must be >= 0");
  require(c.w_global >= 0.0 && c.w_reg >= 0.0 && c.w_vsa_adv >= 0.0 && c.w_vsa_con >= 0.0,
          "config_error", "adaptation weights must be >= 0");
  require(c.top_k >= 1, "config_error", "top_k must be >= 1");
  require(c.sim_threshold >= -1.0 && c.sim_threshold <= 1.0, "config_error",
          "sim_threshold must lie in [-1,1]");
  require(c.temperature > 0.0, "config_error", "temperature must be > 0");
  require(c.instance_conf >= 0.0 && c.instance_conf <= 1.0, "config_error",
          "instance_conf must lie in [0,1]");
}

// Detached L2-normalized copies for clustering; zero vectors stay zero.
std::vector<std::vector<double>> normalized_vectors(const std::vector<InstanceFeature>& inst) {
  std::vector<std::vector<double>> z;
  z.reserve(inst.size());
  for (const auto& f : inst) {
    std::vector<double> v = f.vector;
    double s = 0.0;
    for (double x : v) s += x * x;
    const double n = std::sqrt(s);
    if (n > 1e-12) {
      for (double& x : v) x /= n;
    } else {
      std::fill(v.begin(), v.end(), 0.0);
    }
    z.push_back(std::move(v));
  }
  return z;
}

}  // namespace

AdaptHeads adapt_init(ParamStore& ps, Rng& rng) {
  AdaptHeads h;
  h.g_w0 = add_linear(ps, rng, "adapt.global.l0", kHidden, kFeatureDim, &h.g_b0);
  h.g_w1 = add_linear(ps, rng, "adapt.global.l1", 1, kHidden, &h.g_b1);
  h.i_w0 = add_linear(ps, rng, "adapt.inst.l0", kHidden, kFeatureDim, &h.i_b0);
  h.i_w1 = add_linear(ps, rng, "adapt.inst.l1", 1, kHidden, &h.i_b1);
  return h;
}

AdaptHeads adapt_bind(const ParamStore& ps) {
  AdaptHeads h;
  h.g_w0 = bind_linear(ps, "adapt.global.l0", &h.g_b0);
  h.g_w1 = bind_linear(ps, "adapt.global.l1", &h.g_b1);
  h.i_w0 = bind_linear(ps, "adapt.inst.l0", &h.i_b0);
  h.i_w1 = bind_linear(ps, "adapt.inst.l1", &h.i_b1);
  return h;
}

Graph::Id domain_logits(Graph& g, const AdaptHeads& h, bool instance_level, Graph::Id feats) {
  const int w0 = instance_level ? h.i_w0 : h.g_w0;
  const int b0 = instance_level ? h.i_b0 : h.g_b0;
  const int w1 = instance_level ? h.i_w1 : h.g_w1;
  const int b1 = instance_level ? h.i_b1 : h.g_b1;
  Graph::Id hidden = g.silu(g.linear(feats, g.param(w0), g.param(b0)));
  return g.linear(hidden, g.param(w1), g.param(b1));
}

Graph::Id domain_prob(Graph& g, const AdaptHeads& h, bool instance_level, Graph::Id feats) {
  return g.sigmoid(domain_logits(g, h, instance_level, feats));
}

Graph::Id global_align_loss(Graph& g, const AdaptHeads& h, Graph::Id source_fmap,
                            Graph::Id target_fmap, const AdaptConfig& cfg) {
  const int ns = g.value(source_fmap).dim(0);
  const int nt = g.value(target_fmap).dim(0);
  require(ns > 0 && nt > 0, "batch_error", "global alignment needs samples from both domains");
  Graph::Id pooled = g.concat_rows(g.global_avg_pool(source_fmap), g.global_avg_pool(target_fmap));
  Graph::Id logits = domain_logits(g, h, false, g.grl(pooled, cfg.lambda_grl));
  Tensor labels = Tensor::zeros({ns + nt, 1});
  for (int i = 0; i < nt; ++i) labels[ns + i] = 1.0;
  return g.bce_logits_mean(logits, std::move(labels));
}

std::vector<InstanceFeature> pool_instances(Graph& g, Graph::Id fmap,
                                            const std::vector<BoxRef>& boxes, int domain,
                                            int image_size) {
  std::vector<InstanceFeature> out;
  if (boxes.empty()) return out;
  const int n = g.value(fmap).dim(0);
  const int c = g.value(fmap).dim(1);
  const int hc = g.value(fmap).dim(2);
  const int wc = g.value(fmap).dim(3);
  require(hc == wc && wc > 0 && image_size % wc == 0, "shape_error",
          "pool_instances: feature map does not tile the image");
  const double stride = static_cast<double>(image_size) / wc;

  auto cell_range = [&](double lo, double hi, int* a, int* b) {
    *a = std::clamp(static_cast<int>(std::floor(lo / stride)), 0, wc - 1);
    *b = std::clamp(static_cast<int>(std::ceil(hi / stride)) - 1, 0, wc - 1);
    if (*b < *a) *b = *a;  // sub-cell box: single covering cell
  };

  std::vector<PoolSpec> specs;
  specs.reserve(boxes.size());
  for (const BoxRef& r : boxes) {
    require(r.sample >= 0 && r.sample < n, "shape_error", "pool_instances: sample out of range");
    int x0, x1, y0, y1;
    cell_range(r.box.x0, r.box.x1, &x0, &x1);
    cell_range(r.box.y0, r.box.y1, &y0, &y1);
    PoolSpec sp;
    sp.sample = r.sample;
    for (int yy = y0; yy <= y1; ++yy) {
      for (int xx = x0; xx <= x1; ++xx) sp.cells.push_back(yy * wc + xx);
    }
    specs.push_back(std::move(sp));
  }
  Graph::Id mat = g.pool_cells(fmap, std::move(specs));
  out.reserve(boxes.size());
  for (size_t i = 0; i < boxes.size(); ++i) {
    InstanceFeature f;
    f.mat = mat;
    f.row = static_cast<int>(i);
    const Tensor& mv = g.value(mat);
    f.vector.assign(mv.v.begin() + static_cast<int64_t>(i) * c,
                    mv.v.begin() + static_cast<int64_t>(i + 1) * c);
    f.sample = boxes[i].sample;
    f.box = boxes[i].box;
    f.objectness = boxes[i].objectness;
    f.domain = domain;
    out.push_back(std::move(f));
  }
  return out;
}

Graph::Id stack_instances(Graph& g, const std::vector<InstanceFeature>& instances) {
  require(!instances.empty(), "shape_error", "stack_instances: no instances");
  Graph::Id acc = -1;
  size_t i = 0;
  while (i < instances.size()) {
    size_t j = i;
    std::vector<int> rows;
    while (j < instances.size() && instances[j].mat == instances[i].mat) {
      rows.push_back(instances[j].row);
      ++j;
    }
    Graph::Id part = g.gather_rows(instances[i].mat, std::move(rows));
    acc = (acc < 0) ? part : g.concat_rows(acc, part);
    i = j;
  }
  return acc;
}

std::vector<InstanceFeature> select_features(const std::vector<InstanceFeature>& instances,
                                             int top_k) {
  require(top_k >= 1, "config_error", "top_k must be >= 1");
  std::vector<char> keep(instances.size(), 0);
  for (int dom : {datagen::kSource, datagen::kTarget}) {
    std::vector<int> idx;
    for (size_t i = 0; i < instances.size(); ++i) {
      if (instances[i].domain == dom) idx.push_back(static_cast<int>(i));
    }
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return instances[static_cast<size_t>(a)].objectness >
             instances[static_cast<size_t>(b)].objectness;
    });
    for (size_t k = 0; k < idx.size() && k < static_cast<size_t>(top_k); ++k) {
      keep[static_cast<size_t>(idx[k])] = 1;
    }
  }
  std::vector<InstanceFeature> out;
  for (size_t i = 0; i < instances.size(); ++i) {
    if (keep[i]) out.push_back(instances[i]);
  }
  return out;
}

TermResult feature_regularize(Graph& g, const std::vector<InstanceFeature>& source,
                              const std::vector<InstanceFeature>& target) {
  if (source.empty() || target.empty()) return {-1, true};
  Graph::Id ms = stack_instances(g, source);
  Graph::Id mt = stack_instances(g, target);
  Graph::Id mean_s = g.mean_rows(ms);
  Graph::Id mean_t = g.mean_rows(mt);
  Graph::Id mean_term = g.sum_all(g.square(g.sub(mean_s, mean_t)));
  Graph::Id var_s = g.mean_rows(g.square(g.sub_row_broadcast(ms, mean_s)));
  Graph::Id var_t = g.mean_rows(g.square(g.sub_row_broadcast(mt, mean_t)));
  Graph::Id std_term =
      g.sum_all(g.square(g.sub(g.sqrt_eps(var_s, 1e-12), g.sqrt_eps(var_t, 1e-12))));
  return {g.add(mean_term, std_term), false};
}

ClusterAssignment vsa_cluster(const std::vector<InstanceFeature>& instances,
                              double sim_threshold) {
  ClusterAssignment out;
  const int n = static_cast<int>(instances.size());
  out.labels.assign(static_cast<size_t>(n), 0);
  out.num_clusters = 0;
  if (n == 0) return out;

  const auto z = normalized_vectors(instances);
  const size_t dim = z[0].size();
  std::vector<std::vector<double>> sim(static_cast<size_t>(n),
                                       std::vector<double>(static_cast<size_t>(n), 1.0));
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      double d = 0.0;
      for (size_t k = 0; k < dim; ++k) d += z[static_cast<size_t>(i)][k] * z[static_cast<size_t>(j)][k];
      sim[static_cast<size_t>(i)][static_cast<size_t>(j)] = d;
      sim[static_cast<size_t>(j)][static_cast<size_t>(i)] = d;
    }
  }

  // Clusters stay ordered by their first (smallest) member; merging the later
  // cluster into the earlier one preserves that order.
  std::vector<std::vector<int>> clusters;
  for (int i = 0; i < n; ++i) clusters.push_back({i});
  while (clusters.size() > 1) {
    double best = -std::numeric_limits<double>::infinity();
    size_t bi = 0, bj = 0;
    for (size_t a = 0; a < clusters.size(); ++a) {
      for (size_t b = a + 1; b < clusters.size(); ++b) {
        double sum = 0.0;
        for (int u : clusters[a]) {
          for (int v : clusters[b]) sum += sim[static_cast<size_t>(u)][static_cast<size_t>(v)];
        }
        const double avg = sum / (static_cast<double>(clusters[a].size()) *
                                  static_cast<double>(clusters[b].size()));
        if (avg > best) {
          best = avg;
          bi = a;
          bj = b;
        }
      }
    }
    if (best < sim_threshold) break;
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
    std::sort(clusters[bi].begin(), clusters[bi].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
  }

  out.num_clusters = static_cast<int>(clusters.size());
  for (size_t k = 0; k < clusters.size(); ++k) {
    for (int m : clusters[k]) out.labels[static_cast<size_t>(m)] = static_cast<int>(k);
  }
  return out;
}

TermResult vsa_contrastive_loss(Graph& g, const std::vector<InstanceFeature>& instances,
                                const ClusterAssignment& assignment, double temperature) {
  require(temperature > 0.0, "config_error", "temperature must be > 0");
  const int m = static_cast<int>(instances.size());
  require(static_cast<int>(assignment.labels.size()) == m, "shape_error",
          "cluster assignment does not match the feature list");
  if (m < 2) return {-1, true};

  // Anchors are instances with at least one same-cluster partner.
  std::vector<int> partners(static_cast<size_t>(m), 0);
  int num_anchors = 0;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      if (j != i && assignment.labels[static_cast<size_t>(j)] ==
                        assignment.labels[static_cast<size_t>(i)]) {
        ++partners[static_cast<size_t>(i)];
      }
    }
    if (partners[static_cast<size_t>(i)] > 0) ++num_anchors;
  }
  if (num_anchors == 0) return {-1, false};

  Graph::Id z = g.rows_l2_normalize(stack_instances(g, instances));
  Graph::Id s = g.scale(g.matmul_nt(z, z), 1.0 / temperature);
  Tensor diag_mask = Tensor::zeros({m, m});
  for (int i = 0; i < m; ++i) diag_mask[static_cast<int64_t>(i) * m + i] = -1e9;
  Graph::Id lse = g.logsumexp_rows(g.add_const(s, diag_mask));

  std::vector<int64_t> pos_idx, anchor_idx;
  std::vector<double> pos_w;
  for (int i = 0; i < m; ++i) {
    if (partners[static_cast<size_t>(i)] == 0) continue;
    anchor_idx.push_back(i);
    for (int j = 0; j < m; ++j) {
      if (j != i && assignment.labels[static_cast<size_t>(j)] ==
                        assignment.labels[static_cast<size_t>(i)]) {
        pos_idx.push_back(static_cast<int64_t>(i) * m + j);
        pos_w.push_back(1.0 / (static_cast<double>(num_anchors) *
                               static_cast<double>(partners[static_cast<size_t>(i)])));
      }
    }
  }
  Tensor pw({static_cast<int>(pos_w.size())});
  std::copy(pos_w.begin(), pos_w.end(), pw.v.begin());
  Tensor aw({num_anchors});
  std::fill(aw.v.begin(), aw.v.end(), 1.0 / num_anchors);
  Graph::Id pos_part = g.dot_const(g.gather(s, std::move(pos_idx)), std::move(pw));
  Graph::Id lse_part = g.dot_const(g.gather(lse, std::move(anchor_idx)), std::move(aw));
  return {g.sub(lse_part, pos_part), false};
}

TermResult vsa_adversarial_loss(Graph& g, const AdaptHeads& h,
                                const std::vector<InstanceFeature>& selected,
                                const AdaptConfig& cfg) {
  bool has_source = false, has_target = false;
  for (const auto& f : selected) {
    (f.domain == datagen::kSource ? has_source : has_target) = true;
  }
  if (!has_source || !has_target) return {-1, true};
  const int m = static_cast<int>(selected.size());
  Graph::Id x = g.grl(stack_instances(g, selected), cfg.lambda_grl);
  Graph::Id logits = domain_logits(g, h, true, x);
  Tensor labels = Tensor::zeros({m, 1});
  for (int i = 0; i < m; ++i) {
    if (selected[static_cast<size_t>(i)].domain == datagen::kTarget) labels[i] = 1.0;
  }
  return {g.bce_logits_mean(logits, std::move(labels)), false};
}

AdaptReport total_adapt_loss(Graph& g, const det::DetectorNet& net, const AdaptHeads& heads,
                             const AdaptBatch& batch, const det::DetectorConfig& det_cfg,
                             const AdaptConfig& cfg) {
  validate(cfg);
  require(!batch.source.empty(), "batch_error", "adaptation step needs source samples");
  require(!batch.target.empty(), "batch_error", "adaptation step needs target samples");
  for (const auto* s : batch.target) {
    require(s->domain == datagen::kTarget, "domain_error",
            "target batch contains a source-domain sample");
  }
  const int image_size = batch.source[0]->image.w;

  std::vector<const Image*> src_imgs, tgt_imgs;
  for (const auto* s : batch.source) src_imgs.push_back(&s->image);
  for (const auto* s : batch.target) tgt_imgs.push_back(&s->image);

  AdaptReport rep;
  Graph::Id xs = g.input(det::images_to_tensor(src_imgs));
  det::Stages ss = det::backbone_forward(g, net, xs);
  Graph::Id grid_s = det::detect_head(g, net, ss.s2);
  rep.supervised = det::supervised_loss(g, grid_s, batch.source, det_cfg, image_size);
  Graph::Id total = rep.supervised.total;

  const bool need_instances = cfg.w_reg > 0.0 || cfg.w_vsa_adv > 0.0 || cfg.w_vsa_con > 0.0;
  if (cfg.w_global > 0.0 || need_instances) {
    Graph::Id xt = g.input(det::images_to_tensor(tgt_imgs));
    det::Stages st = det::backbone_forward(g, net, xt);

    if (cfg.w_global > 0.0) {
      rep.global_term = global_align_loss(g, heads, ss.s2, st.s2, cfg);
      total = g.add(total, g.scale(rep.global_term, cfg.w_global));
    }

    if (need_instances) {
      std::vector<BoxRef> src_boxes;
      for (size_t i = 0; i < batch.source.size(); ++i) {
        for (const auto& b : batch.source[i]->boxes) {
          src_boxes.push_back({static_cast<int>(i), b, 1.0});
        }
      }
      auto src_inst = pool_instances(g, ss.s2, src_boxes, datagen::kSource, image_size);

      // Target boxes come from the model's own detections; ground truth on the
      // target side is never read.
      Graph::Id grid_t = det::detect_head(g, net, st.s2);
      det::DetectorConfig dec_cfg = det_cfg;
      dec_cfg.conf_threshold = cfg.instance_conf;
      const Tensor grid_t_val = g.value(grid_t);
      std::vector<BoxRef> tgt_boxes;
      for (size_t i = 0; i < batch.target.size(); ++i) {
        const Tensor gi = det::slice_sample_grid(grid_t_val, static_cast<int>(i));
        for (const auto& d : det::decode(gi, dec_cfg, image_size)) {
          tgt_boxes.push_back({static_cast<int>(i), d.box, d.score});
        }
      }
      auto tgt_inst = pool_instances(g, st.s2, tgt_boxes, datagen::kTarget, image_size);

      rep.num_source_instances = static_cast<int>(src_inst.size());
      rep.num_target_instances = static_cast<int>(tgt_inst.size());

      std::vector<InstanceFeature> all = src_inst;
      all.insert(all.end(), tgt_inst.begin(), tgt_inst.end());
      auto selected = select_features(all, cfg.top_k);
      std::vector<InstanceFeature> sel_s, sel_t;
      for (const auto& f : selected) {
        (f.domain == datagen::kSource ? sel_s : sel_t).push_back(f);
      }

      if (cfg.w_reg > 0.0) {
        rep.reg = feature_regularize(g, sel_s, sel_t);
        if (rep.reg.id >= 0) total = g.add(total, g.scale(rep.reg.id, cfg.w_reg));
      }
      if (cfg.w_vsa_adv > 0.0) {
        rep.adv = vsa_adversarial_loss(g, heads, selected, cfg);
        if (rep.adv.id >= 0) total = g.add(total, g.scale(rep.adv.id, cfg.w_vsa_adv));
      }
      if (cfg.w_vsa_con > 0.0) {
        if (selected.size() >= 2) {
          ClusterAssignment asg = vsa_cluster(selected, cfg.sim_threshold);
          rep.num_clusters = asg.num_clusters;
          rep.con = vsa_contrastive_loss(g, selected, asg, cfg.temperature);
        } else {
          rep.con = {-1, true};
        }
        if (rep.con.id >= 0) total = g.add(total, g.scale(rep.con.id, cfg.w_vsa_con));
      }
    }
  }
  rep.total = total;
  return rep;
}

double term_value(const Graph& g, Graph::Id id) { return id < 0 ? 0.0 : g.value(id)[0]; }

double grl_warmup(int step, int total_steps) {
  if (total_steps <= 0) return 1.0;
  const double ramp = 0.3 * total_steps;
  const double lambda = step / ramp;
  return std::clamp(lambda, 0.0, 1.0);
}

}  // namespace forge::adapt
