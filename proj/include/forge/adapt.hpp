#pragma once

#include <vector>

#include "forge/datagen.hpp"
#include "forge/detector.hpp"
#include "forge/graph.hpp"
#include "forge/rng.hpp"

namespace forge::adapt {

// Weights and knobs for the unsupervised domain-adaptation terms. All are
// calibration choices exposed to config, not fixed properties of the method.
struct AdaptConfig {
  double lambda_grl = 1.0;     // gradient-reversal strength (>= 0)
  double w_global = 1.0;       // image-level adversarial alignment
  double w_reg = 0.1;          // cross-domain feature-moment regularizer
  double w_vsa_adv = 0.5;      // instance-level adversarial alignment
  double w_vsa_con = 0.5;      // cluster-contrastive alignment
  int top_k = 16;              // instances kept per domain, ranked by objectness
  double sim_threshold = 0.7;  // cosine cut-off for cluster merging, in [-1,1]
  double temperature = 0.1;    // contrastive softmax temperature (> 0)
  double instance_conf = 0.3;  // detection confidence floor for target instances
};

// One instance-level feature: the average of the stride-16 feature map over
// the cells covered by a box. `mat`/`row` locate the differentiable row inside
// the pooled matrix produced by pool_instances; `vector` is a detached copy
// used for clustering and ranking.
struct InstanceFeature {
  nn::Graph::Id mat = -1;
  int row = 0;
  std::vector<double> vector;
  int sample = 0;
  datagen::Box box;
  double objectness = 1.0;
  int domain = datagen::kSource;
};

struct ClusterAssignment {
  std::vector<int> labels;  // aligned with the clustered feature list
  int num_clusters = 0;
};

// Parameter ids of the two small domain classifiers (image-level and
// instance-level), each a 2-layer MLP over C-dim features.
struct AdaptHeads {
  int g_w0 = -1, g_b0 = -1, g_w1 = -1, g_b1 = -1;
  int i_w0 = -1, i_b0 = -1, i_w1 = -1, i_b1 = -1;
};

AdaptHeads adapt_init(nn::ParamStore& ps, Rng& rng);
AdaptHeads adapt_bind(const nn::ParamStore& ps);  // resolve by name

// feats: [M,C] -> domain logits [M,1]; probability of "target" is sigmoid.
nn::Graph::Id domain_logits(nn::Graph& g, const AdaptHeads& h, bool instance_level,
                            nn::Graph::Id feats);
nn::Graph::Id domain_prob(nn::Graph& g, const AdaptHeads& h, bool instance_level,
                          nn::Graph::Id feats);

// Adversarial image-level alignment: BCE of the global classifier over
// spatially averaged deepest feature maps routed through gradient reversal.
// Labels are source=0, target=1. Both batches must be non-empty.
nn::Graph::Id global_align_loss(nn::Graph& g, const AdaptHeads& h, nn::Graph::Id source_fmap,
                                nn::Graph::Id target_fmap, const AdaptConfig& cfg);

// A box to pool: `sample` indexes the feature-map batch. Ground-truth boxes
// carry objectness 1.0; decoded detections carry their score.
struct BoxRef {
  int sample = 0;
  datagen::Box box;
  double objectness = 1.0;
};

// Average-pool fmap [N,C,Hc,Wc] (stride = image_size / Wc) inside each box.
// A box smaller than one cell pools the single covering cell.
std::vector<InstanceFeature> pool_instances(nn::Graph& g, nn::Graph::Id fmap,
                                            const std::vector<BoxRef>& boxes, int domain,
                                            int image_size);

// Differentiable [M,C] matrix of the given instances, in order.
nn::Graph::Id stack_instances(nn::Graph& g, const std::vector<InstanceFeature>& instances);

// Per domain, keep the top_k instances by objectness; ties resolve to the
// earlier instance. Output preserves the input order of the survivors.
std::vector<InstanceFeature> select_features(const std::vector<InstanceFeature>& instances,
                                             int top_k);

// A loss term that may be absent: id < 0 means the term contributes zero.
// `skipped` marks steps where a precondition (instances on both sides, enough
// instances) failed rather than the term evaluating to zero.
struct TermResult {
  nn::Graph::Id id = -1;
  bool skipped = false;
};

// Squared distance between per-channel means plus between per-channel
// standard deviations across the two domains. Zero iff both moments match.
TermResult feature_regularize(nn::Graph& g, const std::vector<InstanceFeature>& source,
                              const std::vector<InstanceFeature>& target);

// Average-linkage agglomerative clustering under cosine similarity of the
// L2-normalized detached vectors; merging stops when no cluster pair reaches
// sim_threshold. Labels are assigned by order of first member.
ClusterAssignment vsa_cluster(const std::vector<InstanceFeature>& instances,
                              double sim_threshold);

// Supervised-contrastive loss with cluster ids as positives: for each anchor
// with at least one same-cluster partner, -mean over partners of
// log softmax(sim/temperature) over all other instances; mean over anchors.
TermResult vsa_contrastive_loss(nn::Graph& g, const std::vector<InstanceFeature>& instances,
                                const ClusterAssignment& assignment, double temperature);

// Instance-level adversarial alignment, same contract as global_align_loss
// but over pooled instance features. Skipped when a domain is absent.
TermResult vsa_adversarial_loss(nn::Graph& g, const AdaptHeads& h,
                                const std::vector<InstanceFeature>& selected,
                                const AdaptConfig& cfg);

struct AdaptBatch {
  std::vector<const datagen::SceneSample*> source;  // labelled
  std::vector<const datagen::SceneSample*> target;  // labels never read
};

// Everything the combined step produces. Term ids < 0 contribute zero to the
// total; values are read with term_value.
struct AdaptReport {
  nn::Graph::Id total = -1;
  det::SupervisedLoss supervised;
  nn::Graph::Id global_term = -1;
  TermResult reg, adv, con;
  int num_clusters = 0;
  int num_source_instances = 0;
  int num_target_instances = 0;
};

// supervised(source) + w_global*global + w_reg*regularize + w_vsa_adv*adv +
// w_vsa_con*contrastive. Weighted terms are added only when active, so an
// all-zero-weight config reproduces the supervised loss bit for bit. Source
// instances pool ground-truth boxes; target instances pool the model's own
// decoded detections with score >= instance_conf.
AdaptReport total_adapt_loss(nn::Graph& g, const det::DetectorNet& net, const AdaptHeads& heads,
                             const AdaptBatch& batch, const det::DetectorConfig& det_cfg,
                             const AdaptConfig& cfg);

// Value of a possibly-absent term (0 when id < 0).
double term_value(const nn::Graph& g, nn::Graph::Id id);

// Reversal-strength schedule: linear 0 -> 1 over the first 30% of training,
// then flat at 1.
double grl_warmup(int step, int total_steps);

}  // namespace forge::adapt
