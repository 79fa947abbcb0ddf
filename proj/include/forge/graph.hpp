#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "forge/tensor.hpp"

namespace forge::nn {

// Named parameter storage. Registration order is fixed and defines the
// checkpoint layout.
class ParamStore {
 public:
  int add(const std::string& name, Tensor init);
  int find(const std::string& name) const;  // -1 when absent

  int size() const { return static_cast<int>(entries_.size()); }
  const std::string& name(int id) const { return entries_[static_cast<size_t>(id)].name; }
  Tensor& value(int id) { return entries_[static_cast<size_t>(id)].value; }
  const Tensor& value(int id) const { return entries_[static_cast<size_t>(id)].value; }
  Tensor& grad(int id) { return entries_[static_cast<size_t>(id)].grad; }

  void zero_grads();
  void sgd_step(double learning_rate);
  int64_t total_scalars() const;

 private:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
  };
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
};

// Specifies one pooled instance: sample n of the batch and the flat (y*w+x)
// cells of the feature map it averages over.
struct PoolSpec {
  int sample = 0;
  std::vector<int> cells;
};

// Define-by-run reverse-mode tape over Tensors. Values are computed eagerly;
// backward() walks the tape in reverse and accumulates parameter gradients
// into the bound ParamStore.
class Graph {
 public:
  using Id = int;

  explicit Graph(ParamStore* params = nullptr) : params_(params) {}

  Id input(Tensor t);
  Id param(int param_id);

  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id scale(Id a, double s);
  Id add_const(Id a, const Tensor& c);
  Id square(Id a);
  Id sqrt_eps(Id a, double eps);
  Id silu(Id a);
  Id sigmoid(Id a);

  // x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout]
  Id conv2d(Id x, Id w, Id b, int stride, int pad);
  Id replicate_pad(Id x, int pad);  // [N,C,H,W] -> [N,C,H+2p,W+2p], edge values
  // x: [N,Din], w: [Dout,Din], b: [Dout]
  Id linear(Id x, Id w, Id b);
  // a: [N,D], b: [M,D] -> [N,M] = a * b^T
  Id matmul_nt(Id a, Id b);
  // [N,D] rows scaled to unit L2 norm (1/sqrt(|x|^2+eps))
  Id rows_l2_normalize(Id a, double eps = 1e-12);

  Id global_avg_pool(Id x);                    // [N,C,H,W] -> [N,C]
  Id channel_mean_map(Id x);                   // [N,C,H,W] -> [N,1,H,W]
  Id channel_smoothmax_map(Id x, double beta); // [N,C,H,W] -> [N,1,H,W]
  Id concat_channels(Id a, Id b);
  Id channel_slice(Id x, int c0, int c1);
  Id scale_channels(Id x, Id g);               // g: [N,C]
  Id scale_spatial(Id x, Id s);                // s: [N,1,H,W]
  Id reshape(Id a, std::vector<int> shape);

  // Identity forward; backward multiplies the gradient by -lambda.
  Id grl(Id a, double lambda);

  Id gather(Id a, std::vector<int64_t> flat_indices);  // -> [K]
  Id stack_cols(const std::vector<Id>& cols);          // M ids of [B] -> [B,M]
  Id concat_rows(Id a, Id b);                          // [Na,C] + [Nb,C] -> [Na+Nb,C]
  Id gather_rows(Id a, std::vector<int> rows);         // [N,C] -> [K,C]
  Id pool_cells(Id fmap, std::vector<PoolSpec> specs); // -> [B,C]

  Id mean_rows(Id a);                 // [N,D] -> [D]
  Id sub_row_broadcast(Id a, Id r);   // [N,D] - [D]
  Id mean_all(Id a);                  // -> scalar
  Id sum_all(Id a);                   // -> scalar
  Id logsumexp_rows(Id a);            // [N,M] -> [N]

  Id bce_logits_mean(Id logits, Tensor targets);                 // -> scalar
  Id softmax_ce_mean(Id logits, std::vector<int> labels);        // [B,K] -> scalar
  Id sse(Id pred, Tensor target);                                // -> scalar
  Id dot_const(Id a, Tensor weights);                            // -> scalar

  const Tensor& value(Id id) const { return nodes_[static_cast<size_t>(id)].val; }
  const Tensor& grad_of(Id id) const { return nodes_[static_cast<size_t>(id)].grad; }

  // root must be a scalar node. Accumulates into ParamStore grads.
  void backward(Id root);

  int num_nodes() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    int param_id = -1;
    std::function<void()> back;
  };

  Id emit(Tensor val, bool needs_grad, std::function<void()> back);
  void set_back(Id id, std::function<void()> back) {
    if (nodes_[static_cast<size_t>(id)].needs_grad) nodes_[static_cast<size_t>(id)].back = std::move(back);
  }
  bool wants(Id id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  Tensor& g(Id id) { return nodes_[static_cast<size_t>(id)].grad; }
  const Tensor& v(Id id) const { return nodes_[static_cast<size_t>(id)].val; }

  std::vector<Node> nodes_;
  ParamStore* params_;
  std::map<int, Id> param_nodes_;
};

// conv2d output spatial size for one axis.
int conv_out_size(int in, int kernel, int stride, int pad);

}  // namespace forge::nn
