#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "forge/graph.hpp"
#include "forge/rng.hpp"
#include "forge/tensor.hpp"

namespace testutil {

inline forge::nn::Tensor random_tensor(std::vector<int> shape, forge::Rng& rng,
                                       double scale = 1.0) {
  forge::nn::Tensor t(std::move(shape));
  for (auto& x : t.v) x = rng.normal() * scale;
  return t;
}

// Compares the tape's parameter gradients of a scalar loss against central
// finite differences. build() must construct the loss from the current store
// values and return the root id. Returns the worst relative error over all
// parameter scalars.
inline double max_grad_rel_err(
    forge::nn::ParamStore& ps,
    const std::function<forge::nn::Graph::Id(forge::nn::Graph&)>& build, double h = 1e-5) {
  using forge::nn::Graph;
  ps.zero_grads();
  {
    Graph gr(&ps);
    Graph::Id root = build(gr);
    gr.backward(root);
  }
  std::vector<forge::nn::Tensor> analytic;
  analytic.reserve(static_cast<size_t>(ps.size()));
  for (int p = 0; p < ps.size(); ++p) analytic.push_back(ps.grad(p));

  auto eval = [&]() {
    Graph gr(&ps);
    return gr.value(build(gr))[0];
  };

  double worst = 0.0;
  for (int p = 0; p < ps.size(); ++p) {
    forge::nn::Tensor& val = ps.value(p);
    for (int64_t k = 0; k < val.numel(); ++k) {
      const double orig = val[k];
      const double step = h * std::max(1.0, std::abs(orig));
      val[k] = orig + step;
      const double fp = eval();
      val[k] = orig - step;
      const double fm = eval();
      val[k] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = analytic[static_cast<size_t>(p)][k];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

// Sampled variant for large parameter sets: checks up to per_tensor randomly
// chosen scalars of each parameter tensor instead of every entry. When
// param_ids is non-empty, only those tensors are probed (the backward pass
// still covers everything).
inline double max_grad_rel_err_sampled(
    forge::nn::ParamStore& ps,
    const std::function<forge::nn::Graph::Id(forge::nn::Graph&)>& build, int per_tensor,
    uint64_t seed, double h = 1e-5, const std::vector<int>& param_ids = {}) {
  using forge::nn::Graph;
  ps.zero_grads();
  {
    Graph gr(&ps);
    Graph::Id root = build(gr);
    gr.backward(root);
  }
  std::vector<forge::nn::Tensor> analytic;
  analytic.reserve(static_cast<size_t>(ps.size()));
  for (int p = 0; p < ps.size(); ++p) analytic.push_back(ps.grad(p));

  auto eval = [&]() {
    Graph gr(&ps);
    return gr.value(build(gr))[0];
  };

  std::vector<int> targets = param_ids;
  if (targets.empty()) {
    for (int p = 0; p < ps.size(); ++p) targets.push_back(p);
  }

  forge::Rng rng(seed);
  double worst = 0.0;
  for (int p : targets) {
    forge::nn::Tensor& val = ps.value(p);
    const int64_t n = val.numel();
    std::vector<int64_t> picks;
    if (n <= per_tensor) {
      for (int64_t k = 0; k < n; ++k) picks.push_back(k);
    } else {
      for (int k = 0; k < per_tensor; ++k)
        picks.push_back(rng.uniform_int(static_cast<int>(n)));
    }
    for (int64_t k : picks) {
      const double orig = val[k];
      const double step = h * std::max(1.0, std::abs(orig));
      val[k] = orig + step;
      const double fp = eval();
      val[k] = orig - step;
      const double fm = eval();
      val[k] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = analytic[static_cast<size_t>(p)][k];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

}  // namespace testutil
