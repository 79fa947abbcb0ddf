#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace forge::nn {

// Dense row-major tensor of doubles. All training math runs in double so the
// analytic gradients can be checked against central finite differences.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);
  Tensor(std::vector<int> s, std::vector<double> data);

  static int64_t count(const std::vector<int>& s);
  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double value);
  static Tensor scalar(double x) { return Tensor({1}, {x}); }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;
};

// Deterministic row-major GEMM kernels. Accumulation over k always runs in
// ascending order so results are bit-reproducible.
// c[m,n] += a[m,k] * b[k,n]
void gemm_nn_acc(int m, int k, int n, const double* a, const double* b, double* c);
// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt_acc(int m, int k, int n, const double* a, const double* b, double* c);
// c[m,n] += a[k,m]^T * b[k,n]
void gemm_tn_acc(int m, int k, int n, const double* a, const double* b, double* c);

}  // namespace forge::nn
