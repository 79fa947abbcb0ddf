#include "forge/tensor.hpp"

#include <cmath>
#include <sstream>

#include "forge/common.hpp"

namespace forge::nn {

int64_t Tensor::count(const std::vector<int>& s) {
  int64_t n = 1;
  for (int d : s) {
    require(d >= 0, "shape_error", "negative tensor dimension");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)), v(static_cast<size_t>(count(shape)), 0.0) {}

Tensor::Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
  require(count(shape) == static_cast<int64_t>(v.size()), "shape_error",
          "tensor data does not match shape");
}

Tensor Tensor::full(std::vector<int> s, double value) {
  Tensor t(std::move(s));
  for (double& x : t.v) x = value;
  return t;
}

bool Tensor::all_finite() const {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void gemm_nn_acc(int m, int k, int n, const double* a, const double* b, double* c) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = c + static_cast<int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double ai = arow[p];
      if (ai == 0.0) continue;
      const double* brow = b + static_cast<int64_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += ai * brow[j];
    }
  }
}

void gemm_nt_acc(int m, int k, int n, const double* a, const double* b, double* c) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = c + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<int64_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

void gemm_tn_acc(int m, int k, int n, const double* a, const double* b, double* c) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<int64_t>(p) * m;
    const double* brow = b + static_cast<int64_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double ai = arow[i];
      if (ai == 0.0) continue;
      double* crow = c + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += ai * brow[j];
    }
  }
}

}  // namespace forge::nn
