#include "forge/graph.hpp"

#include <algorithm>
#include <cmath>

#include "forge/common.hpp"

namespace forge::nn {

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

// x: [Cin,H,W] slab -> col: [Cin*kh*kw, Ho*Wo]
void im2col(const double* x, int cin, int h, int w, int kh, int kw, int stride, int pad,
            int ho, int wo, double* col) {
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t patch = static_cast<int64_t>(ho) * wo;
  int64_t r = 0;
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        double* dst = col + r * patch;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < wo; ++ox) dst[oy * wo + ox] = 0.0;
            continue;
          }
          const double* src = x + c * plane + static_cast<int64_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, int cin, int h, int w, int kh, int kw, int stride, int pad,
                int ho, int wo, double* x) {
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t patch = static_cast<int64_t>(ho) * wo;
  int64_t r = 0;
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        const double* src = col + r * patch;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = x + c * plane + static_cast<int64_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

int conv_out_size(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

int ParamStore::add(const std::string& name, Tensor init) {
  require(index_.find(name) == index_.end(), "param_error", "duplicate parameter name: " + name);
  int id = static_cast<int>(entries_.size());
  Entry e;
  e.name = name;
  e.grad = Tensor::zeros(init.shape);
  e.value = std::move(init);
  entries_.push_back(std::move(e));
  index_[name] = id;
  return id;
}

int ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

void ParamStore::zero_grads() {
  for (auto& e : entries_) std::fill(e.grad.v.begin(), e.grad.v.end(), 0.0);
}

void ParamStore::sgd_step(double learning_rate) {
  for (auto& e : entries_) {
    for (size_t i = 0; i < e.value.v.size(); ++i) e.value.v[i] -= learning_rate * e.grad.v[i];
  }
}

int64_t ParamStore::total_scalars() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

Graph::Id Graph::emit(Tensor val, bool needs_grad, std::function<void()> back) {
  Node n;
  n.grad = Tensor::zeros(val.shape);
  n.val = std::move(val);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Graph::Id Graph::input(Tensor t) { return emit(std::move(t), false, nullptr); }

Graph::Id Graph::param(int param_id) {
  require(params_ != nullptr, "param_error", "graph has no parameter store");
  auto it = param_nodes_.find(param_id);
  if (it != param_nodes_.end()) return it->second;
  Id id = emit(params_->value(param_id), true, nullptr);
  nodes_[static_cast<size_t>(id)].param_id = param_id;
  param_nodes_[param_id] = id;
  return id;
}

Graph::Id Graph::add(Id a, Id b) {
  require(v(a).same_shape(v(b)), "shape_error", "add: shape mismatch");
  Tensor out(v(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = v(a)[i] + v(b)[i];
  Id y = emit(std::move(out), wants(a) || wants(b), nullptr);
  set_back(y, [this, a, b, y]() {
    const Tensor& gy = g(y);
    if (wants(a)) for (int64_t i = 0; i < gy.numel(); ++i) g(a)[i] += gy[i];
    if (wants(b)) for (int64_t i = 0; i < gy.numel(); ++i) g(b)[i] += gy[i];
  });
  return y;
}

Graph::Id Graph::sub(Id a, Id b) {
  require(v(a).same_shape(v(b)), "shape_error", "sub: shape mismatch");
  Tensor out(v(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = v(a)[i] - v(b)[i];
  Id y = emit(std::move(out), wants(a) || wants(b), nullptr);
  set_back(y, [this, a, b, y]() {
    const Tensor& gy = g(y);
    if (wants(a)) for (int64_t i = 0; i < gy.numel(); ++i) g(a)[i] += gy[i];
    if (wants(b)) for (int64_t i = 0; i < gy.numel(); ++i) g(b)[i] -= gy[i];
  });
  return y;
}

Graph::Id Graph::mul(Id a, Id b) {
  require(v(a).same_shape(v(b)), "shape_error", "mul: shape mismatch");
  Tensor out(v(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = v(a)[i] * v(b)[i];
  Id y = emit(std::move(out), wants(a) || wants(b), nullptr);
  set_back(y, [this, a, b, y]() {
    const Tensor& gy = g(y);
    if (wants(a)) for (int64_t i = 0; i < gy.numel(); ++i) g(a)[i] += gy[i] * v(b)[i];
    if (wants(b)) for (int64_t i = 0; i < gy.numel(); ++i) g(b)[i] += gy[i] * v(a)[i];
  });
  return y;
}

Graph::Id Graph::scale(Id a, double s) {
  Tensor out(v(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = v(a)[i] * s;
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y, s]() {
    const Tensor& gy = g(y);
    if (wants(a)) for (int64_t i = 0; i < gy.numel(); ++i) g(a)[i] += gy[i] * s;
  });
  return y;
}

Graph::Id Graph::add_const(Id a, const Tensor& c) {
  require(v(a).same_shape(c), "shape_error", "add_const: shape mismatch");
  Tensor out(v(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = v(a)[i] + c[i];
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y]() {
    const Tensor& gy = g(y);
    if (wants(a)) for (int64_t i = 0; i < gy.numel(); ++i) g(a)[i] += gy[i];
  });
  return y;
}

Graph::Id Graph::square(Id a) {
  Tensor out(v(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = v(a)[i] * v(a)[i];
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y]() {
    const Tensor& gy = g(y);
    if (wants(a)) for (int64_t i = 0; i < gy.numel(); ++i) g(a)[i] += gy[i] * 2.0 * v(a)[i];
  });
  return y;
}

Graph::Id Graph::sqrt_eps(Id a, double eps) {
  Tensor out(v(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(v(a)[i] + eps);
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y]() {
    const Tensor& gy = g(y);
    if (wants(a)) for (int64_t i = 0; i < gy.numel(); ++i) g(a)[i] += gy[i] * 0.5 / v(y)[i];
  });
  return y;
}

Graph::Id Graph::silu(Id a) {
  Tensor out(v(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) {
    double x = v(a)[i];
    out[i] = x * stable_sigmoid(x);
  }
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y]() {
    const Tensor& gy = g(y);
    if (!wants(a)) return;
    for (int64_t i = 0; i < gy.numel(); ++i) {
      double x = v(a)[i];
      double s = stable_sigmoid(x);
      g(a)[i] += gy[i] * s * (1.0 + x * (1.0 - s));
    }
  });
  return y;
}

Graph::Id Graph::sigmoid(Id a) {
  Tensor out(v(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(v(a)[i]);
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y]() {
    const Tensor& gy = g(y);
    if (!wants(a)) return;
    for (int64_t i = 0; i < gy.numel(); ++i) {
      double s = v(y)[i];
      g(a)[i] += gy[i] * s * (1.0 - s);
    }
  });
  return y;
}

Graph::Id Graph::conv2d(Id x, Id w, Id b, int stride, int pad) {
  const Tensor& xv = v(x);
  const Tensor& wv = v(w);
  const Tensor& bv = v(b);
  require(xv.ndim() == 4 && wv.ndim() == 4 && bv.ndim() == 1, "shape_error", "conv2d: bad ranks");
  const int n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  require(wv.dim(1) == cin && bv.dim(0) == cout, "shape_error", "conv2d: channel mismatch");
  const int ho = conv_out_size(h, kh, stride, pad);
  const int wo = conv_out_size(wd, kw, stride, pad);
  require(ho >= 1 && wo >= 1, "shape_error", "conv2d: output collapses to zero");

  const int K = cin * kh * kw;
  const int64_t P = static_cast<int64_t>(ho) * wo;
  Tensor out({n, cout, ho, wo});
  std::vector<double> col(static_cast<size_t>(K) * P);
  for (int i = 0; i < n; ++i) {
    im2col(xv.v.data() + static_cast<int64_t>(i) * cin * h * wd, cin, h, wd, kh, kw, stride, pad,
           ho, wo, col.data());
    double* yptr = out.v.data() + static_cast<int64_t>(i) * cout * P;
    gemm_nn_acc(cout, K, static_cast<int>(P), wv.v.data(), col.data(), yptr);
    for (int c = 0; c < cout; ++c) {
      const double bias = bv[c];
      double* row = yptr + static_cast<int64_t>(c) * P;
      for (int64_t p = 0; p < P; ++p) row[p] += bias;
    }
  }

  Id y = emit(std::move(out), wants(x) || wants(w) || wants(b), nullptr);
  set_back(y, [this, x, w, b, y, stride, pad]() {
    const Tensor& xv2 = v(x);
    const Tensor& wv2 = v(w);
    const Tensor& gy = g(y);
    const int n2 = xv2.dim(0), cin2 = xv2.dim(1), h2 = xv2.dim(2), wd2 = xv2.dim(3);
    const int cout2 = wv2.dim(0), kh2 = wv2.dim(2), kw2 = wv2.dim(3);
    const int ho2 = gy.dim(2), wo2 = gy.dim(3);
    const int K2 = cin2 * kh2 * kw2;
    const int64_t P2 = static_cast<int64_t>(ho2) * wo2;
    std::vector<double> col(static_cast<size_t>(K2) * P2);
    std::vector<double> dcol;
    if (wants(x)) dcol.resize(static_cast<size_t>(K2) * P2);
    for (int i = 0; i < n2; ++i) {
      const double* gyp = gy.v.data() + static_cast<int64_t>(i) * cout2 * P2;
      if (wants(w) || wants(x)) {
        im2col(xv2.v.data() + static_cast<int64_t>(i) * cin2 * h2 * wd2, cin2, h2, wd2, kh2, kw2,
               stride, pad, ho2, wo2, col.data());
      }
      if (wants(w)) {
        gemm_nt_acc(cout2, static_cast<int>(P2), K2, gyp, col.data(), g(w).v.data());
      }
      if (wants(b)) {
        for (int c = 0; c < cout2; ++c) {
          const double* row = gyp + static_cast<int64_t>(c) * P2;
          double acc = 0.0;
          for (int64_t p = 0; p < P2; ++p) acc += row[p];
          g(b)[c] += acc;
        }
      }
      if (wants(x)) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        gemm_tn_acc(K2, cout2, static_cast<int>(P2), wv2.v.data(), gyp, dcol.data());
        col2im_acc(dcol.data(), cin2, h2, wd2, kh2, kw2, stride, pad, ho2, wo2,
                   g(x).v.data() + static_cast<int64_t>(i) * cin2 * h2 * wd2);
      }
    }
  });
  return y;
}

Graph::Id Graph::replicate_pad(Id x, int pad) {
  const Tensor& xv = v(x);
  require(xv.ndim() == 4, "shape_error", "replicate_pad: expects [N,C,H,W]");
  require(pad >= 0, "shape_error", "replicate_pad: negative pad");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int ho = h + 2 * pad, wo = w + 2 * pad;
  Tensor out({n, c, ho, wo});
  for (int i = 0; i < n * c; ++i) {
    const double* src = xv.v.data() + static_cast<int64_t>(i) * h * w;
    double* dst = out.v.data() + static_cast<int64_t>(i) * ho * wo;
    for (int y = 0; y < ho; ++y) {
      const int sy = std::clamp(y - pad, 0, h - 1);
      for (int xx = 0; xx < wo; ++xx) {
        const int sx = std::clamp(xx - pad, 0, w - 1);
        dst[static_cast<int64_t>(y) * wo + xx] = src[static_cast<int64_t>(sy) * w + sx];
      }
    }
  }
  Id y = emit(std::move(out), wants(x), nullptr);
  set_back(y, [this, x, y, pad, h, w]() {
    if (!wants(x)) return;
    const Tensor& gy = g(y);
    const int ho = h + 2 * pad, wo = w + 2 * pad;
    const int planes = gy.dim(0) * gy.dim(1);
    for (int i = 0; i < planes; ++i) {
      double* dst = g(x).v.data() + static_cast<int64_t>(i) * h * w;
      const double* src = gy.v.data() + static_cast<int64_t>(i) * ho * wo;
      for (int yy = 0; yy < ho; ++yy) {
        const int sy = std::clamp(yy - pad, 0, h - 1);
        for (int xx = 0; xx < wo; ++xx) {
          const int sx = std::clamp(xx - pad, 0, w - 1);
          dst[static_cast<int64_t>(sy) * w + sx] += src[static_cast<int64_t>(yy) * wo + xx];
        }
      }
    }
  });
  return y;
}

Graph::Id Graph::linear(Id x, Id w, Id b) {
  const Tensor& xv = v(x);
  const Tensor& wv = v(w);
  const Tensor& bv = v(b);
  require(xv.ndim() == 2 && wv.ndim() == 2 && bv.ndim() == 1, "shape_error", "linear: bad ranks");
  const int n = xv.dim(0), din = xv.dim(1), dout = wv.dim(0);
  require(wv.dim(1) == din && bv.dim(0) == dout, "shape_error", "linear: dim mismatch");
  Tensor out({n, dout});
  gemm_nt_acc(n, din, dout, xv.v.data(), wv.v.data(), out.v.data());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < dout; ++j) out[static_cast<int64_t>(i) * dout + j] += bv[j];
  }
  Id y = emit(std::move(out), wants(x) || wants(w) || wants(b), nullptr);
  set_back(y, [this, x, w, b, y]() {
    const Tensor& xv2 = v(x);
    const Tensor& wv2 = v(w);
    const Tensor& gy = g(y);
    const int n2 = xv2.dim(0), din2 = xv2.dim(1), dout2 = wv2.dim(0);
    if (wants(w)) gemm_tn_acc(dout2, n2, din2, gy.v.data(), xv2.v.data(), g(w).v.data());
    if (wants(b)) {
      for (int i = 0; i < n2; ++i)
        for (int j = 0; j < dout2; ++j) g(b)[j] += gy[static_cast<int64_t>(i) * dout2 + j];
    }
    if (wants(x)) gemm_nn_acc(n2, dout2, din2, gy.v.data(), wv2.v.data(), g(x).v.data());
  });
  return y;
}

Graph::Id Graph::matmul_nt(Id a, Id b) {
  const Tensor& av = v(a);
  const Tensor& bv = v(b);
  require(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(1), "shape_error",
          "matmul_nt: dim mismatch");
  const int n = av.dim(0), d = av.dim(1), m = bv.dim(0);
  Tensor out({n, m});
  gemm_nt_acc(n, d, m, av.v.data(), bv.v.data(), out.v.data());
  Id y = emit(std::move(out), wants(a) || wants(b), nullptr);
  set_back(y, [this, a, b, y]() {
    const Tensor& av2 = v(a);
    const Tensor& bv2 = v(b);
    const Tensor& gy = g(y);
    const int n2 = av2.dim(0), d2 = av2.dim(1), m2 = bv2.dim(0);
    if (wants(a)) gemm_nn_acc(n2, m2, d2, gy.v.data(), bv2.v.data(), g(a).v.data());
    if (wants(b)) gemm_tn_acc(m2, n2, d2, gy.v.data(), av2.v.data(), g(b).v.data());
  });
  return y;
}

Graph::Id Graph::rows_l2_normalize(Id a, double eps) {
  const Tensor& av = v(a);
  require(av.ndim() == 2, "shape_error", "rows_l2_normalize: expects [N,D]");
  const int n = av.dim(0), d = av.dim(1);
  Tensor out({n, d});
  for (int i = 0; i < n; ++i) {
    const double* row = av.v.data() + static_cast<int64_t>(i) * d;
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += row[j] * row[j];
    double inv = 1.0 / std::sqrt(s + eps);
    double* orow = out.v.data() + static_cast<int64_t>(i) * d;
    for (int j = 0; j < d; ++j) orow[j] = row[j] * inv;
  }
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y, eps]() {
    if (!wants(a)) return;
    const Tensor& av2 = v(a);
    const Tensor& gy = g(y);
    const int n2 = av2.dim(0), d2 = av2.dim(1);
    for (int i = 0; i < n2; ++i) {
      const double* row = av2.v.data() + static_cast<int64_t>(i) * d2;
      const double* grow = gy.v.data() + static_cast<int64_t>(i) * d2;
      double s = 0.0, dot = 0.0;
      for (int j = 0; j < d2; ++j) {
        s += row[j] * row[j];
        dot += grow[j] * row[j];
      }
      double norm = std::sqrt(s + eps);
      double inv = 1.0 / norm;
      double inv3 = inv * inv * inv;
      double* out_g = g(a).v.data() + static_cast<int64_t>(i) * d2;
      for (int j = 0; j < d2; ++j) out_g[j] += grow[j] * inv - row[j] * dot * inv3;
    }
  });
  return y;
}

Graph::Id Graph::global_avg_pool(Id x) {
  const Tensor& xv = v(x);
  require(xv.ndim() == 4, "shape_error", "global_avg_pool: expects [N,C,H,W]");
  const int n = xv.dim(0), c = xv.dim(1);
  const int64_t plane = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double* p = xv.v.data() + (static_cast<int64_t>(i) * c + ch) * plane;
      double acc = 0.0;
      for (int64_t k = 0; k < plane; ++k) acc += p[k];
      out[static_cast<int64_t>(i) * c + ch] = acc / static_cast<double>(plane);
    }
  }
  Id y = emit(std::move(out), wants(x), nullptr);
  set_back(y, [this, x, y]() {
    if (!wants(x)) return;
    const Tensor& xv2 = v(x);
    const Tensor& gy = g(y);
    const int n2 = xv2.dim(0), c2 = xv2.dim(1);
    const int64_t plane = static_cast<int64_t>(xv2.dim(2)) * xv2.dim(3);
    const double inv = 1.0 / static_cast<double>(plane);
    for (int i = 0; i < n2; ++i) {
      for (int ch = 0; ch < c2; ++ch) {
        double gv = gy[static_cast<int64_t>(i) * c2 + ch] * inv;
        double* p = g(x).v.data() + (static_cast<int64_t>(i) * c2 + ch) * plane;
        for (int64_t k = 0; k < plane; ++k) p[k] += gv;
      }
    }
  });
  return y;
}

Graph::Id Graph::channel_mean_map(Id x) {
  const Tensor& xv = v(x);
  require(xv.ndim() == 4, "shape_error", "channel_mean_map: expects [N,C,H,W]");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  Tensor out({n, 1, h, w});
  const double inv = 1.0 / static_cast<double>(c);
  for (int i = 0; i < n; ++i) {
    double* orow = out.v.data() + static_cast<int64_t>(i) * plane;
    for (int64_t p = 0; p < plane; ++p) {
      double acc = 0.0;
      for (int ch = 0; ch < c; ++ch) acc += xv[(static_cast<int64_t>(i) * c + ch) * plane + p];
      orow[p] = acc * inv;
    }
  }
  Id y = emit(std::move(out), wants(x), nullptr);
  set_back(y, [this, x, y]() {
    if (!wants(x)) return;
    const Tensor& xv2 = v(x);
    const Tensor& gy = g(y);
    const int n2 = xv2.dim(0), c2 = xv2.dim(1);
    const int64_t plane = static_cast<int64_t>(xv2.dim(2)) * xv2.dim(3);
    const double inv = 1.0 / static_cast<double>(c2);
    for (int i = 0; i < n2; ++i) {
      const double* grow = gy.v.data() + static_cast<int64_t>(i) * plane;
      for (int ch = 0; ch < c2; ++ch) {
        double* p = g(x).v.data() + (static_cast<int64_t>(i) * c2 + ch) * plane;
        for (int64_t k = 0; k < plane; ++k) p[k] += grow[k] * inv;
      }
    }
  });
  return y;
}

Graph::Id Graph::channel_smoothmax_map(Id x, double beta) {
  const Tensor& xv = v(x);
  require(xv.ndim() == 4, "shape_error", "channel_smoothmax_map: expects [N,C,H,W]");
  require(beta > 0.0, "value_error", "channel_smoothmax_map: beta must be positive");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  Tensor out({n, 1, h, w});
  for (int i = 0; i < n; ++i) {
    double* orow = out.v.data() + static_cast<int64_t>(i) * plane;
    for (int64_t p = 0; p < plane; ++p) {
      double m = -1e300;
      for (int ch = 0; ch < c; ++ch) m = std::max(m, xv[(static_cast<int64_t>(i) * c + ch) * plane + p]);
      double acc = 0.0;
      for (int ch = 0; ch < c; ++ch)
        acc += std::exp(beta * (xv[(static_cast<int64_t>(i) * c + ch) * plane + p] - m));
      orow[p] = m + std::log(acc) / beta;
    }
  }
  Id y = emit(std::move(out), wants(x), nullptr);
  set_back(y, [this, x, y, beta]() {
    if (!wants(x)) return;
    const Tensor& xv2 = v(x);
    const Tensor& gy = g(y);
    const Tensor& yv = v(y);
    const int n2 = xv2.dim(0), c2 = xv2.dim(1);
    const int64_t plane = static_cast<int64_t>(xv2.dim(2)) * xv2.dim(3);
    for (int i = 0; i < n2; ++i) {
      const double* grow = gy.v.data() + static_cast<int64_t>(i) * plane;
      const double* yrow = yv.v.data() + static_cast<int64_t>(i) * plane;
      for (int ch = 0; ch < c2; ++ch) {
        double* p = g(x).v.data() + (static_cast<int64_t>(i) * c2 + ch) * plane;
        const double* xr = xv2.v.data() + (static_cast<int64_t>(i) * c2 + ch) * plane;
        for (int64_t k = 0; k < plane; ++k) p[k] += grow[k] * std::exp(beta * (xr[k] - yrow[k]));
      }
    }
  });
  return y;
}

Graph::Id Graph::concat_channels(Id a, Id b) {
  const Tensor& av = v(a);
  const Tensor& bv = v(b);
  require(av.ndim() == 4 && bv.ndim() == 4, "shape_error", "concat_channels: expects [N,C,H,W]");
  require(av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
          "shape_error", "concat_channels: mismatched dims");
  const int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), h = av.dim(2), w = av.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  Tensor out({n, ca + cb, h, w});
  for (int i = 0; i < n; ++i) {
    std::copy(av.v.begin() + static_cast<int64_t>(i) * ca * plane,
              av.v.begin() + static_cast<int64_t>(i + 1) * ca * plane,
              out.v.begin() + static_cast<int64_t>(i) * (ca + cb) * plane);
    std::copy(bv.v.begin() + static_cast<int64_t>(i) * cb * plane,
              bv.v.begin() + static_cast<int64_t>(i + 1) * cb * plane,
              out.v.begin() + static_cast<int64_t>(i) * (ca + cb) * plane + ca * plane);
  }
  Id y = emit(std::move(out), wants(a) || wants(b), nullptr);
  set_back(y, [this, a, b, y, ca, cb, plane]() {
    const Tensor& gy = g(y);
    const int n2 = gy.dim(0);
    for (int i = 0; i < n2; ++i) {
      const double* gp = gy.v.data() + static_cast<int64_t>(i) * (ca + cb) * plane;
      if (wants(a)) {
        double* pa = g(a).v.data() + static_cast<int64_t>(i) * ca * plane;
        for (int64_t k = 0; k < static_cast<int64_t>(ca) * plane; ++k) pa[k] += gp[k];
      }
      if (wants(b)) {
        double* pb = g(b).v.data() + static_cast<int64_t>(i) * cb * plane;
        for (int64_t k = 0; k < static_cast<int64_t>(cb) * plane; ++k) pb[k] += gp[ca * plane + k];
      }
    }
  });
  return y;
}

Graph::Id Graph::channel_slice(Id x, int c0, int c1) {
  const Tensor& xv = v(x);
  require(xv.ndim() == 4, "shape_error", "channel_slice: expects [N,C,H,W]");
  require(0 <= c0 && c0 < c1 && c1 <= xv.dim(1), "shape_error", "channel_slice: bad range");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int cs = c1 - c0;
  Tensor out({n, cs, h, w});
  for (int i = 0; i < n; ++i) {
    std::copy(xv.v.begin() + (static_cast<int64_t>(i) * c + c0) * plane,
              xv.v.begin() + (static_cast<int64_t>(i) * c + c1) * plane,
              out.v.begin() + static_cast<int64_t>(i) * cs * plane);
  }
  Id y = emit(std::move(out), wants(x), nullptr);
  set_back(y, [this, x, y, c0, cs, plane]() {
    if (!wants(x)) return;
    const Tensor& gy = g(y);
    const int n2 = gy.dim(0);
    const int c2 = v(x).dim(1);
    for (int i = 0; i < n2; ++i) {
      double* px = g(x).v.data() + (static_cast<int64_t>(i) * c2 + c0) * plane;
      const double* gp = gy.v.data() + static_cast<int64_t>(i) * cs * plane;
      for (int64_t k = 0; k < static_cast<int64_t>(cs) * plane; ++k) px[k] += gp[k];
    }
  });
  return y;
}

Graph::Id Graph::scale_channels(Id x, Id gch) {
  const Tensor& xv = v(x);
  const Tensor& gv = v(gch);
  require(xv.ndim() == 4 && gv.ndim() == 2, "shape_error", "scale_channels: bad ranks");
  require(xv.dim(0) == gv.dim(0) && xv.dim(1) == gv.dim(1), "shape_error",
          "scale_channels: dim mismatch");
  const int n = xv.dim(0), c = xv.dim(1);
  const int64_t plane = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor out(xv.shape);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double s = gv[static_cast<int64_t>(i) * c + ch];
      const double* xp = xv.v.data() + (static_cast<int64_t>(i) * c + ch) * plane;
      double* op = out.v.data() + (static_cast<int64_t>(i) * c + ch) * plane;
      for (int64_t k = 0; k < plane; ++k) op[k] = xp[k] * s;
    }
  }
  Id y = emit(std::move(out), wants(x) || wants(gch), nullptr);
  set_back(y, [this, x, gch, y]() {
    const Tensor& xv2 = v(x);
    const Tensor& gv2 = v(gch);
    const Tensor& gy = g(y);
    const int n2 = xv2.dim(0), c2 = xv2.dim(1);
    const int64_t plane = static_cast<int64_t>(xv2.dim(2)) * xv2.dim(3);
    for (int i = 0; i < n2; ++i) {
      for (int ch = 0; ch < c2; ++ch) {
        const int64_t base = (static_cast<int64_t>(i) * c2 + ch) * plane;
        if (wants(x)) {
          const double s = gv2[static_cast<int64_t>(i) * c2 + ch];
          for (int64_t k = 0; k < plane; ++k) g(x)[base + k] += gy[base + k] * s;
        }
        if (wants(gch)) {
          double acc = 0.0;
          for (int64_t k = 0; k < plane; ++k) acc += gy[base + k] * xv2[base + k];
          g(gch)[static_cast<int64_t>(i) * c2 + ch] += acc;
        }
      }
    }
  });
  return y;
}

Graph::Id Graph::scale_spatial(Id x, Id s) {
  const Tensor& xv = v(x);
  const Tensor& sv = v(s);
  require(xv.ndim() == 4 && sv.ndim() == 4 && sv.dim(1) == 1, "shape_error",
          "scale_spatial: bad ranks");
  require(xv.dim(0) == sv.dim(0) && xv.dim(2) == sv.dim(2) && xv.dim(3) == sv.dim(3),
          "shape_error", "scale_spatial: dim mismatch");
  const int n = xv.dim(0), c = xv.dim(1);
  const int64_t plane = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor out(xv.shape);
  for (int i = 0; i < n; ++i) {
    const double* sp = sv.v.data() + static_cast<int64_t>(i) * plane;
    for (int ch = 0; ch < c; ++ch) {
      const double* xp = xv.v.data() + (static_cast<int64_t>(i) * c + ch) * plane;
      double* op = out.v.data() + (static_cast<int64_t>(i) * c + ch) * plane;
      for (int64_t k = 0; k < plane; ++k) op[k] = xp[k] * sp[k];
    }
  }
  Id y = emit(std::move(out), wants(x) || wants(s), nullptr);
  set_back(y, [this, x, s, y]() {
    const Tensor& xv2 = v(x);
    const Tensor& sv2 = v(s);
    const Tensor& gy = g(y);
    const int n2 = xv2.dim(0), c2 = xv2.dim(1);
    const int64_t plane = static_cast<int64_t>(xv2.dim(2)) * xv2.dim(3);
    for (int i = 0; i < n2; ++i) {
      const double* sp = sv2.v.data() + static_cast<int64_t>(i) * plane;
      for (int ch = 0; ch < c2; ++ch) {
        const int64_t base = (static_cast<int64_t>(i) * c2 + ch) * plane;
        if (wants(x)) {
          for (int64_t k = 0; k < plane; ++k) g(x)[base + k] += gy[base + k] * sp[k];
        }
        if (wants(s)) {
          for (int64_t k = 0; k < plane; ++k)
            g(s)[static_cast<int64_t>(i) * plane + k] += gy[base + k] * xv2[base + k];
        }
      }
    }
  });
  return y;
}

Graph::Id Graph::reshape(Id a, std::vector<int> shape) {
  require(Tensor::count(shape) == v(a).numel(), "shape_error", "reshape: element count mismatch");
  Tensor out(std::move(shape), v(a).v);
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y]() {
    if (!wants(a)) return;
    const Tensor& gy = g(y);
    for (int64_t i = 0; i < gy.numel(); ++i) g(a)[i] += gy[i];
  });
  return y;
}

Graph::Id Graph::grl(Id a, double lambda) {
  Tensor out = v(a);
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y, lambda]() {
    if (!wants(a)) return;
    const Tensor& gy = g(y);
    for (int64_t i = 0; i < gy.numel(); ++i) g(a)[i] += -lambda * gy[i];
  });
  return y;
}

Graph::Id Graph::gather(Id a, std::vector<int64_t> flat_indices) {
  const Tensor& av = v(a);
  Tensor out({static_cast<int>(flat_indices.size())});
  for (size_t k = 0; k < flat_indices.size(); ++k) {
    require(flat_indices[k] >= 0 && flat_indices[k] < av.numel(), "shape_error",
            "gather: index out of range");
    out[static_cast<int64_t>(k)] = av[flat_indices[k]];
  }
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y, idx = std::move(flat_indices)]() {
    if (!wants(a)) return;
    const Tensor& gy = g(y);
    for (size_t k = 0; k < idx.size(); ++k) g(a)[idx[k]] += gy[static_cast<int64_t>(k)];
  });
  return y;
}

Graph::Id Graph::stack_cols(const std::vector<Id>& cols) {
  require(!cols.empty(), "shape_error", "stack_cols: no columns");
  const int b = v(cols[0]).dim(0);
  const int m = static_cast<int>(cols.size());
  bool ng = false;
  for (Id c : cols) {
    require(v(c).ndim() == 1 && v(c).dim(0) == b, "shape_error", "stack_cols: bad column");
    ng = ng || wants(c);
  }
  Tensor out({b, m});
  for (int j = 0; j < m; ++j) {
    for (int i = 0; i < b; ++i) out[static_cast<int64_t>(i) * m + j] = v(cols[static_cast<size_t>(j)])[i];
  }
  Id y = emit(std::move(out), ng, nullptr);
  set_back(y, [this, y, cs = cols]() {
    const Tensor& gy = g(y);
    const int b2 = gy.dim(0), m2 = gy.dim(1);
    for (int j = 0; j < m2; ++j) {
      Id c = cs[static_cast<size_t>(j)];
      if (!wants(c)) continue;
      for (int i = 0; i < b2; ++i) g(c)[i] += gy[static_cast<int64_t>(i) * m2 + j];
    }
  });
  return y;
}

Graph::Id Graph::concat_rows(Id a, Id b) {
  const Tensor& av = v(a);
  const Tensor& bv = v(b);
  require(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(1), "shape_error",
          "concat_rows: need [Na,C] and [Nb,C]");
  const int na = av.dim(0), nb = bv.dim(0), c = av.dim(1);
  Tensor out({na + nb, c});
  std::copy(av.v.begin(), av.v.end(), out.v.begin());
  std::copy(bv.v.begin(), bv.v.end(), out.v.begin() + av.numel());
  Id y = emit(std::move(out), wants(a) || wants(b), nullptr);
  set_back(y, [this, a, b, y, na, c]() {
    const Tensor& gy = g(y);
    const int64_t split = static_cast<int64_t>(na) * c;
    if (wants(a)) {
      for (int64_t i = 0; i < split; ++i) g(a)[i] += gy[i];
    }
    if (wants(b)) {
      for (int64_t i = split; i < gy.numel(); ++i) g(b)[i - split] += gy[i];
    }
  });
  return y;
}

Graph::Id Graph::gather_rows(Id a, std::vector<int> rows) {
  const Tensor& av = v(a);
  require(av.ndim() == 2, "shape_error", "gather_rows: need [N,C]");
  const int n = av.dim(0), c = av.dim(1);
  Tensor out({static_cast<int>(rows.size()), c});
  for (size_t k = 0; k < rows.size(); ++k) {
    require(rows[k] >= 0 && rows[k] < n, "shape_error", "gather_rows: row out of range");
    std::copy(av.v.begin() + static_cast<int64_t>(rows[k]) * c,
              av.v.begin() + static_cast<int64_t>(rows[k] + 1) * c,
              out.v.begin() + static_cast<int64_t>(k) * c);
  }
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y, c, rs = std::move(rows)]() {
    if (!wants(a)) return;
    const Tensor& gy = g(y);
    for (size_t k = 0; k < rs.size(); ++k) {
      for (int j = 0; j < c; ++j) {
        g(a)[static_cast<int64_t>(rs[k]) * c + j] += gy[static_cast<int64_t>(k) * c + j];
      }
    }
  });
  return y;
}

Graph::Id Graph::pool_cells(Id fmap, std::vector<PoolSpec> specs) {
  const Tensor& xv = v(fmap);
  require(xv.ndim() == 4, "shape_error", "pool_cells: expects [N,C,H,W]");
  const int n = xv.dim(0), c = xv.dim(1);
  const int64_t plane = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
  const int b = static_cast<int>(specs.size());
  Tensor out({b, c});
  for (int i = 0; i < b; ++i) {
    const PoolSpec& sp = specs[static_cast<size_t>(i)];
    require(sp.sample >= 0 && sp.sample < n, "shape_error", "pool_cells: bad sample index");
    require(!sp.cells.empty(), "shape_error", "pool_cells: empty cell set");
    const double inv = 1.0 / static_cast<double>(sp.cells.size());
    for (int ch = 0; ch < c; ++ch) {
      const double* p = xv.v.data() + (static_cast<int64_t>(sp.sample) * c + ch) * plane;
      double acc = 0.0;
      for (int cell : sp.cells) {
        require(cell >= 0 && cell < plane, "shape_error", "pool_cells: cell out of range");
        acc += p[cell];
      }
      out[static_cast<int64_t>(i) * c + ch] = acc * inv;
    }
  }
  Id y = emit(std::move(out), wants(fmap), nullptr);
  set_back(y, [this, fmap, y, sp = std::move(specs)]() {
    if (!wants(fmap)) return;
    const Tensor& gy = g(y);
    const Tensor& xv2 = v(fmap);
    const int c2 = xv2.dim(1);
    const int64_t plane = static_cast<int64_t>(xv2.dim(2)) * xv2.dim(3);
    for (size_t i = 0; i < sp.size(); ++i) {
      const double inv = 1.0 / static_cast<double>(sp[i].cells.size());
      for (int ch = 0; ch < c2; ++ch) {
        double gv = gy[static_cast<int64_t>(i) * c2 + ch] * inv;
        double* p = g(fmap).v.data() + (static_cast<int64_t>(sp[i].sample) * c2 + ch) * plane;
        for (int cell : sp[i].cells) p[cell] += gv;
      }
    }
  });
  return y;
}

Graph::Id Graph::mean_rows(Id a) {
  const Tensor& av = v(a);
  require(av.ndim() == 2, "shape_error", "mean_rows: expects [N,D]");
  const int n = av.dim(0), d = av.dim(1);
  require(n >= 1, "shape_error", "mean_rows: empty input");
  Tensor out({d});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out[j] += av[static_cast<int64_t>(i) * d + j];
  }
  const double inv = 1.0 / n;
  for (int j = 0; j < d; ++j) out[j] *= inv;
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y]() {
    if (!wants(a)) return;
    const Tensor& gy = g(y);
    const int n2 = v(a).dim(0), d2 = v(a).dim(1);
    const double inv = 1.0 / n2;
    for (int i = 0; i < n2; ++i)
      for (int j = 0; j < d2; ++j) g(a)[static_cast<int64_t>(i) * d2 + j] += gy[j] * inv;
  });
  return y;
}

Graph::Id Graph::sub_row_broadcast(Id a, Id r) {
  const Tensor& av = v(a);
  const Tensor& rv = v(r);
  require(av.ndim() == 2 && rv.ndim() == 1 && av.dim(1) == rv.dim(0), "shape_error",
          "sub_row_broadcast: dim mismatch");
  const int n = av.dim(0), d = av.dim(1);
  Tensor out({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out[static_cast<int64_t>(i) * d + j] = av[static_cast<int64_t>(i) * d + j] - rv[j];
  Id y = emit(std::move(out), wants(a) || wants(r), nullptr);
  set_back(y, [this, a, r, y]() {
    const Tensor& gy = g(y);
    const int n2 = gy.dim(0), d2 = gy.dim(1);
    for (int i = 0; i < n2; ++i) {
      for (int j = 0; j < d2; ++j) {
        double gv = gy[static_cast<int64_t>(i) * d2 + j];
        if (wants(a)) g(a)[static_cast<int64_t>(i) * d2 + j] += gv;
        if (wants(r)) g(r)[j] -= gv;
      }
    }
  });
  return y;
}

Graph::Id Graph::mean_all(Id a) {
  const Tensor& av = v(a);
  require(av.numel() >= 1, "shape_error", "mean_all: empty input");
  double acc = 0.0;
  for (int64_t i = 0; i < av.numel(); ++i) acc += av[i];
  const double inv = 1.0 / static_cast<double>(av.numel());
  Id y = emit(Tensor::scalar(acc * inv), wants(a), nullptr);
  set_back(y, [this, a, y, inv]() {
    if (!wants(a)) return;
    double gv = g(y)[0] * inv;
    for (int64_t i = 0; i < g(a).numel(); ++i) g(a)[i] += gv;
  });
  return y;
}

Graph::Id Graph::sum_all(Id a) {
  const Tensor& av = v(a);
  double acc = 0.0;
  for (int64_t i = 0; i < av.numel(); ++i) acc += av[i];
  Id y = emit(Tensor::scalar(acc), wants(a), nullptr);
  set_back(y, [this, a, y]() {
    if (!wants(a)) return;
    double gv = g(y)[0];
    for (int64_t i = 0; i < g(a).numel(); ++i) g(a)[i] += gv;
  });
  return y;
}

Graph::Id Graph::logsumexp_rows(Id a) {
  const Tensor& av = v(a);
  require(av.ndim() == 2, "shape_error", "logsumexp_rows: expects [N,M]");
  const int n = av.dim(0), m = av.dim(1);
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    const double* row = av.v.data() + static_cast<int64_t>(i) * m;
    double mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double acc = 0.0;
    for (int j = 0; j < m; ++j) acc += std::exp(row[j] - mx);
    out[i] = mx + std::log(acc);
  }
  Id y = emit(std::move(out), wants(a), nullptr);
  set_back(y, [this, a, y]() {
    if (!wants(a)) return;
    const Tensor& av2 = v(a);
    const Tensor& gy = g(y);
    const Tensor& yv = v(y);
    const int n2 = av2.dim(0), m2 = av2.dim(1);
    for (int i = 0; i < n2; ++i) {
      const double* row = av2.v.data() + static_cast<int64_t>(i) * m2;
      double* grow = g(a).v.data() + static_cast<int64_t>(i) * m2;
      for (int j = 0; j < m2; ++j) grow[j] += gy[i] * std::exp(row[j] - yv[i]);
    }
  });
  return y;
}

Graph::Id Graph::bce_logits_mean(Id logits, Tensor targets) {
  const Tensor& xv = v(logits);
  require(xv.same_shape(targets), "shape_error", "bce_logits_mean: shape mismatch");
  require(xv.numel() >= 1, "shape_error", "bce_logits_mean: empty input");
  double acc = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) {
    double x = xv[i], t = targets[i];
    acc += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  const double inv = 1.0 / static_cast<double>(xv.numel());
  Id y = emit(Tensor::scalar(acc * inv), wants(logits), nullptr);
  set_back(y, [this, logits, y, t = std::move(targets), inv]() {
    if (!wants(logits)) return;
    const Tensor& xv2 = v(logits);
    double gv = g(y)[0] * inv;
    for (int64_t i = 0; i < xv2.numel(); ++i)
      g(logits)[i] += gv * (stable_sigmoid(xv2[i]) - t[i]);
  });
  return y;
}

Graph::Id Graph::softmax_ce_mean(Id logits, std::vector<int> labels) {
  const Tensor& xv = v(logits);
  require(xv.ndim() == 2, "shape_error", "softmax_ce_mean: expects [B,K]");
  const int b = xv.dim(0), k = xv.dim(1);
  require(static_cast<int>(labels.size()) == b, "shape_error", "softmax_ce_mean: label count");
  double acc = 0.0;
  for (int i = 0; i < b; ++i) {
    require(labels[static_cast<size_t>(i)] >= 0 && labels[static_cast<size_t>(i)] < k,
            "value_error", "softmax_ce_mean: label out of range");
    const double* row = xv.v.data() + static_cast<int64_t>(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    acc += mx + std::log(s) - row[labels[static_cast<size_t>(i)]];
  }
  const double inv = 1.0 / b;
  Id y = emit(Tensor::scalar(acc * inv), wants(logits), nullptr);
  set_back(y, [this, logits, y, lb = std::move(labels), inv]() {
    if (!wants(logits)) return;
    const Tensor& xv2 = v(logits);
    const int b2 = xv2.dim(0), k2 = xv2.dim(1);
    double gv = g(y)[0] * inv;
    for (int i = 0; i < b2; ++i) {
      const double* row = xv2.v.data() + static_cast<int64_t>(i) * k2;
      double mx = row[0];
      for (int j = 1; j < k2; ++j) mx = std::max(mx, row[j]);
      double s = 0.0;
      for (int j = 0; j < k2; ++j) s += std::exp(row[j] - mx);
      double* grow = g(logits).v.data() + static_cast<int64_t>(i) * k2;
      for (int j = 0; j < k2; ++j) {
        double p = std::exp(row[j] - mx) / s;
        grow[j] += gv * (p - (j == lb[static_cast<size_t>(i)] ? 1.0 : 0.0));
      }
    }
  });
  return y;
}

Graph::Id Graph::sse(Id pred, Tensor target) {
  const Tensor& pv = v(pred);
  require(pv.same_shape(target), "shape_error", "sse: shape mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < pv.numel(); ++i) {
    double d = pv[i] - target[i];
    acc += d * d;
  }
  Id y = emit(Tensor::scalar(acc), wants(pred), nullptr);
  set_back(y, [this, pred, y, t = std::move(target)]() {
    if (!wants(pred)) return;
    const Tensor& pv2 = v(pred);
    double gv = g(y)[0];
    for (int64_t i = 0; i < pv2.numel(); ++i) g(pred)[i] += gv * 2.0 * (pv2[i] - t[i]);
  });
  return y;
}

Graph::Id Graph::dot_const(Id a, Tensor weights) {
  const Tensor& av = v(a);
  require(av.same_shape(weights), "shape_error", "dot_const: shape mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < av.numel(); ++i) acc += av[i] * weights[i];
  Id y = emit(Tensor::scalar(acc), wants(a), nullptr);
  set_back(y, [this, a, y, w = std::move(weights)]() {
    if (!wants(a)) return;
    double gv = g(y)[0];
    for (int64_t i = 0; i < g(a).numel(); ++i) g(a)[i] += gv * w[i];
  });
  return y;
}

void Graph::backward(Id root) {
  require(v(root).numel() == 1, "grad_error", "backward root must be scalar");
  // Reset tape-local gradients so repeated backward calls on one graph are
  // independent; accumulation across calls happens in the parameter store.
  for (Node& n : nodes_) {
    if (n.needs_grad) std::fill(n.grad.v.begin(), n.grad.v.end(), 0.0);
  }
  g(root).v[0] = 1.0;
  for (int i = root; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needs_grad) continue;
    if (n.back) n.back();
    if (n.param_id >= 0 && params_) {
      Tensor& pg = params_->grad(n.param_id);
      for (int64_t j = 0; j < pg.numel(); ++j) pg[j] += n.grad[j];
    }
  }
}

}  // namespace forge::nn
