#include "darc/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace darc {

namespace {

void check(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

double stable_softplus(double z) { return z > 30.0 ? z : std::log1p(std::exp(z)); }

// Inverse of softplus; defined for y > 0.
double softplus_inv(double y) {
  return y > 20.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

double stable_sigmoid(double z) {
  if (z >= 0) {
    const double e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// col is {Cin*k*k, Ho*Wo}; zero padding.
void im2col(const double* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
            double* col) {
  const int M = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = col + ((c * k + ki) * k + kj) * static_cast<long>(M);
        for (int ho = 0; ho < Ho; ++ho) {
          const int y = ho * stride - pad + ki;
          double* out = row + ho * Wo;
          if (y < 0 || y >= H) {
            std::memset(out, 0, sizeof(double) * Wo);
            continue;
          }
          const double* src = x + (c * H + y) * static_cast<long>(W);
          for (int wo = 0; wo < Wo; ++wo) {
            const int xx = wo * stride - pad + kj;
            out[wo] = (xx >= 0 && xx < W) ? src[xx] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
                double* x_acc) {
  const int M = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* row = col + ((c * k + ki) * k + kj) * static_cast<long>(M);
        for (int ho = 0; ho < Ho; ++ho) {
          const int y = ho * stride - pad + ki;
          if (y < 0 || y >= H) continue;
          double* dst = x_acc + (c * H + y) * static_cast<long>(W);
          const double* src = row + ho * Wo;
          for (int wo = 0; wo < Wo; ++wo) {
            const int xx = wo * stride - pad + kj;
            if (xx >= 0 && xx < W) dst[xx] += src[wo];
          }
        }
      }
    }
  }
}

// Stable argsort of a span, ties by index.
void stable_argsort(const double* v, int n, std::vector<int>& idx) {
  idx.resize(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [v](int a, int b) { return v[a] < v[b]; });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor y = a->value.clone();
  const double* pb = b->value.data();
  double* py = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) py[i] += pb[i];
  return make_node(std::move(y), {a, b}, [](Node& self) {
    const double* g = self.grad.data();
    for (int p = 0; p < 2; ++p) {
      if (!self.parents[p]->requires_grad) continue;
      double* pg = self.parents[p]->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pg[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor y = a->value.clone();
  const double* pb = b->value.data();
  double* py = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) py[i] -= pb[i];
  return make_node(std::move(y), {a, b}, [](Node& self) {
    const double* g = self.grad.data();
    if (self.parents[0]->requires_grad) {
      double* pg = self.parents[0]->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pg[i] += g[i];
    }
    if (self.parents[1]->requires_grad) {
      double* pg = self.parents[1]->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pg[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor y = a->value.clone();
  const double* pb = b->value.data();
  double* py = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) py[i] *= pb[i];
  return make_node(std::move(y), {a, b}, [](Node& self) {
    const double* g = self.grad.data();
    const double* va = self.parents[0]->value.data();
    const double* vb = self.parents[1]->value.data();
    if (self.parents[0]->requires_grad) {
      double* pg = self.parents[0]->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pg[i] += g[i] * vb[i];
    }
    if (self.parents[1]->requires_grad) {
      double* pg = self.parents[1]->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pg[i] += g[i] * va[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor y = a->value.clone();
  double* py = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) py[i] *= s;
  return make_node(std::move(y), {a}, [s](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    const double* g = self.grad.data();
    double* pg = self.parents[0]->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pg[i] += g[i] * s;
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  const double* pa = a->value.data();
  for (std::size_t i = 0; i < a->value.size(); ++i) s += pa[i];
  return make_node(Tensor::scalar(s), {a}, [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    const double g = self.grad[0];
    double* pg = self.parents[0]->ensure_grad().data();
    for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) pg[i] += g;
  });
}

Var mean(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a->value.size());
  return scale(sum(a), inv);
}

Var relu(const Var& a) {
  Tensor y = a->value.clone();
  double* py = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) py[i] = py[i] > 0.0 ? py[i] : 0.0;
  return make_node(std::move(y), {a}, [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    const double* g = self.grad.data();
    const double* v = self.parents[0]->value.data();
    double* pg = self.parents[0]->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (v[i] > 0.0) pg[i] += g[i];
  });
}

Var sigmoid(const Var& a) {
  Tensor y(a->value.shape());
  const double* pa = a->value.data();
  double* py = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) py[i] = stable_sigmoid(pa[i]);
  return make_node(std::move(y), {a}, [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    const double* g = self.grad.data();
    const double* y = self.value.data();
    double* pg = self.parents[0]->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pg[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var reshape(const Var& a, std::vector<int> shape) {
  Tensor y = a->value.reshaped(std::move(shape));
  return make_node(std::move(y), {a}, [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    const double* g = self.grad.data();
    double* pg = self.parents[0]->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pg[i] += g[i];
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  check(x->value.ndim() == 4, "conv2d: x must be {N,C,H,W}");
  check(w->value.ndim() == 4, "conv2d: w must be {Cout,Cin,k,k}");
  const int N = x->value.dim(0), Cin = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int Cout = w->value.dim(0), k = w->value.dim(2);
  check(w->value.dim(1) == Cin, "conv2d: channel mismatch");
  check(w->value.dim(3) == k, "conv2d: kernel must be square");
  check(b->value.ndim() == 1 && b->value.dim(0) == Cout, "conv2d: bias shape");
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  check(Ho >= 1 && Wo >= 1, "conv2d: output collapses to zero size");

  const int K = Cin * k * k;
  const long M = static_cast<long>(Ho) * Wo;
  Tensor y({N, Cout, Ho, Wo});

  static thread_local std::vector<double> col;
  col.resize(static_cast<std::size_t>(K) * M);
  const double* px = x->value.data();
  const double* pw = w->value.data();
  const double* pb = b->value.data();
  double* py = y.data();
  for (int n = 0; n < N; ++n) {
    im2col(px + static_cast<long>(n) * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo, col.data());
    double* yn = py + static_cast<long>(n) * Cout * M;
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, Cout, static_cast<int>(M), K, 1.0, pw,
                K, col.data(), static_cast<int>(M), 0.0, yn, static_cast<int>(M));
    for (int c = 0; c < Cout; ++c) {
      const double bias = pb[c];
      double* row = yn + c * M;
      for (long i = 0; i < M; ++i) row[i] += bias;
    }
  }

  return make_node(std::move(y), {x, w, b}, [stride, pad](Node& self) {
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    Node& bn = *self.parents[2];
    const int N = xn.value.dim(0), Cin = xn.value.dim(1), H = xn.value.dim(2), W = xn.value.dim(3);
    const int Cout = wn.value.dim(0), k = wn.value.dim(2);
    const int Ho = self.value.dim(2), Wo = self.value.dim(3);
    const int K = Cin * k * k;
    const long M = static_cast<long>(Ho) * Wo;

    static thread_local std::vector<double> col, dcol;
    const double* g = self.grad.data();
    if (bn.requires_grad) {
      double* db = bn.ensure_grad().data();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < Cout; ++c) {
          const double* row = g + (static_cast<long>(n) * Cout + c) * M;
          double s = 0.0;
          for (long i = 0; i < M; ++i) s += row[i];
          db[c] += s;
        }
    }
    if (wn.requires_grad) {
      col.resize(static_cast<std::size_t>(K) * M);
      double* dw = wn.ensure_grad().data();
      const double* px = xn.value.data();
      for (int n = 0; n < N; ++n) {
        im2col(px + static_cast<long>(n) * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo,
               col.data());
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, Cout, K, static_cast<int>(M), 1.0,
                    g + static_cast<long>(n) * Cout * M, static_cast<int>(M), col.data(),
                    static_cast<int>(M), 1.0, dw, K);
      }
    }
    if (xn.requires_grad) {
      dcol.resize(static_cast<std::size_t>(K) * M);
      double* dx = xn.ensure_grad().data();
      const double* pw = wn.value.data();
      for (int n = 0; n < N; ++n) {
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, static_cast<int>(M), Cout, 1.0, pw,
                    K, g + static_cast<long>(n) * Cout * M, static_cast<int>(M), 0.0, dcol.data(),
                    static_cast<int>(M));
        col2im_acc(dcol.data(), Cin, H, W, k, stride, pad, Ho, Wo,
                   dx + static_cast<long>(n) * Cin * H * W);
      }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  check(x->value.ndim() == 2, "linear: x must be {N,F}");
  check(w->value.ndim() == 2, "linear: w must be {G,F}");
  const int N = x->value.dim(0), F = x->value.dim(1), G = w->value.dim(0);
  check(w->value.dim(1) == F, "linear: feature mismatch");
  check(b->value.ndim() == 1 && b->value.dim(0) == G, "linear: bias shape");

  Tensor y({N, G});
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, N, G, F, 1.0, x->value.data(), F,
              w->value.data(), F, 0.0, y.data(), G);
  const double* pb = b->value.data();
  double* py = y.data();
  for (int n = 0; n < N; ++n)
    for (int gI = 0; gI < G; ++gI) py[n * G + gI] += pb[gI];

  return make_node(std::move(y), {x, w, b}, [](Node& self) {
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    Node& bn = *self.parents[2];
    const int N = xn.value.dim(0), F = xn.value.dim(1), G = wn.value.dim(0);
    const double* g = self.grad.data();
    if (bn.requires_grad) {
      double* db = bn.ensure_grad().data();
      for (int n = 0; n < N; ++n)
        for (int k = 0; k < G; ++k) db[k] += g[n * G + k];
    }
    if (wn.requires_grad) {
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, G, F, N, 1.0, g, G, xn.value.data(), F,
                  1.0, wn.ensure_grad().data(), F);
    }
    if (xn.requires_grad) {
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, N, F, G, 1.0, g, G, wn.value.data(),
                  F, 1.0, xn.ensure_grad().data(), F);
    }
  });
}

Var mean_hw(const Var& x) {
  check(x->value.ndim() == 4, "mean_hw: x must be {N,C,H,W}");
  const int N = x->value.dim(0), C = x->value.dim(1);
  const long HW = static_cast<long>(x->value.dim(2)) * x->value.dim(3);
  Tensor y({N, C});
  const double* px = x->value.data();
  double* py = y.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* p = px + (static_cast<long>(n) * C + c) * HW;
      double s = 0.0;
      for (long i = 0; i < HW; ++i) s += p[i];
      py[n * C + c] = s / static_cast<double>(HW);
    }
  return make_node(std::move(y), {x}, [](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    const int N = xn.value.dim(0), C = xn.value.dim(1);
    const long HW = static_cast<long>(xn.value.dim(2)) * xn.value.dim(3);
    const double* g = self.grad.data();
    double* dx = xn.ensure_grad().data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double gv = g[n * C + c] / static_cast<double>(HW);
        double* p = dx + (static_cast<long>(n) * C + c) * HW;
        for (long i = 0; i < HW; ++i) p[i] += gv;
      }
  });
}

Var std_hw(const Var& x, const Var& mu, double eps) {
  check(x->value.ndim() == 4, "std_hw: x must be {N,C,H,W}");
  const int N = x->value.dim(0), C = x->value.dim(1);
  check(mu->value.ndim() == 2 && mu->value.dim(0) == N && mu->value.dim(1) == C,
        "std_hw: mu must be {N,C}");
  const long HW = static_cast<long>(x->value.dim(2)) * x->value.dim(3);
  Tensor y({N, C});
  const double* px = x->value.data();
  const double* pm = mu->value.data();
  double* py = y.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double m = pm[n * C + c];
      const double* p = px + (static_cast<long>(n) * C + c) * HW;
      double s = 0.0;
      for (long i = 0; i < HW; ++i) {
        const double d = p[i] - m;
        s += d * d;
      }
      py[n * C + c] = std::sqrt(s / static_cast<double>(HW) + eps);
    }
  return make_node(std::move(y), {x, mu}, [](Node& self) {
    Node& xn = *self.parents[0];
    Node& mn = *self.parents[1];
    const int N = xn.value.dim(0), C = xn.value.dim(1);
    const long HW = static_cast<long>(xn.value.dim(2)) * xn.value.dim(3);
    const double* g = self.grad.data();
    const double* out = self.value.data();
    const double* px = xn.value.data();
    const double* pm = mn.value.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const long o = n * C + c;
        const double m = pm[o];
        const double s = out[o];
        const double gv = g[o];
        if (gv == 0.0) continue;
        const double* p = px + (static_cast<long>(n) * C + c) * HW;
        if (xn.requires_grad) {
          double* dx = xn.ensure_grad().data() + (static_cast<long>(n) * C + c) * HW;
          const double f = gv / (static_cast<double>(HW) * s);
          for (long i = 0; i < HW; ++i) dx[i] += f * (p[i] - m);
        }
        if (mn.requires_grad) {
          double xbar = 0.0;
          for (long i = 0; i < HW; ++i) xbar += p[i];
          xbar /= static_cast<double>(HW);
          mn.ensure_grad().data()[o] += gv * (m - xbar) / s;
        }
      }
  });
}

Var mean_nhw(const Var& x) {
  check(x->value.ndim() == 4, "mean_nhw: x must be {N,C,H,W}");
  const int N = x->value.dim(0), C = x->value.dim(1);
  const long HW = static_cast<long>(x->value.dim(2)) * x->value.dim(3);
  Tensor y({C});
  const double* px = x->value.data();
  double* py = y.data();
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int n = 0; n < N; ++n) {
      const double* p = px + (static_cast<long>(n) * C + c) * HW;
      for (long i = 0; i < HW; ++i) s += p[i];
    }
    py[c] = s / static_cast<double>(HW * N);
  }
  return make_node(std::move(y), {x}, [](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    const int N = xn.value.dim(0), C = xn.value.dim(1);
    const long HW = static_cast<long>(xn.value.dim(2)) * xn.value.dim(3);
    const double* g = self.grad.data();
    double* dx = xn.ensure_grad().data();
    for (int c = 0; c < C; ++c) {
      const double gv = g[c] / static_cast<double>(HW * N);
      for (int n = 0; n < N; ++n) {
        double* p = dx + (static_cast<long>(n) * C + c) * HW;
        for (long i = 0; i < HW; ++i) p[i] += gv;
      }
    }
  });
}

Var std_nhw(const Var& x, const Var& mu, double eps) {
  check(x->value.ndim() == 4, "std_nhw: x must be {N,C,H,W}");
  const int N = x->value.dim(0), C = x->value.dim(1);
  check(mu->value.ndim() == 1 && mu->value.dim(0) == C, "std_nhw: mu must be {C}");
  const long HW = static_cast<long>(x->value.dim(2)) * x->value.dim(3);
  Tensor y({C});
  const double* px = x->value.data();
  const double* pm = mu->value.data();
  double* py = y.data();
  for (int c = 0; c < C; ++c) {
    const double m = pm[c];
    double s = 0.0;
    for (int n = 0; n < N; ++n) {
      const double* p = px + (static_cast<long>(n) * C + c) * HW;
      for (long i = 0; i < HW; ++i) {
        const double d = p[i] - m;
        s += d * d;
      }
    }
    py[c] = std::sqrt(s / static_cast<double>(HW * N) + eps);
  }
  return make_node(std::move(y), {x, mu}, [](Node& self) {
    Node& xn = *self.parents[0];
    Node& mn = *self.parents[1];
    const int N = xn.value.dim(0), C = xn.value.dim(1);
    const long HW = static_cast<long>(xn.value.dim(2)) * xn.value.dim(3);
    const long cnt = HW * N;
    const double* g = self.grad.data();
    const double* out = self.value.data();
    const double* px = xn.value.data();
    const double* pm = mn.value.data();
    for (int c = 0; c < C; ++c) {
      const double gv = g[c];
      if (gv == 0.0) continue;
      const double m = pm[c];
      const double s = out[c];
      if (xn.requires_grad) {
        const double f = gv / (static_cast<double>(cnt) * s);
        for (int n = 0; n < N; ++n) {
          const double* p = px + (static_cast<long>(n) * C + c) * HW;
          double* dx = xn.ensure_grad().data() + (static_cast<long>(n) * C + c) * HW;
          for (long i = 0; i < HW; ++i) dx[i] += f * (p[i] - m);
        }
      }
      if (mn.requires_grad) {
        double xbar = 0.0;
        for (int n = 0; n < N; ++n) {
          const double* p = px + (static_cast<long>(n) * C + c) * HW;
          for (long i = 0; i < HW; ++i) xbar += p[i];
        }
        xbar /= static_cast<double>(cnt);
        mn.ensure_grad().data()[c] += gv * (m - xbar) / s;
      }
    }
  });
}

Var broadcast_cn(const Var& v, int n) {
  check(v->value.ndim() == 1, "broadcast_cn: v must be {C}");
  const int C = v->value.dim(0);
  Tensor y({n, C});
  const double* pv = v->value.data();
  double* py = y.data();
  for (int i = 0; i < n; ++i) std::memcpy(py + static_cast<long>(i) * C, pv, sizeof(double) * C);
  return make_node(std::move(y), {v}, [](Node& self) {
    Node& vn = *self.parents[0];
    if (!vn.requires_grad) return;
    const int N = self.value.dim(0), C = self.value.dim(1);
    const double* g = self.grad.data();
    double* dv = vn.ensure_grad().data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) dv[c] += g[n * C + c];
  });
}

Var normalize_nc(const Var& x, const Var& mu, const Var& sigma) {
  check(x->value.ndim() == 4, "normalize_nc: x must be {N,C,H,W}");
  const int N = x->value.dim(0), C = x->value.dim(1);
  check(mu->value.ndim() == 2 && mu->value.dim(0) == N && mu->value.dim(1) == C,
        "normalize_nc: mu must be {N,C}");
  check(sigma->value.same_shape(mu->value), "normalize_nc: sigma must be {N,C}");
  const long HW = static_cast<long>(x->value.dim(2)) * x->value.dim(3);
  Tensor y(x->value.shape());
  const double* px = x->value.data();
  const double* pm = mu->value.data();
  const double* ps = sigma->value.data();
  double* py = y.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double m = pm[n * C + c];
      const double inv = 1.0 / ps[n * C + c];
      const double* p = px + (static_cast<long>(n) * C + c) * HW;
      double* q = py + (static_cast<long>(n) * C + c) * HW;
      for (long i = 0; i < HW; ++i) q[i] = (p[i] - m) * inv;
    }
  return make_node(std::move(y), {x, mu, sigma}, [](Node& self) {
    Node& xn = *self.parents[0];
    Node& mn = *self.parents[1];
    Node& sn = *self.parents[2];
    const int N = xn.value.dim(0), C = xn.value.dim(1);
    const long HW = static_cast<long>(xn.value.dim(2)) * xn.value.dim(3);
    const double* g = self.grad.data();
    const double* out = self.value.data();
    const double* ps = sn.value.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const long o = n * C + c;
        const double inv = 1.0 / ps[o];
        const double* gp = g + (static_cast<long>(n) * C + c) * HW;
        const double* yp = out + (static_cast<long>(n) * C + c) * HW;
        if (xn.requires_grad) {
          double* dx = xn.ensure_grad().data() + (static_cast<long>(n) * C + c) * HW;
          for (long i = 0; i < HW; ++i) dx[i] += gp[i] * inv;
        }
        if (mn.requires_grad || sn.requires_grad) {
          double gsum = 0.0, gysum = 0.0;
          for (long i = 0; i < HW; ++i) {
            gsum += gp[i];
            gysum += gp[i] * yp[i];
          }
          if (mn.requires_grad) mn.ensure_grad().data()[o] -= gsum * inv;
          if (sn.requires_grad) sn.ensure_grad().data()[o] -= gysum * inv;
        }
      }
  });
}

Var channel_affine(const Var& x, const Var& gamma, const Var& beta) {
  check(x->value.ndim() == 4, "channel_affine: x must be {N,C,H,W}");
  const int N = x->value.dim(0), C = x->value.dim(1);
  check(gamma->value.ndim() == 1 && gamma->value.dim(0) == C, "channel_affine: gamma shape");
  check(beta->value.ndim() == 1 && beta->value.dim(0) == C, "channel_affine: beta shape");
  const long HW = static_cast<long>(x->value.dim(2)) * x->value.dim(3);
  Tensor y(x->value.shape());
  const double* px = x->value.data();
  const double* pg = gamma->value.data();
  const double* pb = beta->value.data();
  double* py = y.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double gm = pg[c], bt = pb[c];
      const double* p = px + (static_cast<long>(n) * C + c) * HW;
      double* q = py + (static_cast<long>(n) * C + c) * HW;
      for (long i = 0; i < HW; ++i) q[i] = p[i] * gm + bt;
    }
  return make_node(std::move(y), {x, gamma, beta}, [](Node& self) {
    Node& xn = *self.parents[0];
    Node& gn = *self.parents[1];
    Node& bn = *self.parents[2];
    const int N = xn.value.dim(0), C = xn.value.dim(1);
    const long HW = static_cast<long>(xn.value.dim(2)) * xn.value.dim(3);
    const double* g = self.grad.data();
    const double* px = xn.value.data();
    const double* pg = gn.value.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double* gp = g + (static_cast<long>(n) * C + c) * HW;
        const double* xp = px + (static_cast<long>(n) * C + c) * HW;
        if (xn.requires_grad) {
          const double gm = pg[c];
          double* dx = xn.ensure_grad().data() + (static_cast<long>(n) * C + c) * HW;
          for (long i = 0; i < HW; ++i) dx[i] += gp[i] * gm;
        }
        if (gn.requires_grad || bn.requires_grad) {
          double gx = 0.0, gs = 0.0;
          for (long i = 0; i < HW; ++i) {
            gx += gp[i] * xp[i];
            gs += gp[i];
          }
          if (gn.requires_grad) gn.ensure_grad().data()[c] += gx;
          if (bn.requires_grad) bn.ensure_grad().data()[c] += gs;
        }
      }
  });
}

Var concat_c(const std::vector<Var>& xs) {
  check(!xs.empty(), "concat_c: empty input");
  const int N = xs[0]->value.dim(0), H = xs[0]->value.dim(2), W = xs[0]->value.dim(3);
  int Ctot = 0;
  for (const Var& v : xs) {
    check(v->value.ndim() == 4 && v->value.dim(0) == N && v->value.dim(2) == H &&
              v->value.dim(3) == W,
          "concat_c: incompatible shapes");
    Ctot += v->value.dim(1);
  }
  const long HW = static_cast<long>(H) * W;
  Tensor y({N, Ctot, H, W});
  double* py = y.data();
  for (int n = 0; n < N; ++n) {
    long off = 0;
    for (const Var& v : xs) {
      const int C = v->value.dim(1);
      std::memcpy(py + (static_cast<long>(n) * Ctot) * HW + off * HW,
                  v->value.data() + static_cast<long>(n) * C * HW, sizeof(double) * C * HW);
      off += C;
    }
  }
  return make_node(std::move(y), xs, [](Node& self) {
    const int N = self.value.dim(0), Ctot = self.value.dim(1);
    const long HW = static_cast<long>(self.value.dim(2)) * self.value.dim(3);
    const double* g = self.grad.data();
    for (int n = 0; n < N; ++n) {
      long off = 0;
      for (const Var& v : self.parents) {
        const int C = v->value.dim(1);
        if (v->requires_grad) {
          double* dv = v->ensure_grad().data() + static_cast<long>(n) * C * HW;
          const double* gp = g + (static_cast<long>(n) * Ctot + off) * HW;
          for (long i = 0; i < C * HW; ++i) dv[i] += gp[i];
        }
        off += C;
      }
    }
  });
}

Var concat_nc(const std::vector<Var>& xs) {
  check(!xs.empty(), "concat_nc: empty input");
  const int N = xs[0]->value.dim(0);
  int Ctot = 0;
  for (const Var& v : xs) {
    check(v->value.ndim() == 2 && v->value.dim(0) == N, "concat_nc: incompatible shapes");
    Ctot += v->value.dim(1);
  }
  Tensor y({N, Ctot});
  double* py = y.data();
  for (int n = 0; n < N; ++n) {
    int off = 0;
    for (const Var& v : xs) {
      const int C = v->value.dim(1);
      std::memcpy(py + static_cast<long>(n) * Ctot + off, v->value.data() + static_cast<long>(n) * C,
                  sizeof(double) * C);
      off += C;
    }
  }
  return make_node(std::move(y), xs, [](Node& self) {
    const int N = self.value.dim(0), Ctot = self.value.dim(1);
    const double* g = self.grad.data();
    for (int n = 0; n < N; ++n) {
      int off = 0;
      for (const Var& v : self.parents) {
        const int C = v->value.dim(1);
        if (v->requires_grad) {
          double* dv = v->ensure_grad().data() + static_cast<long>(n) * C;
          const double* gp = g + static_cast<long>(n) * Ctot + off;
          for (int i = 0; i < C; ++i) dv[i] += gp[i];
        }
        off += C;
      }
    }
  });
}

namespace {
// Source indices and weight for bilinear 2x upsampling along one axis.
void up2x_axis(int in, std::vector<int>& i0, std::vector<int>& i1, std::vector<double>& f) {
  const int out = in * 2;
  i0.resize(out);
  i1.resize(out);
  f.resize(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    int a = static_cast<int>(src);
    if (a > in - 1) a = in - 1;
    int b = a + 1 < in ? a + 1 : in - 1;
    i0[o] = a;
    i1[o] = b;
    f[o] = src - a;
  }
}
}  // namespace

Var upsample2x(const Var& x) {
  check(x->value.ndim() == 4, "upsample2x: x must be {N,C,H,W}");
  const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int Ho = H * 2, Wo = W * 2;
  std::vector<int> ry0, ry1, rx0, rx1;
  std::vector<double> fy, fx;
  up2x_axis(H, ry0, ry1, fy);
  up2x_axis(W, rx0, rx1, fx);
  Tensor y({N, C, Ho, Wo});
  const double* px = x->value.data();
  double* py = y.data();
  for (long nc = 0; nc < static_cast<long>(N) * C; ++nc) {
    const double* p = px + nc * H * W;
    double* q = py + nc * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const int a = ry0[oy], b = ry1[oy];
      const double t = fy[oy];
      for (int ox = 0; ox < Wo; ++ox) {
        const int l = rx0[ox], r = rx1[ox];
        const double u = fx[ox];
        q[oy * Wo + ox] = (1 - t) * ((1 - u) * p[a * W + l] + u * p[a * W + r]) +
                          t * ((1 - u) * p[b * W + l] + u * p[b * W + r]);
      }
    }
  }
  return make_node(std::move(y), {x}, [](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    const int N = xn.value.dim(0), C = xn.value.dim(1), H = xn.value.dim(2), W = xn.value.dim(3);
    const int Ho = H * 2, Wo = W * 2;
    std::vector<int> ry0, ry1, rx0, rx1;
    std::vector<double> fy, fx;
    up2x_axis(H, ry0, ry1, fy);
    up2x_axis(W, rx0, rx1, fx);
    const double* g = self.grad.data();
    double* dx = xn.ensure_grad().data();
    for (long nc = 0; nc < static_cast<long>(N) * C; ++nc) {
      const double* gq = g + nc * Ho * Wo;
      double* dp = dx + nc * H * W;
      for (int oy = 0; oy < Ho; ++oy) {
        const int a = ry0[oy], b = ry1[oy];
        const double t = fy[oy];
        for (int ox = 0; ox < Wo; ++ox) {
          const int l = rx0[ox], r = rx1[ox];
          const double u = fx[ox];
          const double gv = gq[oy * Wo + ox];
          dp[a * W + l] += gv * (1 - t) * (1 - u);
          dp[a * W + r] += gv * (1 - t) * u;
          dp[b * W + l] += gv * t * (1 - u);
          dp[b * W + r] += gv * t * u;
        }
      }
    }
  });
}

Var rgb_to_gray(const Var& x) {
  check(x->value.ndim() == 4 && x->value.dim(1) == 3, "rgb_to_gray: x must be {N,3,H,W}");
  const int N = x->value.dim(0), H = x->value.dim(2), W = x->value.dim(3);
  const long HW = static_cast<long>(H) * W;
  constexpr double kR = 0.299, kG = 0.587, kB = 0.114;
  Tensor y({N, 1, H, W});
  const double* px = x->value.data();
  double* py = y.data();
  for (int n = 0; n < N; ++n) {
    const double* r = px + static_cast<long>(n) * 3 * HW;
    const double* g = r + HW;
    const double* b = g + HW;
    double* q = py + static_cast<long>(n) * HW;
    for (long i = 0; i < HW; ++i) q[i] = kR * r[i] + kG * g[i] + kB * b[i];
  }
  return make_node(std::move(y), {x}, [](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    const int N = xn.value.dim(0);
    const long HW = static_cast<long>(xn.value.dim(2)) * xn.value.dim(3);
    constexpr double kR = 0.299, kG = 0.587, kB = 0.114;
    const double* g = self.grad.data();
    double* dx = xn.ensure_grad().data();
    for (int n = 0; n < N; ++n) {
      const double* gp = g + static_cast<long>(n) * HW;
      double* r = dx + static_cast<long>(n) * 3 * HW;
      double* gg = r + HW;
      double* b = gg + HW;
      for (long i = 0; i < HW; ++i) {
        r[i] += kR * gp[i];
        gg[i] += kG * gp[i];
        b[i] += kB * gp[i];
      }
    }
  });
}

Var sort_match(const Var& values_from, const Tensor& order_from) {
  check(values_from->value.same_shape(order_from), "sort_match: shape mismatch");
  check(values_from->value.ndim() == 4, "sort_match: expects {N,C,H,W}");
  const int N = order_from.dim(0), C = order_from.dim(1);
  const long HW = static_cast<long>(order_from.dim(2)) * order_from.dim(3);

  // gather[k]: flat source index in values_from for output position k.
  auto gather = std::make_shared<std::vector<long>>(static_cast<std::size_t>(N) * C * HW);
  Tensor y(order_from.shape());
  const double* pv = values_from->value.data();
  const double* po = order_from.data();
  double* py = y.data();
  std::vector<int> perm_o, perm_v, rank(static_cast<std::size_t>(HW));
  for (long nc = 0; nc < static_cast<long>(N) * C; ++nc) {
    const double* ov = po + nc * HW;
    const double* vv = pv + nc * HW;
    stable_argsort(ov, static_cast<int>(HW), perm_o);
    stable_argsort(vv, static_cast<int>(HW), perm_v);
    for (long j = 0; j < HW; ++j) rank[static_cast<std::size_t>(perm_o[j])] = static_cast<int>(j);
    long* gI = gather->data() + nc * HW;
    double* q = py + nc * HW;
    for (long k = 0; k < HW; ++k) {
      const long src = nc * HW + perm_v[rank[static_cast<std::size_t>(k)]];
      gI[k] = src;
      q[k] = pv[src];
    }
  }
  return make_node(std::move(y), {values_from}, [gather](Node& self) {
    Node& vn = *self.parents[0];
    if (!vn.requires_grad) return;
    const double* g = self.grad.data();
    double* dv = vn.ensure_grad().data();
    const long total = static_cast<long>(self.value.size());
    const long* gI = gather->data();
    for (long k = 0; k < total; ++k) dv[gI[k]] += g[k];
  });
}

Var softplus_shift(const Var& delta, const Var& m) {
  check(delta->value.same_shape(m->value), "softplus_shift: shape mismatch");
  Tensor y(delta->value.shape());
  const double* pd = delta->value.data();
  const double* pm = m->value.data();
  double* py = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (pm[i] == 0.0) {
      py[i] = pd[i];
    } else {
      py[i] = stable_softplus(softplus_inv(pd[i]) + pm[i]);
    }
  }
  return make_node(std::move(y), {delta, m}, [](Node& self) {
    Node& dn = *self.parents[0];
    Node& mn = *self.parents[1];
    const double* g = self.grad.data();
    const double* pd = dn.value.data();
    const double* pm = mn.value.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (g[i] == 0.0) continue;
      // d(out)/dm = sigmoid(spinv(d)+m); d(out)/dd = sigmoid(spinv(d)+m)/(1-exp(-d)).
      // At m == 0 these reduce to (1-exp(-d)) and 1 exactly.
      const double one_m_exp = -std::expm1(-pd[i]);  // 1 - exp(-d)
      double sig;
      if (pm[i] == 0.0) {
        sig = one_m_exp;
      } else {
        sig = stable_sigmoid(softplus_inv(pd[i]) + pm[i]);
      }
      if (dn.requires_grad) dn.ensure_grad().data()[i] += g[i] * sig / one_m_exp;
      if (mn.requires_grad) mn.ensure_grad().data()[i] += g[i] * sig;
    }
  });
}

Var bce_probs(const Var& p, const Tensor& t) {
  check(p->value.same_shape(t), "bce_probs: shape mismatch");
  constexpr double kLo = 1e-12, kHi = 1.0 - 1e-12;
  const double* pp = p->value.data();
  const double* pt = t.data();
  const std::size_t n = p->value.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(pp[i], kLo, kHi);
    loss += -(pt[i] * std::log(q) + (1.0 - pt[i]) * std::log(1.0 - q));
  }
  loss /= static_cast<double>(n);
  Tensor tc = t.clone();
  return make_node(Tensor::scalar(loss), {p}, [tc](Node& self) {
    Node& pn = *self.parents[0];
    if (!pn.requires_grad) return;
    const double g = self.grad[0] / static_cast<double>(pn.value.size());
    const double* pp = pn.value.data();
    const double* pt = tc.data();
    double* dp = pn.ensure_grad().data();
    for (std::size_t i = 0; i < pn.value.size(); ++i) {
      if (pp[i] <= kLo || pp[i] >= kHi) continue;  // clamp region
      dp[i] += g * (pp[i] - pt[i]) / (pp[i] * (1.0 - pp[i]));
    }
  });
}

Var bce_logits(const Var& z, const Tensor& t) {
  check(z->value.same_shape(t), "bce_logits: shape mismatch");
  const double* pz = z->value.data();
  const double* pt = t.data();
  const std::size_t n = z->value.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double zv = pz[i];
    loss += std::max(zv, 0.0) - zv * pt[i] + std::log1p(std::exp(-std::abs(zv)));
  }
  loss /= static_cast<double>(n);
  Tensor tc = t.clone();
  return make_node(Tensor::scalar(loss), {z}, [tc](Node& self) {
    Node& zn = *self.parents[0];
    if (!zn.requires_grad) return;
    const double g = self.grad[0] / static_cast<double>(zn.value.size());
    const double* pz = zn.value.data();
    const double* pt = tc.data();
    double* dz = zn.ensure_grad().data();
    for (std::size_t i = 0; i < zn.value.size(); ++i)
      dz[i] += g * (stable_sigmoid(pz[i]) - pt[i]);
  });
}

Var mse(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "mse: shape mismatch");
  const double* pa = a->value.data();
  const double* pb = b->value.data();
  const std::size_t n = a->value.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pa[i] - pb[i];
    loss += d * d;
  }
  loss /= static_cast<double>(n);
  return make_node(Tensor::scalar(loss), {a, b}, [](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    const double g = 2.0 * self.grad[0] / static_cast<double>(an.value.size());
    const double* pa = an.value.data();
    const double* pb = bn.value.data();
    if (an.requires_grad) {
      double* da = an.ensure_grad().data();
      for (std::size_t i = 0; i < an.value.size(); ++i) da[i] += g * (pa[i] - pb[i]);
    }
    if (bn.requires_grad) {
      double* db = bn.ensure_grad().data();
      for (std::size_t i = 0; i < bn.value.size(); ++i) db[i] -= g * (pa[i] - pb[i]);
    }
  });
}

}  // namespace darc
