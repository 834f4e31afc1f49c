#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "gdist/autograd.hpp"

namespace gdist::ag {

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const std::size_t n = self.grad.size();
    for (std::size_t p = 0; p < 2; ++p)
      if (double* g = parent_grad(self, p))
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const std::size_t n = self.grad.size();
    if (double* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    if (double* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) g[i] -= self.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const std::size_t n = self.grad.size();
    if (double* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * bv[i];
    if (double* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * av[i];
  });
}

/// scale * x + shift
inline Var affine(const Var& x, double scale, double shift) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = scale * v + shift;
  return make_op(std::move(out), {x}, [scale](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += scale * self.grad[i];
  });
}

inline Var scale(const Var& x, double s) { return affine(x, s, 0.0); }

inline Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make_op(std::move(out), {x}, [](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (self.value[i] > 0.0) g[i] += self.grad[i];
  });
}

inline Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return make_op(std::move(out), {x}, [](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double s = self.value[i];
        g[i] += self.grad[i] * s * (1.0 - s);
      }
  });
}

inline Var tanh(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::tanh(v);
  return make_op(std::move(out), {x}, [](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double t = self.value[i];
        g[i] += self.grad[i] * (1.0 - t * t);
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make_op(Tensor::scalar(s), {x}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      const double go = self.grad[0];
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += go;
    }
  });
}

inline Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size())); }

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_op(std::move(out), {x}, [](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// Mean of equally shaped values.
inline Var average(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("average of zero values");
  Tensor out(xs[0].shape());
  for (const auto& x : xs) {
    detail::same_shape(xs[0], x, "average");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x.value()[i];
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  for (auto& v : out.values()) v *= inv;
  return make_op(std::move(out), std::vector<Var>(xs.begin(), xs.end()), [inv](Node& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p)
      if (double* g = parent_grad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += inv * self.grad[i];
  });
}

/// x[B,T,D] -> x[:,t,:] as [B,D]
inline Var select_step(const Var& x, std::size_t t) {
  expect_rank(x.value(), 3, "select_step");
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  if (t >= T) throw ShapeError("select_step: step out of range");
  Tensor out({B, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d) out(b, d) = x.value()[(b * T + t) * D + d];
  return make_op(std::move(out), {x}, [B, T, D, t](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d) g[(b * T + t) * D + d] += self.grad(b, d);
  });
}

/// T values of shape [B,D] -> [B,T,D]
inline Var stack_dim1(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("stack_dim1 of zero values");
  expect_rank(xs[0].value(), 2, "stack_dim1");
  const std::size_t B = xs[0].dim(0), D = xs[0].dim(1), T = xs.size();
  Tensor out({B, T, D});
  for (std::size_t t = 0; t < T; ++t) {
    detail::same_shape(xs[0], xs[t], "stack_dim1");
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d) out[(b * T + t) * D + d] = xs[t].value()(b, d);
  }
  return make_op(std::move(out), std::vector<Var>(xs.begin(), xs.end()), [B, T, D](Node& self) {
    for (std::size_t t = 0; t < T; ++t)
      if (double* g = parent_grad(self, t))
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t d = 0; d < D; ++d) g[b * D + d] += self.grad[(b * T + t) * D + d];
  });
}

/// x[B,N] -> x[:,k] as [B]
inline Var select_col(const Var& x, std::size_t k) {
  expect_rank(x.value(), 2, "select_col");
  const std::size_t B = x.dim(0), N = x.dim(1);
  Tensor out({B});
  for (std::size_t b = 0; b < B; ++b) out[b] = x.value()(b, k);
  return make_op(std::move(out), {x}, [B, N, k](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t b = 0; b < B; ++b) g[b * N + k] += self.grad[b];
  });
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// x[B,I] * W[O,I]^T + b[O]. `b` may be undefined.
inline Var linear(const Var& x, const Var& W, const Var& b) {
  expect_rank(x.value(), 2, "linear input");
  expect_rank(W.value(), 2, "linear weight");
  const std::size_t B = x.dim(0), I = x.dim(1), O = W.dim(0);
  if (W.dim(1) != I)
    throw ShapeError("linear: input width " + std::to_string(I) + " does not match weight " + shape_str(W.shape()));
  const bool has_bias = b.defined();
  if (has_bias) expect_shape(b.value(), {O}, "linear bias");
  Tensor out({B, O});
  const double* xv = x.value().data();
  const double* wv = W.value().data();
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t o = 0; o < O; ++o) {
      double s = has_bias ? b.value()[o] : 0.0;
      const double* xr = xv + r * I;
      const double* wr = wv + o * I;
      for (std::size_t i = 0; i < I; ++i) s += xr[i] * wr[i];
      out[r * O + o] = s;
    }
  std::vector<Var> parents{x, W};
  if (has_bias) parents.push_back(b);
  return make_op(std::move(out), std::move(parents), [B, I, O, has_bias](Node& self) {
    const double* go = self.grad.data();
    const double* xv = self.parents[0]->value.data();
    const double* wv = self.parents[1]->value.data();
    if (double* gx = parent_grad(self, 0))
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t o = 0; o < O; ++o) {
          const double g = go[r * O + o];
          if (g == 0.0) continue;
          const double* wr = wv + o * I;
          double* gxr = gx + r * I;
          for (std::size_t i = 0; i < I; ++i) gxr[i] += g * wr[i];
        }
    if (double* gw = parent_grad(self, 1))
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t o = 0; o < O; ++o) {
          const double g = go[r * O + o];
          if (g == 0.0) continue;
          const double* xr = xv + r * I;
          double* gwr = gw + o * I;
          for (std::size_t i = 0; i < I; ++i) gwr[i] += g * xr[i];
        }
    if (has_bias)
      if (double* gb = parent_grad(self, 2))
        for (std::size_t r = 0; r < B; ++r)
          for (std::size_t o = 0; o < O; ++o) gb[o] += go[r * O + o];
  });
}

// ---------------------------------------------------------------------------
// Convolutional pieces (NCHW)
// ---------------------------------------------------------------------------

/// [B,T,H,W,C] -> [B,T*C,H,W], channel index t*C + c.
inline Var stack_frames(const Var& clip) {
  expect_rank(clip.value(), 5, "stack_frames");
  const std::size_t B = clip.dim(0), T = clip.dim(1), H = clip.dim(2), W = clip.dim(3), C = clip.dim(4);
  Tensor out({B, T * C, H, W});
  const double* in = clip.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          for (std::size_t c = 0; c < C; ++c)
            out[((b * T * C + t * C + c) * H + y) * W + x] = in[(((b * T + t) * H + y) * W + x) * C + c];
  return make_op(std::move(out), {clip}, [B, T, H, W, C](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
              for (std::size_t c = 0; c < C; ++c)
                g[(((b * T + t) * H + y) * W + x) * C + c] += self.grad[((b * T * C + t * C + c) * H + y) * W + x];
  });
}

/// 3x3 convolution, stride 1, zero padding 1. x[B,C,H,W], W[O,C,3,3], b[O].
inline Var conv3x3(const Var& x, const Var& Wt, const Var& bias) {
  expect_rank(x.value(), 4, "conv3x3 input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = Wt.dim(0);
  expect_shape(Wt.value(), {O, C, 3, 3}, "conv3x3 weight");
  expect_shape(bias.value(), {O}, "conv3x3 bias");
  Tensor out({B, O, H, W});
  const double* in = x.value().data();
  const double* wv = Wt.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      double* op = out.data() + (b * O + o) * H * W;
      std::fill(op, op + H * W, bias.value()[o]);
      for (std::size_t c = 0; c < C; ++c) {
        const double* ip = in + (b * C + c) * H * W;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const double w = wv[((o * C + c) * 3 + ky) * 3 + kx];
            const int dy = ky - 1, dx = kx - 1;
            const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? W - 1 : W;
            for (std::size_t y = 0; y < H; ++y) {
              const long sy = static_cast<long>(y) + dy;
              if (sy < 0 || sy >= static_cast<long>(H)) continue;
              const double* irow = ip + sy * W;
              double* orow = op + y * W;
              for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += w * irow[xx + dx];
            }
          }
      }
    }
  return make_op(std::move(out), {x, Wt, bias}, [B, C, H, W, O](Node& self) {
    const double* go = self.grad.data();
    const double* in = self.parents[0]->value.data();
    const double* wv = self.parents[1]->value.data();
    double* gx = parent_grad(self, 0);
    double* gw = parent_grad(self, 1);
    if (double* gb = parent_grad(self, 2))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o) {
          const double* gp = go + (b * O + o) * H * W;
          double s = 0.0;
          for (std::size_t i = 0; i < H * W; ++i) s += gp[i];
          gb[o] += s;
        }
    if (!gx && !gw) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o) {
        const double* gp = go + (b * O + o) * H * W;
        for (std::size_t c = 0; c < C; ++c) {
          const double* ip = in + (b * C + c) * H * W;
          double* gip = gx ? gx + (b * C + c) * H * W : nullptr;
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const std::size_t widx = ((o * C + c) * 3 + ky) * 3 + kx;
              const double w = wv[widx];
              const int dy = ky - 1, dx = kx - 1;
              const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? W - 1 : W;
              double acc = 0.0;
              for (std::size_t y = 0; y < H; ++y) {
                const long sy = static_cast<long>(y) + dy;
                if (sy < 0 || sy >= static_cast<long>(H)) continue;
                const double* grow = gp + y * W;
                const double* irow = ip + sy * W;
                if (gip) {
                  double* girow = gip + sy * W;
                  for (std::size_t xx = x0; xx < x1; ++xx) {
                    girow[xx + dx] += w * grow[xx];
                    acc += grow[xx] * irow[xx + dx];
                  }
                } else {
                  for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx + dx];
                }
              }
              if (gw) gw[widx] += acc;
            }
        }
      }
  });
}

/// Per-sample normalization over (C,H,W) with per-channel affine.
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  expect_rank(x.value(), 4, "group_norm");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  expect_shape(gamma.value(), {C}, "group_norm gamma");
  expect_shape(beta.value(), {C}, "group_norm beta");
  const std::size_t N = C * HW;
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double* xp = x.value().data() + b * N;
    double mean = 0.0;
    for (std::size_t i = 0; i < N; ++i) mean += xp[i];
    mean /= static_cast<double>(N);
    double var = 0.0;
    for (std::size_t i = 0; i < N; ++i) var += (xp[i] - mean) * (xp[i] - mean);
    var /= static_cast<double>(N);
    inv_std[b] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = b * N + c * HW + i;
        xhat[idx] = (xp[c * HW + i] - mean) * inv_std[b];
        out[idx] = gamma.value()[c] * xhat[idx] + beta.value()[c];
      }
  }
  return make_op(std::move(out), {x, gamma, beta},
                 [B, C, HW, N, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const double* go = self.grad.data();
                   const double* gam = self.parents[1]->value.data();
                   if (double* gg = parent_grad(self, 1))
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t c = 0; c < C; ++c)
                         for (std::size_t i = 0; i < HW; ++i) {
                           const std::size_t idx = b * N + c * HW + i;
                           gg[c] += go[idx] * xhat[idx];
                         }
                   if (double* gb = parent_grad(self, 2))
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t c = 0; c < C; ++c)
                         for (std::size_t i = 0; i < HW; ++i) gb[c] += go[b * N + c * HW + i];
                   if (double* gx = parent_grad(self, 0))
                     for (std::size_t b = 0; b < B; ++b) {
                       double mean_d = 0.0, mean_dx = 0.0;
                       for (std::size_t c = 0; c < C; ++c)
                         for (std::size_t i = 0; i < HW; ++i) {
                           const std::size_t idx = b * N + c * HW + i;
                           const double d = go[idx] * gam[c];
                           mean_d += d;
                           mean_dx += d * xhat[idx];
                         }
                       mean_d /= static_cast<double>(N);
                       mean_dx /= static_cast<double>(N);
                       for (std::size_t c = 0; c < C; ++c)
                         for (std::size_t i = 0; i < HW; ++i) {
                           const std::size_t idx = b * N + c * HW + i;
                           const double d = go[idx] * gam[c];
                           gx[idx] += inv_std[b] * (d - mean_d - xhat[idx] * mean_dx);
                         }
                     }
                 });
}

/// [B,C,H,W] -> [B,C]
inline Var global_avg_pool(const Var& x) {
  expect_rank(x.value(), 4, "global_avg_pool");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < HW; ++i) s += x.value()[(b * C + c) * HW + i];
      out(b, c) = s / static_cast<double>(HW);
    }
  return make_op(std::move(out), {x}, [B, C, HW](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const double v = self.grad(b, c) / static_cast<double>(HW);
          for (std::size_t i = 0; i < HW; ++i) g[(b * C + c) * HW + i] += v;
        }
  });
}

// ---------------------------------------------------------------------------
// Softmax family and row-wise losses. All take [B,N] and reduce to [B] or keep [B,N].
// ---------------------------------------------------------------------------

namespace detail {
inline void softmax_row(const double* z, double* p, std::size_t n, double inv_t) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, z[i] * inv_t);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp(z[i] * inv_t - mx);
    s += p[i];
  }
  for (std::size_t i = 0; i < n; ++i) p[i] /= s;
}
}  // namespace detail

/// softmax(x / temperature) per row.
inline Var softmax(const Var& x, double temperature = 1.0) {
  expect_rank(x.value(), 2, "softmax");
  const std::size_t B = x.dim(0), N = x.dim(1);
  const double inv_t = 1.0 / temperature;
  Tensor out({B, N});
  for (std::size_t b = 0; b < B; ++b) detail::softmax_row(x.value().data() + b * N, out.data() + b * N, N, inv_t);
  return make_op(std::move(out), {x}, [B, N, inv_t](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = self.value.data() + b * N;
        const double* go = self.grad.data() + b * N;
        double dot = 0.0;
        for (std::size_t i = 0; i < N; ++i) dot += go[i] * p[i];
        for (std::size_t i = 0; i < N; ++i) g[b * N + i] += inv_t * p[i] * (go[i] - dot);
      }
  });
}

/// Per-row softmax cross entropy against integer labels, optionally scaled by a per-class weight.
inline Var cross_entropy(const Var& logits, std::span<const int> labels, std::span<const double> class_weights = {}) {
  expect_rank(logits.value(), 2, "cross_entropy");
  const std::size_t B = logits.dim(0), L = logits.dim(1);
  if (labels.size() != B) throw ShapeError("cross_entropy: label count does not match batch");
  if (!class_weights.empty() && class_weights.size() != L)
    throw ShapeError("cross_entropy: class weight count does not match logits");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= L)
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(L) + ")");
  Tensor probs({B, L});
  Tensor out({B});
  std::vector<double> w(B, 1.0);
  for (std::size_t b = 0; b < B; ++b) {
    const double* z = logits.value().data() + b * L;
    detail::softmax_row(z, probs.data() + b * L, L, 1.0);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < L; ++i) mx = std::max(mx, z[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < L; ++i) s += std::exp(z[i] - mx);
    const double logp = z[labels[b]] - mx - std::log(s);
    if (!class_weights.empty()) w[b] = class_weights[labels[b]];
    out[b] = -w[b] * logp;
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return make_op(std::move(out), {logits},
                 [B, L, probs = std::move(probs), ys = std::move(ys), w = std::move(w)](Node& self) {
                   if (double* g = parent_grad(self, 0))
                     for (std::size_t b = 0; b < B; ++b) {
                       const double gb = self.grad[b] * w[b];
                       for (std::size_t i = 0; i < L; ++i)
                         g[b * L + i] += gb * (probs[b * L + i] - (static_cast<int>(i) == ys[b] ? 1.0 : 0.0));
                     }
                 });
}

/// Cross entropy of softmax(logits / T) against a target distribution (rows of `target`).
inline Var soft_cross_entropy(const Var& logits, const Var& target, double temperature) {
  detail::same_shape(logits, target, "soft_cross_entropy");
  const std::size_t B = logits.dim(0), N = logits.dim(1);
  const double inv_t = 1.0 / temperature;
  Tensor out({B});
  Tensor probs({B, N});
  Tensor logq({B, N});
  for (std::size_t b = 0; b < B; ++b) {
    const double* z = logits.value().data() + b * N;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < N; ++i) mx = std::max(mx, z[i] * inv_t);
    double s = 0.0;
    for (std::size_t i = 0; i < N; ++i) s += std::exp(z[i] * inv_t - mx);
    const double lse = mx + std::log(s);
    double ce = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double lq = z[i] * inv_t - lse;
      logq[b * N + i] = lq;
      probs[b * N + i] = std::exp(lq);
      ce -= target.value()[b * N + i] * lq;
    }
    out[b] = ce;
  }
  return make_op(std::move(out), {logits, target},
                 [B, N, inv_t, probs = std::move(probs), logq = std::move(logq)](Node& self) {
                   const double* tv = self.parents[1]->value.data();
                   if (double* g = parent_grad(self, 0))
                     for (std::size_t b = 0; b < B; ++b) {
                       double tsum = 0.0;
                       for (std::size_t i = 0; i < N; ++i) tsum += tv[b * N + i];
                       for (std::size_t i = 0; i < N; ++i)
                         g[b * N + i] += self.grad[b] * inv_t * (tsum * probs[b * N + i] - tv[b * N + i]);
                     }
                   if (double* g = parent_grad(self, 1))
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t i = 0; i < N; ++i) g[b * N + i] -= self.grad[b] * logq[b * N + i];
                 });
}

/// 1 - <u,v> / max(|u||v|, eps), per row.
inline Var cosine_distance(const Var& u, const Var& v, double eps = 1e-8) {
  detail::same_shape(u, v, "cosine_distance");
  expect_rank(u.value(), 2, "cosine_distance");
  const std::size_t B = u.dim(0), N = u.dim(1);
  Tensor out({B});
  std::vector<double> dots(B), nu(B), nv(B), den(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double* up = u.value().data() + b * N;
    const double* vp = v.value().data() + b * N;
    double d = 0.0, a = 0.0, c = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      d += up[i] * vp[i];
      a += up[i] * up[i];
      c += vp[i] * vp[i];
    }
    dots[b] = d;
    nu[b] = std::sqrt(a);
    nv[b] = std::sqrt(c);
    den[b] = std::max(nu[b] * nv[b], eps);
    out[b] = 1.0 - d / den[b];
  }
  return make_op(std::move(out), {u, v}, [B, N, eps, dots, nu, nv, den](Node& self) {
    const double* up = self.parents[0]->value.data();
    const double* vp = self.parents[1]->value.data();
    double* gu = parent_grad(self, 0);
    double* gv = parent_grad(self, 1);
    for (std::size_t b = 0; b < B; ++b) {
      const double go = self.grad[b];
      const bool guarded = nu[b] * nv[b] < eps;
      // d(cos)/du = v/den - dot * (|v|/|u|) u / den^2  (unguarded branch)
      for (std::size_t i = 0; i < N; ++i) {
        const double ui = up[b * N + i], vi = vp[b * N + i];
        if (gu) {
          double dc = vi / den[b];
          if (!guarded && nu[b] > 0.0) dc -= dots[b] * ui / (nu[b] * nu[b] * den[b]);
          gu[b * N + i] -= go * dc;
        }
        if (gv) {
          double dc = ui / den[b];
          if (!guarded && nv[b] > 0.0) dc -= dots[b] * vi / (nv[b] * nv[b] * den[b]);
          gv[b * N + i] -= go * dc;
        }
      }
    }
  });
}

/// Squared Euclidean distance per row.
inline Var squared_distance(const Var& u, const Var& v) {
  detail::same_shape(u, v, "squared_distance");
  const std::size_t B = u.dim(0), N = u.value().size() / u.dim(0);
  Tensor out({B});
  for (std::size_t b = 0; b < B; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double d = u.value()[b * N + i] - v.value()[b * N + i];
      s += d * d;
    }
    out[b] = s;
  }
  return make_op(std::move(out), {u, v}, [B, N](Node& self) {
    const double* up = self.parents[0]->value.data();
    const double* vp = self.parents[1]->value.data();
    double* gu = parent_grad(self, 0);
    double* gv = parent_grad(self, 1);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < N; ++i) {
        const double d = 2.0 * self.grad[b] * (up[b * N + i] - vp[b * N + i]);
        if (gu) gu[b * N + i] += d;
        if (gv) gv[b * N + i] -= d;
      }
  });
}

// ---------------------------------------------------------------------------
// Graph layer pieces over per-example |S|x|S| matrices, stored as [B,S,S].
// ---------------------------------------------------------------------------

/// z[B,S,dz], w[2*dz] -> G[B,S,S] with G[b,j,k] = w . [z_j || z_k].
inline Var pair_scores(const Var& z, const Var& w) {
  expect_rank(z.value(), 3, "pair_scores");
  const std::size_t B = z.dim(0), S = z.dim(1), Dz = z.dim(2);
  expect_shape(w.value(), {2 * Dz}, "pair_scores weight");
  Tensor out({B, S, S});
  const double* zv = z.value().data();
  const double* wv = w.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < S; ++j)
      for (std::size_t k = 0; k < S; ++k) {
        double s = 0.0;
        const double* zj = zv + (b * S + j) * Dz;
        const double* zk = zv + (b * S + k) * Dz;
        for (std::size_t d = 0; d < Dz; ++d) s += wv[d] * zj[d] + wv[Dz + d] * zk[d];
        out[(b * S + j) * S + k] = s;
      }
  return make_op(std::move(out), {z, w}, [B, S, Dz](Node& self) {
    const double* zv = self.parents[0]->value.data();
    const double* wv = self.parents[1]->value.data();
    double* gz = parent_grad(self, 0);
    double* gw = parent_grad(self, 1);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < S; ++j)
        for (std::size_t k = 0; k < S; ++k) {
          const double go = self.grad[(b * S + j) * S + k];
          if (go == 0.0) continue;
          const double* zj = zv + (b * S + j) * Dz;
          const double* zk = zv + (b * S + k) * Dz;
          for (std::size_t d = 0; d < Dz; ++d) {
            if (gz) {
              gz[(b * S + j) * Dz + d] += go * wv[d];
              gz[(b * S + k) * Dz + d] += go * wv[Dz + d];
            }
            if (gw) {
              gw[d] += go * zj[d];
              gw[Dz + d] += go * zk[d];
            }
          }
        }
  });
}

enum class SoftmaxAxis { rows, cols };

/// Softmax of alpha*G along rows (or columns) with the diagonal excluded; diagonal output is 0.
inline Var masked_softmax(const Var& g, double alpha, SoftmaxAxis axis = SoftmaxAxis::rows) {
  expect_rank(g.value(), 3, "masked_softmax");
  const std::size_t B = g.dim(0), S = g.dim(1);
  if (g.dim(2) != S) throw ShapeError("masked_softmax: graph must be square");
  if (S < 2) throw PreconditionError("masked_softmax: graph needs at least 2 vertices");
  const bool rows = axis == SoftmaxAxis::rows;
  auto at = [S, rows](std::size_t b, std::size_t line, std::size_t pos) {
    return rows ? (b * S + line) * S + pos : (b * S + pos) * S + line;
  };
  Tensor out({B, S, S});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t line = 0; line < S; ++line) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t p = 0; p < S; ++p)
        if (p != line) mx = std::max(mx, alpha * g.value()[at(b, line, p)]);
      double s = 0.0;
      for (std::size_t p = 0; p < S; ++p)
        if (p != line) {
          const double e = std::exp(alpha * g.value()[at(b, line, p)] - mx);
          out[at(b, line, p)] = e;
          s += e;
        }
      for (std::size_t p = 0; p < S; ++p)
        if (p != line) out[at(b, line, p)] /= s;
    }
  return make_op(std::move(out), {g}, [B, S, alpha, at](Node& self) {
    if (double* gg = parent_grad(self, 0))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t line = 0; line < S; ++line) {
          double dot = 0.0;
          for (std::size_t p = 0; p < S; ++p)
            if (p != line) dot += self.grad[at(b, line, p)] * self.value[at(b, line, p)];
          for (std::size_t p = 0; p < S; ++p)
            if (p != line) {
              const std::size_t i = at(b, line, p);
              gg[i] += alpha * self.value[i] * (self.grad[i] - dot);
            }
        }
  });
}

/// G[B,S,S] + C[S,S] broadcast over the batch.
inline Var add_broadcast(const Var& g, const Tensor& c) {
  expect_rank(g.value(), 3, "add_broadcast");
  const std::size_t B = g.dim(0), SS = g.dim(1) * g.dim(2);
  expect_shape(c, {g.dim(1), g.dim(2)}, "add_broadcast constant");
  Tensor out = g.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < SS; ++i) out[b * SS + i] += c[i];
  return make_op(std::move(out), {g}, [](Node& self) {
    if (double* gg = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gg[i] += self.grad[i];
  });
}

/// Assemble [B,S,S] from per-entry [B] values in row-major (j,k) order. Undefined entries are 0.
inline Var matrix_from_entries(std::span<const Var> entries, std::size_t S, std::size_t B) {
  if (entries.size() != S * S) throw ShapeError("matrix_from_entries: expected S*S entries");
  Tensor out({B, S, S});
  std::vector<Var> parents;
  std::vector<std::size_t> slot;
  for (std::size_t e = 0; e < S * S; ++e) {
    if (!entries[e].defined()) continue;
    expect_shape(entries[e].value(), {B}, "matrix_from_entries entry");
    for (std::size_t b = 0; b < B; ++b) out[b * S * S + e] = entries[e].value()[b];
    parents.push_back(entries[e]);
    slot.push_back(e);
  }
  return make_op(std::move(out), std::move(parents), [S, B, slot = std::move(slot)](Node& self) {
    for (std::size_t p = 0; p < slot.size(); ++p)
      if (double* g = parent_grad(self, p))
        for (std::size_t b = 0; b < B; ++b) g[b] += self.grad[b * S * S + slot[p]];
  });
}

/// Column sums of each [S,S] slice: out[b,k] = sum_j x[b,j,k].
inline Var column_sums(const Var& x) {
  expect_rank(x.value(), 3, "column_sums");
  const std::size_t B = x.dim(0), R = x.dim(1), S = x.dim(2);
  Tensor out({B, S});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < R; ++j)
      for (std::size_t k = 0; k < S; ++k) out(b, k) += x.value()[(b * R + j) * S + k];
  return make_op(std::move(out), {x}, [B, R, S](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < R; ++j)
          for (std::size_t k = 0; k < S; ++k) g[(b * R + j) * S + k] += self.grad(b, k);
  });
}

/// Scale each [B,S,S] slice entrywise by a constant matrix (used for fixed graphs).
inline Var mul_broadcast(const Var& m, const Tensor& c) {
  expect_rank(m.value(), 3, "mul_broadcast");
  const std::size_t B = m.dim(0), SS = m.dim(1) * m.dim(2);
  expect_shape(c, {m.dim(1), m.dim(2)}, "mul_broadcast constant");
  Tensor out = m.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < SS; ++i) out[b * SS + i] *= c[i];
  return make_op(std::move(out), {m}, [B, SS, c](Node& self) {
    if (double* g = parent_grad(self, 0))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < SS; ++i) g[b * SS + i] += self.grad[b * SS + i] * c[i];
  });
}

}  // namespace gdist::ag
