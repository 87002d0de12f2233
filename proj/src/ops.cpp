#include "neurofuse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nf::ops {

int64_t conv_out_extent(int64_t in, int64_t kernel, int64_t stride, Padding padding) {
  if (stride < 1) throw ShapeError("stride must be >= 1");
  if (padding == Padding::same) return (in + stride - 1) / stride;
  if (kernel > in) {
    throw ShapeError("kernel extent " + std::to_string(kernel) + " exceeds input extent " +
                     std::to_string(in) + " under valid padding");
  }
  return (in - kernel) / stride + 1;
}

int64_t same_pad_before(int64_t in, int64_t kernel, int64_t stride) {
  int64_t out = (in + stride - 1) / stride;
  int64_t total = std::max<int64_t>((out - 1) * stride + kernel - in, 0);
  return total / 2;
}

namespace {

template <typename T>
bool any_meta(std::initializer_list<const Var<T>*> vs) {
  for (const Var<T>* v : vs) {
    if (v->defined() && v->is_meta()) return true;
  }
  return false;
}

template <typename T>
Var<T> meta_result(Shape shape) {
  return Var<T>::leaf(Tensor<T>::meta(std::move(shape)));
}

void require_rank(const Shape& s, size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

struct ConvGeom {
  int64_t n, h, w, ci, kh, kw, co, oh, ow, stride, pt, pl;
};

ConvGeom conv_geometry(const Shape& xs, int64_t kh, int64_t kw, int64_t co, int64_t stride,
                       Padding padding) {
  ConvGeom g{};
  g.n = xs[0];
  g.h = xs[1];
  g.w = xs[2];
  g.ci = xs[3];
  g.kh = kh;
  g.kw = kw;
  g.co = co;
  g.stride = stride;
  g.oh = conv_out_extent(g.h, kh, stride, padding);
  g.ow = conv_out_extent(g.w, kw, stride, padding);
  g.pt = padding == Padding::same ? same_pad_before(g.h, kh, stride) : 0;
  g.pl = padding == Padding::same ? same_pad_before(g.w, kw, stride) : 0;
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolutions

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t stride,
              Padding padding) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d kernel");
  const Shape& ws = w.shape();
  if (ws[2] != x.shape()[3]) {
    throw ShapeError("conv2d: input has " + std::to_string(x.shape()[3]) +
                     " channels but kernel " + shape_str(ws) + " expects " +
                     std::to_string(ws[2]));
  }
  const bool has_bias = b.defined();
  if (has_bias && b.shape() != Shape{ws[3]}) {
    throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " does not match " +
                     std::to_string(ws[3]) + " output channels");
  }
  const ConvGeom g = conv_geometry(x.shape(), ws[0], ws[1], ws[3], stride, padding);
  Shape out_shape{g.n, g.oh, g.ow, g.co};
  if (any_meta<T>({&x, &w, &b})) return meta_result<T>(out_shape);

  Tensor<T> out(out_shape);
  const T* xp = x.value().ptr();
  const T* wp = w.value().ptr();
  const T* bp = has_bias ? b.value().ptr() : nullptr;
  T* op = out.ptr();
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t oy = 0; oy < g.oh; ++oy) {
      for (int64_t ox = 0; ox < g.ow; ++ox) {
        T* o = op + ((n * g.oh + oy) * g.ow + ox) * g.co;
        if (bp) std::copy(bp, bp + g.co, o);
        for (int64_t ky = 0; ky < g.kh; ++ky) {
          const int64_t iy = oy * g.stride - g.pt + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t kx = 0; kx < g.kw; ++kx) {
            const int64_t ix = ox * g.stride - g.pl + kx;
            if (ix < 0 || ix >= g.w) continue;
            const T* xin = xp + ((n * g.h + iy) * g.w + ix) * g.ci;
            const T* wk = wp + (ky * g.kw + kx) * g.ci * g.co;
            for (int64_t c = 0; c < g.ci; ++c) {
              const T xv = xin[c];
              if (xv == T(0)) continue;
              const T* wr = wk + c * g.co;
              for (int64_t k = 0; k < g.co; ++k) o[k] += xv * wr[k];
            }
          }
        }
      }
    }
  }

  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result<T>(std::move(out), std::move(inputs), [g, has_bias](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& wn = *self.parents[1];
    const T* dy = self.grad.ptr();
    const T* xp = xn.value.ptr();
    const T* wp = wn.value.ptr();
    T* dx = xn.requires_grad ? xn.grad_buffer().ptr() : nullptr;
    T* dw = wn.requires_grad ? wn.grad_buffer().ptr() : nullptr;
    for (int64_t n = 0; n < g.n; ++n) {
      for (int64_t oy = 0; oy < g.oh; ++oy) {
        for (int64_t ox = 0; ox < g.ow; ++ox) {
          const T* d = dy + ((n * g.oh + oy) * g.ow + ox) * g.co;
          for (int64_t ky = 0; ky < g.kh; ++ky) {
            const int64_t iy = oy * g.stride - g.pt + ky;
            if (iy < 0 || iy >= g.h) continue;
            for (int64_t kx = 0; kx < g.kw; ++kx) {
              const int64_t ix = ox * g.stride - g.pl + kx;
              if (ix < 0 || ix >= g.w) continue;
              const int64_t xoff = ((n * g.h + iy) * g.w + ix) * g.ci;
              const int64_t woff = (ky * g.kw + kx) * g.ci * g.co;
              for (int64_t c = 0; c < g.ci; ++c) {
                if (dx) {
                  const T* wr = wp + woff + c * g.co;
                  T s = 0;
                  for (int64_t k = 0; k < g.co; ++k) s += d[k] * wr[k];
                  dx[xoff + c] += s;
                }
                if (dw) {
                  const T xv = xp[xoff + c];
                  if (xv == T(0)) continue;
                  T* dwr = dw + woff + c * g.co;
                  for (int64_t k = 0; k < g.co; ++k) dwr[k] += xv * d[k];
                }
              }
            }
          }
        }
      }
    }
    if (has_bias && self.parents[2]->requires_grad) {
      T* db = self.parents[2]->grad_buffer().ptr();
      const int64_t rows = g.n * g.oh * g.ow;
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t k = 0; k < g.co; ++k) db[k] += dy[r * g.co + k];
      }
    }
  });
}

template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& dw, int64_t stride, Padding padding) {
  require_rank(x.shape(), 4, "depthwise_conv2d input");
  require_rank(dw.shape(), 4, "depthwise_conv2d kernel");
  const Shape& ks = dw.shape();
  if (ks[2] != x.shape()[3] || ks[3] != 1) {
    throw ShapeError("depthwise_conv2d: kernel " + shape_str(ks) + " incompatible with " +
                     std::to_string(x.shape()[3]) + " input channels");
  }
  const ConvGeom g = conv_geometry(x.shape(), ks[0], ks[1], x.shape()[3], stride, padding);
  Shape out_shape{g.n, g.oh, g.ow, g.ci};
  if (any_meta<T>({&x, &dw})) return meta_result<T>(out_shape);

  Tensor<T> out(out_shape);
  const T* xp = x.value().ptr();
  const T* kp = dw.value().ptr();
  T* op = out.ptr();
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t oy = 0; oy < g.oh; ++oy) {
      for (int64_t ox = 0; ox < g.ow; ++ox) {
        T* o = op + ((n * g.oh + oy) * g.ow + ox) * g.ci;
        for (int64_t ky = 0; ky < g.kh; ++ky) {
          const int64_t iy = oy * g.stride - g.pt + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t kx = 0; kx < g.kw; ++kx) {
            const int64_t ix = ox * g.stride - g.pl + kx;
            if (ix < 0 || ix >= g.w) continue;
            const T* xin = xp + ((n * g.h + iy) * g.w + ix) * g.ci;
            const T* kr = kp + (ky * g.kw + kx) * g.ci;
            for (int64_t c = 0; c < g.ci; ++c) o[c] += xin[c] * kr[c];
          }
        }
      }
    }
  }
  return make_result<T>(std::move(out), {x, dw}, [g](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& kn = *self.parents[1];
    const T* dy = self.grad.ptr();
    const T* xp = xn.value.ptr();
    const T* kp = kn.value.ptr();
    T* dx = xn.requires_grad ? xn.grad_buffer().ptr() : nullptr;
    T* dk = kn.requires_grad ? kn.grad_buffer().ptr() : nullptr;
    for (int64_t n = 0; n < g.n; ++n) {
      for (int64_t oy = 0; oy < g.oh; ++oy) {
        for (int64_t ox = 0; ox < g.ow; ++ox) {
          const T* d = dy + ((n * g.oh + oy) * g.ow + ox) * g.ci;
          for (int64_t ky = 0; ky < g.kh; ++ky) {
            const int64_t iy = oy * g.stride - g.pt + ky;
            if (iy < 0 || iy >= g.h) continue;
            for (int64_t kx = 0; kx < g.kw; ++kx) {
              const int64_t ix = ox * g.stride - g.pl + kx;
              if (ix < 0 || ix >= g.w) continue;
              const int64_t xoff = ((n * g.h + iy) * g.w + ix) * g.ci;
              const int64_t koff = (ky * g.kw + kx) * g.ci;
              for (int64_t c = 0; c < g.ci; ++c) {
                if (dx) dx[xoff + c] += d[c] * kp[koff + c];
                if (dk) dk[koff + c] += d[c] * xp[xoff + c];
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> depthwise_separable_conv(const Var<T>& x, const Var<T>& dw, const Var<T>& pw,
                                const Var<T>& b) {
  if (dw.shape().size() == 4 && x.shape().size() == 4 && dw.shape()[2] != x.shape()[3]) {
    throw ShapeError("depthwise_separable_conv: depthwise kernel " + shape_str(dw.shape()) +
                     " expects " + std::to_string(dw.shape()[2]) + " channels, input has " +
                     std::to_string(x.shape()[3]));
  }
  auto mid = depthwise_conv2d(x, dw, 1, Padding::same);
  return conv2d(mid, pw, b, 1, Padding::same);
}

// ---------------------------------------------------------------------------
// Normalization and pooling

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  const BatchNormStats<T>& stats, Mode mode) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw ShapeError("batch_norm expects rank >= 2, got " + shape_str(xs));
  const int64_t C = xs.back();
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError("batch_norm: gamma/beta must have shape [" + std::to_string(C) + "]");
  }
  if (!stats.running_mean || !stats.running_var) {
    throw std::invalid_argument("batch_norm: running statistics not bound");
  }
  if (any_meta<T>({&x, &gamma, &beta})) return meta_result<T>(xs);

  const int64_t M = x.value().size() / C;
  const T* xp = x.value().ptr();
  const T* gp = gamma.value().ptr();
  const T* bp = beta.value().ptr();
  std::vector<T> mean(C, T(0)), invstd(C, T(0));
  if (mode == Mode::train) {
    std::vector<T> var(C, T(0));
    for (int64_t r = 0; r < M; ++r) {
      for (int64_t c = 0; c < C; ++c) mean[c] += xp[r * C + c];
    }
    for (int64_t c = 0; c < C; ++c) mean[c] /= T(M);
    for (int64_t r = 0; r < M; ++r) {
      for (int64_t c = 0; c < C; ++c) {
        const T d = xp[r * C + c] - mean[c];
        var[c] += d * d;
      }
    }
    T* rm = stats.running_mean->ptr();
    T* rv = stats.running_var->ptr();
    for (int64_t c = 0; c < C; ++c) {
      var[c] /= T(M);
      invstd[c] = T(1) / std::sqrt(var[c] + stats.eps);
      rm[c] = stats.momentum * rm[c] + (T(1) - stats.momentum) * mean[c];
      rv[c] = stats.momentum * rv[c] + (T(1) - stats.momentum) * var[c];
    }
  } else {
    const T* rm = stats.running_mean->ptr();
    const T* rv = stats.running_var->ptr();
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = rm[c];
      invstd[c] = T(1) / std::sqrt(rv[c] + stats.eps);
    }
  }

  Tensor<T> xhat(xs);
  Tensor<T> out(xs);
  T* hp = xhat.ptr();
  T* op = out.ptr();
  for (int64_t r = 0; r < M; ++r) {
    for (int64_t c = 0; c < C; ++c) {
      const T h = (xp[r * C + c] - mean[c]) * invstd[c];
      hp[r * C + c] = h;
      op[r * C + c] = gp[c] * h + bp[c];
    }
  }
  const bool train = mode == Mode::train;
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [C, M, train, invstd = std::move(invstd), xhat = std::move(xhat)](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Node<T>& gn = *self.parents[1];
        Node<T>& bn = *self.parents[2];
        const T* dy = self.grad.ptr();
        const T* hp = xhat.ptr();
        std::vector<T> sum_dy(C, T(0)), sum_dy_h(C, T(0));
        for (int64_t r = 0; r < M; ++r) {
          for (int64_t c = 0; c < C; ++c) {
            sum_dy[c] += dy[r * C + c];
            sum_dy_h[c] += dy[r * C + c] * hp[r * C + c];
          }
        }
        if (gn.requires_grad) {
          T* dg = gn.grad_buffer().ptr();
          for (int64_t c = 0; c < C; ++c) dg[c] += sum_dy_h[c];
        }
        if (bn.requires_grad) {
          T* db = bn.grad_buffer().ptr();
          for (int64_t c = 0; c < C; ++c) db[c] += sum_dy[c];
        }
        if (xn.requires_grad) {
          const T* gp = gn.value.ptr();
          T* dx = xn.grad_buffer().ptr();
          for (int64_t r = 0; r < M; ++r) {
            for (int64_t c = 0; c < C; ++c) {
              const T d = dy[r * C + c];
              if (train) {
                dx[r * C + c] += gp[c] * invstd[c] *
                                 (d - sum_dy[c] / T(M) - hp[r * C + c] * sum_dy_h[c] / T(M));
              } else {
                dx[r * C + c] += gp[c] * invstd[c] * d;
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> max_pool(const Var<T>& x, int64_t window, int64_t stride, Padding padding) {
  require_rank(x.shape(), 4, "max_pool input");
  const ConvGeom g = conv_geometry(x.shape(), window, window, x.shape()[3], stride, padding);
  Shape out_shape{g.n, g.oh, g.ow, g.ci};
  if (any_meta<T>({&x})) return meta_result<T>(out_shape);

  Tensor<T> out(out_shape);
  std::vector<int64_t> argmax(static_cast<size_t>(out.size()), -1);
  const T* xp = x.value().ptr();
  T* op = out.ptr();
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t oy = 0; oy < g.oh; ++oy) {
      for (int64_t ox = 0; ox < g.ow; ++ox) {
        const int64_t obase = ((n * g.oh + oy) * g.ow + ox) * g.ci;
        for (int64_t c = 0; c < g.ci; ++c) op[obase + c] = -std::numeric_limits<T>::infinity();
        for (int64_t ky = 0; ky < window; ++ky) {
          const int64_t iy = oy * stride - g.pt + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t kx = 0; kx < window; ++kx) {
            const int64_t ix = ox * stride - g.pl + kx;
            if (ix < 0 || ix >= g.w) continue;
            const int64_t ibase = ((n * g.h + iy) * g.w + ix) * g.ci;
            for (int64_t c = 0; c < g.ci; ++c) {
              if (xp[ibase + c] > op[obase + c]) {
                op[obase + c] = xp[ibase + c];
                argmax[static_cast<size_t>(obase + c)] = ibase + c;
              }
            }
          }
        }
      }
    }
  }
  return make_result<T>(std::move(out), {x}, [argmax = std::move(argmax)](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().ptr();
    const T* dy = self.grad.ptr();
    for (size_t i = 0; i < argmax.size(); ++i) {
      if (argmax[i] >= 0) dx[argmax[i]] += dy[i];
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool input");
  const Shape& xs = x.shape();
  const int64_t N = xs[0], P = xs[1] * xs[2], C = xs[3];
  if (any_meta<T>({&x})) return meta_result<T>({N, C});
  Tensor<T> out({N, C});
  const T* xp = x.value().ptr();
  T* op = out.ptr();
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t p = 0; p < P; ++p) {
      for (int64_t c = 0; c < C; ++c) op[n * C + c] += xp[(n * P + p) * C + c];
    }
    for (int64_t c = 0; c < C; ++c) op[n * C + c] /= T(P);
  }
  return make_result<T>(std::move(out), {x}, [N, P, C](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().ptr();
    const T* dy = self.grad.ptr();
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t p = 0; p < P; ++p) {
        for (int64_t c = 0; c < C; ++c) dx[(n * P + p) * C + c] += dy[n * C + c] / T(P);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Dense and elementwise

template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank(x.shape(), 2, "dense input");
  require_rank(w.shape(), 2, "dense weight");
  const int64_t N = x.shape()[0], F = x.shape()[1], G = w.shape()[1];
  if (w.shape()[0] != F) {
    throw ShapeError("dense: input width " + std::to_string(F) + " does not match weight " +
                     shape_str(w.shape()));
  }
  const bool has_bias = b.defined();
  if (has_bias && b.shape() != Shape{G}) {
    throw ShapeError("dense: bias " + shape_str(b.shape()) + " expected [" + std::to_string(G) +
                     "]");
  }
  if (any_meta<T>({&x, &w, &b})) return meta_result<T>({N, G});
  Tensor<T> out({N, G});
  const T* xp = x.value().ptr();
  const T* wp = w.value().ptr();
  T* op = out.ptr();
  for (int64_t n = 0; n < N; ++n) {
    T* o = op + n * G;
    if (has_bias) std::copy(b.value().ptr(), b.value().ptr() + G, o);
    for (int64_t f = 0; f < F; ++f) {
      const T xv = xp[n * F + f];
      const T* wr = wp + f * G;
      for (int64_t k = 0; k < G; ++k) o[k] += xv * wr[k];
    }
  }
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result<T>(std::move(out), std::move(inputs), [N, F, G, has_bias](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& wn = *self.parents[1];
    const T* dy = self.grad.ptr();
    if (xn.requires_grad) {
      T* dx = xn.grad_buffer().ptr();
      const T* wp = wn.value.ptr();
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t f = 0; f < F; ++f) {
          T s = 0;
          for (int64_t k = 0; k < G; ++k) s += dy[n * G + k] * wp[f * G + k];
          dx[n * F + f] += s;
        }
      }
    }
    if (wn.requires_grad) {
      T* dw = wn.grad_buffer().ptr();
      const T* xp = xn.value.ptr();
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t f = 0; f < F; ++f) {
          const T xv = xp[n * F + f];
          for (int64_t k = 0; k < G; ++k) dw[f * G + k] += xv * dy[n * G + k];
        }
      }
    }
    if (has_bias && self.parents[2]->requires_grad) {
      T* db = self.parents[2]->grad_buffer().ptr();
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t k = 0; k < G; ++k) db[k] += dy[n * G + k];
      }
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  if (x.is_meta()) return meta_result<T>(x.shape());
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = v > T(0) ? v : T(0);
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    T* dx = xn.grad_buffer().ptr();
    const T* xp = xn.value.ptr();
    const T* dy = self.grad.ptr();
    const int64_t n = self.value.size();
    for (int64_t i = 0; i < n; ++i) {
      if (xp[i] > T(0)) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  if (x.is_meta()) return meta_result<T>(x.shape());
  Tensor<T> out = x.value();
  for (T& v : out.data()) {
    // Branching keeps exp() from overflowing for large |v|.
    v = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().ptr();
    const T* y = self.value.ptr();
    const T* dy = self.grad.ptr();
    const int64_t n = self.value.size();
    for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
  });
}

namespace {

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const int64_t N = x.dim(0), K = x.dim(1);
  Tensor<T> out(x.shape());
  for (int64_t n = 0; n < N; ++n) {
    const T* r = x.ptr() + n * K;
    T* o = out.ptr() + n * K;
    const T m = *std::max_element(r, r + K);
    T s = 0;
    for (int64_t k = 0; k < K; ++k) {
      o[k] = std::exp(r[k] - m);
      s += o[k];
    }
    for (int64_t k = 0; k < K; ++k) o[k] /= s;
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> softmax(const Var<T>& x) {
  require_rank(x.shape(), 2, "softmax input");
  if (x.is_meta()) return meta_result<T>(x.shape());
  const int64_t N = x.shape()[0], K = x.shape()[1];
  return make_result<T>(softmax_rows(x.value()), {x}, [N, K](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().ptr();
    const T* y = self.value.ptr();
    const T* dy = self.grad.ptr();
    for (int64_t n = 0; n < N; ++n) {
      T dot = 0;
      for (int64_t k = 0; k < K; ++k) dot += dy[n * K + k] * y[n * K + k];
      for (int64_t k = 0; k < K; ++k) dx[n * K + k] += y[n * K + k] * (dy[n * K + k] - dot);
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  if (any_meta<T>({&a, &b})) return meta_result<T>(a.shape());
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->accumulate(self.grad);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  if (x.is_meta()) return meta_result<T>(x.shape());
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= factor;
  return make_result<T>(std::move(out), {x}, [factor](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().ptr();
    const T* dy = self.grad.ptr();
    for (int64_t i = 0; i < self.value.size(); ++i) dx[i] += factor * dy[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  if (x.is_meta()) return meta_result<T>({1});
  T s = 0;
  for (T v : x.value().data()) s += v;
  return make_result<T>(Tensor<T>({1}, s), {x}, [](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    T* dx = xn.grad_buffer().ptr();
    const T g = self.grad[0];
    for (int64_t i = 0; i < xn.value.size(); ++i) dx[i] += g;
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  require_rank(s0, 4, "concat_channels input");
  int64_t C = 0;
  bool meta = false;
  std::vector<int64_t> widths;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    require_rank(s, 4, "concat_channels input");
    if (s[0] != s0[0] || s[1] != s0[1] || s[2] != s0[2]) {
      throw ShapeError("concat_channels: spatial mismatch " + shape_str(s0) + " vs " +
                       shape_str(s));
    }
    C += s[3];
    widths.push_back(s[3]);
    meta = meta || v.is_meta();
  }
  Shape out_shape{s0[0], s0[1], s0[2], C};
  if (meta) return meta_result<T>(out_shape);
  const int64_t rows = s0[0] * s0[1] * s0[2];
  Tensor<T> out(out_shape);
  int64_t off = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const T* src = xs[i].value().ptr();
    const int64_t w = widths[i];
    for (int64_t r = 0; r < rows; ++r) std::copy(src + r * w, src + (r + 1) * w, out.ptr() + r * C + off);
    off += w;
  }
  return make_result<T>(std::move(out), xs, [rows, C, widths](Node<T>& self) {
    int64_t off = 0;
    const T* dy = self.grad.ptr();
    for (size_t i = 0; i < widths.size(); ++i) {
      const int64_t w = widths[i];
      if (self.parents[i]->requires_grad) {
        T* dx = self.parents[i]->grad_buffer().ptr();
        for (int64_t r = 0; r < rows; ++r) {
          for (int64_t c = 0; c < w; ++c) dx[r * w + c] += dy[r * C + off + c];
        }
      }
      off += w;
    }
  });
}

template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& a) {
  require_rank(x.shape(), 4, "mul_channel input");
  const int64_t N = x.shape()[0], P = x.shape()[1] * x.shape()[2], C = x.shape()[3];
  if (a.shape() != Shape{N, C}) {
    throw ShapeError("mul_channel: gate " + shape_str(a.shape()) + " expected [" +
                     std::to_string(N) + "," + std::to_string(C) + "]");
  }
  if (any_meta<T>({&x, &a})) return meta_result<T>(x.shape());
  Tensor<T> out(x.shape());
  const T* xp = x.value().ptr();
  const T* ap = a.value().ptr();
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t p = 0; p < P; ++p) {
      for (int64_t c = 0; c < C; ++c) {
        out[(n * P + p) * C + c] = xp[(n * P + p) * C + c] * ap[n * C + c];
      }
    }
  }
  return make_result<T>(std::move(out), {x, a}, [N, P, C](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& an = *self.parents[1];
    const T* dy = self.grad.ptr();
    if (xn.requires_grad) {
      T* dx = xn.grad_buffer().ptr();
      const T* ap = an.value.ptr();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t p = 0; p < P; ++p)
          for (int64_t c = 0; c < C; ++c)
            dx[(n * P + p) * C + c] += dy[(n * P + p) * C + c] * ap[n * C + c];
    }
    if (an.requires_grad) {
      T* da = an.grad_buffer().ptr();
      const T* xp = xn.value.ptr();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t p = 0; p < P; ++p)
          for (int64_t c = 0; c < C; ++c)
            da[n * C + c] += dy[(n * P + p) * C + c] * xp[(n * P + p) * C + c];
    }
  });
}

template <typename T>
Var<T> mul_spatial(const Var<T>& x, const Var<T>& a) {
  require_rank(x.shape(), 4, "mul_spatial input");
  const Shape& xs = x.shape();
  const int64_t M = xs[0] * xs[1] * xs[2], C = xs[3];
  if (a.shape() != Shape{xs[0], xs[1], xs[2], 1}) {
    throw ShapeError("mul_spatial: gate " + shape_str(a.shape()) + " does not match " +
                     shape_str(xs));
  }
  if (any_meta<T>({&x, &a})) return meta_result<T>(xs);
  Tensor<T> out(xs);
  const T* xp = x.value().ptr();
  const T* ap = a.value().ptr();
  for (int64_t m = 0; m < M; ++m) {
    for (int64_t c = 0; c < C; ++c) out[m * C + c] = xp[m * C + c] * ap[m];
  }
  return make_result<T>(std::move(out), {x, a}, [M, C](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& an = *self.parents[1];
    const T* dy = self.grad.ptr();
    if (xn.requires_grad) {
      T* dx = xn.grad_buffer().ptr();
      const T* ap = an.value.ptr();
      for (int64_t m = 0; m < M; ++m)
        for (int64_t c = 0; c < C; ++c) dx[m * C + c] += dy[m * C + c] * ap[m];
    }
    if (an.requires_grad) {
      T* da = an.grad_buffer().ptr();
      const T* xp = xn.value.ptr();
      for (int64_t m = 0; m < M; ++m) {
        T s = 0;
        for (int64_t c = 0; c < C; ++c) s += dy[m * C + c] * xp[m * C + c];
        da[m] += s;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Var<T> nonlocal_attention(const Var<T>& theta, const Var<T>& phi, const Var<T>& g) {
  require_rank(theta.shape(), 4, "nonlocal_attention theta");
  if (phi.shape() != theta.shape()) {
    throw ShapeError("nonlocal_attention: theta " + shape_str(theta.shape()) + " vs phi " +
                     shape_str(phi.shape()));
  }
  const Shape& ts = theta.shape();
  const Shape& gs = g.shape();
  if (gs.size() != 4 || gs[0] != ts[0] || gs[1] != ts[1] || gs[2] != ts[2]) {
    throw ShapeError("nonlocal_attention: g " + shape_str(gs) + " incompatible with " +
                     shape_str(ts));
  }
  const int64_t N = ts[0], P = ts[1] * ts[2], D = ts[3], E = gs[3];
  if (any_meta<T>({&theta, &phi, &g})) return meta_result<T>(gs);

  // attn[n] holds the row-softmaxed PxP similarity matrix, kept for backward.
  std::vector<T> attn(static_cast<size_t>(N * P * P));
  Tensor<T> out(gs);
  const T* tp = theta.value().ptr();
  const T* pp = phi.value().ptr();
  const T* gp = g.value().ptr();
  for (int64_t n = 0; n < N; ++n) {
    const T* tn = tp + n * P * D;
    const T* pn = pp + n * P * D;
    const T* gn = gp + n * P * E;
    T* an = attn.data() + n * P * P;
    T* on = out.ptr() + n * P * E;
    for (int64_t i = 0; i < P; ++i) {
      T* row = an + i * P;
      T m = -std::numeric_limits<T>::infinity();
      for (int64_t j = 0; j < P; ++j) {
        T s = 0;
        for (int64_t d = 0; d < D; ++d) s += tn[i * D + d] * pn[j * D + d];
        row[j] = s;
        m = std::max(m, s);
      }
      T z = 0;
      for (int64_t j = 0; j < P; ++j) {
        row[j] = std::exp(row[j] - m);
        z += row[j];
      }
      for (int64_t j = 0; j < P; ++j) row[j] /= z;
      T* o = on + i * E;
      for (int64_t j = 0; j < P; ++j) {
        const T a = row[j];
        for (int64_t e = 0; e < E; ++e) o[e] += a * gn[j * E + e];
      }
    }
  }
  return make_result<T>(
      std::move(out), {theta, phi, g},
      [N, P, D, E, attn = std::move(attn)](Node<T>& self) {
        Node<T>& thn = *self.parents[0];
        Node<T>& phn = *self.parents[1];
        Node<T>& gnn = *self.parents[2];
        const T* dy = self.grad.ptr();
        const T* tp = thn.value.ptr();
        const T* pp = phn.value.ptr();
        const T* gp = gnn.value.ptr();
        T* dth = thn.requires_grad ? thn.grad_buffer().ptr() : nullptr;
        T* dph = phn.requires_grad ? phn.grad_buffer().ptr() : nullptr;
        T* dg = gnn.requires_grad ? gnn.grad_buffer().ptr() : nullptr;
        std::vector<T> ds(static_cast<size_t>(P * P));
        for (int64_t n = 0; n < N; ++n) {
          const T* an = attn.data() + n * P * P;
          const T* dyn = dy + n * P * E;
          const T* gn = gp + n * P * E;
          if (dg) {
            T* dgn = dg + n * P * E;
            for (int64_t i = 0; i < P; ++i)
              for (int64_t j = 0; j < P; ++j) {
                const T a = an[i * P + j];
                for (int64_t e = 0; e < E; ++e) dgn[j * E + e] += a * dyn[i * E + e];
              }
          }
          if (!dth && !dph) continue;
          // dA = dY G^T, then the softmax Jacobian row by row.
          for (int64_t i = 0; i < P; ++i) {
            T dot = 0;
            for (int64_t j = 0; j < P; ++j) {
              T s = 0;
              for (int64_t e = 0; e < E; ++e) s += dyn[i * E + e] * gn[j * E + e];
              ds[i * P + j] = s;
              dot += s * an[i * P + j];
            }
            for (int64_t j = 0; j < P; ++j) ds[i * P + j] = an[i * P + j] * (ds[i * P + j] - dot);
          }
          const T* tn = tp + n * P * D;
          const T* pn = pp + n * P * D;
          for (int64_t i = 0; i < P; ++i) {
            for (int64_t j = 0; j < P; ++j) {
              const T s = ds[i * P + j];
              if (s == T(0)) continue;
              if (dth) {
                T* d = dth + (n * P + i) * D;
                for (int64_t k = 0; k < D; ++k) d[k] += s * pn[j * D + k];
              }
              if (dph) {
                T* d = dph + (n * P + j) * D;
                for (int64_t k = 0; k < D; ++k) d[k] += s * tn[i * D + k];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Regularization and losses

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, std::mt19937_64* rng, Mode mode) {
  if (mode == Mode::infer || rate <= 0.0 || x.is_meta()) return x;
  if (!rng) throw std::invalid_argument("dropout in train mode needs a random generator");
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor<T> mask(x.shape());
  for (T& m : mask.data()) m = keep(*rng) ? keep_scale : T(0);
  Tensor<T> out = x.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().ptr();
    const T* dy = self.grad.ptr();
    for (int64_t i = 0; i < mask.size(); ++i) dx[i] += dy[i] * mask[i];
  });
}

namespace {

void check_onehot_shapes(const Shape& p, const Shape& y) {
  require_rank(p, 2, "cross-entropy predictions");
  if (p != y) {
    throw ShapeError("cross-entropy: predictions " + shape_str(p) + " vs targets " + shape_str(y));
  }
}

}  // namespace

template <typename T>
Var<T> categorical_cross_entropy(const Var<T>& probs, const Var<T>& onehot) {
  check_onehot_shapes(probs.shape(), onehot.shape());
  if (any_meta<T>({&probs, &onehot})) return meta_result<T>({1});
  const int64_t N = probs.shape()[0], K = probs.shape()[1];
  const T* p = probs.value().ptr();
  const T* y = onehot.value().ptr();
  T loss = 0;
  for (int64_t i = 0; i < N * K; ++i) {
    if (y[i] != T(0)) loss -= y[i] * std::log(std::max(p[i], T(kLogEps)));
  }
  loss /= T(N);
  return make_result<T>(Tensor<T>({1}, loss), {probs, onehot}, [N, K](Node<T>& self) {
    Node<T>& pn = *self.parents[0];
    if (!pn.requires_grad) return;
    T* dp = pn.grad_buffer().ptr();
    const T* p = pn.value.ptr();
    const T* y = self.parents[1]->value.ptr();
    const T g = self.grad[0];
    for (int64_t i = 0; i < N * K; ++i) {
      if (y[i] != T(0) && p[i] > T(kLogEps)) dp[i] -= g * y[i] / (p[i] * T(N));
    }
  });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const Var<T>& onehot) {
  check_onehot_shapes(logits.shape(), onehot.shape());
  if (any_meta<T>({&logits, &onehot})) return meta_result<T>({1});
  const int64_t N = logits.shape()[0], K = logits.shape()[1];
  Tensor<T> probs = softmax_rows(logits.value());
  const T* y = onehot.value().ptr();
  T loss = 0;
  for (int64_t i = 0; i < N * K; ++i) {
    if (y[i] != T(0)) loss -= y[i] * std::log(std::max(probs[i], T(kLogEps)));
  }
  loss /= T(N);
  return make_result<T>(
      Tensor<T>({1}, loss), {logits, onehot}, [N, K, probs = std::move(probs)](Node<T>& self) {
        Node<T>& ln = *self.parents[0];
        if (!ln.requires_grad) return;
        T* dl = ln.grad_buffer().ptr();
        const T* y = self.parents[1]->value.ptr();
        const T g = self.grad[0];
        for (int64_t i = 0; i < N * K; ++i) dl[i] += g * (probs[i] - y[i]) / T(N);
      });
}

// ---------------------------------------------------------------------------

#define NF_INSTANTIATE_OPS(T)                                                                 \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int64_t, Padding);      \
  template Var<T> depthwise_conv2d(const Var<T>&, const Var<T>&, int64_t, Padding);           \
  template Var<T> depthwise_separable_conv(const Var<T>&, const Var<T>&, const Var<T>&,       \
                                           const Var<T>&);                                    \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&,                     \
                             const BatchNormStats<T>&, Mode);                                 \
  template Var<T> max_pool(const Var<T>&, int64_t, int64_t, Padding);                         \
  template Var<T> global_avg_pool(const Var<T>&);                                             \
  template Var<T> dense(const Var<T>&, const Var<T>&, const Var<T>&);                         \
  template Var<T> relu(const Var<T>&);                                                        \
  template Var<T> sigmoid(const Var<T>&);                                                     \
  template Var<T> softmax(const Var<T>&);                                                     \
  template Var<T> add(const Var<T>&, const Var<T>&);                                          \
  template Var<T> scale(const Var<T>&, T);                                                    \
  template Var<T> sum(const Var<T>&);                                                         \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                \
  template Var<T> mul_channel(const Var<T>&, const Var<T>&);                                  \
  template Var<T> mul_spatial(const Var<T>&, const Var<T>&);                                  \
  template Var<T> nonlocal_attention(const Var<T>&, const Var<T>&, const Var<T>&);            \
  template Var<T> dropout(const Var<T>&, double, std::mt19937_64*, Mode);                     \
  template Var<T> categorical_cross_entropy(const Var<T>&, const Var<T>&);                    \
  template Var<T> softmax_cross_entropy(const Var<T>&, const Var<T>&);

NF_INSTANTIATE_OPS(float)
NF_INSTANTIATE_OPS(double)

}  // namespace nf::ops
