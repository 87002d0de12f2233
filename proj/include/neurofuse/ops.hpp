#pragma once

#include <random>
#include <vector>

#include "neurofuse/autodiff.hpp"
#include "neurofuse/tensor.hpp"

/// Differentiable layer primitives. Every op validates shapes eagerly,
/// propagates meta tensors (shape-only) without computing, and records a
/// backward closure only when an input requires a gradient.
namespace nf::ops {

enum class Padding { same, valid };
enum class Mode { train, infer };

/// Output extent along one spatial axis.
int64_t conv_out_extent(int64_t in, int64_t kernel, int64_t stride, Padding padding);
/// Zeros added before the first row/column under `same` padding
/// (total split floor-before / ceil-after).
int64_t same_pad_before(int64_t in, int64_t kernel, int64_t stride);

/// x[N,H,W,Cin] * w[kh,kw,Cin,Cout] + b[Cout]. `b` may be undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t stride,
              Padding padding);

/// Per-channel spatial convolution, dw[kh,kw,C,1], no bias.
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& dw, int64_t stride, Padding padding);

/// depthwise_conv2d (same padding, stride 1) followed by a 1x1 conv with bias.
template <typename T>
Var<T> depthwise_separable_conv(const Var<T>& x, const Var<T>& dw, const Var<T>& pw,
                                const Var<T>& b);

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormStats {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  T momentum = T(0.9);
  T eps = T(1e-5);
};

/// Per-channel normalization over every axis but the last. In train mode
/// batch statistics are used and the running statistics are updated by an
/// exponential moving average (`running = momentum*running + (1-momentum)*batch`).
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  const BatchNormStats<T>& stats, Mode mode);

template <typename T>
Var<T> max_pool(const Var<T>& x, int64_t window, int64_t stride,
                Padding padding = Padding::valid);

/// [N,H,W,C] -> [N,C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

/// x[N,F] w[F,G] + b[G]. `b` may be undefined.
template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);
/// Row-wise softmax over the last axis of a rank-2 tensor.
template <typename T>
Var<T> softmax(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& x, T factor);
/// Sum of all elements, shape [1].
template <typename T>
Var<T> sum(const Var<T>& x);

/// Channel-wise concatenation in argument order.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs);

/// x[N,H,W,C] * a[N,C] broadcast over positions.
template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& a);
/// x[N,H,W,C] * a[N,H,W,1] broadcast over channels.
template <typename T>
Var<T> mul_spatial(const Var<T>& x, const Var<T>& a);

/// Embedded-Gaussian attention over all positions:
/// y[n] = softmax_rows(theta[n] phi[n]^T) g[n], positions flattened.
template <typename T>
Var<T> nonlocal_attention(const Var<T>& theta, const Var<T>& phi, const Var<T>& g);

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, std::mt19937_64* rng, Mode mode);

inline constexpr double kLogEps = 1e-12;

/// Mean over rows of -log(max(p_true, 1e-12)).
template <typename T>
Var<T> categorical_cross_entropy(const Var<T>& probs, const Var<T>& onehot);

/// Softmax followed by categorical cross-entropy, with the fused (p - y) gradient.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const Var<T>& onehot);

}  // namespace nf::ops
