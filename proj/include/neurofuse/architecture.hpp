#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neurofuse/layers.hpp"

namespace nf {

enum class Preset { paper, tiny };
enum class HeadKind { mlp, none };

Preset parse_preset(const std::string& name);
const char* preset_name(Preset preset);

/// Pre-activation bottleneck residual network (ResNetV2 layout).
struct ResidualConfig {
  int64_t input_size = 224;
  int64_t input_channels = 3;
  int64_t stem_width = 64;
  int64_t stem_kernel = 7;
  int64_t stem_stride = 2;
  bool stem_pool = true;
  std::vector<int64_t> stage_filters{64, 128, 256, 512};
  std::vector<int64_t> stage_blocks{3, 8, 36, 3};
  // Stride of the last block in each stage.
  std::vector<int64_t> stage_strides{2, 2, 2, 1};
  bool frozen = true;

  static ResidualConfig paper();
  static ResidualConfig tiny();
  int64_t out_channels() const { return 4 * stage_filters.back(); }
  int64_t output_grid() const;
  /// Weighted layers in the canonical network, classifier layer included.
  int64_t canonical_depth() const;
};

/// VGG-style trunk: `block_convs[i]` 3x3 convs of width `block_widths[i]`,
/// each block optionally closed by a 2x2/2 max pool.
struct VggConfig {
  int64_t input_size = 224;
  int64_t input_channels = 3;
  std::vector<int64_t> block_widths{64, 128, 256, 512, 512};
  std::vector<int64_t> block_convs{2, 2, 3, 3, 3};
  std::vector<bool> block_pool{true, true, true, true, true};
  bool frozen = true;

  static VggConfig paper();
  static VggConfig tiny();
  /// Spatial extent after block `block` (1-based).
  int64_t block_grid(int block) const;
  int64_t canonical_depth() const;
};

struct TapConfig {
  std::array<int, 3> tap_blocks{3, 4, 5};
  std::array<int64_t, 3> dwsc_out_channels{128, 256, 512};
  int64_t nonlocal_bottleneck_ratio = 2;
  int64_t dwsc_kernel = 3;
  int64_t target_grid = 7;

  int64_t width() const {
    return dwsc_out_channels[0] + dwsc_out_channels[1] + dwsc_out_channels[2];
  }
};

struct FusionConfig {
  int64_t attention_reduction = 16;
  int64_t pointwise_out = 128;
  int64_t num_classes = 3;
  HeadKind head = HeadKind::mlp;
  int64_t mlp_hidden = 64;
  double dropout = 0.3;
};

struct ClassifierConfig {
  ResidualConfig residual;
  VggConfig vgg;
  TapConfig taps;
  FusionConfig fusion;
  uint64_t seed = 7;

  static ClassifierConfig preset(Preset preset, int64_t num_classes = 3);
  int64_t input_size() const { return residual.input_size; }
  int64_t input_channels() const { return residual.input_channels; }
  int64_t fused_channels() const { return residual.out_channels() + taps.width(); }
};

// ---------------------------------------------------------------------------
// Modules. They register parameters into a network's registry on
// construction and are invoked with a forward context.

template <typename T>
class ResidualBackbone {
 public:
  struct Block {
    std::string name;
    int64_t stride = 1;
    BatchNorm<T> preact;
    Conv2D<T> conv1;
    BatchNorm<T> bn1;
    Conv2D<T> conv2;
    BatchNorm<T> bn2;
    Conv2D<T> conv3;
    std::optional<Conv2D<T>> shortcut;
  };

  ResidualBackbone() = default;
  ResidualBackbone(BuildContext<T>& bc, const ResidualConfig& cfg, const std::string& prefix);

  Var<T> operator()(const Var<T>& x, ForwardContext<T>& ctx) const;
  Var<T> block_forward(size_t index, const Var<T>& x, ForwardContext<T>& ctx) const;
  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  std::string prefix_;
  Conv2D<T> stem_;
  bool stem_pool_ = true;
  std::vector<Block> blocks_;
  BatchNorm<T> post_bn_;
};

/// Embedded-Gaussian non-local block with a zero-initialized output
/// projection, so a fresh block is an exact identity.
template <typename T>
class NonLocalBlock {
 public:
  NonLocalBlock() = default;
  NonLocalBlock(BuildContext<T>& bc, const std::string& name, int64_t channels,
                int64_t bottleneck_ratio);
  Var<T> operator()(const Var<T>& x, ForwardContext<T>& ctx) const;
  const Conv2D<T>& theta() const { return theta_; }
  const Conv2D<T>& phi() const { return phi_; }
  const Conv2D<T>& g() const { return g_; }
  const Conv2D<T>& out() const { return out_; }

 private:
  std::string name_;
  Conv2D<T> theta_, phi_, g_, out_;
};

/// Squeeze (GAP) -> dense C->C/r -> relu -> dense C/r->C -> sigmoid gate.
template <typename T>
class ChannelAttention {
 public:
  ChannelAttention() = default;
  ChannelAttention(BuildContext<T>& bc, const std::string& name, int64_t channels,
                   int64_t reduction);
  Var<T> operator()(const Var<T>& x, ForwardContext<T>& ctx) const;
  const Dense<T>& w1() const { return w1_; }
  const Dense<T>& w2() const { return w2_; }

 private:
  std::string name_;
  Dense<T> w1_, w2_;
};

/// 1x1 conv C->1 -> sigmoid gate per position.
template <typename T>
class SpatialAttention {
 public:
  SpatialAttention() = default;
  SpatialAttention(BuildContext<T>& bc, const std::string& name, int64_t channels);
  Var<T> operator()(const Var<T>& x, ForwardContext<T>& ctx) const;
  const Conv2D<T>& ws() const { return ws_; }

 private:
  std::string name_;
  Conv2D<T> ws_;
};

/// Channel-refined plus spatially-refined features.
template <typename T>
class DualAttention {
 public:
  DualAttention() = default;
  DualAttention(BuildContext<T>& bc, const std::string& name, int64_t channels,
                int64_t reduction);
  Var<T> operator()(const Var<T>& x, ForwardContext<T>& ctx) const;
  const ChannelAttention<T>& channel() const { return channel_; }
  const SpatialAttention<T>& spatial() const { return spatial_; }

 private:
  std::string name_;
  ChannelAttention<T> channel_;
  SpatialAttention<T> spatial_;
};

/// VGG trunk plus three tap branches (non-local -> separable conv -> batch
/// norm -> max pool to the common grid), concatenated channel-wise.
template <typename T>
class ModifiedVgg {
 public:
  struct Tap {
    std::string name;
    int block = 0;
    NonLocalBlock<T> nonlocal;
    SeparableConv<T> dwsc;
    BatchNorm<T> bn;
    int64_t pool_window = 1;
  };

  ModifiedVgg() = default;
  ModifiedVgg(BuildContext<T>& trunk_bc, BuildContext<T>& tap_bc, const VggConfig& vgg,
              const TapConfig& taps, const std::string& prefix);

  Var<T> operator()(const Var<T>& x, ForwardContext<T>& ctx) const;
  const std::vector<Tap>& taps() const { return taps_; }

 private:
  std::string prefix_;
  std::vector<std::vector<Conv2D<T>>> blocks_;
  std::vector<bool> pools_;
  std::vector<Tap> taps_;
};

// ---------------------------------------------------------------------------
// Networks: own a parameter registry plus a layer table for traversal.

template <typename T>
class Network {
 public:
  virtual ~Network() = default;
  Network() = default;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  ParamRegistry<T>& params() { return registry_; }
  const ParamRegistry<T>& params() const { return registry_; }
  const std::vector<LayerInfo>& layers() const { return layers_; }
  const LayerInfo* find_layer(const std::string& name) const;

  int64_t count_trainable_params() const { return nf::count_trainable_params(registry_); }
  /// Sets trainability on every parameter whose name starts with `prefix`.
  void set_trainable(const std::string& prefix, bool trainable);

 protected:
  ParamRegistry<T> registry_;
  std::vector<LayerInfo> layers_;
};

template <typename T>
class ResidualBackboneNet : public Network<T> {
 public:
  explicit ResidualBackboneNet(const ResidualConfig& cfg, InitOptions init = {});
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) const { return body_(x, ctx); }
  const ResidualBackbone<T>& body() const { return body_; }

 private:
  ResidualBackbone<T> body_;
};

template <typename T>
class ModifiedVggNet : public Network<T> {
 public:
  ModifiedVggNet(const VggConfig& vgg, const TapConfig& taps, InitOptions init = {});
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) const { return body_(x, ctx); }
  const ModifiedVgg<T>& body() const { return body_; }

 private:
  ModifiedVgg<T> body_;
};

template <typename T>
struct ClassifierOutput {
  Var<T> features;  // batch-normalized pooled embedding [N, pointwise_out]
  Var<T> logits;    // [N, K]; undefined when the network has no MLP head
};

/// Residual backbone and modified VGG fused by channel concatenation, dual
/// attention, pointwise reduction, GAP and batch norm, optionally followed by
/// an MLP head (dense -> relu -> dropout -> dense).
template <typename T>
class FusionClassifier : public Network<T> {
 public:
  explicit FusionClassifier(const ClassifierConfig& cfg, InitOptions init = {});

  ClassifierOutput<T> forward(const Var<T>& x, ForwardContext<T>& ctx) const;
  /// Shapes of every emitted activation for a batch of one, computed without
  /// touching weights or allocating activations.
  std::map<std::string, Shape> infer_shapes() const;

  const ClassifierConfig& config() const { return cfg_; }
  const ResidualBackbone<T>& residual() const { return residual_; }
  const ModifiedVgg<T>& vgg() const { return vgg_; }
  const DualAttention<T>& attention() const { return attention_; }
  const Conv2D<T>& pointwise() const { return pointwise_; }
  const Dense<T>* head_output() const { return has_head_ ? &head2_ : nullptr; }
  bool has_head() const { return has_head_; }

  static constexpr const char* kFusedLayer = "fusion.concat";
  static constexpr const char* kPointwiseLayer = "fusion.pointwise";
  static constexpr const char* kFeatureLayer = "fusion.bn";

 private:
  ClassifierConfig cfg_;
  ResidualBackbone<T> residual_;
  ModifiedVgg<T> vgg_;
  DualAttention<T> attention_;
  Conv2D<T> pointwise_;
  BatchNorm<T> feature_bn_;
  bool has_head_ = true;
  Dense<T> head1_, head2_;
};

}  // namespace nf
