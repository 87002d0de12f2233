#pragma once

#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "neurofuse/autodiff.hpp"
#include "neurofuse/ops.hpp"

namespace nf {

enum class ParamRole { weight, bias, gamma, beta, running_mean, running_var };

const char* role_name(ParamRole role);

/// A named leaf tensor owned by a network. Running statistics are stored as
/// parameters too (never trainable) so they travel with the weight file.
template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
  ParamRole role = ParamRole::weight;
  // Axis carrying output channels for per-channel quantization, -1 if none.
  int quant_axis = -1;

  bool trainable() const { return var.requires_grad(); }
  bool is_buffer() const {
    return role == ParamRole::running_mean || role == ParamRole::running_var;
  }
  void set_trainable(bool on) { var.node()->requires_grad = on && !is_buffer(); }
  const Tensor<T>& value() const { return var.value(); }
  Tensor<T>& mutable_value() { return var.mutable_value(); }
  Tensor<T> grad() const { return var.grad(); }
  int64_t size() const { return var.value().size(); }
};

template <typename T>
class ParamRegistry {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value, ParamRole role, bool trainable,
                    int quant_axis = -1);

  Parameter<T>* find(std::string_view name);
  const Parameter<T>* find(std::string_view name) const;
  size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.cbegin(); }
  auto end() const { return params_.cend(); }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, size_t> index_;
};

/// Weight initialization. With `materialize == false` every parameter is
/// created as a shape-only tensor, which keeps paper-scale networks cheap to
/// construct for shape and size accounting.
struct InitOptions {
  uint64_t seed = 1;
  bool materialize = true;
};

template <typename T>
class Initializer {
 public:
  explicit Initializer(InitOptions opts) : rng_(opts.seed), materialize_(opts.materialize) {}

  Tensor<T> he_normal(Shape shape, int64_t fan_in);
  Tensor<T> glorot_uniform(Shape shape, int64_t fan_in, int64_t fan_out);
  Tensor<T> constant(Shape shape, T value);
  bool materialize() const { return materialize_; }

 private:
  std::mt19937_64 rng_;
  bool materialize_;
};

enum class LayerKind {
  conv,
  depthwise_separable,
  batch_norm,
  dense,
  pool,
  non_local,
  attention,
  activation,
  concat
};

const char* layer_kind_name(LayerKind kind);

struct LayerInfo {
  std::string name;
  LayerKind kind;
};

/// Per-call forward state: mode, randomness for dropout, and optional
/// capture of named activations (used by Grad-CAM and by tests).
template <typename T>
struct ForwardContext {
  ops::Mode mode = ops::Mode::infer;
  std::mt19937_64* rng = nullptr;
  std::map<std::string, Var<T>>* captures = nullptr;
  std::string watch;
  // Optional rewrite of named activations, applied before watching.
  std::function<Var<T>(const std::string&, const Var<T>&)> hook;

  Var<T> emit(const std::string& name, Var<T> v) {
    if (hook) v = hook(name, v);
    if (!watch.empty() && name == watch) v = nf::watch(v);
    if (captures) (*captures)[name] = v;
    return v;
  }
};

/// Shared construction state for layer modules.
template <typename T>
struct BuildContext {
  ParamRegistry<T>& registry;
  Initializer<T>& init;
  std::vector<LayerInfo>& layers;
  bool trainable;
};

template <typename T>
class Conv2D {
 public:
  Conv2D() = default;
  Conv2D(BuildContext<T>& bc, std::string name, int64_t kernel, int64_t cin, int64_t cout,
         int64_t stride, bool bias, ops::Padding padding = ops::Padding::same,
         bool zero_init = false);
  Var<T> operator()(const Var<T>& x, ForwardContext<T>& ctx) const;
  const std::string& name() const { return name_; }
  Parameter<T>* weight() const { return w_; }
  Parameter<T>* bias() const { return b_; }

 private:
  std::string name_;
  Parameter<T>* w_ = nullptr;
  Parameter<T>* b_ = nullptr;
  int64_t stride_ = 1;
  ops::Padding padding_ = ops::Padding::same;
};

/// Depthwise 3x3 followed by pointwise 1x1 with bias.
template <typename T>
class SeparableConv {
 public:
  SeparableConv() = default;
  SeparableConv(BuildContext<T>& bc, std::string name, int64_t kernel, int64_t cin,
                int64_t cout);
  Var<T> operator()(const Var<T>& x, ForwardContext<T>& ctx) const;
  int64_t param_count() const { return dw_->size() + pw_->size() + b_->size(); }

 private:
  std::string name_;
  Parameter<T>* dw_ = nullptr;
  Parameter<T>* pw_ = nullptr;
  Parameter<T>* b_ = nullptr;
};

/// Batch normalization. Uses batch statistics only when the forward pass is
/// in train mode and the layer itself is trainable; frozen layers always
/// normalize with their running statistics.
template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(BuildContext<T>& bc, std::string name, int64_t channels);
  Var<T> operator()(const Var<T>& x, ForwardContext<T>& ctx) const;
  Parameter<T>* gamma() const { return gamma_; }
  Parameter<T>* beta() const { return beta_; }
  Parameter<T>* running_mean() const { return mean_; }
  Parameter<T>* running_var() const { return var_; }

 private:
  std::string name_;
  Parameter<T>* gamma_ = nullptr;
  Parameter<T>* beta_ = nullptr;
  Parameter<T>* mean_ = nullptr;
  Parameter<T>* var_ = nullptr;
};

template <typename T>
class Dense {
 public:
  Dense() = default;
  Dense(BuildContext<T>& bc, std::string name, int64_t in, int64_t out, bool bias);
  Var<T> operator()(const Var<T>& x, ForwardContext<T>& ctx) const;
  Parameter<T>* weight() const { return w_; }
  Parameter<T>* bias() const { return b_; }

 private:
  std::string name_;
  Parameter<T>* w_ = nullptr;
  Parameter<T>* b_ = nullptr;
};

/// Sum of value sizes over trainable parameters.
template <typename T>
int64_t count_trainable_params(const ParamRegistry<T>& registry);

/// Sum of value sizes over every parameter, running statistics included.
template <typename T>
int64_t count_all_params(const ParamRegistry<T>& registry);

}  // namespace nf
