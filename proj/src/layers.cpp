#include "neurofuse/layers.hpp"

#include <cmath>

namespace nf {

const char* role_name(ParamRole role) {
  switch (role) {
    case ParamRole::weight: return "weight";
    case ParamRole::bias: return "bias";
    case ParamRole::gamma: return "gamma";
    case ParamRole::beta: return "beta";
    case ParamRole::running_mean: return "running_mean";
    case ParamRole::running_var: return "running_var";
  }
  return "?";
}

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::depthwise_separable: return "depthwise_separable";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::dense: return "dense";
    case LayerKind::pool: return "pool";
    case LayerKind::non_local: return "non_local";
    case LayerKind::attention: return "attention";
    case LayerKind::activation: return "activation";
    case LayerKind::concat: return "concat";
  }
  return "?";
}

template <typename T>
Parameter<T>& ParamRegistry<T>::add(std::string name, Tensor<T> value, ParamRole role,
                                    bool trainable, int quant_axis) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter<T>>();
  p->name = name;
  p->role = role;
  p->quant_axis = quant_axis;
  p->var = Var<T>::leaf(std::move(value), false);
  p->set_trainable(trainable);
  index_.emplace(std::move(name), params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
Parameter<T>* ParamRegistry<T>::find(std::string_view name) {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : params_[it->second].get();
}

template <typename T>
const Parameter<T>* ParamRegistry<T>::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : params_[it->second].get();
}

template <typename T>
Tensor<T> Initializer<T>::he_normal(Shape shape, int64_t fan_in) {
  if (!materialize_) return Tensor<T>::meta(std::move(shape));
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (T& v : t.data()) v = static_cast<T>(dist(rng_));
  return t;
}

template <typename T>
Tensor<T> Initializer<T>::glorot_uniform(Shape shape, int64_t fan_in, int64_t fan_out) {
  if (!materialize_) return Tensor<T>::meta(std::move(shape));
  Tensor<T> t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (T& v : t.data()) v = static_cast<T>(dist(rng_));
  return t;
}

template <typename T>
Tensor<T> Initializer<T>::constant(Shape shape, T value) {
  if (!materialize_) return Tensor<T>::meta(std::move(shape));
  return Tensor<T>(std::move(shape), value);
}

// ---------------------------------------------------------------------------

template <typename T>
Conv2D<T>::Conv2D(BuildContext<T>& bc, std::string name, int64_t kernel, int64_t cin,
                  int64_t cout, int64_t stride, bool bias, ops::Padding padding, bool zero_init)
    : name_(std::move(name)), stride_(stride), padding_(padding) {
  Shape ws{kernel, kernel, cin, cout};
  Tensor<T> w = zero_init ? bc.init.constant(ws, T(0)) : bc.init.he_normal(ws, kernel * kernel * cin);
  w_ = &bc.registry.add(name_ + ".w", std::move(w), ParamRole::weight, bc.trainable, 3);
  if (bias) {
    b_ = &bc.registry.add(name_ + ".b", bc.init.constant({cout}, T(0)), ParamRole::bias,
                          bc.trainable);
  }
  bc.layers.push_back({name_, LayerKind::conv});
}

template <typename T>
Var<T> Conv2D<T>::operator()(const Var<T>& x, ForwardContext<T>& ctx) const {
  Var<T> b = b_ ? b_->var : Var<T>();
  return ctx.emit(name_, ops::conv2d(x, w_->var, b, stride_, padding_));
}

template <typename T>
SeparableConv<T>::SeparableConv(BuildContext<T>& bc, std::string name, int64_t kernel,
                                int64_t cin, int64_t cout)
    : name_(std::move(name)) {
  dw_ = &bc.registry.add(name_ + ".dw", bc.init.he_normal({kernel, kernel, cin, 1}, kernel * kernel),
                         ParamRole::weight, bc.trainable, 2);
  pw_ = &bc.registry.add(name_ + ".pw", bc.init.he_normal({1, 1, cin, cout}, cin),
                         ParamRole::weight, bc.trainable, 3);
  b_ = &bc.registry.add(name_ + ".b", bc.init.constant({cout}, T(0)), ParamRole::bias,
                        bc.trainable);
  bc.layers.push_back({name_, LayerKind::depthwise_separable});
}

template <typename T>
Var<T> SeparableConv<T>::operator()(const Var<T>& x, ForwardContext<T>& ctx) const {
  return ctx.emit(name_, ops::depthwise_separable_conv(x, dw_->var, pw_->var, b_->var));
}

template <typename T>
BatchNorm<T>::BatchNorm(BuildContext<T>& bc, std::string name, int64_t channels)
    : name_(std::move(name)) {
  gamma_ = &bc.registry.add(name_ + ".gamma", bc.init.constant({channels}, T(1)),
                            ParamRole::gamma, bc.trainable);
  beta_ = &bc.registry.add(name_ + ".beta", bc.init.constant({channels}, T(0)), ParamRole::beta,
                           bc.trainable);
  mean_ = &bc.registry.add(name_ + ".mean", bc.init.constant({channels}, T(0)),
                           ParamRole::running_mean, false);
  var_ = &bc.registry.add(name_ + ".var", bc.init.constant({channels}, T(1)),
                          ParamRole::running_var, false);
  bc.layers.push_back({name_, LayerKind::batch_norm});
}

template <typename T>
Var<T> BatchNorm<T>::operator()(const Var<T>& x, ForwardContext<T>& ctx) const {
  ops::BatchNormStats<T> stats;
  stats.running_mean = &mean_->mutable_value();
  stats.running_var = &var_->mutable_value();
  const bool batch_stats = ctx.mode == ops::Mode::train && gamma_->trainable();
  return ctx.emit(name_, ops::batch_norm(x, gamma_->var, beta_->var, stats,
                                         batch_stats ? ops::Mode::train : ops::Mode::infer));
}

template <typename T>
Dense<T>::Dense(BuildContext<T>& bc, std::string name, int64_t in, int64_t out, bool bias)
    : name_(std::move(name)) {
  w_ = &bc.registry.add(name_ + ".w", bc.init.glorot_uniform({in, out}, in, out),
                        ParamRole::weight, bc.trainable);
  if (bias) {
    b_ = &bc.registry.add(name_ + ".b", bc.init.constant({out}, T(0)), ParamRole::bias,
                          bc.trainable);
  }
  bc.layers.push_back({name_, LayerKind::dense});
}

template <typename T>
Var<T> Dense<T>::operator()(const Var<T>& x, ForwardContext<T>& ctx) const {
  Var<T> b = b_ ? b_->var : Var<T>();
  return ctx.emit(name_, ops::dense(x, w_->var, b));
}

template <typename T>
int64_t count_trainable_params(const ParamRegistry<T>& registry) {
  int64_t total = 0;
  for (const auto& p : registry) {
    if (p->trainable()) total += p->size();
  }
  return total;
}

template <typename T>
int64_t count_all_params(const ParamRegistry<T>& registry) {
  int64_t total = 0;
  for (const auto& p : registry) total += p->size();
  return total;
}

template class ParamRegistry<float>;
template class ParamRegistry<double>;
template class Initializer<float>;
template class Initializer<double>;
template class Conv2D<float>;
template class Conv2D<double>;
template class SeparableConv<float>;
template class SeparableConv<double>;
template class BatchNorm<float>;
template class BatchNorm<double>;
template class Dense<float>;
template class Dense<double>;
template int64_t count_trainable_params(const ParamRegistry<float>&);
template int64_t count_trainable_params(const ParamRegistry<double>&);
template int64_t count_all_params(const ParamRegistry<float>&);
template int64_t count_all_params(const ParamRegistry<double>&);

}  // namespace nf
