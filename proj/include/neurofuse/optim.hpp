#pragma once

#include <cstdint>
#include <unordered_map>

#include "neurofuse/layers.hpp"

namespace nf {

struct AdamaxOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;
};

/// Adamax (infinity-norm Adam). Only trainable parameters are touched.
template <typename T>
class Adamax {
 public:
  explicit Adamax(AdamaxOptions opts = {}) : opts_(opts) {}

  void step(ParamRegistry<T>& params);
  int64_t steps() const { return t_; }
  const AdamaxOptions& options() const { return opts_; }

  struct Moments {
    Tensor<T> m;
    Tensor<T> u;
  };
  const Moments* moments(const Parameter<T>* p) const {
    auto it = state_.find(p);
    return it == state_.end() ? nullptr : &it->second;
  }

 private:
  AdamaxOptions opts_;
  int64_t t_ = 0;
  std::unordered_map<const Parameter<T>*, Moments> state_;
};

/// Clears accumulated gradients on every parameter.
template <typename T>
void zero_grad(ParamRegistry<T>& params);

}  // namespace nf
