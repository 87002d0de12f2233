#include "neurofuse/optim.hpp"

#include <algorithm>
#include <cmath>

namespace nf {

template <typename T>
void Adamax<T>::step(ParamRegistry<T>& params) {
  ++t_;
  const double lr_t = opts_.lr / (1.0 - std::pow(opts_.beta1, static_cast<double>(t_)));
  const T b1 = static_cast<T>(opts_.beta1);
  const T b2 = static_cast<T>(opts_.beta2);
  const T eps = static_cast<T>(opts_.eps);
  for (auto& p : params) {
    if (!p->trainable()) continue;
    auto [it, fresh] = state_.try_emplace(p.get());
    Moments& st = it->second;
    if (fresh) {
      st.m = Tensor<T>(p->value().shape());
      st.u = Tensor<T>(p->value().shape());
    }
    // A parameter the loss never reached sees a zero gradient.
    const T* g = p->var.has_grad() ? p->var.node()->grad.ptr() : nullptr;
    T* theta = p->mutable_value().ptr();
    T* m = st.m.ptr();
    T* u = st.u.ptr();
    const int64_t n = p->size();
    for (int64_t i = 0; i < n; ++i) {
      const T gi = g ? g[i] : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      u[i] = std::max(b2 * u[i], std::abs(gi));
      theta[i] -= static_cast<T>(lr_t) * m[i] / (u[i] + eps);
    }
  }
}

template <typename T>
void zero_grad(ParamRegistry<T>& params) {
  for (auto& p : params) p->var.zero_grad();
}

template class Adamax<float>;
template class Adamax<double>;
template void zero_grad(ParamRegistry<float>&);
template void zero_grad(ParamRegistry<double>&);

}  // namespace nf
