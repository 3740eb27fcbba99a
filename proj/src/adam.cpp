// SPDX-License-Identifier: Apache-2.0

#include "carnet/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace carnet {

template <typename T>
Adam<T>::Adam(std::vector<Parameter<T>*> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
  state_.m.reserve(params_.size());
  state_.v.reserve(params_.size());
  for (auto* p : params_) {
    state_.m.emplace_back(p->value.shape());
    state_.v.emplace_back(p->value.shape());
  }
}

template <typename T>
void Adam<T>::step() {
  for (auto* p : params_)
    if (p->requires_grad && !p->has_grad())
      throw std::logic_error("adam: missing gradient for parameter '" + p->name + "'");
  ++state_.t;
  const double b1 = opts_.beta1, b2 = opts_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(state_.t));
  const double c2 = 1.0 - std::pow(b2, double(state_.t));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter<T>& p = *params_[k];
    if (!p.requires_grad) continue;
    auto w = p.value.data();
    auto g = p.grad.data();
    auto m = state_.m[k].data();
    auto v = state_.v[k].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = T(mi);
      v[i] = T(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      w[i] = T(double(w[i]) - opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps));
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

template class Adam<float>;
template class Adam<double>;

}  // namespace carnet
