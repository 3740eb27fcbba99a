// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "carnet/autodiff.hpp"

namespace carnet {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t t = 0;
};

/// Adam with bias correction: θ ← θ − lr·m̂/(√v̂ + ε).
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, AdamOptions opts = {});

  /// Applies one update. Every registered parameter with requires_grad must
  /// hold a gradient; parameters with requires_grad == false are skipped.
  void step();
  void zero_grad();

  void set_lr(double lr) { opts_.lr = lr; }
  double lr() const { return opts_.lr; }
  const AdamOptions& options() const { return opts_; }
  const AdamState<T>& state() const { return state_; }
  const std::vector<Parameter<T>*>& params() const { return params_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamOptions opts_;
  AdamState<T> state_;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace carnet
