// Central-difference gradient checks in double precision.

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "carnet/autodiff.hpp"
#include "carnet/rng.hpp"

namespace carnet::testing {

inline Tensor<double> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Σ w ⊙ y with a fixed weight tensor: turns any output into a scalar whose
/// gradient exercises every output element.
inline Var<double> project(Var<double> y, const Tensor<double>& w) {
  return reduce_sum(hadamard(y, y.tape->constant(w)));
}

inline double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return std::sqrt(diff) / scale;
}

using InputFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Relative error between backprop and central differences over every
/// element of every input.
inline double check_inputs(std::vector<Tensor<double>> inputs, const InputFn& f, double h = 1e-5) {
  std::vector<double> analytic, numeric;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    tape.backward(f(tape, vars));
    for (const auto& v : vars) {
      const Tensor<double> g = tape.grad(v);
      analytic.insert(analytic.end(), g.data().begin(), g.data().end());
    }
  }
  auto eval = [&] {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    return f(tape, vars).value()[0];
  };
  for (auto& t : inputs)
    for (auto& x : t.data()) {
      const double x0 = x;
      x = x0 + h;
      const double up = eval();
      x = x0 - h;
      const double down = eval();
      x = x0;
      numeric.push_back((up - down) / (2 * h));
    }
  return rel_error(analytic, numeric);
}

using ParamFn = std::function<Var<double>(Tape<double>&)>;

inline std::vector<double> analytic_params(const std::vector<Parameter<double>*>& params, const ParamFn& f) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    tape.backward(f(tape));
  }
  std::vector<double> out;
  for (auto* p : params) {
    if (p->has_grad())
      out.insert(out.end(), p->grad.data().begin(), p->grad.data().end());
    else
      out.insert(out.end(), p->value.size(), 0.0);
  }
  return out;
}

inline std::vector<double> numeric_params(const std::vector<Parameter<double>*>& params, const ParamFn& f, double h) {
  auto eval = [&] {
    Tape<double> tape;
    return f(tape).value()[0];
  };
  std::vector<double> out;
  for (auto* p : params)
    for (auto& x : p->value.data()) {
      const double x0 = x;
      x = x0 + h;
      const double up = eval();
      x = x0 - h;
      const double down = eval();
      x = x0;
      out.push_back((up - down) / (2 * h));
    }
  return out;
}

/// Same check against parameter gradients.
inline double check_params(const std::vector<Parameter<double>*>& params, const ParamFn& f, double h = 1e-5) {
  const auto analytic = analytic_params(params, f);
  return rel_error(analytic, numeric_params(params, f, h));
}

struct SmoothCheck {
  double error = 0;  // backprop vs central differences at h
  bool smooth = true;
};

/// check_params plus a kink screen for ReLU networks: central differences at
/// h and h/10 disagree only when a perturbation crosses a non-differentiable
/// point, which says nothing about backprop. A wrong gradient still differs
/// from both.
inline SmoothCheck check_params_screened(const std::vector<Parameter<double>*>& params, const ParamFn& f,
                                         double h = 1e-5) {
  const auto analytic = analytic_params(params, f);
  const auto coarse = numeric_params(params, f, h);
  const auto fine = numeric_params(params, f, h / 10);
  return {rel_error(analytic, coarse), rel_error(coarse, fine) < 1e-5};
}

}  // namespace carnet::testing
