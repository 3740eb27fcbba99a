// SPDX-License-Identifier: Apache-2.0

#include "carnet/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace carnet {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::constant: return "constant";
    case OpKind::variable: return "variable";
    case OpKind::parameter: return "parameter";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::hadamard: return "hadamard";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::matmul: return "matmul";
    case OpKind::linear: return "linear";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::reshape: return "reshape";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::reduce_sum: return "reduce_sum";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::conv2d: return "conv2d";
    case OpKind::conv_transpose2d: return "conv_transpose2d";
    case OpKind::batchnorm2d: return "batchnorm2d";
    case OpKind::local_attention: return "local_attention";
    case OpKind::ms_ssim_loss: return "ms_ssim_loss";
    case OpKind::smooth_l1: return "smooth_l1";
    case OpKind::cross_entropy: return "cross_entropy";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> v) {
  nodes_.push_back(Node{OpKind::constant, {}, std::move(v), {}, false, nullptr, {}});
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> v) {
  nodes_.push_back(Node{OpKind::variable, {}, std::move(v), {}, true, nullptr, {}});
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
  nodes_.push_back(Node{OpKind::parameter, {}, p.value, {}, p.requires_grad, &p, {}});
  param_ids_.emplace(&p, nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(OpKind op, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn backward) {
  if (consumed_) throw std::logic_error("tape already consumed by backward(); start a new forward pass");
  bool needs = false;
  for (auto i : inputs) needs = needs || nodes_.at(i).requires_grad;
  Node n{op, std::move(inputs), std::move(value), {}, needs, nullptr, {}};
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T> Tape<T>::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (n.grad.empty()) return Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, const Tensor<T>& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to a different tape");
  if (consumed_) throw std::logic_error("backward called twice without a new forward pass");
  Node& root = nodes_.at(loss.id);
  if (root.value.size() != 1)
    throw ShapeError(std::string("backward: loss must be scalar, got shape ") + to_string(root.value.shape()));
  consumed_ = true;
  if (!root.requires_grad) return;
  root.grad = Tensor<T>(root.value.shape(), T(1));
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param) {
      Parameter<T>& p = *n.param;
      if (p.grad.empty()) {
        p.grad = n.grad;
      } else {
        auto dst = p.grad.data();
        auto src = n.grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Elementwise

namespace {

struct Broadcast {
  Shape out;
  std::size_t na, nb;
};

Broadcast broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  auto is_suffix = [](const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - std::ptrdiff_t(small.size()));
  };
  if (a == b || is_suffix(b, a)) return {a, numel(a), numel(b)};
  if (is_suffix(a, b)) return {b, numel(a), numel(b)};
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& shape) {
  const std::size_t n = numel(shape);
  if (n == g.size()) return g.reshaped(shape);
  Tensor<T> out(shape);
  auto src = g.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i % n] += src[i];
  return out;
}

template <typename T, typename F>
Var<T> unary(OpKind op, Var<T> a, F&& f, std::function<T(T x, T y)> dfdx) {
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape());
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  const std::size_t in = a.id;
  return a.tape->record(op, {in}, std::move(y), [in, dfdx](Tape<T>& t, std::size_t self) {
    if (!t.requires_grad(in)) return;
    const auto& x = t.value(in).data();
    const auto& y = t.value(self).data();
    const auto& g = t.upstream(self).data();
    auto& dx = t.grad_buffer(in);
    auto d = dx.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto bc = broadcast_shapes("add", a.shape(), b.shape());
  Tensor<T> y(bc.out);
  auto ys = y.data();
  auto as = a.value().data();
  auto bs = b.value().data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i % bc.na] + bs[i % bc.nb];
  const std::size_t ia = a.id, ib = b.id;
  const Shape sa = a.shape(), sb = b.shape();
  return a.tape->record(OpKind::add, {ia, ib}, std::move(y), [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.upstream(self);
    if (t.requires_grad(ia)) t.accumulate(ia, reduce_to(g, sa));
    if (t.requires_grad(ib)) t.accumulate(ib, reduce_to(g, sb));
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  const auto bc = broadcast_shapes("sub", a.shape(), b.shape());
  Tensor<T> y(bc.out);
  auto ys = y.data();
  auto as = a.value().data();
  auto bs = b.value().data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i % bc.na] - bs[i % bc.nb];
  const std::size_t ia = a.id, ib = b.id;
  const Shape sa = a.shape(), sb = b.shape();
  return a.tape->record(OpKind::sub, {ia, ib}, std::move(y), [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.upstream(self);
    if (t.requires_grad(ia)) t.accumulate(ia, reduce_to(g, sa));
    if (t.requires_grad(ib)) {
      Tensor<T> gb = reduce_to(g, sb);
      for (auto& v : gb.storage()) v = -v;
      t.accumulate(ib, gb);
    }
  });
}

template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b) {
  const auto bc = broadcast_shapes("hadamard", a.shape(), b.shape());
  Tensor<T> y(bc.out);
  auto ys = y.data();
  auto as = a.value().data();
  auto bs = b.value().data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i % bc.na] * bs[i % bc.nb];
  const std::size_t ia = a.id, ib = b.id;
  const Shape sa = a.shape(), sb = b.shape();
  return a.tape->record(OpKind::hadamard, {ia, ib}, std::move(y), [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.upstream(self);
    auto gs = g.data();
    auto av = t.value(ia).data();
    auto bv = t.value(ib).data();
    if (t.requires_grad(ia)) {
      Tensor<T> ga(g.shape());
      for (std::size_t i = 0; i < gs.size(); ++i) ga[i] = gs[i] * bv[i % bc.nb];
      t.accumulate(ia, reduce_to(ga, sa));
    }
    if (t.requires_grad(ib)) {
      Tensor<T> gb(g.shape());
      for (std::size_t i = 0; i < gs.size(); ++i) gb[i] = gs[i] * av[i % bc.na];
      t.accumulate(ib, reduce_to(gb, sb));
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary<T>(OpKind::scale, a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  return unary<T>(OpKind::add_scalar, a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary<T>(OpKind::relu, a, [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary<T>(
      OpKind::sigmoid, a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  return unary<T>(OpKind::tanh, a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary<T>(OpKind::exp, a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> a) {
  const T floor = std::numeric_limits<T>::min();
  return unary<T>(OpKind::log, a, [floor](T x) { return std::log(std::max(x, floor)); },
                  [floor](T x, T) { return x > floor ? T(1) / x : T(0); });
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary<T>(OpKind::square, a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ---------------------------------------------------------------------------
// Contractions

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
  const Eigen::Index m = Eigen::Index(sa[0]), k = Eigen::Index(sa[1]), n = Eigen::Index(sb[1]);
  Tensor<T> y(Shape{sa[0], sb[1]});
  MapR<T>(y.data().data(), m, n).noalias() =
      CMapR<T>(a.value().data().data(), m, k) * CMapR<T>(b.value().data().data(), k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(OpKind::matmul, {ia, ib}, std::move(y), [=](Tape<T>& t, std::size_t self) {
    CMapR<T> g(t.upstream(self).data().data(), m, n);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      MapR<T>(ga.data().data(), m, k).noalias() += g * CMapR<T>(t.value(ib).data().data(), k, n).transpose();
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      MapR<T>(gb.data().data(), k, n).noalias() += CMapR<T>(t.value(ia).data().data(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  const bool has_bias = bias.tape != nullptr;
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1] ||
      (has_bias && (bias.shape().size() != 1 || bias.shape()[0] != sw[0])))
    throw ShapeError("linear: incompatible shapes x" + to_string(sx) + " W" + to_string(sw) +
                     (has_bias ? " b" + to_string(bias.shape()) : std::string()));
  const Eigen::Index rows = Eigen::Index(sx[0]), in = Eigen::Index(sx[1]), out = Eigen::Index(sw[0]);
  Tensor<T> y(Shape{sx[0], sw[0]});
  MapR<T> ym(y.data().data(), rows, out);
  ym.noalias() = CMapR<T>(x.value().data().data(), rows, in) *
                 CMapR<T>(weight.value().data().data(), out, in).transpose();
  if (has_bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.value().data().data(), out);
    ym.rowwise() += bv;
  }
  std::vector<std::size_t> ins{x.id, weight.id};
  if (has_bias) ins.push_back(bias.id);
  const std::size_t ix = x.id, iw = weight.id, ib = has_bias ? bias.id : 0;
  return x.tape->record(OpKind::linear, std::move(ins), std::move(y), [=](Tape<T>& t, std::size_t self) {
    CMapR<T> g(t.upstream(self).data().data(), rows, out);
    if (t.requires_grad(ix)) {
      auto& gx = t.grad_buffer(ix);
      MapR<T>(gx.data().data(), rows, in).noalias() += g * CMapR<T>(t.value(iw).data().data(), out, in);
    }
    if (t.requires_grad(iw)) {
      auto& gw = t.grad_buffer(iw);
      MapR<T>(gw.data().data(), out, in).noalias() +=
          g.transpose() * CMapR<T>(t.value(ix).data().data(), rows, in);
    }
    if (has_bias && t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data().data(), out) += g.colwise().sum();
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight) {
  return linear(x, weight, Var<T>{});
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for shape " + to_string(first));
  Shape out = first;
  out[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw ShapeError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
    out[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  Tensor<T> y(out);
  std::vector<std::size_t> widths, ids;
  const std::size_t row = out[axis] * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    auto src = p.value().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + std::ptrdiff_t(o * w), w, y.data().begin() + std::ptrdiff_t(o * row + offset));
    offset += w;
    widths.push_back(w);
    ids.push_back(p.id);
  }
  return parts[0].tape->record(OpKind::concat, ids, std::move(y), [=](Tape<T>& t, std::size_t self) {
    auto g = t.upstream(self).data();
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t w = widths[k];
      if (t.requires_grad(ids[k])) {
        auto d = t.grad_buffer(ids[k]).data();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < w; ++i) d[o * w + i] += g[o * row + off + i];
      }
      off += w;
    }
  });
}

template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin >= end || end > s[axis])
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for shape " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape out = s;
  out[axis] = end - begin;
  const std::size_t row = s[axis] * inner, w = (end - begin) * inner, off = begin * inner;
  Tensor<T> y(out);
  auto src = a.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(src.begin() + std::ptrdiff_t(o * row + off), w, y.data().begin() + std::ptrdiff_t(o * w));
  const std::size_t ia = a.id;
  return a.tape->record(OpKind::slice, {ia}, std::move(y), [=](Tape<T>& t, std::size_t self) {
    auto g = t.upstream(self).data();
    auto d = t.grad_buffer(ia).data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < w; ++i) d[o * row + off + i] += g[o * w + i];
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  const std::size_t ia = a.id;
  return a.tape->record(OpKind::reshape, {ia}, a.value().reshaped(std::move(shape)),
                        [ia](Tape<T>& t, std::size_t self) {
                          t.accumulate(ia, t.upstream(self).reshaped(t.value(ia).shape()));
                        });
}

template <typename T>
Var<T> reduce_sum(Var<T> a) {
  T acc = 0;
  for (T v : a.value().data()) acc += v;
  const std::size_t ia = a.id;
  return a.tape->record(OpKind::reduce_sum, {ia}, Tensor<T>::scalar(acc), [ia](Tape<T>& t, std::size_t self) {
    const T g = t.upstream(self)[0];
    for (auto& d : t.grad_buffer(ia).storage()) d += g;
  });
}

template <typename T>
Var<T> reduce_mean(Var<T> a) {
  T acc = 0;
  for (T v : a.value().data()) acc += v;
  const std::size_t ia = a.id;
  const T inv = T(1) / T(a.size());
  return a.tape->record(OpKind::reduce_mean, {ia}, Tensor<T>::scalar(acc * inv),
                        [ia, inv](Tape<T>& t, std::size_t self) {
                          const T g = t.upstream(self)[0] * inv;
                          for (auto& d : t.grad_buffer(ia).storage()) d += g;
                        });
}

template <typename T>
Var<T> softmax(Var<T> a) {
  const Shape& s = a.shape();
  const std::size_t k = s.back(), rows = a.size() / k;
  Tensor<T> y(s);
  auto x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * k;
    T* yr = y.data().data() + r * k;
    const T mx = *std::max_element(xr, xr + k);
    T z = 0;
    for (std::size_t i = 0; i < k; ++i) z += (yr[i] = std::exp(xr[i] - mx));
    for (std::size_t i = 0; i < k; ++i) yr[i] /= z;
  }
  const std::size_t ia = a.id;
  return a.tape->record(OpKind::softmax, {ia}, std::move(y), [=](Tape<T>& t, std::size_t self) {
    auto yv = t.value(self).data();
    auto g = t.upstream(self).data();
    auto d = t.grad_buffer(ia).data();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t i = 0; i < k; ++i) dot += g[r * k + i] * yv[r * k + i];
      for (std::size_t i = 0; i < k; ++i) d[r * k + i] += yv[r * k + i] * (g[r * k + i] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> a) {
  const Shape& s = a.shape();
  const std::size_t k = s.back(), rows = a.size() / k;
  Tensor<T> y(s);
  auto x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * k;
    T* yr = y.data().data() + r * k;
    const T mx = *std::max_element(xr, xr + k);
    T z = 0;
    for (std::size_t i = 0; i < k; ++i) z += std::exp(xr[i] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t i = 0; i < k; ++i) yr[i] = xr[i] - lse;
  }
  const std::size_t ia = a.id;
  return a.tape->record(OpKind::log_softmax, {ia}, std::move(y), [=](Tape<T>& t, std::size_t self) {
    auto yv = t.value(self).data();
    auto g = t.upstream(self).data();
    auto d = t.grad_buffer(ia).data();
    for (std::size_t r = 0; r < rows; ++r) {
      T gs = 0;
      for (std::size_t i = 0; i < k; ++i) gs += g[r * k + i];
      for (std::size_t i = 0; i < k; ++i) d[r * k + i] += g[r * k + i] - std::exp(yv[r * k + i]) * gs;
    }
  });
}

#define CARNET_INSTANTIATE(T)                                                          \
  template Var<T> add(Var<T>, Var<T>);                                                 \
  template Var<T> sub(Var<T>, Var<T>);                                                 \
  template Var<T> hadamard(Var<T>, Var<T>);                                            \
  template Var<T> scale(Var<T>, T);                                                    \
  template Var<T> add_scalar(Var<T>, T);                                               \
  template Var<T> matmul(Var<T>, Var<T>);                                              \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                      \
  template Var<T> linear(Var<T>, Var<T>);                                              \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                     \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);                \
  template Var<T> reshape(Var<T>, Shape);                                              \
  template Var<T> reduce_mean(Var<T>);                                                 \
  template Var<T> reduce_sum(Var<T>);                                                  \
  template Var<T> relu(Var<T>);                                                        \
  template Var<T> sigmoid(Var<T>);                                                     \
  template Var<T> tanh(Var<T>);                                                        \
  template Var<T> exp(Var<T>);                                                         \
  template Var<T> log(Var<T>);                                                         \
  template Var<T> square(Var<T>);                                                      \
  template Var<T> softmax(Var<T>);                                                     \
  template Var<T> log_softmax(Var<T>);

CARNET_INSTANTIATE(float)
CARNET_INSTANTIATE(double)

}  // namespace carnet
