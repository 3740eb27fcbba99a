// SPDX-License-Identifier: Apache-2.0
//
// Neural building blocks: (transposed) convolution, batch normalization,
// activations, dense layers, the GRU cell and local self-attention.

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "carnet/autodiff.hpp"
#include "carnet/rng.hpp"

namespace carnet {

// ---------------------------------------------------------------------------
// Differentiable layer ops. Image tensors are (N,C,H,W); a rank-3 (C,H,W)
// input is treated as N = 1 and the output keeps rank 3.

/// Output spatial extent of a convolution; throws if non-positive.
std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);
std::size_t conv_transpose_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                                    std::size_t output_padding);

/// weight (C_out, C_in, k, k), bias (C_out,).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t padding);

/// weight (C_in, C_out, k, k), bias (C_out,). Adjoint of conv2d with the same geometry.
template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t padding,
                        std::size_t output_padding);

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

/// Training mode normalizes with batch statistics over (N,H,W) and, when
/// `stats` is given, updates its running averages. Eval mode uses `stats`.
template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, T eps, bool training, BatchNormStats<T>* stats,
                   T momentum = T(0.1));

/// Single-head local self-attention over a k×k zero-padded neighborhood.
/// x (N,d_in,H,W); w_q/w_k/w_v (d_out,d_in); r_row/r_col (k, d_out/2) or null Vars.
template <typename T>
Var<T> local_attention(Var<T> x, Var<T> w_q, Var<T> w_k, Var<T> w_v, Var<T> r_row, Var<T> r_col,
                       std::size_t k);

/// Softmax weights of local_attention for inspection: shape (N, H, W, k*k).
template <typename T>
Tensor<T> local_attention_weights(const Tensor<T>& x, const Tensor<T>& w_q, const Tensor<T>& w_k,
                                  const Tensor<T>* r_row, const Tensor<T>* r_col, std::size_t k);

enum class Activation { relu, sigmoid, tanh, softmax };

/// softmax normalizes over the last axis.
template <typename T>
Var<T> activation(Activation kind, Var<T> x);

// ---------------------------------------------------------------------------
// Layers owning parameters.

template <typename T>
using ParamList = std::vector<Parameter<T>*>;

template <typename T>
struct Conv2d {
  Parameter<T> weight;
  Parameter<T> bias;
  std::size_t in_ch = 0, out_ch = 0, kernel = 3;
  std::size_t stride = 1, padding = 0, output_padding = 0;
  bool transposed = false;

  Conv2d() = default;
  Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
         std::size_t padding, bool transposed, std::size_t output_padding, Rng& rng);

  Var<T> forward(Tape<T>& tape, Var<T> x);
  /// (C,H,W) -> (C',H',W') without running the op.
  Shape output_shape(const Shape& in) const;
  void collect(ParamList<T>& out) { out.push_back(&weight), out.push_back(&bias); }
};

template <typename T>
struct BatchNorm2d {
  Parameter<T> gamma;
  Parameter<T> beta;
  BatchNormStats<T> stats;
  T eps = T(1e-5);
  T momentum = T(0.1);

  BatchNorm2d() = default;
  BatchNorm2d(std::string name, std::size_t channels);

  Var<T> forward(Tape<T>& tape, Var<T> x, bool training);
  void collect(ParamList<T>& out) { out.push_back(&gamma), out.push_back(&beta); }
};

template <typename T>
struct Dense {
  Parameter<T> weight;  // (out, in)
  Parameter<T> bias;    // (out,)

  Dense() = default;
  Dense(std::string name, std::size_t in, std::size_t out, Rng& rng);

  std::size_t in() const { return weight.value.dim(1); }
  std::size_t out() const { return weight.value.dim(0); }
  /// x (B,in) -> (B,out)
  Var<T> forward(Tape<T>& tape, Var<T> x);
  void collect(ParamList<T>& out) { out.push_back(&weight), out.push_back(&bias); }
};

template <typename T>
struct GruGates {
  Var<T> z, r, candidate, h;
};

/// z = σ(W_z[h,x]+b_z), r = σ(W_r[h,x]+b_r), h̃ = tanh(W[r⊙h,x]+b),
/// h' = (1−z)⊙h + z⊙h̃. Gate weights are (hidden, hidden+input).
template <typename T>
struct GruCell {
  Parameter<T> w_z, w_r, w;
  Parameter<T> b_z, b_r, b;
  std::size_t hidden = 0, input = 0;

  GruCell() = default;
  GruCell(std::string name, std::size_t hidden, std::size_t input, Rng& rng);

  /// h_prev (B,hidden), x (B,input) -> gates and next hidden state.
  GruGates<T> step_gates(Tape<T>& tape, Var<T> h_prev, Var<T> x);
  Var<T> step(Tape<T>& tape, Var<T> h_prev, Var<T> x) { return step_gates(tape, h_prev, x).h; }
  void collect(ParamList<T>& out);
};

template <typename T>
struct LocalSelfAttention {
  Parameter<T> w_q, w_k, w_v;   // (d_out, d_in)
  Parameter<T> r_row, r_col;    // (k, d_out/2); unused unless relative
  std::size_t d_in = 0, d_out = 0, extent = 1;
  bool relative = false;

  LocalSelfAttention() = default;
  LocalSelfAttention(std::string name, std::size_t d_in, std::size_t d_out, std::size_t extent, bool relative,
                     Rng& rng);

  Var<T> forward(Tape<T>& tape, Var<T> x);
  void collect(ParamList<T>& out);
};

/// Fills with U(−1/√fan_in, 1/√fan_in).
template <typename T>
void init_fan_in_uniform(Tensor<T>& t, std::size_t fan_in, Rng& rng);
template <typename T>
void init_normal(Tensor<T>& t, double stddev, Rng& rng);

}  // namespace carnet
