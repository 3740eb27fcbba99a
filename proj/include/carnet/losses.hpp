// SPDX-License-Identifier: Apache-2.0
//
// Image, latent and classification losses, and the windowed total loss.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "carnet/autodiff.hpp"
#include "carnet/rollout.hpp"

namespace carnet {

/// Multi-scale structural similarity settings. Per-scale exponents follow
/// the usual weighting: `beta` (contrast) and `gamma` (structure) at every
/// scale, `alpha_m` (luminance) at the coarsest scale only.
struct MsSsimConfig {
  std::size_t scales = 5;
  double alpha_m = 0.1333;
  std::vector<double> beta{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  std::vector<double> gamma{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
  std::size_t window = 11;
  double window_sigma = 1.5;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
  double c3() const { return c2() / 2.0; }

  /// Five-scale defaults.
  static MsSsimConfig standard();
  /// First `scales` default weights renormalized to sum to one.
  static MsSsimConfig truncated(std::size_t scales);
  /// Every exponent set to one.
  static MsSsimConfig unit_weights(std::size_t scales, std::size_t window = 11);

  /// Throws std::invalid_argument on inconsistent fields.
  void validate() const;
  /// Smallest image side that supports all scales.
  std::size_t min_image_side() const;
};

/// Normalized 1-D Gaussian taps of the local averaging window.
std::vector<double> gaussian_window(std::size_t size, double sigma);

template <typename T>
struct SsimMaps {
  Tensor<T> luminance;  // (H', W') after valid filtering
  Tensor<T> contrast;
  Tensor<T> structure;
};

/// Per-pixel luminance, contrast and structure comparisons of two single
/// channel images given as (H,W) or (1,H,W).
template <typename T>
SsimMaps<T> ssim_components(const Tensor<T>& x, const Tensor<T>& y, const MsSsimConfig& cfg);

/// MS-SSIM of two single-channel images, in (0, 1].
template <typename T>
double ms_ssim(const Tensor<T>& x, const Tensor<T>& y, const MsSsimConfig& cfg);

/// Mean over the N·C images of (1 − MS-SSIM); x, y are (N,C,H,W).
template <typename T>
Var<T> ms_ssim_loss(Var<T> x, Var<T> y, const MsSsimConfig& cfg);

/// Mean over elements of 0.5·d²/β if |d| < β else |d| − 0.5·β, d = a − b.
template <typename T>
Var<T> smooth_l1(Var<T> a, Var<T> b, T beta = T(1));

/// Mean squared error; comparator only.
template <typename T>
Var<T> mse_loss(Var<T> a, Var<T> b);

struct CrossEntropyConfig {
  std::vector<double> class_weights = std::vector<double>(9, 1.0);
  std::size_t classes() const { return class_weights.size(); }
};

/// −(1/N) Σ_n w_{y_n} log softmax(logits_n)[y_n] with logits (N,K).
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets, const CrossEntropyConfig& cfg);

enum class ImageLoss { ms_ssim, mse };

struct TotalLossOptions {
  bool sensors = false;
  ImageLoss image_loss = ImageLoss::ms_ssim;
  MsSsimConfig ms_ssim = MsSsimConfig::truncated(3);
  double smooth_l1_beta = 1.0;
};

template <typename T>
struct TotalLoss {
  Var<T> total;
  /// ("recon", "pred", "latent"[, "sensor"]) in summation order.
  std::vector<std::pair<std::string, Var<T>>> parts;
};

/// Windowed objective: reconstruction of every frame, prediction of frames
/// 1..T−1, latent prediction, and optionally sensor prediction.
template <typename T>
TotalLoss<T> carnet_total_loss(const RolloutOutput<T>& rollout, const WindowBatch<T>& targets,
                               const TotalLossOptions& opts);

}  // namespace carnet
