// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <vector>

#include "carnet/autodiff.hpp"

namespace carnet {

/// A batch of length-T windows cut from episodes.
template <typename T>
struct WindowBatch {
  Tensor<T> frames;                 // (B, T, 1, H, W), values in [0, 1]
  std::optional<Tensor<T>> sensors; // (B, T, sensor_dim)
  std::optional<Tensor<T>> actions; // (B, T, action_dim)
  std::vector<int> autopilot_class; // (B,), empty when unlabeled

  std::size_t batch() const { return frames.dim(0); }
  std::size_t steps() const { return frames.dim(1); }
};

/// Reorders (B, T, rest...) into time-major (T·B, rest...).
template <typename T>
Tensor<T> time_major(const Tensor<T>& x);

/// Outputs of one window rollout. All stacked tensors are time-major: row
/// block t holds the B batch entries of step t.
template <typename T>
struct RolloutOutput {
  std::size_t batch = 0;
  std::size_t steps = 0;           // T
  Var<T> latents;                  // ℓ_0..ℓ_{T−1}: (T·B, L)
  Var<T> predicted_latents;        // ℓ_{1|0}..ℓ_{T−1|T−2}: ((T−1)·B, L)
  std::vector<Var<T>> hiddens;     // h_1..h_{T−1}, full GRU state, each (B, hidden)
  Var<T> recons;                   // y_0..y_{T−1}: (T·B, 1, H, W)
  Var<T> preds;                    // ŷ_1..ŷ_{T−1}: ((T−1)·B, 1, H, W)
  std::optional<Var<T>> sensor_preds;  // s_{1|0}..: ((T−1)·B, S)
};

}  // namespace carnet
