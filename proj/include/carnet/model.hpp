// SPDX-License-Identifier: Apache-2.0
//
// CARNet: convolutional encoder/decoder around a GRU that predicts the next
// latent, plus the fully connected controller head.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "carnet/layers.hpp"
#include "carnet/rollout.hpp"

namespace carnet {

struct CarnetConfig {
  std::size_t input_size = 64;
  std::size_t latent_size = 32;
  std::size_t window = 4;
  std::size_t sensor_dim = 0;   // 0 disables sensor fusion
  std::size_t sensor_embed = 16;
  std::size_t action_dim = 0;   // 0 disables action conditioning
  bool use_attention = false;
  bool relative_attention = false;
  std::size_t attention_extent = 3;
  std::size_t attention_channels = 2;
  std::vector<std::size_t> channels{2, 4, 8, 16, 32};

  /// 256×256 input, latent 128, six blocks.
  static CarnetConfig full();
  /// 64×64 input, latent 32, five blocks.
  static CarnetConfig desk();
  /// 8×8 input, latent 4, one block, T = 3; used for gradient checks.
  static CarnetConfig tiny();

  std::size_t rnn_hidden() const { return latent_size + (sensor_dim ? sensor_embed : 0); }
  std::size_t rnn_input() const { return latent_size + (sensor_dim ? sensor_embed : 0) + action_dim; }
  /// Stride of the first conv of each encoder block.
  std::vector<std::size_t> block_strides() const;
  /// Spatial side after the last encoder block.
  std::size_t bottleneck_side() const;
  /// Controller layer widths: 2L, L, L, L/2, 9.
  std::vector<std::size_t> controller_widths() const;

  /// Throws std::invalid_argument on inconsistent fields.
  void validate() const;
};

/// One conv (or transposed conv) followed by batch norm and ReLU.
template <typename T>
struct ConvUnit {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;
  Var<T> forward(Tape<T>& tape, Var<T> x, bool training);
};

/// A named tensor exposed for checkpointing (parameters and running stats).
template <typename T>
struct StateEntry {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
class Carnet {
 public:
  Carnet() = default;
  Carnet(CarnetConfig cfg, Rng& rng);

  const CarnetConfig& config() const { return cfg_; }

  /// frames (N,1,H,W) -> latents (N,L) in (−1,1).
  Var<T> encode(Tape<T>& tape, Var<T> frames, bool training);
  /// latents (N,L) -> images (N,1,H,W) in [0,1].
  Var<T> decode(Tape<T>& tape, Var<T> latents, bool training);

  /// GRU steps over the first `steps` latents of a time-major stack
  /// (T·B, L). Returns h_1..h_steps, each (B, hidden).
  std::vector<Var<T>> unroll(Tape<T>& tape, Var<T> latents, std::size_t batch, std::size_t steps,
                             const std::optional<Var<T>>& sensors, const std::optional<Var<T>>& actions);
  /// One GRU transition from h given ℓ, s, a (s, a only when enabled).
  Var<T> transition(Tape<T>& tape, Var<T> h, Var<T> latent, const std::optional<Var<T>>& sensor,
                    const std::optional<Var<T>>& action);
  /// Latent part of a hidden state.
  Var<T> latent_slice(Var<T> h) const;

  /// Full window rollout: reconstructions of every frame and predictions of
  /// frames 1..T−1.
  RolloutOutput<T> rollout(Tape<T>& tape, const WindowBatch<T>& batch, bool training);

  ParamList<T> parameters();
  ParamList<T> encoder_parameters();
  ParamList<T> decoder_parameters();
  /// GRU and sensor fusion weights.
  ParamList<T> recurrent_parameters();
  /// Parameters followed by batch-norm running statistics, in a fixed order.
  std::vector<StateEntry<T>> state();

  /// Output shape (C,H,W) after each encoder layer, then after each decoder layer.
  std::vector<std::pair<std::string, Shape>> layer_shapes() const;

 private:
  CarnetConfig cfg_;
  std::optional<LocalSelfAttention<T>> attention_;
  std::vector<ConvUnit<T>> encoder_;
  Conv2d<T> projection_;
  std::vector<ConvUnit<T>> decoder_;
  Conv2d<T> output_;
  GruCell<T> gru_;
  std::optional<Dense<T>> sensor_in_;
  std::optional<Dense<T>> sensor_out_;
};

/// Controller head: FC layers with ReLU between them, raw logits out.
template <typename T>
class Controller {
 public:
  Controller() = default;
  Controller(std::size_t latent_size, Rng& rng, std::size_t classes = 9);

  /// (B,L), (B,L) -> logits (B,classes). Inputs are stacked in this order.
  Var<T> forward(Tape<T>& tape, Var<T> prev, Var<T> next);
  ParamList<T> parameters();
  std::vector<StateEntry<T>> state();
  const std::vector<Dense<T>>& layers() const { return layers_; }

 private:
  std::vector<Dense<T>> layers_;
};

/// Eval-mode latents of (N,1,H,W) frames.
template <typename T>
Tensor<T> encode_frames(Carnet<T>& model, const Tensor<T>& frames);

}  // namespace carnet
