// SPDX-License-Identifier: Apache-2.0
//
// Autopilot driving datasets: generation, on-disk episode layout, windows
// and train/val/test splits.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "carnet/env.hpp"
#include "carnet/rollout.hpp"

namespace carnet {

struct Episode {
  std::size_t length = 0;
  std::vector<std::uint8_t> frames;          // length·S·S, row-major per frame
  std::vector<std::array<float, 3>> sensors; // reading before each step's action
  std::vector<int> actions;                  // class actually applied
  std::vector<int> labels;                   // autopilot class for the frame
};

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct WindowRef {
  std::uint32_t episode = 0;
  std::uint32_t start = 0;
  Split split = Split::train;
};

struct DataConfig {
  std::size_t total_steps = 20000;
  std::size_t episode_steps = 250;
  double explore_prob = 0.2;   // chance of applying a random action instead of the autopilot's
  std::size_t window = 4;
  double train_frac = 0.70;
  double val_frac = 0.15;
  EnvConfig env;
  AutopilotConfig autopilot;
};

class Dataset {
 public:
  std::size_t image_size = 64;
  std::size_t window = 4;
  std::vector<Episode> episodes;
  std::vector<WindowRef> windows;

  std::size_t steps() const;
  std::vector<std::size_t> indices(Split s) const;
  /// Autopilot class at the last frame of window `w`.
  int window_label(std::size_t w) const;
  /// Frames (B,T,1,S,S) scaled to [0,1]; sensors (B,T,3) and one-hot actions
  /// (B,T,9) when requested; labels at the last step.
  WindowBatch<float> batch(const std::vector<std::size_t>& ids, bool sensors, bool actions) const;
  /// Class histogram over the windows of a split (by last-step label).
  std::array<std::size_t, kActionCount> label_counts(Split s) const;
};

/// Cuts every intra-episode window of length `window` and assigns splits in
/// (episode, start) order so that each split is a contiguous block.
void index_windows(Dataset& d, double train_frac, double val_frac);

Dataset generate_dataset(const DataConfig& cfg, std::uint64_t seed);

/// One directory per episode with PGM frames and CSV tables, plus index.csv
/// and dataset.txt at the root.
void write_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

void write_pgm(const std::filesystem::path& path, const std::uint8_t* pixels, std::size_t width,
               std::size_t height);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& width, std::size_t& height);

std::uint8_t quantize_pixel(float v);

}  // namespace carnet
