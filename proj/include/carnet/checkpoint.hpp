// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints: a directory with a text manifest (format version, config
// echo, one line per tensor) and a little-endian float32 payload.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "carnet/model.hpp"

namespace carnet {

inline constexpr int kCheckpointVersion = 1;

using ConfigEcho = std::vector<std::pair<std::string, std::string>>;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::string dtype = "f32";
  std::uint64_t offset = 0;  // bytes into payload.bin
  std::uint64_t bytes = 0;
  std::uint32_t crc32 = 0;
};

struct CheckpointManifest {
  int version = kCheckpointVersion;
  std::string kind;   // ae, carnet, il or rl
  ConfigEcho config;  // effective run config, model keys included
  std::vector<CheckpointEntry> entries;

  /// Config value for `key`; throws CheckpointError when absent.
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const;
};

void save_checkpoint(const std::filesystem::path& dir, const std::string& kind, const ConfigEcho& config,
                     const std::vector<StateEntry<float>>& state);

/// Parses and version-checks manifest.txt.
CheckpointManifest read_manifest(const std::filesystem::path& dir);

/// Fills every tensor in `state` from the checkpoint. Every entry must exist
/// with the same shape and an intact checksum; extra entries are an error.
CheckpointManifest load_checkpoint(const std::filesystem::path& dir, const std::vector<StateEntry<float>>& state);

}  // namespace carnet
