// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random numbers (Philox-4x32-10, Salmon et al. 2011).
//
// A generator is a (key, counter) pair. The key comes from the seed and the
// stream path; the counter advances by one per block of four 32-bit outputs.
// split(id) derives an independent child key, so every stochastic consumer
// (weight init, shuffling, environment, exploration) owns its own stream and
// results never depend on the order in which consumers draw.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace carnet {

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  /// Child generator keyed on (this key, id). Does not advance this generator.
  Rng split(std::uint64_t id) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t key() const { return (std::uint64_t(key_[1]) << 32) | key_[0]; }

 private:
  void refill();

  std::array<std::uint32_t, 2> key_{};
  std::array<std::uint32_t, 4> counter_{};
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

/// SplitMix64 finalizer; used to derive keys.
std::uint64_t mix64(std::uint64_t x);

}  // namespace carnet
