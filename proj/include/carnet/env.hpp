// SPDX-License-Identifier: Apache-2.0
//
// Procedural lane-driving environment: perspective renderer, kinematic
// vehicle, scripted autopilot and the shaped driving reward.

#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <vector>

#include "carnet/rng.hpp"
#include "carnet/tensor.hpp"

namespace carnet {

inline constexpr std::size_t kActionCount = 9;
inline constexpr std::array<double, 3> kSteerValues{-0.2, 0.0, 0.2};  // rad
inline constexpr std::array<double, 3> kAccelValues{-3.0, 0.0, 3.0};  // m/s²

/// Lateral positions are positive to the left of the lane direction;
/// positive heading error turns the vehicle left.
struct EnvState {
  double lateral_offset = 0;   // m, 0 = lane center
  double heading_error = 0;    // rad
  double curvature = 0;        // 1/m, current road segment
  double speed = 0;            // m/s
  double odometer = 0;         // m
  bool collided = false;
  bool out_of_lane = false;

  // Road ahead, filled in by the environment so rendering is a pure function
  // of the state.
  double next_curvature = 0;
  double segment_remaining = std::numeric_limits<double>::infinity();  // m until next_curvature applies
  double obstacle_distance = std::numeric_limits<double>::infinity();  // m ahead of the vehicle
  int obstacle_side = 0;       // +1 blocks the left half, −1 the right half, 0 none

  // Controls applied on the most recent step.
  double last_steer = 0;
  double last_accel = 0;
};

struct Action {
  double steer = 0;
  double accel = 0;
  int steer_index() const;
  int accel_index() const;
  int class_index() const { return 3 * steer_index() + accel_index(); }
  static Action from_class(int cls);
};

/// Nearest bin per axis; class = 3·steer_idx + accel_idx.
int discretize_action(double steer, double accel);

struct EnvConfig {
  std::size_t image_size = 64;
  double horizon_row = 20;       // pixel row of the horizon
  double camera_height = 3.0;    // m
  double focal = 32.0;           // px
  double lane_half_width = 1.75; // m
  double marking_width = 0.15;   // m
  double vehicle_half_width = 0.4;
  double steer_gain = 2.5;       // 1/s
  double dt = 0.1;               // s
  double max_speed_display = 16; // m/s at full HUD bar
  // HUD band drawn over the sky, clear of the image border where the
  // windowed reconstruction loss has almost no weight. With the gauge on,
  // the lower two thirds of the band hold the gauge bars.
  std::size_t hud_row = 6;
  std::size_t hud_rows = 6;
  // Cruise gauge: centered bars for the shortfall and the excess against
  // cruise_speed, full width at gauge_range. 0 disables.
  double gauge_range = 2.0;      // m/s
  double cruise_speed = 30.0 / 3.6;
  std::size_t max_steps = 1000;
  double segment_length = 40;    // m
  double straight_prob = 0.35;   // chance a segment has zero curvature
  double max_curvature = 0.02;   // 1/m
  double obstacle_prob = 0.05;   // per segment
  double obstacle_height = 1.0;  // m
  double start_offset = 0.8;     // uniform start range, m
  double start_heading = 0.05;   // rad
  double start_speed_max = 14;   // m/s
};

struct RewardConfig {
  double collision = 200;
  double fast = 10;
  double out = 40;
  double steer_sq = 5;
  double lateral = 0.2;
  double constant = -0.1;
  double desired_speed = 30.0 / 3.6;  // m/s
  bool negate_lateral = false;        // flips the sign of the lateral-acceleration term
};

struct StepEvents {
  bool collision = false;
  bool out_of_lane = false;
};

/// Frame (1,S,S) in [0,1]. Deterministic in the state.
Tensor<float> render(const EnvState& s, const EnvConfig& cfg);

/// Kinematic update; road-ahead fields are advanced but not resampled.
EnvState step(const EnvState& s, const Action& a, const EnvConfig& cfg, StepEvents* events = nullptr);

/// r_out is passed separately so the caller can fire it once per episode.
double reward(const EnvState& next, const Action& a, const StepEvents& events, const RewardConfig& cfg,
              bool charge_out_of_lane = true);

struct AutopilotConfig {
  double k_p = 0.6;
  double k_d = 1.2;
  double speed_band = 0.25;   // m/s either side of the desired speed
  double desired_speed = 30.0 / 3.6;
  double avoid_lookahead = 30; // m
  double avoid_offset = 0.9;   // m toward the free half
};

Action autopilot(const EnvState& s, const AutopilotConfig& cfg = {});

/// Sensor vector: steering scaled to [−1,1], throttle and brake in [0,1].
std::array<float, 3> sensor_reading(const EnvState& s);

struct Observation {
  Tensor<float> frame;
  std::array<float, 3> sensors{};
};

struct StepResult {
  Observation obs;
  double reward = 0;
  bool done = false;
  StepEvents events;
};

/// Episodic wrapper that owns the road and its RNG stream.
class Env {
 public:
  explicit Env(EnvConfig cfg = {}, RewardConfig reward = {});

  Observation reset(std::uint64_t seed);
  StepResult step(const Action& a);

  const EnvState& state() const { return state_; }
  const EnvConfig& config() const { return cfg_; }
  const RewardConfig& reward_config() const { return reward_cfg_; }
  std::size_t steps() const { return steps_; }
  bool done() const { return done_; }
  /// Number of times r_out has been charged this episode.
  int out_of_lane_charges() const { return out_charges_; }

 private:
  void sample_segment();
  void refresh_road();

  EnvConfig cfg_;
  RewardConfig reward_cfg_;
  Rng rng_{0};
  EnvState state_;
  std::size_t steps_ = 0;
  bool done_ = true;
  int out_charges_ = 0;
  double segment_end_ = 0;     // odometer where the current segment ends
  double pending_curvature_ = 0;
  double pending_obstacle_ = 0; // odometer of the next obstacle, or inf
  int pending_side_ = 0;
};

Observation observe(const EnvState& s, const EnvConfig& cfg);

}  // namespace carnet
