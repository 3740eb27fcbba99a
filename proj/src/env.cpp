// SPDX-License-Identifier: Apache-2.0

#include "carnet/env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace carnet {

namespace {

int nearest_index(const std::array<double, 3>& bins, double v) {
  int best = 0;
  for (int i = 1; i < 3; ++i)
    if (std::abs(v - bins[std::size_t(i)]) < std::abs(v - bins[std::size_t(best)])) best = i;
  return best;
}

// Lateral displacement of the road centerline at distance d ahead.
double road_shift(const EnvState& s, double d) {
  const double r = std::min(d, s.segment_remaining);
  double y = 0.5 * s.curvature * r * r;
  if (d > r) {
    const double e = d - r;
    y += s.curvature * r * e + 0.5 * s.next_curvature * e * e;
  }
  return y;
}

// Lane-relative lateral coordinate -> vehicle-relative at distance d.
double relative_lateral(const EnvState& s, double y_lane, double d) {
  return y_lane + road_shift(s, d) - s.lateral_offset - s.heading_error * d;
}

double overlap(double a0, double a1, double b0, double b1) {
  return std::clamp(std::min(a1, b1) - std::max(a0, b0), 0.0, 1.0);
}

constexpr float kSky = 0.7f;
constexpr float kRoad = 0.2f;
constexpr float kMarking = 1.0f;
constexpr float kObstacle = 0.9f;

}  // namespace

int Action::steer_index() const { return nearest_index(kSteerValues, steer); }
int Action::accel_index() const { return nearest_index(kAccelValues, accel); }

Action Action::from_class(int cls) {
  if (cls < 0 || cls >= int(kActionCount)) throw std::out_of_range("action class " + std::to_string(cls));
  return {kSteerValues[std::size_t(cls / 3)], kAccelValues[std::size_t(cls % 3)]};
}

int discretize_action(double steer, double accel) { return Action{steer, accel}.class_index(); }

Tensor<float> render(const EnvState& s, const EnvConfig& cfg) {
  const std::size_t n = cfg.image_size;
  const double cx = double(n) / 2.0;
  if (cfg.hud_row + cfg.hud_rows > n) throw std::invalid_argument("render: HUD band exceeds the image");
  Tensor<float> img(Shape{1, n, n});
  auto px = img.data();

  for (std::size_t v = 0; v < n; ++v) {
    const double dv = (double(v) + 0.5) - cfg.horizon_row;
    float* row = px.data() + v * n;
    if (dv <= 0) {
      std::fill(row, row + n, kSky);
      continue;
    }
    std::fill(row, row + n, kRoad);
    const double d = cfg.focal * cfg.camera_height / dv;
    const double hw = std::max(0.5, cfg.focal * cfg.marking_width / (2 * d));
    for (double side : {-1.0, 1.0}) {
      const double u = cx - cfg.focal * relative_lateral(s, side * cfg.lane_half_width, d) / d;
      const long j0 = std::max(0L, long(std::floor(u - hw)));
      const long j1 = std::min(long(n) - 1, long(std::floor(u + hw)));
      for (long j = j0; j <= j1; ++j) {
        const double cov = overlap(double(j), double(j) + 1.0, u - hw, u + hw);
        row[j] = std::max(row[j], float(kRoad + (kMarking - kRoad) * cov));
      }
    }
  }

  if (s.obstacle_side != 0 && s.obstacle_distance > 2.0 && s.obstacle_distance < 90.0) {
    const double D = s.obstacle_distance;
    const double ground = cfg.horizon_row + cfg.focal * cfg.camera_height / D;
    const double top = cfg.horizon_row + cfg.focal * (cfg.camera_height - cfg.obstacle_height) / D;
    const double a = relative_lateral(s, 0.0, D);
    const double b = relative_lateral(s, s.obstacle_side * cfg.lane_half_width, D);
    const double u0 = cx - cfg.focal * std::max(a, b) / D;
    const double u1 = cx - cfg.focal * std::min(a, b) / D;
    for (std::size_t v = 0; v < n; ++v) {
      const double rc = overlap(double(v), double(v) + 1.0, top, ground);
      if (rc <= 0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        const double cov = rc * overlap(double(j), double(j) + 1.0, u0, u1);
        if (cov > 0) px[v * n + j] = std::max(px[v * n + j], float(kRoad + (kObstacle - kRoad) * cov));
      }
    }
  }

  // Speed bar centered in the HUD band, then the cruise gauge.
  auto bar = [&](std::size_t v, double half) {
    half = std::clamp(half, 0.0, cx);
    for (std::size_t j = 0; j < n; ++j) px[v * n + j] = float(overlap(double(j), double(j) + 1.0, cx - half, cx + half));
  };
  const bool gauge = cfg.gauge_range > 0 && cfg.hud_rows >= 3;
  const std::size_t third = gauge ? cfg.hud_rows / 3 : 0;
  const std::size_t end = cfg.hud_row + cfg.hud_rows;
  for (std::size_t v = cfg.hud_row; v < end - 2 * third; ++v) bar(v, s.speed / cfg.max_speed_display * cx);
  if (gauge) {
    const double dev = (s.speed - cfg.cruise_speed) / cfg.gauge_range * cx;
    for (std::size_t v = end - 2 * third; v < end - third; ++v) bar(v, -dev);
    for (std::size_t v = end - third; v < end; ++v) bar(v, dev);
  }
  return img;
}

EnvState step(const EnvState& s, const Action& a, const EnvConfig& cfg, StepEvents* events) {
  EnvState t = s;
  t.speed = std::max(0.0, s.speed + a.accel * cfg.dt);
  t.heading_error = s.heading_error + (cfg.steer_gain * a.steer - s.curvature * t.speed) * cfg.dt;
  t.lateral_offset = s.lateral_offset + t.speed * std::sin(t.heading_error) * cfg.dt;
  const double advance = t.speed * std::cos(t.heading_error) * cfg.dt;
  t.odometer = s.odometer + advance;
  t.segment_remaining = s.segment_remaining - advance;
  t.obstacle_distance = s.obstacle_distance - advance;
  t.last_steer = a.steer;
  t.last_accel = a.accel;

  StepEvents ev;
  if (s.obstacle_side != 0 && s.obstacle_distance > 0 && t.obstacle_distance <= 0) {
    const double lo = s.obstacle_side > 0 ? 0.0 : -cfg.lane_half_width;
    const double hi = s.obstacle_side > 0 ? cfg.lane_half_width : 0.0;
    ev.collision = t.lateral_offset + cfg.vehicle_half_width > lo && t.lateral_offset - cfg.vehicle_half_width < hi;
  }
  ev.out_of_lane = std::abs(t.lateral_offset) > cfg.lane_half_width;
  t.collided = s.collided || ev.collision;
  t.out_of_lane = ev.out_of_lane;
  if (events) *events = ev;
  return t;
}

double reward(const EnvState& next, const Action& a, const StepEvents& events, const RewardConfig& cfg,
              bool charge_out_of_lane) {
  const double r_col = events.collision ? -1.0 : 0.0;
  const double r_fast = next.speed > cfg.desired_speed ? -1.0 : 0.0;
  const double r_out = events.out_of_lane && charge_out_of_lane ? -1.0 : 0.0;
  const double v_lon = next.speed * std::cos(next.heading_error);
  const double alpha = a.steer;
  const double r_lat = (cfg.negate_lateral ? -1.0 : 1.0) * alpha * next.speed * next.speed;
  return cfg.collision * r_col + v_lon + cfg.fast * (next.speed / cfg.desired_speed) * r_fast + cfg.out * r_out -
         cfg.steer_sq * alpha * alpha + cfg.lateral * r_lat + cfg.constant;
}

Action autopilot(const EnvState& s, const AutopilotConfig& cfg) {
  double target = 0;
  if (s.obstacle_side != 0 && s.obstacle_distance > -2.0 && s.obstacle_distance < cfg.avoid_lookahead)
    target = -s.obstacle_side * cfg.avoid_offset;
  const double u = -cfg.k_p * (s.lateral_offset - target) - cfg.k_d * s.heading_error;
  Action a;
  a.steer = kSteerValues[std::size_t(nearest_index(kSteerValues, u))];
  if (s.speed < cfg.desired_speed - cfg.speed_band)
    a.accel = kAccelValues[2];
  else if (s.speed > cfg.desired_speed + cfg.speed_band)
    a.accel = kAccelValues[0];
  return a;
}

std::array<float, 3> sensor_reading(const EnvState& s) {
  const double steer = s.last_steer / kSteerValues[2];
  const double throttle = s.last_accel > 0 ? s.last_accel / kAccelValues[2] : 0.0;
  const double brake = s.last_accel < 0 ? -s.last_accel / kAccelValues[2] : 0.0;
  return {float(steer), float(throttle), float(brake)};
}

Observation observe(const EnvState& s, const EnvConfig& cfg) { return {render(s, cfg), sensor_reading(s)}; }

// ---------------------------------------------------------------------------

Env::Env(EnvConfig cfg, RewardConfig reward) : cfg_(cfg), reward_cfg_(reward) {}

void Env::sample_segment() {
  pending_curvature_ =
      rng_.bernoulli(cfg_.straight_prob) ? 0.0 : rng_.uniform(-cfg_.max_curvature, cfg_.max_curvature);
  // The pending segment starts at segment_end_; an obstacle may sit in it.
  if (pending_side_ == 0 && rng_.bernoulli(cfg_.obstacle_prob)) {
    pending_obstacle_ = segment_end_ + rng_.uniform(0.25, 0.75) * cfg_.segment_length;
    pending_side_ = rng_.bernoulli(0.5) ? 1 : -1;
  }
}

void Env::refresh_road() {
  while (state_.odometer >= segment_end_) {
    state_.curvature = pending_curvature_;
    segment_end_ += cfg_.segment_length;
    sample_segment();
  }
  if (pending_side_ != 0 && pending_obstacle_ - state_.odometer < -5.0) pending_side_ = 0;
  state_.next_curvature = pending_curvature_;
  state_.segment_remaining = segment_end_ - state_.odometer;
  state_.obstacle_side = pending_side_;
  state_.obstacle_distance =
      pending_side_ != 0 ? pending_obstacle_ - state_.odometer : std::numeric_limits<double>::infinity();
}

Observation Env::reset(std::uint64_t seed) {
  rng_ = Rng(seed, 0x656e76 /* "env" */);
  state_ = EnvState{};
  state_.lateral_offset = rng_.uniform(-cfg_.start_offset, cfg_.start_offset);
  state_.heading_error = rng_.uniform(-cfg_.start_heading, cfg_.start_heading);
  state_.speed = rng_.uniform(0.0, cfg_.start_speed_max);
  pending_side_ = 0;
  segment_end_ = 0;
  pending_curvature_ = rng_.bernoulli(cfg_.straight_prob) ? 0.0 : rng_.uniform(-cfg_.max_curvature, cfg_.max_curvature);
  refresh_road();
  steps_ = 0;
  out_charges_ = 0;
  done_ = false;
  return observe(state_, cfg_);
}

StepResult Env::step(const Action& a) {
  if (done_) throw std::logic_error("env: step after episode end; call reset()");
  StepResult r;
  state_ = carnet::step(state_, a, cfg_, &r.events);
  refresh_road();
  ++steps_;
  const bool charge = r.events.out_of_lane && out_charges_ == 0;
  if (charge) ++out_charges_;
  r.reward = reward(state_, a, r.events, reward_cfg_, charge);
  done_ = r.events.collision || r.events.out_of_lane || steps_ >= cfg_.max_steps;
  r.done = done_;
  r.obs = observe(state_, cfg_);
  return r;
}

}  // namespace carnet
