#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "carnet/dataset.hpp"
#include "carnet/env.hpp"

using namespace carnet;

namespace {

std::size_t differing_pixels(const Tensor<float>& a, const Tensor<float>& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

Tensor<float> mirrored(const Tensor<float>& img) {
  const std::size_t n = img.dim(2);
  Tensor<float> out(img.shape());
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t j = 0; j < n; ++j) out[v * n + j] = img[v * n + (n - 1 - j)];
  return out;
}

}  // namespace

TEST(Actions, ClassBijection) {
  std::set<std::pair<double, double>> seen;
  for (int c = 0; c < 9; ++c) {
    const auto a = Action::from_class(c);
    EXPECT_EQ(a.class_index(), c);
    seen.insert({a.steer, a.accel});
  }
  EXPECT_EQ(seen.size(), 9u);
  EXPECT_EQ(discretize_action(0.15, -2.0), (Action{0.2, -3.0}.class_index()));
  EXPECT_THROW(Action::from_class(9), std::out_of_range);
}

TEST(Render, CenteredFrameIsSymmetric) {
  EnvConfig cfg;
  EnvState s;
  s.speed = 7.3;
  const auto img = render(s, cfg);
  ASSERT_EQ(img.shape(), (Shape{1, 64, 64}));
  const auto m = mirrored(img);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LE(std::abs(img[i] - m[i]), 1e-6f) << i;
  for (float v : img.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Render, OppositeOffsetsAreMirrorImages) {
  EnvConfig cfg;
  EnvState a, b;
  a.lateral_offset = 0.6, b.lateral_offset = -0.6;
  a.speed = b.speed = 9.0;
  const auto ia = render(a, cfg), ib = mirrored(render(b, cfg));
  for (std::size_t i = 0; i < ia.size(); ++i) EXPECT_LE(std::abs(ia[i] - ib[i]), 1e-6f) << i;
}

TEST(Render, DistinctOffsetsDifferAndRenderIsDeterministic) {
  EnvConfig cfg;
  EnvState a, b;
  a.lateral_offset = 0.0, b.lateral_offset = 0.3;
  EXPECT_GE(differing_pixels(render(a, cfg), render(b, cfg)), 64u * 64u / 100u);
  EXPECT_EQ(render(b, cfg), render(b, cfg));
}

TEST(Render, CruiseGaugeResolvesTheSpeedBand) {
  // The autopilot's band edges are several pixels apart on the gauge rows.
  EnvConfig cfg;
  EnvState lo, hi;
  lo.speed = cfg.cruise_speed - 0.3;
  hi.speed = cfg.cruise_speed - 0.2;
  const auto a = render(lo, cfg), b = render(hi, cfg);
  const std::size_t row = cfg.hud_row + cfg.hud_rows / 3;  // first shortfall row
  double sa = 0, sb = 0;
  for (std::size_t j = 0; j < 64; ++j) sa += a[row * 64 + j], sb += b[row * 64 + j];
  EXPECT_NEAR(sa - sb, 0.1 / cfg.gauge_range * 64, 1e-4);
}

TEST(Step, ZeroActionFixedPoint) {
  EnvConfig cfg;
  EnvState s;
  const auto t = step(s, Action{}, cfg);
  EXPECT_EQ(t.lateral_offset, 0.0);
  EXPECT_EQ(t.heading_error, 0.0);
  EXPECT_EQ(t.speed, 0.0);
}

TEST(Step, SteerLeftIncreasesOffset) {
  EnvConfig cfg;
  EnvState s;
  s.speed = 5;
  double prev = s.lateral_offset;
  for (int i = 0; i < 5; ++i) {
    s = step(s, Action{0.2, 0.0}, cfg);
    EXPECT_GT(s.lateral_offset, prev);
    prev = s.lateral_offset;
  }
}

TEST(Step, BrakingClampsAtZero) {
  EnvConfig cfg;
  EnvState s;
  s.speed = 0.2;
  EXPECT_EQ(step(s, Action{0.0, -3.0}, cfg).speed, 0.0);
}

TEST(Reward, HandEvaluatedCases) {
  const RewardConfig cfg;
  EnvState s;
  EXPECT_EQ(reward(s, Action{}, StepEvents{}, cfg), -0.1);
  StepEvents crash;
  crash.collision = true;
  EXPECT_EQ(reward(s, Action{}, crash, cfg), -200.1);
  EnvState fast;
  fast.speed = 10.0;  // 36 km/h against 30 km/h desired
  EXPECT_EQ(reward(fast, Action{}, StepEvents{}, cfg), -2.1);
}

TEST(Reward, OutOfLaneChargedAtMostOncePerEpisode) {
  Env env;
  Rng rng(5);
  int episodes_out = 0;
  for (std::uint64_t ep = 0; ep < 100; ++ep) {
    env.reset(ep);
    int charges = 0;
    while (!env.done()) {
      const auto r = env.step(Action::from_class(int(rng.below(9))));
      if (r.events.out_of_lane) ++charges;
    }
    EXPECT_LE(env.out_of_lane_charges(), 1);
    EXPECT_LE(charges, 1);
    episodes_out += env.out_of_lane_charges();
  }
  EXPECT_GT(episodes_out, 0);  // random driving does leave the lane
}

TEST(Autopilot, BasicDecisions) {
  EnvState s;
  s.speed = 2;
  const auto a = autopilot(s);
  EXPECT_EQ(a.steer, 0.0);
  EXPECT_EQ(a.accel, 3.0);
  s.lateral_offset = 1.2;
  EXPECT_EQ(autopilot(s).steer, -0.2);
  s.lateral_offset = 0;
  s.speed = 12;
  EXPECT_EQ(autopilot(s).accel, -3.0);
}

TEST(Autopilot, KeepsTheLaneForFiveHundredSteps) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Env env;
    env.reset(1000 + seed);
    for (int i = 0; i < 500; ++i) {
      const auto r = env.step(autopilot(env.state()));
      ASSERT_LT(std::abs(env.state().lateral_offset), env.config().lane_half_width) << "seed " << seed << " step " << i;
      ASSERT_FALSE(r.events.out_of_lane);
      ASSERT_FALSE(r.done) << "seed " << seed << " step " << i;
    }
  }
}

TEST(Env, EpisodeIsDeterministicPerSeed) {
  Env a, b;
  a.reset(42);
  b.reset(42);
  for (int i = 0; i < 50; ++i) {
    const auto act = Action::from_class(i % 9);
    const auto ra = a.step(act), rb = b.step(act);
    EXPECT_EQ(ra.obs.frame, rb.obs.frame);
    EXPECT_EQ(ra.reward, rb.reward);
    if (ra.done) break;
  }
}

TEST(Env, MaxLengthTerminates) {
  EnvConfig cfg;
  cfg.max_steps = 30;
  Env env(cfg);
  env.reset(3);
  int n = 0;
  while (!env.done()) env.step(autopilot(env.state())), ++n;
  EXPECT_EQ(n, 30);
}

class DatasetTest : public ::testing::Test {
 protected:
  static const Dataset& full() {
    static const Dataset d = generate_dataset(DataConfig{}, 7);
    return d;
  }
};

TEST_F(DatasetTest, SizeSplitsAndWindows) {
  const auto& d = full();
  EXPECT_EQ(d.steps(), 20000u);
  std::set<std::size_t> seen;
  std::size_t total = 0;
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto ids = d.indices(s);
    total += ids.size();
    for (auto i : ids) EXPECT_TRUE(seen.insert(i).second);
  }
  EXPECT_EQ(total, d.windows.size());
  const double n = double(d.windows.size());
  EXPECT_LE(std::abs(double(d.indices(Split::train).size()) - 0.70 * n), 1.0);
  EXPECT_LE(std::abs(double(d.indices(Split::val).size()) - 0.15 * n), 1.0);
  EXPECT_LE(std::abs(double(d.indices(Split::test).size()) - 0.15 * n), 1.0);
  for (const auto& w : d.windows) EXPECT_LE(w.start + d.window, d.episodes[w.episode].length);
  // Contiguous blocks in (episode, start) order.
  for (std::size_t i = 1; i < d.windows.size(); ++i) EXPECT_LE(d.windows[i - 1].split, d.windows[i].split);
}

TEST_F(DatasetTest, LabelsCoverMostClasses) {
  std::size_t covered = 0;
  const auto& d = full();
  std::array<std::size_t, kActionCount> all{};
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto c = d.label_counts(s);
    for (std::size_t k = 0; k < kActionCount; ++k) all[k] += c[k];
  }
  for (auto c : all) covered += c > 0;
  EXPECT_GE(covered, 6u);
}

TEST_F(DatasetTest, GenerationIsDeterministic) {
  DataConfig cfg;
  cfg.total_steps = 1500;
  const auto a = generate_dataset(cfg, 11), b = generate_dataset(cfg, 11), c = generate_dataset(cfg, 12);
  ASSERT_EQ(a.episodes.size(), b.episodes.size());
  for (std::size_t e = 0; e < a.episodes.size(); ++e) {
    EXPECT_EQ(a.episodes[e].frames, b.episodes[e].frames);
    EXPECT_EQ(a.episodes[e].labels, b.episodes[e].labels);
    EXPECT_EQ(a.episodes[e].actions, b.episodes[e].actions);
  }
  EXPECT_NE(a.episodes[0].frames, c.episodes[0].frames);
}

TEST_F(DatasetTest, DiskRoundTrip) {
  DataConfig cfg;
  cfg.total_steps = 600;
  const auto d = generate_dataset(cfg, 13);
  const auto dir = std::filesystem::temp_directory_path() / "carnet_dataset_roundtrip";
  std::filesystem::remove_all(dir);
  write_dataset(d, dir);
  const auto r = read_dataset(dir);
  ASSERT_EQ(r.episodes.size(), d.episodes.size());
  ASSERT_EQ(r.windows.size(), d.windows.size());
  for (std::size_t e = 0; e < d.episodes.size(); ++e) {
    EXPECT_EQ(r.episodes[e].frames, d.episodes[e].frames);
    EXPECT_EQ(r.episodes[e].labels, d.episodes[e].labels);
    EXPECT_EQ(r.episodes[e].sensors, d.episodes[e].sensors);
  }
  std::filesystem::remove_all(dir);
}

TEST_F(DatasetTest, BatchLayout) {
  const auto& d = full();
  const auto b = d.batch({0, 5}, true, true);
  EXPECT_EQ(b.frames.shape(), (Shape{2, 4, 1, 64, 64}));
  EXPECT_EQ(b.sensors->shape(), (Shape{2, 4, 3}));
  EXPECT_EQ(b.actions->shape(), (Shape{2, 4, 9}));
  EXPECT_EQ(b.autopilot_class[1], d.window_label(5));
}
