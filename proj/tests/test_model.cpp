#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "carnet/losses.hpp"
#include "carnet/model.hpp"
#include "gradcheck.hpp"

using namespace carnet;
using namespace carnet::testing;

namespace {

using ShapeList = std::vector<std::pair<std::string, Shape>>;

Shape chw(std::size_t c, std::size_t s) { return Shape{c, s, s}; }

// Encoder blocks of two convs each, then the projection; decoder mirrors.
ShapeList ladder(const std::vector<std::size_t>& channels, const std::vector<std::size_t>& sides, std::size_t latent,
                 std::size_t input) {
  ShapeList out;
  for (std::size_t b = 0; b < channels.size(); ++b)
    for (int c = 0; c < 2; ++c)
      out.emplace_back("enc.block" + std::to_string(b) + ".conv" + std::to_string(c), chw(channels[b], sides[b]));
  out.emplace_back("enc.proj", chw(latent, 1));
  for (std::size_t b = 0; b < channels.size(); ++b) {
    const std::size_t r = channels.size() - 1 - b;
    const std::size_t side = r + 1 < sides.size() ? sides[r] : sides.back();
    for (int c = 0; c < 2; ++c)
      out.emplace_back("dec.block" + std::to_string(b) + ".conv" + std::to_string(c), chw(channels[r], side));
  }
  out.emplace_back("dec.out", chw(1, input));
  return out;
}

WindowBatch<double> random_batch(const CarnetConfig& cfg, std::size_t B, Rng& rng) {
  WindowBatch<double> b;
  b.frames = random_tensor({B, cfg.window, 1, cfg.input_size, cfg.input_size}, rng, 0.05, 0.95);
  if (cfg.sensor_dim) b.sensors = random_tensor({B, cfg.window, cfg.sensor_dim}, rng);
  if (cfg.action_dim) {
    Tensor<double> a(Shape{B, cfg.window, cfg.action_dim});
    for (std::size_t i = 0; i < B * cfg.window; ++i) a[i * cfg.action_dim + rng.below(cfg.action_dim)] = 1.0;
    b.actions = a;
  }
  return b;
}

void zero_all(ParamList<double> ps) {
  for (auto* p : ps) p->value.fill(0.0);
}

}  // namespace

TEST(Shapes, FullConfigEncoderDecoder) {
  Rng rng(1);
  Carnet<float> m(CarnetConfig::full(), rng);
  const auto expected = ladder({2, 4, 8, 16, 32, 64}, {128, 64, 32, 16, 8, 4}, 128, 256);
  EXPECT_EQ(m.layer_shapes(), expected);
}

TEST(Shapes, FullConfigController) {
  EXPECT_EQ(CarnetConfig::full().controller_widths(), (std::vector<std::size_t>{256, 128, 128, 64, 9}));
  Rng rng(1);
  Controller<float> c(128, rng);
  ASSERT_EQ(c.layers().size(), 4u);
  const std::vector<std::pair<std::size_t, std::size_t>> io{{256, 128}, {128, 128}, {128, 64}, {64, 9}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(c.layers()[i].in(), io[i].first);
    EXPECT_EQ(c.layers()[i].out(), io[i].second);
  }
}

TEST(Shapes, DeskLadder) {
  // 64 → 32 → 16 → 8 → 4 → 4, channels 2..32, latent 32.
  Rng rng(1);
  Carnet<float> m(CarnetConfig::desk(), rng);
  EXPECT_EQ(m.layer_shapes(), ladder({2, 4, 8, 16, 32}, {32, 16, 8, 4, 4}, 32, 64));
  EXPECT_EQ(CarnetConfig::desk().controller_widths(), (std::vector<std::size_t>{64, 32, 32, 16, 9}));
}

TEST(Shapes, AttentionKeepsShapes) {
  for (bool relative : {false, true}) {
    auto cfg = CarnetConfig::desk();
    cfg.use_attention = true;
    cfg.relative_attention = relative;
    Rng rng(2);
    Carnet<float> m(cfg, rng);
    auto expected = ladder({2, 4, 8, 16, 32}, {32, 16, 8, 4, 4}, 32, 64);
    expected.insert(expected.begin(), {"enc.attn", chw(2, 64)});
    EXPECT_EQ(m.layer_shapes(), expected);
    Tape<float> t;
    const auto x = t.constant(Tensor<float>(Shape{2, 1, 64, 64}, 0.5f));
    const auto l = m.encode(t, x, false);
    EXPECT_EQ(l.shape(), (Shape{2, 32}));
    EXPECT_EQ(m.decode(t, l, false).shape(), (Shape{2, 1, 64, 64}));
  }
}

TEST(Shapes, RolloutCountsAndWrongInputs) {
  Rng rng(3);
  const auto cfg = CarnetConfig::desk();
  Carnet<float> m(cfg, rng);
  WindowBatch<float> b;
  b.frames = Tensor<float>(Shape{2, 4, 1, 64, 64}, 0.3f);
  Tape<float> t;
  const auto r = m.rollout(t, b, false);
  EXPECT_EQ(r.recons.shape(), (Shape{8, 1, 64, 64}));
  EXPECT_EQ(r.preds.shape(), (Shape{6, 1, 64, 64}));
  EXPECT_EQ(r.latents.shape(), (Shape{8, 32}));
  EXPECT_EQ(r.predicted_latents.shape(), (Shape{6, 32}));
  EXPECT_EQ(r.hiddens.size(), 3u);
  EXPECT_EQ(cfg.rnn_hidden(), cfg.latent_size);
  EXPECT_EQ(cfg.rnn_input(), cfg.latent_size);

  Tape<float> t2;
  EXPECT_THROW(m.encode(t2, t2.constant(Tensor<float>(Shape{1, 1, 32, 32})), false), ShapeError);
  EXPECT_THROW(m.decode(t2, t2.constant(Tensor<float>(Shape{1, 16})), false), ShapeError);

  auto scfg = cfg;
  scfg.sensor_dim = 3;
  Carnet<float> sm(scfg, rng);
  Tape<float> t3;
  EXPECT_THROW(sm.rollout(t3, b, false), std::invalid_argument);
  EXPECT_EQ(scfg.rnn_hidden(), 48u);
}

TEST(Model, LatentsBoundedAndImagesInUnitInterval) {
  Rng rng(4);
  Carnet<float> m(CarnetConfig::desk(), rng);
  Tensor<float> x(Shape{3, 1, 64, 64});
  for (auto& v : x.data()) v = float(rng.uniform());
  Tape<float> t;
  const auto l = m.encode(t, t.constant(x), true);
  for (float v : l.value().data()) EXPECT_LT(std::abs(v), 1.0f);
  Tensor<float> big(Shape{3, 32});
  for (auto& v : big.data()) v = float(rng.uniform(-50, 50));
  for (float v : m.decode(t, t.constant(big), false).value().data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Model, ZeroModelZeroFrames) {
  auto cfg = CarnetConfig::desk();
  cfg.sensor_dim = 3;
  Rng rng(5);
  Carnet<double> m(cfg, rng);
  // Zero every weight and bias; batch-norm affine stays (1, 0).
  for (auto* p : m.parameters())
    if (p->name.find(".bn.gamma") == std::string::npos) p->value.fill(0.0);
  WindowBatch<double> b;
  b.frames = Tensor<double>(Shape{2, 4, 1, 64, 64});
  b.sensors = Tensor<double>(Shape{2, 4, 3});
  Tape<double> t;
  const auto r = m.rollout(t, b, false);
  for (double v : r.latents.value().data()) EXPECT_EQ(v, 0.0);
  for (const auto& h : r.hiddens)
    for (double v : h.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : r.sensor_preds->value().data()) EXPECT_EQ(v, 0.0);
  Tape<double> t2;
  GruCell<double> g("g", 2, 2, rng);
  zero_all([&] {
    ParamList<double> ps;
    g.collect(ps);
    return ps;
  }());
  const auto gates = g.step_gates(t2, t2.constant(Tensor<double>(Shape{1, 2})), t2.constant(Tensor<double>(Shape{1, 2})));
  for (double v : gates.z.value().data()) EXPECT_EQ(v, 0.5);
  for (double v : gates.r.value().data()) EXPECT_EQ(v, 0.5);
}

TEST(Controller, ZeroWeightsGiveLogNine) {
  Rng rng(6);
  Controller<double> c(32, rng);
  zero_all(c.parameters());
  Tape<double> t;
  const auto x = t.constant(random_tensor({4, 32}, rng));
  const auto logits = c.forward(t, x, x);
  EXPECT_NEAR(cross_entropy(logits, {0, 3, 5, 8}, CrossEntropyConfig{}).value()[0], std::log(9.0), 1e-12);
}

TEST(Controller, InputOrderMatters) {
  Rng rng(7);
  Controller<double> c(8, rng);
  Tape<double> t;
  const auto a = t.constant(random_tensor({1, 8}, rng)), b = t.constant(random_tensor({1, 8}, rng));
  const auto ab = c.forward(t, a, b).value(), ba = c.forward(t, b, a).value();
  double diff = 0;
  for (std::size_t i = 0; i < 9; ++i) diff += std::abs(ab[i] - ba[i]);
  EXPECT_GT(diff, 1e-6);
  EXPECT_THROW(c.forward(t, a, t.constant(Tensor<double>(Shape{1, 4}))), ShapeError);
}

TEST(Model, DecoderIsSharedBetweenReconstructionAndPrediction) {
  Rng rng(8);
  Carnet<double> m(CarnetConfig::tiny(), rng);
  const auto dec = m.decoder_parameters();
  const std::set<Parameter<double>*> unique(dec.begin(), dec.end());
  EXPECT_EQ(unique.size(), dec.size());
  const auto all = m.parameters();
  EXPECT_EQ(std::set<Parameter<double>*>(all.begin(), all.end()).size(), all.size());

  // A loss on predictions alone reaches the same decoder parameters.
  auto batch = random_batch(m.config(), 2, rng);
  for (auto* p : all) p->zero_grad();
  {
    Tape<double> t;
    const auto r = m.rollout(t, batch, true);
    t.backward(reduce_sum(r.preds));
  }
  for (auto* p : dec) EXPECT_TRUE(p->has_grad()) << p->name;
}

TEST(GradCheck, TinyRolloutEndToEnd) {
  // Alternates image-only and sensor+action variants. Instances whose
  // perturbations cross a ReLU kink are replaced by fresh ones.
  int accepted = 0, screened = 0;
  for (int i = 0; accepted < 20 && i < 60; ++i) {
    auto cfg = CarnetConfig::tiny();
    if (i % 2) {
      cfg.sensor_dim = 3;
      cfg.sensor_embed = 2;
      cfg.action_dim = 9;
    }
    Rng rng(800 + i);
    Carnet<double> m(cfg, rng);
    const auto batch = random_batch(cfg, 2, rng);
    TotalLossOptions opts;
    opts.sensors = cfg.sensor_dim > 0;
    opts.ms_ssim = MsSsimConfig::unit_weights(2, 3);
    const auto r = check_params_screened(m.parameters(), [&](Tape<double>& t) {
      return carnet_total_loss(m.rollout(t, batch, true), batch, opts).total;
    });
    if (!r.smooth) {
      ++screened;
      continue;
    }
    ++accepted;
    EXPECT_LT(r.error, 1e-4) << "instance " << i;
  }
  EXPECT_EQ(accepted, 20);
  EXPECT_LE(screened, 10);
}

TEST(TotalLoss, PartsSumToTotal) {
  Rng rng(9);
  auto cfg = CarnetConfig::tiny();
  cfg.sensor_dim = 3;
  Carnet<double> m(cfg, rng);
  const auto batch = random_batch(cfg, 3, rng);
  TotalLossOptions opts;
  opts.sensors = true;
  opts.ms_ssim = MsSsimConfig::unit_weights(2, 3);
  Tape<double> t;
  const auto loss = carnet_total_loss(m.rollout(t, batch, true), batch, opts);
  ASSERT_EQ(loss.parts.size(), 4u);
  EXPECT_EQ(loss.parts[0].first, "recon");
  EXPECT_EQ(loss.parts[3].first, "sensor");
  double sum = 0;
  for (const auto& [name, v] : loss.parts) sum += v.value()[0];
  EXPECT_NEAR(loss.total.value()[0], sum, 1e-12);
}

TEST(Model, StateRoundTripsThroughNames) {
  Rng rng(10);
  Carnet<float> m(CarnetConfig::desk(), rng);
  const auto st = m.state();
  std::set<std::string> names;
  for (const auto& e : st) names.insert(e.name);
  EXPECT_EQ(names.size(), st.size());
  EXPECT_GT(st.size(), m.parameters().size());  // running stats included
}
