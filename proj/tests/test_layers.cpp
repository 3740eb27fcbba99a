#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "carnet/layers.hpp"
#include "gradcheck.hpp"

using namespace carnet;
using namespace carnet::testing;

namespace {

constexpr int kInstances = 20;
constexpr double kTol = 1e-4;

template <typename F>
void for_instances(F&& f) {
  for (int i = 0; i < kInstances; ++i) {
    Rng rng(500 + i, 11);
    f(rng, i);
  }
}

// Naive reference convolution, (C_in,H,W) -> (C_out,H',W').
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                          std::size_t stride, std::size_t pad) {
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2), co = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> y(Shape{co, oh, ow});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = b[o];
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t u = 0; u < k; ++u)
            for (std::size_t v = 0; v < k; ++v) {
              const long yy = long(i * stride + u) - long(pad), xx = long(j * stride + v) - long(pad);
              if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(wd)) continue;
              s += w[((o * ci + c) * k + u) * k + v] * x[(c * h + std::size_t(yy)) * wd + std::size_t(xx)];
            }
        y[(o * oh + i) * ow + j] = s;
      }
  return y;
}

}  // namespace

TEST(Conv, OutputSizes) {
  EXPECT_EQ(conv_out_size(64, 3, 2, 1), 32u);
  EXPECT_EQ(conv_out_size(4, 4, 1, 0), 1u);
  EXPECT_EQ(conv_transpose_out_size(1, 4, 1, 0, 0), 4u);
  EXPECT_EQ(conv_transpose_out_size(32, 3, 2, 1, 1), 64u);
  EXPECT_THROW(conv_out_size(2, 5, 1, 0), ShapeError);
}

TEST(Conv, MatchesNaiveReference) {
  for_instances([](Rng& rng, int) {
    for (std::size_t stride : {1u, 2u}) {
      const auto x = random_tensor({3, 7, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
      Tape<double> t;
      const auto y = conv2d(t.constant(x), t.constant(w), t.constant(b), stride, 1).value();
      const auto ref = naive_conv(x, w, b, stride, 1);
      ASSERT_EQ(y.shape(), ref.shape());
      for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    }
  });
}

TEST(Conv, TransposeIsAdjoint) {
  // <conv(x), y> = <x, conv_t(y)> for bias-free convolutions with matching geometry.
  for_instances([](Rng& rng, int) {
    const auto x = random_tensor({1, 2, 8, 8}, rng), w = random_tensor({3, 2, 3, 3}, rng);
    const Tensor<double> zero3(Shape{3}), zero2(Shape{2});
    Tape<double> t;
    const auto cx = conv2d(t.constant(x), t.constant(w), t.constant(zero3), 2, 1).value();
    const auto y = random_tensor(cx.shape(), rng);
    const auto ty = conv_transpose2d(t.constant(y), t.constant(w), t.constant(zero2), 2, 1, 1).value();
    ASSERT_EQ(ty.shape(), x.shape());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
    EXPECT_NEAR(lhs, rhs, 1e-10 * (1 + std::abs(lhs)));
  });
}

TEST(GradCheck, Convolutions) {
  for_instances([](Rng& rng, int i) {
    const std::size_t stride = 1 + i % 2;
    std::vector<Tensor<double>> in{random_tensor({2, 2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng),
                                   random_tensor({3}, rng)};
    Tensor<double> w;
    {
      Tape<double> t;
      w = random_tensor(conv2d(t.constant(in[0]), t.constant(in[1]), t.constant(in[2]), stride, 1).shape(), rng);
    }
    EXPECT_LT(check_inputs(in, [&](auto&, const auto& v) { return project(conv2d(v[0], v[1], v[2], stride, 1), w); }),
              kTol)
        << "conv2d " << i;

    const std::size_t op = stride == 2 ? 1 : 0;
    std::vector<Tensor<double>> tin{random_tensor({2, 3, 4, 4}, rng), random_tensor({3, 2, 3, 3}, rng),
                                    random_tensor({2}, rng)};
    {
      Tape<double> t;
      w = random_tensor(
          conv_transpose2d(t.constant(tin[0]), t.constant(tin[1]), t.constant(tin[2]), stride, 1, op).shape(), rng);
    }
    EXPECT_LT(check_inputs(tin,
                           [&](auto&, const auto& v) {
                             return project(conv_transpose2d(v[0], v[1], v[2], stride, 1, op), w);
                           }),
              kTol)
        << "conv_transpose2d " << i;
  });
}

TEST(GradCheck, BatchNormTraining) {
  for_instances([](Rng& rng, int i) {
    std::vector<Tensor<double>> in{random_tensor({3, 2, 3, 3}, rng), random_tensor({2}, rng, 0.5, 1.5),
                                   random_tensor({2}, rng)};
    const auto w = random_tensor({3, 2, 3, 3}, rng);
    EXPECT_LT(check_inputs(in,
                           [&](auto&, const auto& v) {
                             return project(batchnorm2d<double>(v[0], v[1], v[2], 1e-5, true, nullptr), w);
                           }),
              kTol)
        << i;
  });
}

TEST(BatchNorm, TrainingNormalizesAndEvalUsesRunningStats) {
  Rng rng(3);
  const auto x = random_tensor({4, 2, 3, 3}, rng, 2.0, 5.0);
  BatchNormStats<double> stats{Tensor<double>(Shape{2}), Tensor<double>(Shape{2}, 1.0)};
  Tape<double> t;
  const auto one = t.constant(Tensor<double>(Shape{2}, 1.0)), zero = t.constant(Tensor<double>(Shape{2}));
  const auto y = batchnorm2d<double>(t.constant(x), one, zero, 1e-5, true, &stats).value();
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t p = 0; p < 9; ++p) m += y[(n * 2 + c) * 9 + p];
    m /= 36;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t p = 0; p < 9; ++p) v += std::pow(y[(n * 2 + c) * 9 + p] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 36, 1.0, 1e-3);
    EXPECT_GT(stats.running_mean[c], 0.2);  // moved 10% toward a mean in [2,5]
  }
  BatchNormStats<double> fixed{Tensor<double>(Shape{2}, 1.0), Tensor<double>(Shape{2}, 4.0)};
  const auto e = batchnorm2d<double>(t.constant(x), one, zero, 0.0, false, &fixed).value();
  EXPECT_DOUBLE_EQ(e[0], (x[0] - 1.0) / 2.0);
}

TEST(GradCheck, DenseAndActivations) {
  for_instances([](Rng& rng, int i) {
    Dense<double> d("d", 5, 3, rng);
    const auto x = random_tensor({4, 5}, rng), w = random_tensor({4, 3}, rng);
    EXPECT_LT(check_params({&d.weight, &d.bias},
                           [&](Tape<double>& t) { return project(tanh(d.forward(t, t.constant(x))), w); }),
              kTol)
        << i;
    const auto a = random_tensor({3, 4}, rng), wa = random_tensor({3, 4}, rng);
    for (Activation kind : {Activation::relu, Activation::sigmoid, Activation::tanh, Activation::softmax})
      EXPECT_LT(check_inputs({a}, [&](auto&, const auto& v) { return project(activation(kind, v[0]), wa); }), kTol);
  });
}

TEST(GradCheck, GruCell) {
  for_instances([](Rng& rng, int i) {
    GruCell<double> g("gru", 4, 3, rng);
    const auto h0 = random_tensor({2, 4}, rng), x = random_tensor({2, 3}, rng), w = random_tensor({2, 4}, rng);
    ParamList<double> ps;
    g.collect(ps);
    EXPECT_LT(check_params(ps, [&](Tape<double>& t) { return project(g.step(t, t.constant(h0), t.constant(x)), w); }),
              kTol)
        << "params " << i;
    EXPECT_LT(check_inputs({h0, x}, [&](Tape<double>& t, const auto& v) { return project(g.step(t, v[0], v[1]), w); }),
              kTol)
        << "inputs " << i;
  });
}

TEST(Gru, ZeroParametersHalveTheState) {
  Rng rng(1);
  GruCell<double> g("gru", 6, 3, rng);
  ParamList<double> ps;
  g.collect(ps);
  for (auto* p : ps) p->value.fill(0.0);
  const auto h0 = random_tensor({5, 6}, rng, -10, 10), x = random_tensor({5, 3}, rng, -10, 10);
  Tape<double> t;
  const auto h = g.step(t, t.constant(h0), t.constant(x)).value();
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double expect = 0.5 * h0[i];
    EXPECT_LE(std::abs(h[i] - expect), std::abs(std::nextafter(expect, 1e300) - expect)) << i;
  }
}

TEST(Gru, GatesInUnitIntervalAndConvexUpdate) {
  Rng rng(2);
  for (int inst = 0; inst < 1000; ++inst) {
    GruCell<double> g("gru", 3, 2, rng);
    ParamList<double> ps;
    g.collect(ps);
    for (auto* p : ps)
      for (auto& v : p->value.data()) v = rng.uniform(-3, 3);
    const auto h0 = random_tensor({1, 3}, rng, -1, 1), x = random_tensor({1, 2}, rng, -3, 3);
    Tape<double> t;
    const auto gates = g.step_gates(t, t.constant(h0), t.constant(x));
    for (std::size_t i = 0; i < 3; ++i) {
      const double z = gates.z.value()[i], r = gates.r.value()[i];
      EXPECT_GT(z, 0.0);
      EXPECT_LT(z, 1.0);
      EXPECT_GT(r, 0.0);
      EXPECT_LT(r, 1.0);
      const double c = gates.candidate.value()[i], h = gates.h.value()[i];
      EXPECT_GE(h, std::min(h0[i], c) - 1e-15);
      EXPECT_LE(h, std::max(h0[i], c) + 1e-15);
    }
  }
}

TEST(GradCheck, LocalAttention) {
  for_instances([](Rng& rng, int i) {
    const bool relative = i % 2 == 1;
    const std::size_t k = 3, din = 2, dout = 4;
    std::vector<Tensor<double>> in{random_tensor({2, din, 4, 5}, rng), random_tensor({dout, din}, rng),
                                   random_tensor({dout, din}, rng), random_tensor({dout, din}, rng)};
    if (relative) in.push_back(random_tensor({k, dout / 2}, rng)), in.push_back(random_tensor({k, dout / 2}, rng));
    const auto w = random_tensor({2, dout, 4, 5}, rng);
    EXPECT_LT(check_inputs(in,
                           [&](auto&, const auto& v) {
                             const Var<double> rr = relative ? v[4] : Var<double>{}, rc = relative ? v[5] : Var<double>{};
                             return project(local_attention(v[0], v[1], v[2], v[3], rr, rc, k), w);
                           }),
              kTol)
        << (relative ? "relative " : "absolute ") << i;
  });
}

TEST(Attention, WeightsSumToOne) {
  Rng rng(4);
  for (bool relative : {false, true}) {
    const auto x = random_tensor({2, 1, 9, 7}, rng, 0, 1);
    const auto wq = random_tensor({2, 1}, rng, -3, 3), wk = random_tensor({2, 1}, rng, -3, 3);
    const auto rr = random_tensor({5, 1}, rng), rc = random_tensor({5, 1}, rng);
    const auto p = local_attention_weights(x, wq, wk, relative ? &rr : nullptr, relative ? &rc : nullptr, 5);
    ASSERT_EQ(p.shape(), (Shape{2, 9, 7, 25}));
    for (std::size_t pix = 0; pix < 2 * 9 * 7; ++pix) {
      double s = 0;
      for (std::size_t e = 0; e < 25; ++e) s += p[pix * 25 + e];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Attention, ExtentOneIsValueProjection) {
  Rng rng(5);
  const auto x = random_tensor({3, 2, 5, 4}, rng), wq = random_tensor({2, 2}, rng), wk = random_tensor({2, 2}, rng),
             wv = random_tensor({2, 2}, rng);
  Tape<double> t;
  const auto y = local_attention(t.constant(x), t.constant(wq), t.constant(wk), t.constant(wv), Var<double>{},
                                 Var<double>{}, 1)
                     .value();
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t p = 0; p < 20; ++p) {
        const double ref = wv[o * 2 + 0] * x[(n * 2 + 0) * 20 + p] + wv[o * 2 + 1] * x[(n * 2 + 1) * 20 + p];
        EXPECT_EQ(y[(n * 2 + o) * 20 + p], ref);
      }
}

TEST(Attention, OutputIsConvexCombinationOfNeighborValues) {
  // With zero padding the out-of-image neighbors contribute value 0.
  Rng rng(6);
  const std::size_t k = 3, H = 6, W = 6;
  int checked = 0;
  while (checked < 1000) {
    const auto x = random_tensor({1, 1, H, W}, rng, -2, 2);
    const auto wq = random_tensor({2, 1}, rng, -2, 2), wk = random_tensor({2, 1}, rng, -2, 2),
               wv = random_tensor({2, 1}, rng, -2, 2);
    Tape<double> t;
    const auto y = local_attention(t.constant(x), t.constant(wq), t.constant(wk), t.constant(wv), Var<double>{},
                                   Var<double>{}, k)
                       .value();
    for (std::size_t i = 0; i < H && checked < 1000; ++i)
      for (std::size_t j = 0; j < W && checked < 1000; ++j, ++checked)
        for (std::size_t c = 0; c < 2; ++c) {
          double lo = 1e300, hi = -1e300;
          for (long u = -1; u <= 1; ++u)
            for (long v = -1; v <= 1; ++v) {
              const long yy = long(i) + u, xx = long(j) + v;
              const bool in = yy >= 0 && xx >= 0 && yy < long(H) && xx < long(W);
              const double val = in ? wv[c] * x[std::size_t(yy) * W + std::size_t(xx)] : 0.0;
              lo = std::min(lo, val);
              hi = std::max(hi, val);
            }
          const double out = y[c * H * W + i * W + j];
          EXPECT_GE(out, lo - 1e-12);
          EXPECT_LE(out, hi + 1e-12);
        }
  }
}
