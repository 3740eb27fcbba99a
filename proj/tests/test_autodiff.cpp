#include <gtest/gtest.h>

#include "carnet/adam.hpp"
#include "carnet/autodiff.hpp"
#include "gradcheck.hpp"

using namespace carnet;
using namespace carnet::testing;

namespace {

constexpr int kInstances = 20;
constexpr double kTol = 1e-4;

// Runs `f` on `kInstances` random input sets and checks every one.
void check_op(const char* name, const std::vector<Shape>& shapes, const InputFn& f, double lo = -1.0,
              double hi = 1.0) {
  for (int i = 0; i < kInstances; ++i) {
    Rng rng(1000 + i, 7);
    std::vector<Tensor<double>> in;
    for (const auto& s : shapes) in.push_back(random_tensor(s, rng, lo, hi));
    Tensor<double> w;
    {
      Tape<double> probe;
      std::vector<Var<double>> vars;
      for (const auto& t : in) vars.push_back(probe.constant(t));
      w = random_tensor(f(probe, vars).shape(), rng);
    }
    const double err = check_inputs(in, [&](Tape<double>& t, const std::vector<Var<double>>& v) {
      return project(f(t, v), w);
    });
    EXPECT_LT(err, kTol) << name << " instance " << i;
  }
}

}  // namespace

TEST(Tensor, ShapesAndErrors) {
  Tensor<float> t(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(to_string(t.shape()), "(2,3)");
  EXPECT_THROW(t.reshaped(Shape{4, 2}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_EQ(t.reshaped(Shape{3, 2}).dim(0), 3u);
  EXPECT_THROW(t.item(), ShapeError);
}

TEST(Tape, ParameterLeafIsShared) {
  Parameter<double> p("p", Tensor<double>(Shape{2}, 1.0));
  Tape<double> tape;
  const auto a = tape.param(p);
  const auto b = tape.param(p);
  EXPECT_EQ(a.id, b.id);
  tape.backward(reduce_sum(hadamard(a, b)));
  ASSERT_TRUE(p.has_grad());
  EXPECT_DOUBLE_EQ(p.grad[0], 2.0);
}

TEST(Tape, BackwardOnlyOnceAndScalarOnly) {
  Tape<double> tape;
  const auto x = tape.variable(Tensor<double>(Shape{3}, 2.0));
  EXPECT_THROW(tape.backward(x), ShapeError);
  const auto l = reduce_sum(x);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), std::logic_error);
  EXPECT_THROW(add(x, x), std::logic_error);
}

TEST(Tape, SuffixBroadcastOnly) {
  Tape<double> tape;
  const auto a = tape.variable(Tensor<double>(Shape{4, 3}, 1.0));
  const auto b = tape.variable(Tensor<double>(Shape{3}, 2.0));
  EXPECT_EQ(add(a, b).shape(), (Shape{4, 3}));
  const auto c = tape.variable(Tensor<double>(Shape{4}, 2.0));
  EXPECT_THROW(add(a, c), ShapeError);
  tape.backward(reduce_sum(add(a, b)));
  EXPECT_DOUBLE_EQ(tape.grad(b)[0], 4.0);  // summed over the broadcast axis
}

TEST(Tape, UnreachedGradientIsZero) {
  Tape<double> tape;
  const auto x = tape.variable(Tensor<double>(Shape{2}, 1.0));
  const auto y = tape.variable(Tensor<double>(Shape{2}, 1.0));
  tape.backward(reduce_sum(x));
  EXPECT_EQ(tape.grad(y), Tensor<double>(Shape{2}));
}

TEST(GradCheck, Elementwise) {
  const Shape s{3, 4};
  check_op("add", {s, s}, [](auto&, const auto& v) { return add(v[0], v[1]); });
  check_op("add_broadcast", {s, {4}}, [](auto&, const auto& v) { return add(v[0], v[1]); });
  check_op("sub", {s, {4}}, [](auto&, const auto& v) { return sub(v[0], v[1]); });
  check_op("hadamard", {s, {4}}, [](auto&, const auto& v) { return hadamard(v[0], v[1]); });
  check_op("scale", {s}, [](auto&, const auto& v) { return scale(v[0], -1.7); });
  check_op("add_scalar", {s}, [](auto&, const auto& v) { return add_scalar(v[0], 0.3); });
  check_op("relu", {s}, [](auto&, const auto& v) { return relu(v[0]); });
  check_op("sigmoid", {s}, [](auto&, const auto& v) { return sigmoid(v[0]); });
  check_op("tanh", {s}, [](auto&, const auto& v) { return tanh(v[0]); });
  check_op("exp", {s}, [](auto&, const auto& v) { return exp(v[0]); });
  check_op("log", {s}, [](auto&, const auto& v) { return log(v[0]); }, 0.2, 2.0);
  check_op("square", {s}, [](auto&, const auto& v) { return square(v[0]); });
  check_op("softmax", {s}, [](auto&, const auto& v) { return softmax(v[0]); });
  check_op("log_softmax", {s}, [](auto&, const auto& v) { return log_softmax(v[0]); });
}

TEST(GradCheck, Structural) {
  check_op("matmul", {{3, 5}, {5, 2}}, [](auto&, const auto& v) { return matmul(v[0], v[1]); });
  check_op("linear", {{4, 5}, {3, 5}, {3}}, [](auto&, const auto& v) { return linear(v[0], v[1], v[2]); });
  check_op("linear_nobias", {{4, 5}, {3, 5}}, [](auto&, const auto& v) { return linear(v[0], v[1]); });
  check_op("concat0", {{2, 3}, {4, 3}}, [](auto&, const auto& v) { return concat<double>({v[0], v[1]}, 0); });
  check_op("concat1", {{2, 3}, {2, 5}}, [](auto&, const auto& v) { return concat<double>({v[0], v[1]}, 1); });
  check_op("slice", {{5, 4}}, [](auto&, const auto& v) { return slice(v[0], 0, 1, 4); });
  check_op("slice1", {{5, 4}}, [](auto&, const auto& v) { return slice(v[0], 1, 2, 4); });
  check_op("reshape", {{2, 6}}, [](auto&, const auto& v) { return reshape(v[0], Shape{3, 4}); });
  check_op("reduce_mean", {{3, 4}}, [](auto&, const auto& v) { return reduce_mean(v[0]); });
  check_op("reduce_sum", {{3, 4}}, [](auto&, const auto& v) { return reduce_sum(v[0]); });
}

TEST(Adam, MatchesHandComputedFirstStep) {
  // After one step with gradient g, m̂ = g and v̂ = g², so the update is
  // lr·g/(|g| + ε).
  Parameter<double> p("p", Tensor<double>::from({1.0, -2.0}));
  p.grad = Tensor<double>::from({0.5, -4.0});
  AdamOptions o;
  o.lr = 0.1;
  Adam<double> opt({&p}, o);
  opt.step();
  EXPECT_NEAR(p.value[0], 1.0 - 0.1 * 0.5 / (0.5 + o.eps), 1e-15);
  EXPECT_NEAR(p.value[1], -2.0 + 0.1 * 4.0 / (4.0 + o.eps), 1e-15);
}

TEST(Adam, MissingGradientIsAnError) {
  Parameter<double> p("p", Tensor<double>::from({1.0}));
  Adam<double> opt({&p});
  EXPECT_THROW(opt.step(), std::exception);
}
