#include "oracles.hpp"

#include <advrsa/gradcheck.hpp>
#include <advrsa/network.hpp>
#include <advrsa/ops.hpp>
#include <advrsa/random.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace advrsa;

namespace {

Tensor random_tensor(Shape s, Engine& eng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values()) v = u(eng);
  return t;
}

double max_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Tensor, RejectsLengthMismatchAndZeroExtent) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
}

TEST(Conv2d, OnesWithScalarKernel) {
  Tensor in({1, 3, 3}, 1.0);
  Tensor k({1, 1, 1, 1}, 2.0);
  Tensor out = conv2d(in, k, Tensor({1}), 1, 0);
  EXPECT_EQ(out.shape(), (Shape{1, 3, 3}));
  for (double v : out.values()) EXPECT_EQ(v, 2.0);
}

TEST(Conv2d, SumOfEntries) {
  Tensor in({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor out = conv2d(in, Tensor({1, 1, 2, 2}, 1.0), Tensor({1}), 1, 0);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], 10.0);
}

TEST(Conv2d, ChannelMismatchIsAShapeError) {
  EXPECT_THROW(conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 3, 3}), Tensor({1}), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 2, 2}), Tensor({1, 1, 3, 3}), Tensor({1}), 1, 0), ShapeError);
}

TEST(Conv2d, MatchesLoopOracleOnRandomShapes) {
  Engine eng = make_engine(101);
  for (int trial = 0; trial < 120; ++trial) {
    std::uniform_int_distribution<std::size_t> d(1, 4), hw(3, 9), kk(1, 3), st(1, 2), pd(0, 2);
    const std::size_t ci = d(eng), co = d(eng), h = hw(eng), w = hw(eng), k = kk(eng), s = st(eng), p = pd(eng);
    Tensor in = random_tensor({ci, h, w}, eng), ker = random_tensor({co, ci, k, k}, eng), b = random_tensor({co}, eng);
    EXPECT_LE(max_diff(conv2d(in, ker, b, s, p), oracle::conv2d(in, ker, b, s, p)), 1e-12) << "trial " << trial;
  }
}

TEST(Conv2d, Random3x8x8AgainstQuadrupleLoop) {
  Engine eng = make_engine(7);
  Tensor in = random_tensor({3, 8, 8}, eng), k = random_tensor({4, 3, 3, 3}, eng), b = random_tensor({4}, eng);
  EXPECT_LE(max_diff(conv2d(in, k, b, 1, 1), oracle::conv2d(in, k, b, 1, 1)), 1e-12);
}

TEST(MaxPool, ConstantInputPicksFirstCell) {
  PoolResult r = maxpool2d(Tensor({1, 4, 4}, 3.0), 2, 2);
  for (double v : r.output.values()) EXPECT_EQ(v, 3.0);
  EXPECT_EQ(r.argmax, (std::vector<std::size_t>{0, 2, 8, 10}));
}

TEST(MaxPool, Quadrants) {
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i + 1);
  PoolResult r = maxpool2d(Tensor({1, 4, 4}, v), 2, 2);
  EXPECT_EQ(r.output.storage(), (std::vector<double>{6, 8, 14, 16}));
}

TEST(MaxPool, WindowTooLarge) { EXPECT_THROW(maxpool2d(Tensor({1, 2, 2}), 3, 1), ShapeError); }

TEST(MaxPool, MatchesLoopOracleExactly) {
  Engine eng = make_engine(202);
  for (int trial = 0; trial < 120; ++trial) {
    std::uniform_int_distribution<std::size_t> c(1, 4), hw(2, 9), win(1, 3), st(1, 3);
    const std::size_t h = hw(eng), w = hw(eng), k = std::min({win(eng), h, w});
    Tensor in = random_tensor({c(eng), h, w}, eng);
    // quantized values force ties
    if (trial % 3 == 0) {
      for (double& x : in.values()) x = std::round(x * 2.0);
    }
    const std::size_t s = st(eng);
    std::vector<std::size_t> arg;
    Tensor ref = oracle::maxpool(in, k, s, &arg);
    PoolResult r = maxpool2d(in, k, s);
    EXPECT_EQ(r.output, ref);
    EXPECT_EQ(r.argmax, arg);
  }
}

TEST(Lrn, AlphaZeroDividesByKPowBeta) {
  Engine eng = make_engine(3);
  Tensor in = random_tensor({5, 3, 3}, eng);
  Tensor out = lrn(in, {2.0, 0.0, 0.75, 5});
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_DOUBLE_EQ(out[i], in[i] / std::pow(2.0, 0.75));
}

TEST(Lrn, SingleChannelClosedForm) {
  for (double v : {-2.0, -0.5, 0.0, 0.3, 1.0, 4.0}) {
    Tensor out = lrn(Tensor({1, 1, 1}, v), {1.0, 1.0, 1.0, 1});
    EXPECT_NEAR(out[0], v / (1.0 + v * v), 1e-15);
  }
}

TEST(Lrn, RejectsEvenWindow) { EXPECT_THROW(lrn(Tensor({2, 2, 2}), {2.0, 1e-4, 0.75, 4}), std::invalid_argument); }

TEST(Lrn, MatchesLoopOracle) {
  Engine eng = make_engine(303);
  for (int trial = 0; trial < 120; ++trial) {
    std::uniform_int_distribution<std::size_t> c(1, 10), hw(1, 6), nn(0, 3);
    const LrnParams p{1.0 + uniform01(eng), 1e-4 + uniform01(eng), 0.5 + uniform01(eng) * 0.5, 2 * nn(eng) + 1};
    Tensor in = random_tensor({c(eng), hw(eng), hw(eng)}, eng, -3.0, 3.0);
    EXPECT_LE(max_diff(lrn(in, p), oracle::lrn(in, p.k, p.alpha, p.beta, p.n)), 1e-12);
  }
  Tensor in = random_tensor({8, 5, 5}, eng, 0.0, 10.0);
  EXPECT_LE(max_diff(lrn(in, {2.0, 1e-4, 0.75, 5}), oracle::lrn(in, 2.0, 1e-4, 0.75, 5)), 1e-12);
}

TEST(Affine, IdentityAndBiasOnly) {
  Tensor x({3}, std::vector<double>{1.5, -2.0, 0.25});
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  EXPECT_EQ(affine(x, eye, Tensor({3})).storage(), x.storage());
  Tensor b({3}, std::vector<double>{4, 5, 6});
  EXPECT_EQ(affine(x, Tensor({3, 3}), b).storage(), b.storage());
  EXPECT_THROW(affine(Tensor({4}), eye, b), ShapeError);
}

TEST(Affine, MatchesLoopOracle) {
  Engine eng = make_engine(404);
  for (int trial = 0; trial < 120; ++trial) {
    std::uniform_int_distribution<std::size_t> d(1, 12);
    const std::size_t m = trial == 0 ? 5 : d(eng), n = trial == 0 ? 7 : d(eng);
    Tensor x = random_tensor({n}, eng), w = random_tensor({m, n}, eng), b = random_tensor({m}, eng);
    const auto ref = oracle::matvec(w, x.storage(), b);
    const Tensor y = affine(x, w, b);
    for (std::size_t i = 0; i < m; ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(SoftmaxXent, EqualLogits) {
  SoftmaxXent r = softmax_xent(Tensor({4}, 0.7), 2);
  for (double p : r.probs.values()) EXPECT_DOUBLE_EQ(p, 0.25);
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-15);
}

TEST(SoftmaxXent, LargeLogitsStayFinite) {
  SoftmaxXent r = softmax_xent(Tensor({2}, std::vector<double>{1000.0, 0.0}), 1);
  EXPECT_DOUBLE_EQ(r.probs[0], 1.0);
  EXPECT_EQ(r.probs[1], std::exp(-1000.0));
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_NEAR(r.loss, 1000.0, 1e-9);
}

TEST(SoftmaxXent, LabelOutOfRange) { EXPECT_THROW(softmax_xent(Tensor({3}), 3), std::out_of_range); }

TEST(SoftmaxXent, GradientIsPMinusOneHotAndMatchesFiniteDifferences) {
  Engine eng = make_engine(505);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<std::size_t> d(2, 9);
    const std::size_t c = d(eng);
    Tensor z = random_tensor({c}, eng, -5.0, 5.0);
    const std::size_t label = static_cast<std::size_t>(uniform01(eng) * static_cast<double>(c));
    SoftmaxXent r = softmax_xent(z, label);
    double sum = 0.0;
    for (double p : r.probs.values()) {
      EXPECT_GE(p, 0.0);
      sum += p;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    for (std::size_t i = 0; i < c; ++i) {
      EXPECT_DOUBLE_EQ(r.grad_logits[i], r.probs[i] - (i == label ? 1.0 : 0.0));
      Tensor hi = z, lo = z;
      hi[i] += 1e-5;
      lo[i] -= 1e-5;
      const double fd = (softmax_xent(hi, label).loss - softmax_xent(lo, label).loss) / 2e-5;
      EXPECT_NEAR(r.grad_logits[i], fd, 1e-8);
    }
  }
}

namespace {

NetworkConfig linear_config() {
  NetworkConfig c;
  c.input_shape = {2, 4, 4};
  c.classes = 3;
  c.layers = {LayerSpec::conv(3, 3, 1, 1), LayerSpec::affine(5), LayerSpec::affine(3), LayerSpec::softmax()};
  return c;
}

}  // namespace

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  Network net = Network::initialized(NetworkConfig::toy(), 1);
  Engine eng = make_engine(9);
  const ForwardRecord rec = forward(net, random_tensor({3, 32, 32}, eng, 0.0, 1.0));
  const Gradients g = backward(net, rec, Tensor({8}));
  EXPECT_EQ(max_abs(g.input.values()), 0.0);
  for (const Tensor& t : g.params) EXPECT_EQ(max_abs(t.values()), 0.0);
}

TEST(Backward, SingleAffineInputGradientIsWTransposeTimesUpstream) {
  NetworkConfig c;
  c.input_shape = {1, 2, 3};
  c.classes = 4;
  c.layers = {LayerSpec::affine(4), LayerSpec::softmax()};
  Network net = Network::initialized(c, 3);
  Engine eng = make_engine(4);
  const ForwardRecord rec = forward(net, random_tensor({1, 2, 3}, eng));
  const Tensor up = random_tensor({4}, eng);
  const Gradients g = backward_logits(net, rec, up);
  const Tensor& w = net.weights(0);
  for (std::size_t j = 0; j < 6; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) s += w[i * 6 + j] * up[i];
    EXPECT_NEAR(g.input[j], s, 1e-15);
  }
}

TEST(Backward, WithoutForwardRecordIsRejected) {
  Network net = Network::initialized(NetworkConfig::toy(), 1);
  EXPECT_THROW(backward(net, ForwardRecord{}, Tensor({8})), std::logic_error);
}

TEST(GradCheck, PureLinearNetworkIsTight) {
  Network net = Network::initialized(linear_config(), 5);
  Engine eng = make_engine(6);
  GradCheckOptions o;
  o.coordinates = 200;
  const GradCheckReport r = finite_diff_check(net, random_tensor({2, 4, 4}, eng), 1, o);
  EXPECT_GE(r.samples.size(), 200u);
  EXPECT_EQ(r.excluded_kinks, 0u);
  EXPECT_LT(r.max_relative_error, 1e-8);
}

TEST(GradCheck, FullToyNetworkBelow1e4) {
  Network net = Network::initialized(NetworkConfig::toy(), 11);
  Engine eng = make_engine(12);
  GradCheckOptions o;
  o.coordinates = 240;
  o.seed = 13;
  const GradCheckReport r = finite_diff_check(net, random_tensor({3, 32, 32}, eng, 0.0, 1.0), 4, o);
  EXPECT_GE(r.samples.size(), 200u);
  EXPECT_LT(r.max_relative_error, 1e-4);
  bool saw_input = false, saw_param = false;
  for (const auto& s : r.samples) (s.tensor < 0 ? saw_input : saw_param) = true;
  EXPECT_TRUE(saw_input);
  EXPECT_TRUE(saw_param);
}

TEST(Determinism, ForwardIsBitwiseRepeatable) {
  Network net = Network::initialized(NetworkConfig::toy(), 2);
  Engine eng = make_engine(21);
  const Tensor x = random_tensor({3, 32, 32}, eng, 0.0, 1.0);
  EXPECT_EQ(forward(net, x).values, forward(net, x).values);
}
