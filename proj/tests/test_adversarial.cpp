#include "fixtures.hpp"

#include <advrsa/adversarial.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <map>

using namespace advrsa;

namespace {

const Tensor& mean_img() {
  static const Tensor m = mean_image(fixture::small_dataset().train);
  return m;
}

const std::vector<LabeledImage>& re_images() {
  static const auto re = select_re_stimuli(fixture::small_network(), fixture::small_dataset().val, 8, 0.99, 1);
  return re;
}

double distance_sq(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

void expect_monotone(const SynthesisResult& r) {
  for (std::size_t i = 1; i < r.objective_trace.size(); ++i) {
    EXPECT_GE(r.objective_trace[i], r.objective_trace[i - 1]) << "step " << i;
  }
}

}  // namespace

TEST(SynthesisConfig, Validation) {
  SynthesisConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lambda = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.threshold = 0.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.threshold = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_NE(SynthesisConfig::an_defaults().hash(), SynthesisConfig::ai_defaults().hash());
}

TEST(SynthAn, ConvergesAboveThresholdAndReverifies) {
  const Network& net = fixture::small_network();
  for (std::size_t c = 0; c < 4; ++c) {
    const SynthesisResult r = synth_an(net, c, mean_img(), SynthesisConfig::an_defaults(), c);
    ASSERT_TRUE(r.converged) << "class " << c << " " << r.stop_reason;
    EXPECT_GE(r.confidence, 0.99);
    EXPECT_EQ(r.confidence, predict(net, r.image)[c]);
    EXPECT_EQ(r.stop_reason, "threshold");
    expect_monotone(r);
    for (double v : r.image.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(SynthAn, HugeLambdaStaysAtTheMean) {
  SynthesisConfig c = SynthesisConfig::an_defaults();
  c.lambda = 1e6;
  c.step = 1e-4;
  c.init_noise = 0.0;
  c.max_iterations = 100;
  const SynthesisResult r = synth_an(fixture::small_network(), 1, mean_img(), c);
  EXPECT_FALSE(r.converged);
  EXPECT_LT(r.linf, 1e-3);
  expect_monotone(r);
}

TEST(SynthAn, ZeroStepReturnsTheMean) {
  SynthesisConfig c = SynthesisConfig::an_defaults();
  c.step = 0.0;
  c.init_noise = 0.0;
  c.max_iterations = 25;
  const SynthesisResult r = synth_an(fixture::small_network(), 2, mean_img(), c);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.image, mean_img());
  EXPECT_EQ(r.linf, 0.0);
}

TEST(SynthAn, GradientDirectionIsAlsoMonotone) {
  SynthesisConfig c = SynthesisConfig::an_defaults();
  c.direction = AscentDirection::gradient;
  c.max_iterations = 60;
  const SynthesisResult r = synth_an(fixture::small_network(), 3, mean_img(), c, 9);
  expect_monotone(r);
  EXPECT_GT(r.objective_trace.back(), r.objective_trace.front());
}

TEST(SynthAn, LeavesNetworkUntouchedAndIsDeterministic) {
  const Network& net = fixture::small_network();
  const auto before = net.parameters();
  const SynthesisResult a = synth_an(net, 0, mean_img(), SynthesisConfig::an_defaults(), 4);
  const SynthesisResult b = synth_an(net, 0, mean_img(), SynthesisConfig::an_defaults(), 4);
  EXPECT_EQ(net.parameters(), before);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.objective_trace, b.objective_trace);
  const SynthesisResult other = synth_an(net, 0, mean_img(), SynthesisConfig::an_defaults(), 5);
  EXPECT_NE(other.image, a.image);
}

TEST(SynthAi, TrueClassTargetTakesZeroIterations) {
  const LabeledImage& src = re_images()[0];
  const SynthesisResult r = synth_ai(fixture::small_network(), src.image, src.label);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.iterations, 0u);
  EXPECT_EQ(r.image, src.image);
  EXPECT_EQ(r.l2, 0.0);
}

TEST(SynthAi, ConvergesNearTheSourceWithConsistentNorms) {
  const Network& net = fixture::small_network();
  const auto& re = re_images();
  const std::vector<std::size_t> targets = choose_ai_targets({0, 0, 1, 1, 2, 2, 3, 3}, 4, 2);
  std::size_t converged = 0;
  for (std::size_t i = 0; i < re.size(); ++i) {
    const SynthesisResult r = synth_ai(net, re[i].image, targets[i], SynthesisConfig::ai_defaults(), i);
    expect_monotone(r);
    EXPECT_EQ(r.confidence, predict(net, r.image)[targets[i]]);
    double linf = 0.0;
    for (std::size_t k = 0; k < r.image.size(); ++k) linf = std::max(linf, std::abs(r.image[k] - re[i].image[k]));
    EXPECT_EQ(r.linf, linf);
    EXPECT_NEAR(r.l2, std::sqrt(distance_sq(r.image, re[i].image)), 1e-12);
    if (!r.converged) continue;
    ++converged;
    EXPECT_GE(r.confidence, 0.99);
    EXPECT_EQ(argmax(predict(net, r.image)), targets[i]);
    Tensor rebuilt = re[i].image;
    for (std::size_t k = 0; k < rebuilt.size(); ++k) rebuilt[k] += r.perturbation[k];
    EXPECT_EQ(rebuilt, r.image);
  }
  EXPECT_GE(converged, 7u);
}

TEST(SynthAi, PerturbationSmallerThanAnDistance) {
  const Network& net = fixture::small_network();
  StimulusSet set = make_stimulus_set(re_images(), 4, 3);
  synthesize_stimuli(net, set, mean_img(), SynthesisConfig::an_defaults(), SynthesisConfig::ai_defaults());
  for (const Stimulus& s : set) {
    ASSERT_TRUE(s.an && s.ai);
    EXPECT_LT(s.ai->l2, std::sqrt(distance_sq(s.an->image, s.re.image))) << s.id;
  }
  const VerificationReport rep = verify_stimulus_set(net, set);
  ASSERT_EQ(rep.entries.size(), 3 * set.size());
  std::size_t expected_violations = 0;
  for (const Stimulus& s : set) expected_violations += !s.an->converged + !s.ai->converged;
  EXPECT_EQ(rep.violations, expected_violations);
}

TEST(Verify, EmptySetGivesEmptyReport) {
  const VerificationReport rep = verify_stimulus_set(fixture::small_network(), {});
  EXPECT_TRUE(rep.entries.empty());
  EXPECT_EQ(rep.violations, 0u);
}

TEST(Verify, RecomputesAfterCorruption) {
  const Network& net = fixture::small_network();
  StimulusSet set = make_stimulus_set({re_images()[2]}, 4, 1);
  set[0].an = synth_an(net, set[0].re.label, mean_img(), SynthesisConfig::an_defaults(), 0);
  ASSERT_TRUE(set[0].an->converged);
  set[0].an->image[100] = 0.0;
  const VerificationReport rep = verify_stimulus_set(net, set);
  ASSERT_EQ(rep.entries.size(), 2u);
  EXPECT_EQ(rep.entries[1].kind, "AN");
  EXPECT_EQ(rep.entries[1].confidence, predict(net, set[0].an->image)[set[0].re.label]);
  EXPECT_EQ(rep.entries[1].ok, rep.entries[1].confidence >= 0.99 && rep.entries[1].predicted_class == set[0].re.label);
}

TEST(Verify, ReThresholdAppliesOnlyToRe) {
  const Network& net = fixture::small_network();
  StimulusSet set = make_stimulus_set({re_images()[0]}, 4, 1);
  const double p = predict(net, set[0].re.image)[set[0].re.label];
  EXPECT_EQ(verify_stimulus_set(net, set, 0.99, std::min(p, 0.9)).violations, 0u);
  EXPECT_EQ(verify_stimulus_set(net, set, 0.99, std::nextafter(p, 2.0)).violations, 1u);
}

TEST(ChooseAiTargets, NeverSelfAndBalanced) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < 8; ++c) {
      for (int k = 0; k < 7; ++k) labels.push_back(c);  // K = 56 divisible by C - 1
    }
    const auto t = choose_ai_targets(labels, 8, seed);
    std::vector<int> hist(8, 0);
    for (std::size_t i = 0; i < t.size(); ++i) {
      EXPECT_NE(t[i], labels[i]);
      ++hist[t[i]];
    }
    EXPECT_LE(*std::max_element(hist.begin(), hist.end()) - *std::min_element(hist.begin(), hist.end()), 1);
    EXPECT_EQ(t, choose_ai_targets(labels, 8, seed));
  }
  EXPECT_NE(choose_ai_targets({0, 1, 2, 3, 4, 5, 6, 7}, 8, 1), choose_ai_targets({0, 1, 2, 3, 4, 5, 6, 7}, 8, 2));
  EXPECT_THROW(choose_ai_targets({0}, 1, 0), std::invalid_argument);
  EXPECT_THROW(choose_ai_targets({5}, 3, 0), std::out_of_range);
}
