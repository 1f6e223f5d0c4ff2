#pragma once

// Pixel-space gradient ascent against a frozen classifier.
//
// AN images start at the dataset mean plus a little seeded Gaussian noise and maximize
//   log P_c(I) - lambda * ||I - I_mean||^2,
// AI images start at an RE image and maximize the same objective for another
// class, anchored at the source. Each step is a projected (clamped) gradient
// step with backtracking so the objective never decreases.

#include <advrsa/dataset.hpp>
#include <advrsa/io.hpp>
#include <advrsa/network.hpp>
#include <advrsa/parallel.hpp>
#include <advrsa/random.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace advrsa {

enum class SynthesisKind { an, ai };

/// Ascent direction: the raw gradient scaled so its largest entry is 1, or
/// its elementwise sign (steepest ascent under the max norm).
enum class AscentDirection { gradient, sign };

inline const char* to_string(AscentDirection d) { return d == AscentDirection::gradient ? "gradient" : "sign"; }

inline AscentDirection ascent_direction_from_string(const std::string& s) {
  if (s == "gradient") return AscentDirection::gradient;
  if (s == "sign") return AscentDirection::sign;
  throw std::invalid_argument("unknown ascent direction '" + s + "'");
}

inline const char* to_string(SynthesisKind k) { return k == SynthesisKind::an ? "AN" : "AI"; }

struct SynthesisConfig {
  double lambda = 0.05;
  double step = 0.05;  // largest per-pixel change of one ascent step
  std::size_t max_iterations = 5000;
  double threshold = 0.99;
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;
  std::size_t max_halvings = 20;
  double linf_budget = 0.1;  // reported, never enforced by projection
  double init_noise = 0.0;   // sd of the Gaussian jitter added to the start image
  AscentDirection direction = AscentDirection::sign;
  double momentum = 0.9;  // weight of the previous direction in the accumulated one
  std::uint64_t seed = 0;

  static SynthesisConfig an_defaults() {
    SynthesisConfig c;
    c.init_noise = 0.1;
    return c;
  }
  static SynthesisConfig ai_defaults() {
    SynthesisConfig c;
    c.lambda = 0.01;
    c.step = 0.005;
    return c;
  }

  void validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("synthesis: lambda must be >= 0");
    if (!(threshold > 0.5 && threshold < 1.0)) throw std::invalid_argument("synthesis: threshold must lie in (0.5, 1)");
    if (!(step >= 0.0)) throw std::invalid_argument("synthesis: step size must be >= 0");
    if (!(clamp_lo < clamp_hi)) throw std::invalid_argument("synthesis: empty clamp range");
    if (!(init_noise >= 0.0)) throw std::invalid_argument("synthesis: init noise must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("synthesis: momentum must lie in [0, 1)");
  }

  std::string describe() const {
    return "lambda=" + format_double(lambda) + ";step=" + format_double(step) +
           ";max_iterations=" + std::to_string(max_iterations) + ";threshold=" + format_double(threshold) +
           ";clamp=" + format_double(clamp_lo) + ":" + format_double(clamp_hi) +
           ";max_halvings=" + std::to_string(max_halvings) + ";linf_budget=" + format_double(linf_budget) +
           ";init_noise=" + format_double(init_noise) + ";direction=" + to_string(direction) +
           ";momentum=" + format_double(momentum) + ";seed=" + std::to_string(seed);
  }
  std::string hash() const { return hex64(fnv1a(describe())); }
};

struct SynthesisResult {
  SynthesisKind kind = SynthesisKind::an;
  Tensor image;
  std::size_t target = 0;
  double confidence = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  std::string stop_reason;
  std::vector<double> objective_trace;  // objective after each accepted step, starting at the initial image
  double l2 = 0.0;                      // ||image - anchor||_2
  double linf = 0.0;                    // ||image - anchor||_inf
  Tensor perturbation;                  // anchor + perturbation reproduces image bitwise
  double lambda = 0.0;
  std::string config_hash;

  bool within_budget(double budget) const { return linf <= budget; }
};

namespace detail {

struct ObjectiveValue {
  double objective = 0.0;
  double prob = 0.0;
  ForwardRecord record;
};

inline ObjectiveValue ascent_objective(const Network& net, const Tensor& x, const Tensor& anchor, std::size_t target,
                                       double lambda) {
  ObjectiveValue v;
  v.record = forward(net, x);
  const Tensor& z = v.record.logits();
  const auto zs = z.values();
  const double mx = *std::max_element(zs.begin(), zs.end());
  double s = 0.0;
  for (double zi : zs) s += std::exp(zi - mx);
  const double log_p = zs[target] - mx - std::log(s);
  double pen = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - anchor[i];
    pen += d * d;
  }
  v.objective = log_p - lambda * pen;
  v.prob = v.record.output()[target];
  return v;
}

inline void perturbation_norms(const Tensor& image, const Tensor& anchor, double& l2, double& linf) {
  double s = 0.0, m = 0.0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double d = image[i] - anchor[i];
    s += d * d;
    m = std::max(m, std::abs(d));
  }
  l2 = std::sqrt(s);
  linf = m;
}

}  // namespace detail

/// Core ascent loop shared by AN and AI synthesis. The network is only read.
inline SynthesisResult ascend(const Network& net, const Tensor& start, const Tensor& anchor, std::size_t target,
                              const SynthesisConfig& cfg, SynthesisKind kind) {
  cfg.validate();
  if (target >= net.config().classes) throw std::out_of_range("synthesis: target class out of range");
  if (start.shape() != anchor.shape()) throw ShapeError("synthesis: start and anchor shapes differ");
  SynthesisResult res;
  res.kind = kind;
  res.target = target;
  res.lambda = cfg.lambda;
  res.config_hash = cfg.hash();
  Tensor x = start;
  for (double& v : x.values()) v = std::clamp(v, cfg.clamp_lo, cfg.clamp_hi);
  detail::ObjectiveValue cur = detail::ascent_objective(net, x, anchor, target, cfg.lambda);
  res.objective_trace.push_back(cur.objective);
  double last_step = cfg.step;
  const BackwardOptions input_only{.parameters = false, .input = true};
  res.stop_reason = "max_iterations";
  Tensor velocity;
  while (true) {
    if (cur.prob >= cfg.threshold) {
      res.converged = true;
      res.stop_reason = "threshold";
      break;
    }
    if (res.iterations >= cfg.max_iterations) break;
    Tensor grad_logits({net.config().classes});
    for (std::size_t c = 0; c < grad_logits.size(); ++c) grad_logits[c] = -cur.record.output()[c];
    grad_logits[target] += 1.0;
    Tensor g = backward_logits(net, cur.record, grad_logits, input_only).input;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= 2.0 * cfg.lambda * (x[i] - anchor[i]);

    double gsum = 0.0;
    for (double v : g.values()) gsum += std::abs(v);
    if (gsum == 0.0) {
      res.stop_reason = "zero_gradient";
      break;
    }
    // Accumulated direction; gradients are L1-normalized so old and new terms are comparable.
    if (velocity.size() != g.size()) velocity = Tensor(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) velocity[i] = cfg.momentum * velocity[i] + g[i] / gsum;
    bool accepted = false;
    double step = 0.0;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      if (attempt == 1) {
        if (cfg.momentum == 0.0) break;
        // the accumulated direction failed; restart from the plain gradient
        for (std::size_t i = 0; i < g.size(); ++i) velocity[i] = g[i] / gsum;
      }
      double vmax = 0.0;
      for (double v : velocity.values()) vmax = std::max(vmax, std::abs(v));
      // Steps are measured in pixel units: `step` is the largest per-pixel change.
      step = std::min(cfg.step, 2.0 * last_step);
      for (std::size_t halving = 0; halving <= cfg.max_halvings; ++halving, step *= 0.5) {
        Tensor cand = x;
        const double scale = step / vmax;
        for (std::size_t i = 0; i < cand.size(); ++i) {
          const double v = velocity[i];
          const double d = cfg.direction == AscentDirection::sign ? step * ((v > 0.0) - (v < 0.0)) : scale * v;
          cand[i] = std::clamp(x[i] + d, cfg.clamp_lo, cfg.clamp_hi);
        }
        detail::ObjectiveValue next = detail::ascent_objective(net, cand, anchor, target, cfg.lambda);
        if (next.objective >= cur.objective) {
          x = std::move(cand);
          cur = std::move(next);
          accepted = true;
          break;
        }
      }
    }
    if (!accepted) {
      res.stop_reason = "line_search_failed";
      break;
    }
    last_step = step;
    ++res.iterations;
    res.objective_trace.push_back(cur.objective);
  }
  // Re-express the image as anchor + stored perturbation so the two agree exactly.
  res.perturbation = Tensor(x.shape());
  res.image = anchor;
  bool moved = false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    res.perturbation[i] = x[i] - anchor[i];
    res.image[i] += res.perturbation[i];
    moved = moved || res.image[i] != x[i];
  }
  res.confidence = moved ? predict(net, res.image)[target] : cur.prob;
  res.converged = res.converged && res.confidence >= cfg.threshold;
  detail::perturbation_norms(res.image, anchor, res.l2, res.linf);
  return res;
}

/// Start image: `anchor` plus N(0, init_noise) drawn from stream (seed, kind, stream).
inline Tensor jittered_start(const Tensor& anchor, const SynthesisConfig& cfg, SynthesisKind kind, std::uint64_t stream) {
  Tensor x = anchor;
  if (cfg.init_noise > 0.0) {
    Engine eng = make_engine(cfg.seed, {0xa7, static_cast<std::uint64_t>(kind), stream});
    std::normal_distribution<double> n(0.0, cfg.init_noise);
    for (double& v : x.values()) v += n(eng);
  }
  return x;
}

inline SynthesisResult synth_an(const Network& net, std::size_t target, const Tensor& mean_img,
                                const SynthesisConfig& cfg = SynthesisConfig::an_defaults(), std::uint64_t stream = 0) {
  return ascend(net, jittered_start(mean_img, cfg, SynthesisKind::an, stream), mean_img, target, cfg,
                SynthesisKind::an);
}

inline SynthesisResult synth_ai(const Network& net, const Tensor& source, std::size_t target,
                                const SynthesisConfig& cfg = SynthesisConfig::ai_defaults(), std::uint64_t stream = 0) {
  return ascend(net, jittered_start(source, cfg, SynthesisKind::ai, stream), source, target, cfg, SynthesisKind::ai);
}

/// Target class != true class for every stimulus, spread as evenly as the
/// exclusions allow. Deterministic per seed.
inline std::vector<std::size_t> choose_ai_targets(const std::vector<std::size_t>& true_classes, std::size_t classes,
                                                  std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("choose_ai_targets: need at least two classes");
  const std::size_t k = true_classes.size();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  Engine eng = make_engine(seed, {0xa1});
  std::shuffle(order.begin(), order.end(), eng);
  std::vector<std::size_t> class_rank(classes);
  std::iota(class_rank.begin(), class_rank.end(), 0);
  std::shuffle(class_rank.begin(), class_rank.end(), eng);
  std::vector<std::size_t> count(classes, 0), target(k, 0);
  for (std::size_t idx : order) {
    const std::size_t y = true_classes[idx];
    if (y >= classes) throw std::out_of_range("choose_ai_targets: class out of range");
    std::size_t best = classes;
    for (std::size_t r = 0; r < classes; ++r) {
      const std::size_t c = class_rank[r];
      if (c == y) continue;
      if (best == classes || count[c] < count[best]) best = c;
    }
    target[idx] = best;
    ++count[best];
  }
  // Move single assignments from the fullest class to the emptiest while legal.
  for (bool changed = true; changed;) {
    changed = false;
    const auto [mn, mx] = std::minmax_element(count.begin(), count.end());
    if (*mx - *mn <= 1) break;
    const std::size_t lo = static_cast<std::size_t>(mn - count.begin());
    const std::size_t hi = static_cast<std::size_t>(mx - count.begin());
    for (std::size_t idx : order) {
      if (target[idx] == hi && true_classes[idx] != lo) {
        target[idx] = lo;
        --count[hi];
        ++count[lo];
        changed = true;
        break;
      }
    }
  }
  return target;
}

struct Stimulus {
  std::string id;
  LabeledImage re;
  std::size_t ai_target = 0;
  std::optional<SynthesisResult> an;
  std::optional<SynthesisResult> ai;
};

using StimulusSet = std::vector<Stimulus>;

inline StimulusSet make_stimulus_set(const std::vector<LabeledImage>& re, std::size_t classes, std::uint64_t seed) {
  std::vector<std::size_t> labels;
  for (const LabeledImage& li : re) labels.push_back(li.label);
  const auto targets = choose_ai_targets(labels, classes, seed);
  StimulusSet set;
  for (std::size_t i = 0; i < re.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "s%03zu", i);
    set.push_back({id, re[i], targets[i], std::nullopt, std::nullopt});
  }
  return set;
}

/// Fills the AN and AI slots of every stimulus; stimuli are independent.
inline void synthesize_stimuli(const Network& net, StimulusSet& set, const Tensor& mean_img,
                               const SynthesisConfig& an_cfg, const SynthesisConfig& ai_cfg) {
  parallel_for(2 * set.size(), [&](std::size_t job) {
    Stimulus& s = set[job / 2];
    if (job % 2 == 0) {
      s.an = synth_an(net, s.re.label, mean_img, an_cfg, job / 2);
    } else {
      s.ai = synth_ai(net, s.re.image, s.ai_target, ai_cfg, job / 2);
    }
  });
}

struct VerificationEntry {
  std::string id;
  std::string kind;  // RE, AN or AI
  std::size_t expected_class = 0;
  std::size_t predicted_class = 0;
  double confidence = 0.0;  // probability of the expected class
  bool ok = false;
};

struct VerificationReport {
  std::vector<VerificationEntry> entries;
  std::size_t violations = 0;
};

/// Re-predicts every stored image and checks RE/AN -> true class and AI ->
/// target class at or above `threshold` (RE images use `re_threshold` when
/// given, since they were selected under their own cut-off).
inline VerificationReport verify_stimulus_set(const Network& net, const StimulusSet& set, double threshold = 0.99,
                                              std::optional<double> re_threshold = std::nullopt) {
  struct Job {
    std::size_t stimulus;
    const char* kind;
    const Tensor* image;
    std::size_t expected;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Stimulus& s = set[i];
    jobs.push_back({i, "RE", &s.re.image, s.re.label});
    if (s.an) jobs.push_back({i, "AN", &s.an->image, s.re.label});
    if (s.ai) jobs.push_back({i, "AI", &s.ai->image, s.ai_target});
  }
  VerificationReport rep;
  rep.entries.resize(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    const Tensor p = predict(net, *jobs[j].image);
    VerificationEntry& e = rep.entries[j];
    e.id = set[jobs[j].stimulus].id;
    e.kind = jobs[j].kind;
    e.expected_class = jobs[j].expected;
    e.predicted_class = argmax(p);
    e.confidence = p[jobs[j].expected];
    const double cut = e.kind == "RE" ? re_threshold.value_or(threshold) : threshold;
    e.ok = e.predicted_class == e.expected_class && e.confidence >= cut;
  });
  for (const auto& e : rep.entries) rep.violations += e.ok ? 0 : 1;
  return rep;
}

}  // namespace advrsa
