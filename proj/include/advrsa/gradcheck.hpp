#pragma once

#include <advrsa/network.hpp>
#include <advrsa/random.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

namespace advrsa {

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t coordinates = 240;
  std::uint64_t seed = 0;
  /// Denominator floor for the relative error; the loss is O(1), so round-off
  /// in the central difference is ~1e-11 in absolute terms.
  double scale_floor = 1e-6;
  std::size_t max_attempts = 20000;
  /// A coordinate is skipped when some ReLU input or max-pool margin is
  /// within kink_factor times its own perturbation-induced change.
  double kink_factor = 10.0;
};

struct GradCheckSample {
  long tensor = -1;  // -1 for the input image, otherwise parameter slot
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckSample> samples;
  std::size_t excluded_kinks = 0;
  double max_relative_error = 0.0;
  double max_input_relative_error = 0.0;
  double max_parameter_relative_error = 0.0;

  bool passed(double tolerance) const { return !samples.empty() && max_relative_error < tolerance; }
};

namespace detail {

// True when a ReLU or max-pool decision may differ somewhere on [x-h, x+h]:
// a sign flip among the three passes, or a unit whose distance to its kink is
// less than `factor` times how far the perturbation moved it.
inline bool crosses_kink(const Network& net, const ForwardRecord& lo, const ForwardRecord& mid,
                         const ForwardRecord& hi, double factor) {
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const LayerKind kind = net.config().layers[i].kind;
    const Tensor& a = lo.values[i];
    const Tensor& b = mid.values[i];
    const Tensor& c = hi.values[i];
    if (kind == LayerKind::relu) {
      for (std::size_t j = 0; j < b.size(); ++j) {
        if (a[j] == c[j] && a[j] == b[j]) continue;
        const bool sa = a[j] > 0, sb = b[j] > 0, sc = c[j] > 0;
        if (sa != sb || sb != sc) return true;
        const double moved = std::max(std::abs(a[j] - b[j]), std::abs(c[j] - b[j]));
        if (std::abs(b[j]) < factor * moved) return true;
      }
    } else if (kind == LayerKind::maxpool) {
      if (lo.argmax[i] != mid.argmax[i] || mid.argmax[i] != hi.argmax[i]) return true;
      const LayerSpec& l = net.config().layers[i];
      const std::size_t ch = b.dim(0), h = b.dim(1), w = b.dim(2);
      const std::size_t ho = (h - l.kernel) / l.stride + 1, wo = (w - l.kernel) / l.stride + 1;
      for (std::size_t cc = 0; cc < ch; ++cc) {
        for (std::size_t y = 0; y < ho; ++y) {
          for (std::size_t x = 0; x < wo; ++x) {
            const std::size_t win = mid.argmax[i][(cc * ho + y) * wo + x];
            double moved = 0.0;
            double second = -std::numeric_limits<double>::infinity();
            for (std::size_t dy = 0; dy < l.kernel; ++dy) {
              for (std::size_t dx = 0; dx < l.kernel; ++dx) {
                const std::size_t idx = (cc * h + y * l.stride + dy) * w + x * l.stride + dx;
                moved = std::max({moved, std::abs(a[idx] - b[idx]), std::abs(c[idx] - b[idx])});
                if (idx != win) second = std::max(second, b[idx]);
              }
            }
            if (moved > 0.0 && b[win] - second < 2.0 * factor * moved) return true;
          }
        }
      }
    }
  }
  return false;
}

inline double xent(const ForwardRecord& rec, std::size_t label) {
  return softmax_xent(rec.logits(), label).loss;
}

}  // namespace detail

/// Compares analytic cross-entropy gradients with central differences on
/// randomly sampled coordinates, stratified over the input image and every
/// parameter tensor. Coordinates whose perturbation comes within kink_factor
/// times its own reach of a ReLU or max-pool boundary are skipped and counted.
inline GradCheckReport finite_diff_check(Network net, const Tensor& image, std::size_t label,
                                         const GradCheckOptions& opt = {}) {
  const LossGradient base = loss_and_gradient(net, image, label);
  const std::size_t groups = net.parameters().size() + 1;
  Engine eng = make_engine(opt.seed, {0x9c4});
  Tensor x = image;
  GradCheckReport report;
  const ForwardRecord mid = forward(net, image);
  for (std::size_t attempt = 0; report.samples.size() < opt.coordinates && attempt < opt.max_attempts; ++attempt) {
    const std::size_t group = attempt % groups;
    const long slot = group == 0 ? -1 : static_cast<long>(group - 1);
    Tensor& target = slot < 0 ? x : net.parameters()[static_cast<std::size_t>(slot)];
    const std::size_t idx = static_cast<std::size_t>(uniform01(eng) * static_cast<double>(target.size()));
    const double saved = target[idx];
    target[idx] = saved + opt.step;
    const ForwardRecord hi = forward(net, x);
    target[idx] = saved - opt.step;
    const ForwardRecord lo = forward(net, x);
    target[idx] = saved;
    if (detail::crosses_kink(net, lo, mid, hi, opt.kink_factor)) {
      ++report.excluded_kinks;
      continue;
    }
    GradCheckSample s;
    s.tensor = slot;
    s.index = idx;
    s.numeric = (detail::xent(hi, label) - detail::xent(lo, label)) / (2.0 * opt.step);
    s.analytic = slot < 0 ? base.grads.input[idx] : base.grads.params[static_cast<std::size_t>(slot)][idx];
    s.relative_error = std::abs(s.analytic - s.numeric) /
                       std::max({std::abs(s.analytic), std::abs(s.numeric), opt.scale_floor});
    report.max_relative_error = std::max(report.max_relative_error, s.relative_error);
    double& group_max = slot < 0 ? report.max_input_relative_error : report.max_parameter_relative_error;
    group_max = std::max(group_max, s.relative_error);
    report.samples.push_back(s);
  }
  return report;
}

}  // namespace advrsa
