#pragma once

// Sparse forward encoding models: each vertex response is modelled as a
// sparse linear combination of one layer's (standardized) unit activations
// plus an intercept, fitted with regularized orthogonal matching pursuit.

#include <advrsa/parallel.hpp>
#include <advrsa/random.hpp>
#include <advrsa/rsa.hpp>
#include <advrsa/stats.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace advrsa {

/// Column scaling learned on training stimuli. `kept[j]` is the original
/// column of standardized feature j; dropped columns were constant.
struct FeatureScaling {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> dropped;
  std::vector<double> mean;
  std::vector<double> sd;
  std::size_t original_columns = 0;
  bool standardize = true;

  friend bool operator==(const FeatureScaling&, const FeatureScaling&) = default;
};

/// m x (n + 1) design; the last column is exactly 1.
struct DesignMatrix {
  Eigen::MatrixXd matrix;
  FeatureScaling scaling;

  std::size_t rows() const noexcept { return static_cast<std::size_t>(matrix.rows()); }
  std::size_t features() const noexcept { return static_cast<std::size_t>(matrix.cols()) - 1; }
  std::size_t cols() const noexcept { return static_cast<std::size_t>(matrix.cols()); }
  double at(std::size_t r, std::size_t c) const {
    return matrix(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }
};

inline FeatureScaling fit_scaling(const ActivationMatrix& a, bool standardize = true) {
  FeatureScaling s;
  s.original_columns = a.cols();
  s.standardize = standardize;
  const double m = static_cast<double>(a.rows());
  for (std::size_t c = 0; c < a.cols(); ++c) {
    double mu = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) mu += a.at(r, c);
    mu /= m;
    double ss = 0.0;
    bool constant = true;
    for (std::size_t r = 0; r < a.rows(); ++r) {
      ss += (a.at(r, c) - mu) * (a.at(r, c) - mu);
      constant = constant && a.at(r, c) == a.at(0, c);
    }
    if (constant || a.rows() < 2) {
      s.dropped.push_back(c);
      continue;
    }
    s.kept.push_back(c);
    s.mean.push_back(standardize ? mu : 0.0);
    s.sd.push_back(standardize ? std::sqrt(ss / m) : 1.0);  // population sd
  }
  return s;
}

inline DesignMatrix apply_scaling(const ActivationMatrix& a, const FeatureScaling& s) {
  if (a.cols() != s.original_columns) {
    throw std::invalid_argument("apply_scaling: matrix has " + std::to_string(a.cols()) + " columns, scaling expects " +
                                std::to_string(s.original_columns));
  }
  DesignMatrix d;
  d.scaling = s;
  const auto m = static_cast<Eigen::Index>(a.rows());
  const auto n = static_cast<Eigen::Index>(s.kept.size());
  d.matrix.resize(m, n + 1);
  for (Eigen::Index r = 0; r < m; ++r) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto jj = static_cast<std::size_t>(j);
      d.matrix(r, j) = (a.at(static_cast<std::size_t>(r), s.kept[jj]) - s.mean[jj]) / s.sd[jj];
    }
    d.matrix(r, n) = 1.0;
  }
  return d;
}

inline DesignMatrix build_design(const ActivationMatrix& a, bool standardize = true) {
  return apply_scaling(a, fit_scaling(a, standardize));
}

struct RompOptions {
  std::size_t s_max = 0;         // 0: half the number of rows
  std::size_t candidates = 0;    // |J| per iteration; 0: max(1, rows / 8)
  double prune = 1e-9;           // drop weights below prune * max|w| after the loop; 0 disables
  double tolerance = 1e-6;       // relative residual norm
  double stagnation = 1e-10;     // minimum relative residual decrease per iteration
  std::size_t max_iterations = 1000;
};

struct RompStep {
  std::size_t added = 0;
  std::size_t support = 0;
  double residual_norm = 0.0;
  bool rank_deficient = false;
};

enum class RompStop { tolerance, sparsity, stagnation, no_candidates, iterations };

inline const char* to_string(RompStop s) {
  switch (s) {
    case RompStop::tolerance: return "tolerance";
    case RompStop::sparsity: return "sparsity";
    case RompStop::stagnation: return "stagnation";
    case RompStop::no_candidates: return "no_candidates";
    case RompStop::iterations: return "iterations";
  }
  return "?";
}

struct RompResult {
  std::vector<std::size_t> support;  // feature columns, ascending; intercept not listed
  std::vector<double> weights;       // aligned with support
  double intercept = 0.0;
  double residual_norm = 0.0;
  std::vector<RompStep> trace;
  RompStop stop = RompStop::tolerance;
  bool rank_deficient = false;
  std::size_t pruned = 0;
};

namespace detail {

using ColMatrix = Eigen::MatrixXd;

// Least squares on the given columns; minimum-norm when rank deficient.
inline Eigen::VectorXd solve_support(const ColMatrix& X, const std::vector<std::size_t>& cols, const Eigen::VectorXd& y,
                                     bool& rank_deficient) {
  ColMatrix A(X.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) A.col(static_cast<Eigen::Index>(k)) = X.col(static_cast<Eigen::Index>(cols[k]));
  Eigen::CompleteOrthogonalDecomposition<ColMatrix> cod(A);
  rank_deficient = cod.rank() < A.cols();
  return cod.solve(y);
}

// Regularization step: J is sorted by decreasing |u|. Contiguous runs J[a..b]
// with |u_a| <= 2|u_b| are the comparable-magnitude subsets; the run with
// the largest energy wins (earliest run on ties).
inline std::vector<std::size_t> regularize(const std::vector<std::size_t>& J, const Eigen::VectorXd& u) {
  auto mag = [&](std::size_t k) { return std::abs(u(static_cast<Eigen::Index>(J[k]))); };
  std::size_t best_a = 0, best_b = 0;
  double best = -1.0;
  for (std::size_t a = 0; a < J.size(); ++a) {
    double energy = 0.0;
    std::size_t b = a;
    for (; b < J.size() && mag(a) <= 2.0 * mag(b); ++b) energy += mag(b) * mag(b);
    if (energy > best) {
      best = energy;
      best_a = a;
      best_b = b;
    }
  }
  return {J.begin() + static_cast<std::ptrdiff_t>(best_a), J.begin() + static_cast<std::ptrdiff_t>(best_b)};
}

}  // namespace detail

/// Regularized orthogonal matching pursuit. The intercept column is never a
/// selection candidate but is always part of the least-squares refit.
inline RompResult romp_solve(const DesignMatrix& X, std::span<const double> y, const RompOptions& opts = {}) {
  if (X.rows() < 2) throw std::invalid_argument("romp_solve: need at least 2 rows");
  if (y.size() != X.rows()) throw std::invalid_argument("romp_solve: response length differs from design rows");
  for (double v : y) {
    if (!std::isfinite(v)) throw std::invalid_argument("romp_solve: non-finite response");
  }
  const std::size_t s_max = opts.s_max ? opts.s_max : std::max<std::size_t>(1, X.rows() / 2);
  const detail::ColMatrix& M = X.matrix;
  const std::size_t features = X.features();
  const Eigen::Index n = static_cast<Eigen::Index>(features);
  Eigen::VectorXd yv(static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) yv(static_cast<Eigen::Index>(i)) = y[i];
  const double ynorm = yv.norm();

  RompResult res;
  std::vector<std::size_t> support;
  std::vector<char> in_support(features, 0);
  auto refit = [&]() {
    std::vector<std::size_t> cols = support;
    cols.push_back(features);
    bool rd = false;
    const Eigen::VectorXd w = detail::solve_support(M, cols, yv, rd);
    Eigen::VectorXd fit = Eigen::VectorXd::Zero(M.rows());
    for (std::size_t k = 0; k < cols.size(); ++k) fit += w(static_cast<Eigen::Index>(k)) * M.col(static_cast<Eigen::Index>(cols[k]));
    return std::tuple{w, Eigen::VectorXd(yv - fit), rd};
  };
  auto [w, residual, rd0] = refit();
  res.rank_deficient = rd0;
  double rnorm = residual.norm();
  res.stop = RompStop::iterations;
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    if (rnorm <= opts.tolerance * ynorm) {
      res.stop = RompStop::tolerance;
      break;
    }
    if (support.size() >= s_max) {
      res.stop = RompStop::sparsity;
      break;
    }
    const Eigen::VectorXd u = M.leftCols(n).transpose() * residual;
    // correlations below this are rounding noise of an orthogonal residual
    const double floor = 1e-10 * std::sqrt(static_cast<double>(X.rows())) * rnorm;
    std::vector<std::size_t> cand;
    for (std::size_t j = 0; j < features; ++j) {
      if (!in_support[j] && std::abs(u(static_cast<Eigen::Index>(j))) > floor) cand.push_back(j);
    }
    if (cand.empty()) {
      res.stop = RompStop::no_candidates;
      break;
    }
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(u(static_cast<Eigen::Index>(a))) > std::abs(u(static_cast<Eigen::Index>(b)));
    });
    const std::size_t batch = opts.candidates ? opts.candidates : std::max<std::size_t>(1, X.rows() / 8);
    if (cand.size() > batch) cand.resize(batch);
    std::vector<std::size_t> J0 = detail::regularize(cand, u);
    if (J0.size() > s_max - support.size()) J0.resize(s_max - support.size());
    for (std::size_t j : J0) {
      support.push_back(j);
      in_support[j] = 1;
    }
    std::sort(support.begin(), support.end());
    auto [w2, r2, rd] = refit();
    const double new_norm = r2.norm();
    res.trace.push_back({J0.size(), support.size(), new_norm, rd});
    res.rank_deficient = res.rank_deficient || rd;
    const bool stalled = !(rnorm - new_norm > opts.stagnation * std::max(rnorm, 1e-300));
    w = std::move(w2);
    residual = std::move(r2);
    rnorm = new_norm;
    if (stalled) {
      res.stop = RompStop::stagnation;
      break;
    }
  }
  // Indices that entered with a batch but carry no weight in the final fit.
  if (opts.prune > 0.0 && !support.empty()) {
    double wmax = 0.0;
    for (std::size_t k = 0; k < support.size(); ++k) wmax = std::max(wmax, std::abs(w(static_cast<Eigen::Index>(k))));
    std::vector<std::size_t> kept;
    for (std::size_t k = 0; k < support.size(); ++k) {
      if (std::abs(w(static_cast<Eigen::Index>(k))) > opts.prune * wmax) kept.push_back(support[k]);
    }
    if (kept.size() < support.size()) {
      const std::vector<std::size_t> full = std::exchange(support, kept);
      auto [w2, r2, rd] = refit();
      if (r2.norm() <= rnorm + opts.tolerance * ynorm) {
        w = std::move(w2);
        rnorm = r2.norm();
        res.pruned = full.size() - support.size();
      } else {
        support = full;
      }
    }
  }
  res.support = support;
  res.weights.resize(support.size());
  for (std::size_t k = 0; k < support.size(); ++k) res.weights[k] = w(static_cast<Eigen::Index>(k));
  res.intercept = w(static_cast<Eigen::Index>(support.size()));
  res.residual_norm = rnorm;
  return res;
}

struct EncodingModel {
  std::string layer;
  std::string vertex;
  FeatureScaling scaling;
  std::vector<std::size_t> support;  // standardized-feature indices
  std::vector<double> weights;
  double intercept = 0.0;
  double residual_norm = 0.0;
  std::string stop_reason;
  bool rank_deficient = false;
  std::size_t iterations = 0;

  std::size_t support_size() const noexcept { return support.size(); }

  /// Support expressed as original activation columns with weights on raw
  /// activations, plus the matching raw-scale intercept.
  std::pair<std::vector<std::pair<std::size_t, double>>, double> raw_weights() const {
    std::vector<std::pair<std::size_t, double>> out;
    double b = intercept;
    for (std::size_t k = 0; k < support.size(); ++k) {
      const std::size_t j = support[k];
      const double wr = weights[k] / scaling.sd[j];
      out.emplace_back(scaling.kept[j], wr);
      b -= wr * scaling.mean[j];
    }
    return {out, b};
  }

  /// Predictions for every row of raw activations `a`.
  std::vector<double> predict(const ActivationMatrix& a) const {
    if (a.cols() != scaling.original_columns) {
      throw std::invalid_argument("model for layer '" + layer + "' expects " + std::to_string(scaling.original_columns) +
                                  " units, got " + std::to_string(a.cols()));
    }
    std::vector<double> out(a.rows(), intercept);
    for (std::size_t r = 0; r < a.rows(); ++r) {
      for (std::size_t k = 0; k < support.size(); ++k) {
        const std::size_t j = support[k];
        out[r] += weights[k] * (a.at(r, scaling.kept[j]) - scaling.mean[j]) / scaling.sd[j];
      }
    }
    return out;
  }
};

/// One model per response column (vertex), all sharing the layer's scaling.
inline std::vector<EncodingModel> fit_models(const ActivationMatrix& layer, const ActivationMatrix& responses,
                                             const RompOptions& opts = {}, bool standardize = true) {
  detail::require_same_ids(layer.stimulus_ids, responses.stimulus_ids, "fit_models");
  const DesignMatrix X = build_design(layer, standardize);
  std::vector<EncodingModel> models(responses.cols());
  parallel_for(responses.cols(), [&](std::size_t v) {
    const std::vector<double> y = responses.column(v);
    const RompResult r = romp_solve(X, y, opts);
    EncodingModel& m = models[v];
    m.layer = layer.source;
    m.vertex = responses.unit_ids[v];
    m.scaling = X.scaling;
    m.support = r.support;
    m.weights = r.weights;
    m.intercept = r.intercept;
    m.residual_norm = r.residual_norm;
    m.stop_reason = to_string(r.stop);
    m.rank_deficient = r.rank_deficient;
    m.iterations = r.trace.size();
  });
  return models;
}

struct PredictionScore {
  std::vector<double> r;          // per vertex, NaN when undefined
  double mean_r = nan_value;      // over defined vertices
  std::size_t undefined = 0;
};

namespace detail {
inline PredictionScore score_predictions(const std::vector<std::vector<double>>& pred, const ActivationMatrix& responses,
                                         std::span<const std::size_t> rows) {
  PredictionScore s;
  s.r.resize(pred.size());
  double sum = 0.0;
  std::size_t defined = 0;
  std::vector<double> p(rows.size()), y(rows.size());
  for (std::size_t v = 0; v < pred.size(); ++v) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      p[i] = pred[v][i];
      y[i] = responses.at(rows[i], v);
    }
    s.r[v] = pearson(p, y);
    if (std::isnan(s.r[v])) {
      ++s.undefined;
    } else {
      sum += s.r[v];
      ++defined;
    }
  }
  s.mean_r = defined ? sum / static_cast<double>(defined) : nan_value;
  return s;
}
}  // namespace detail

inline PredictionScore predict_and_score(const std::vector<EncodingModel>& models, const ActivationMatrix& layer,
                                         const ActivationMatrix& responses) {
  detail::require_same_ids(layer.stimulus_ids, responses.stimulus_ids, "predict_and_score");
  if (models.size() != responses.cols()) throw std::invalid_argument("predict_and_score: one model per vertex required");
  std::vector<std::vector<double>> pred(models.size());
  for (std::size_t v = 0; v < models.size(); ++v) pred[v] = models[v].predict(layer);
  const auto rows = detail::identity_index(layer.rows());
  return detail::score_predictions(pred, responses, rows);
}

/// k-fold cross-validated per-vertex r (fold = stimulus index mod k): each
/// stimulus is predicted by models fitted without it.
inline std::vector<double> cross_validated_r(const ActivationMatrix& layer, const ActivationMatrix& responses,
                                             std::size_t folds, const RompOptions& opts = {}, bool standardize = true) {
  detail::require_same_ids(layer.stimulus_ids, responses.stimulus_ids, "cross_validated_r");
  const std::size_t n = layer.rows();
  if (n < 4) throw std::invalid_argument("cross_validated_r: need at least 4 stimuli");
  folds = std::clamp<std::size_t>(folds, 2, n / 2);
  std::vector<std::vector<double>> pred(responses.cols(), std::vector<double>(n, 0.0));
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < n; ++i) (i % folds == f ? te : tr).push_back(i);
    const auto models = fit_models(layer.select_rows(tr), responses.select_rows(tr), opts, standardize);
    const ActivationMatrix test = layer.select_rows(te);
    for (std::size_t v = 0; v < models.size(); ++v) {
      const auto p = models[v].predict(test);
      for (std::size_t k = 0; k < te.size(); ++k) pred[v][te[k]] = p[k];
    }
  }
  std::vector<double> r(responses.cols());
  for (std::size_t v = 0; v < responses.cols(); ++v) r[v] = pearson(pred[v], responses.column(v));
  return r;
}

struct GeneralizationEntry {
  std::string condition;  // "AN" or "AI"
  double mean_r = nan_value;
  std::size_t undefined = 0;
  double p_permutation = nan_value;
  std::vector<Interval> ci;  // bootstrap over vertex subsamples
  std::vector<double> bootstrap;
};

struct GeneralizationReport {
  std::string layer;
  GeneralizationEntry an;
  GeneralizationEntry ai;
  double p_ai_gt_an = nan_value;  // fraction of paired vertex bootstraps with r_AI - r_AN <= 0
  std::vector<Interval> diff_ci;
};

struct GeneralizationOptions {
  std::size_t n_perm = 1000;
  std::size_t n_boot = 1000;
  double vertex_fraction = 0.8;
  std::vector<double> levels{0.68, 0.95};
  std::uint64_t seed = 1;
};

namespace detail {

inline GeneralizationEntry generalization_entry(const std::string& name, const std::vector<EncodingModel>& models,
                                                const ActivationMatrix& layer, const ActivationMatrix& responses,
                                                const GeneralizationOptions& o, std::uint64_t stream) {
  require_same_ids(layer.stimulus_ids, responses.stimulus_ids, "generalization_test");
  GeneralizationEntry e;
  e.condition = name;
  std::vector<std::vector<double>> pred(models.size());
  for (std::size_t v = 0; v < models.size(); ++v) pred[v] = models[v].predict(layer);
  const auto rows = identity_index(layer.rows());
  const PredictionScore base = score_predictions(pred, responses, rows);
  e.mean_r = base.mean_r;
  e.undefined = base.undefined;
  std::vector<double> null(o.n_perm);
  parallel_for(o.n_perm, [&](std::size_t p) {
    std::vector<std::size_t> perm = rows;
    Engine eng = make_engine(o.seed, {stream, 0x9e7, p});
    std::shuffle(perm.begin(), perm.end(), eng);
    null[p] = score_predictions(pred, responses, perm).mean_r;
  });
  std::size_t exceed = 0;
  for (double v : null) exceed += (!std::isnan(v) && v >= e.mean_r) ? 1 : 0;
  e.p_permutation = (1.0 + static_cast<double>(exceed)) / (static_cast<double>(o.n_perm) + 1.0);
  return e;
}

// Mean of r over a vertex subsample, ignoring undefined vertices.
inline double subsample_mean(const std::vector<double>& r, const std::vector<std::size_t>& pick) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t v : pick) {
    if (!std::isnan(r[v])) {
      s += r[v];
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : nan_value;
}

}  // namespace detail

/// r_AN and r_AI for RE-trained models with stimulus-shuffle permutation p
/// values and paired bootstrap intervals over vertex subsamples drawn
/// without replacement.
inline GeneralizationReport generalization_test(const std::vector<EncodingModel>& models, const ActivationMatrix& an_layer,
                                                const ActivationMatrix& an_resp, const ActivationMatrix& ai_layer,
                                                const ActivationMatrix& ai_resp, const GeneralizationOptions& o) {
  GeneralizationReport rep;
  rep.layer = models.empty() ? std::string{} : models.front().layer;
  rep.an = detail::generalization_entry("AN", models, an_layer, an_resp, o, 0xa1);
  rep.ai = detail::generalization_entry("AI", models, ai_layer, ai_resp, o, 0xa2);
  const PredictionScore san = predict_and_score(models, an_layer, an_resp);
  const PredictionScore sai = predict_and_score(models, ai_layer, ai_resp);
  const std::size_t nv = models.size();
  const std::size_t take = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(o.vertex_fraction * static_cast<double>(nv))));
  rep.an.bootstrap.resize(o.n_boot);
  rep.ai.bootstrap.resize(o.n_boot);
  std::vector<double> diff(o.n_boot);
  parallel_for(o.n_boot, [&](std::size_t b) {
    std::vector<std::size_t> pick = detail::identity_index(nv);
    Engine eng = make_engine(o.seed, {0xb0, b});
    std::shuffle(pick.begin(), pick.end(), eng);
    pick.resize(take);
    rep.an.bootstrap[b] = detail::subsample_mean(san.r, pick);
    rep.ai.bootstrap[b] = detail::subsample_mean(sai.r, pick);
    diff[b] = rep.ai.bootstrap[b] - rep.an.bootstrap[b];
  });
  std::size_t finite = 0, below = 0;
  for (double d : diff) {
    if (std::isnan(d)) continue;
    ++finite;
    below += d <= 0.0;
  }
  rep.p_ai_gt_an = finite ? static_cast<double>(below) / static_cast<double>(finite) : nan_value;
  for (double level : o.levels) {
    rep.an.ci.push_back(percentile_interval(rep.an.bootstrap, level));
    rep.ai.ci.push_back(percentile_interval(rep.ai.bootstrap, level));
    rep.diff_ci.push_back(percentile_interval(diff, level));
  }
  return rep;
}

struct LayerAssignment {
  std::vector<std::string> layers;
  std::vector<double> proportions;
  std::vector<std::size_t> best_layer;  // per vertex
  std::size_t unassigned = 0;           // vertices undefined in every layer
};

/// r[l][v]: score of vertex v under layer l's model. Each vertex goes to its
/// highest-r layer (lowest index on ties); NaN scores never win.
inline LayerAssignment layer_assignment(const std::vector<std::string>& layers, const std::vector<std::vector<double>>& r) {
  if (layers.empty() || r.size() != layers.size()) throw std::invalid_argument("layer_assignment: one score row per layer");
  const std::size_t nv = r.front().size();
  for (const auto& row : r) {
    if (row.size() != nv) throw std::invalid_argument("layer_assignment: ragged score matrix");
  }
  LayerAssignment a{layers, std::vector<double>(layers.size(), 0.0), std::vector<std::size_t>(nv, layers.size()), 0};
  std::vector<std::size_t> counts(layers.size(), 0);
  std::size_t assigned = 0;
  for (std::size_t v = 0; v < nv; ++v) {
    std::size_t best = layers.size();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (std::isnan(r[l][v])) continue;
      if (best == layers.size() || r[l][v] > r[best][v]) best = l;
    }
    a.best_layer[v] = best;
    if (best == layers.size()) {
      ++a.unassigned;
    } else {
      ++counts[best];
      ++assigned;
    }
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    a.proportions[l] = assigned ? static_cast<double>(counts[l]) / static_cast<double>(assigned) : 0.0;
  }
  return a;
}

struct SimulatedVoxelSpec {
  std::string id;
  std::string layer;
  std::vector<std::size_t> support;  // raw activation columns
  std::vector<double> weights;
  double intercept = 0.0;
  double noise_sd = 0.0;
  std::uint64_t seed = 0;

  void validate(std::size_t width) const {
    if (support.empty()) throw std::invalid_argument("voxel '" + id + "': planted support must be non-empty");
    if (support.size() != weights.size()) throw std::invalid_argument("voxel '" + id + "': support/weight length mismatch");
    for (std::size_t j : support) {
      if (j >= width) {
        throw std::invalid_argument("voxel '" + id + "': planted index " + std::to_string(j) + " outside layer width " +
                                    std::to_string(width));
      }
    }
    if (!(noise_sd >= 0.0)) throw std::invalid_argument("voxel '" + id + "': noise sd must be >= 0");
  }
};

struct SimulatedResponses {
  ActivationMatrix responses;  // stimuli x voxels
  ActivationMatrix signal;     // noiseless part
};

/// Noise stream depends only on (spec.seed, voxel position, stimulus row),
/// so identical specs draw identical noise.
inline SimulatedResponses simulate_voxels(const ActivationMatrix& layer, const std::vector<SimulatedVoxelSpec>& specs) {
  SimulatedResponses out;
  out.responses.stimulus_ids = out.signal.stimulus_ids = layer.stimulus_ids;
  out.responses.source = "simulated:" + layer.source;
  out.signal.source = "signal:" + layer.source;
  for (const auto& s : specs) {
    s.validate(layer.cols());
    out.responses.unit_ids.push_back(s.id);
    out.signal.unit_ids.push_back(s.id);
  }
  const std::size_t nv = specs.size();
  out.responses.values.assign(layer.rows() * nv, 0.0);
  out.signal.values.assign(layer.rows() * nv, 0.0);
  for (std::size_t v = 0; v < nv; ++v) {
    const auto& s = specs[v];
    Engine eng = make_engine(s.seed, {0x5e1, 0});
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t r = 0; r < layer.rows(); ++r) {
      double y = s.intercept;
      for (std::size_t k = 0; k < s.support.size(); ++k) y += s.weights[k] * layer.at(r, s.support[k]);
      out.signal.at(r, v) = y;
      const double z = noise(eng);
      out.responses.at(r, v) = y + (s.noise_sd > 0.0 ? s.noise_sd * z : 0.0);
    }
  }
  return out;
}

/// Expected Pearson r between a noisy measurement and the noiseless signal:
/// sd(signal) / sqrt(var(signal) + sigma^2), with variances over stimuli.
inline double noise_ceiling(std::span<const double> signal, double noise_sd) {
  const double mu = mean(signal);
  double ss = 0.0;
  for (double v : signal) ss += (v - mu) * (v - mu);
  const double var = ss / static_cast<double>(signal.size());
  if (!(var > 0.0)) return nan_value;
  return std::sqrt(var / (var + noise_sd * noise_sd));
}

}  // namespace advrsa
