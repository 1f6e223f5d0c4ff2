#pragma once

// Representational similarity analysis: correlation-distance RDMs, Spearman
// comparison of their strict lower triangles, permutation and bootstrap
// statistics, and disk searchlights over flattened vertex coordinates.

#include <advrsa/parallel.hpp>
#include <advrsa/random.hpp>
#include <advrsa/stats.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace advrsa {

/// Stimuli x units (or vertices) response matrix.
struct ActivationMatrix {
  std::vector<std::string> stimulus_ids;
  std::vector<std::string> unit_ids;
  std::vector<double> values;  // row-major, rows() x cols()
  std::string source;

  std::size_t rows() const noexcept { return stimulus_ids.size(); }
  std::size_t cols() const noexcept { return unit_ids.size(); }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols(), cols()}; }

  std::vector<double> column(std::size_t c) const {
    std::vector<double> out(rows());
    for (std::size_t r = 0; r < rows(); ++r) out[r] = at(r, c);
    return out;
  }

  /// Throws on size mismatch or any non-finite cell (with its coordinates).
  void validate() const {
    if (values.size() != rows() * cols()) {
      throw std::invalid_argument("activation matrix '" + source + "': " + std::to_string(values.size()) +
                                  " values for " + std::to_string(rows()) + "x" + std::to_string(cols()));
    }
    for (std::size_t r = 0; r < rows(); ++r) {
      for (std::size_t c = 0; c < cols(); ++c) {
        if (!std::isfinite(at(r, c))) {
          throw std::invalid_argument("activation matrix '" + source + "': non-finite value at row " +
                                      std::to_string(r + 1) + " (stimulus '" + stimulus_ids[r] + "'), column " +
                                      std::to_string(c + 1) + " (unit '" + unit_ids[c] + "')");
        }
      }
    }
  }

  ActivationMatrix select_columns(std::span<const std::size_t> cols_idx) const {
    ActivationMatrix m{stimulus_ids, {}, {}, source};
    for (std::size_t c : cols_idx) m.unit_ids.push_back(unit_ids.at(c));
    m.values.reserve(rows() * cols_idx.size());
    for (std::size_t r = 0; r < rows(); ++r) {
      for (std::size_t c : cols_idx) m.values.push_back(at(r, c));
    }
    return m;
  }

  ActivationMatrix select_rows(std::span<const std::size_t> rows_idx) const {
    ActivationMatrix m{{}, unit_ids, {}, source};
    for (std::size_t r : rows_idx) {
      m.stimulus_ids.push_back(stimulus_ids.at(r));
      const auto rv = row(r);
      m.values.insert(m.values.end(), rv.begin(), rv.end());
    }
    return m;
  }

  friend bool operator==(const ActivationMatrix&, const ActivationMatrix&) = default;
};

enum class RdmMetric { correlation, euclidean };

inline const char* to_string(RdmMetric m) { return m == RdmMetric::correlation ? "correlation" : "euclidean"; }

inline RdmMetric rdm_metric_from_string(const std::string& s) {
  if (s == "correlation") return RdmMetric::correlation;
  if (s == "euclidean") return RdmMetric::euclidean;
  throw std::invalid_argument("unknown RDM metric '" + s + "'");
}

/// Symmetric stimulus x stimulus dissimilarities with zero diagonal. Rows of
/// stimuli whose pattern has zero variance are flagged undefined (NaN off the diagonal).
struct Rdm {
  std::vector<std::string> ids;
  std::vector<double> values;
  std::vector<char> undefined;
  RdmMetric metric = RdmMetric::correlation;

  std::size_t size() const noexcept { return ids.size(); }
  double at(std::size_t i, std::size_t j) const { return values[i * size() + j]; }
  std::size_t undefined_count() const {
    return static_cast<std::size_t>(std::count(undefined.begin(), undefined.end(), 1));
  }
};

inline Rdm compute_rdm(const ActivationMatrix& m, RdmMetric metric = RdmMetric::correlation) {
  const std::size_t k = m.rows(), u = m.cols();
  if (m.values.size() != k * u) throw std::invalid_argument("compute_rdm: malformed activation matrix");
  if (metric == RdmMetric::correlation && u < 2) {
    throw std::invalid_argument("compute_rdm: correlation distance needs at least 2 units");
  }
  Rdm rdm{m.stimulus_ids, std::vector<double>(k * k, 0.0), std::vector<char>(k, 0), metric};
  if (metric == RdmMetric::correlation) {
    // z-normalized rows so that 1 - r is one dot product per pair
    std::vector<double> z(k * u);
    for (std::size_t i = 0; i < k; ++i) {
      const auto r = m.row(i);
      const double mu = mean(r);
      double ss = 0.0;
      for (double v : r) ss += (v - mu) * (v - mu);
      if (!(ss > 0.0)) {
        rdm.undefined[i] = 1;
        continue;
      }
      const double inv = 1.0 / std::sqrt(ss);
      for (std::size_t c = 0; c < u; ++c) z[i * u + c] = (r[c] - mu) * inv;
    }
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        double d = nan_value;
        if (!rdm.undefined[i] && !rdm.undefined[j]) {
          double dot = 0.0;
          for (std::size_t c = 0; c < u; ++c) dot += z[i * u + c] * z[j * u + c];
          d = 1.0 - std::clamp(dot, -1.0, 1.0);
        }
        rdm.values[i * k + j] = rdm.values[j * k + i] = d;
      }
    }
  } else {
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < u; ++c) {
          const double d = m.at(i, c) - m.at(j, c);
          s += d * d;
        }
        rdm.values[i * k + j] = rdm.values[j * k + i] = std::sqrt(s);
      }
    }
  }
  return rdm;
}

struct RdmComparison {
  double rho = nan_value;
  std::size_t pairs_used = 0;
  std::size_t pairs_excluded = 0;
};

namespace detail {

// Spearman over strict-lower-triangle pairs (i > j) of the index-mapped RDMs.
// Pairs that map to the same stimulus or touch an undefined row are skipped.
inline RdmComparison compare_indexed(const Rdm& a, std::span<const std::size_t> ia, const Rdm& b,
                                     std::span<const std::size_t> ib) {
  const std::size_t k = ia.size();
  std::vector<double> va, vb;
  va.reserve(k * (k - 1) / 2);
  vb.reserve(k * (k - 1) / 2);
  RdmComparison r;
  for (std::size_t i = 1; i < k; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (ia[i] == ia[j] || ib[i] == ib[j]) {
        ++r.pairs_excluded;
        continue;
      }
      const double x = a.at(ia[i], ia[j]);
      const double y = b.at(ib[i], ib[j]);
      if (std::isnan(x) || std::isnan(y)) {
        ++r.pairs_excluded;
        continue;
      }
      va.push_back(x);
      vb.push_back(y);
    }
  }
  r.pairs_used = va.size();
  r.rho = va.size() >= 2 ? spearman(va, vb) : nan_value;
  return r;
}

inline std::vector<std::size_t> identity_index(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

inline void require_same_ids(const std::vector<std::string>& a, const std::vector<std::string>& b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": stimulus ids differ between inputs");
}

}  // namespace detail

/// Spearman correlation between the strict lower triangles of two RDMs.
inline RdmComparison compare_rdms(const Rdm& a, const Rdm& b) {
  detail::require_same_ids(a.ids, b.ids, "compare_rdms");
  const auto idx = detail::identity_index(a.size());
  return detail::compare_indexed(a, idx, b, idx);
}

struct SimilarityPair {
  RdmComparison re_an;
  RdmComparison re_ai;
  std::string source_re, source_an, source_ai;
  RdmMetric metric = RdmMetric::correlation;
};

inline SimilarityPair similarity_pair(const ActivationMatrix& re, const ActivationMatrix& an, const ActivationMatrix& ai,
                                      RdmMetric metric = RdmMetric::correlation) {
  detail::require_same_ids(re.stimulus_ids, an.stimulus_ids, "similarity_pair");
  detail::require_same_ids(re.stimulus_ids, ai.stimulus_ids, "similarity_pair");
  const Rdm r = compute_rdm(re, metric);
  return {compare_rdms(r, compute_rdm(an, metric)), compare_rdms(r, compute_rdm(ai, metric)),
          re.source, an.source, ai.source, metric};
}

struct PermutationResult {
  double observed = nan_value;
  double p_value = nan_value;  // (1 + #{null >= observed}) / (n + 1)
  std::vector<double> null_samples;
  std::string warning;
};

/// One-sided permutation test: x's stimulus labels are shuffled relative to
/// its activity and the RDM similarity recomputed n_perm times.
inline PermutationResult permutation_null(const ActivationMatrix& re, const ActivationMatrix& x, std::size_t n_perm,
                                          std::uint64_t seed, RdmMetric metric = RdmMetric::correlation) {
  detail::require_same_ids(re.stimulus_ids, x.stimulus_ids, "permutation_null");
  const Rdm a = compute_rdm(re, metric);
  const Rdm b = compute_rdm(x, metric);
  return [&] {
    PermutationResult res;
    if (n_perm < 100) res.warning = "n_perm=" + std::to_string(n_perm) + " < 100: p-value resolution is coarse";
    const auto idx = detail::identity_index(a.size());
    res.observed = detail::compare_indexed(a, idx, b, idx).rho;
    res.null_samples.resize(n_perm);
    parallel_for(n_perm, [&](std::size_t p) {
      std::vector<std::size_t> perm = idx;
      Engine eng = make_engine(seed, {0x9e7, p});
      std::shuffle(perm.begin(), perm.end(), eng);
      res.null_samples[p] = detail::compare_indexed(a, idx, b, perm).rho;
    });
    std::size_t exceed = 0;
    for (double v : res.null_samples) exceed += (v >= res.observed) ? 1 : 0;
    res.p_value = (1.0 + static_cast<double>(exceed)) / (static_cast<double>(n_perm) + 1.0);
    return res;
  }();
}

struct BootstrapResult {
  double delta = nan_value;  // R_RE-AI - R_RE-AN on the original stimuli
  double re_an = nan_value;
  double re_ai = nan_value;
  std::vector<double> deltas;
  std::vector<double> re_an_samples;
  std::vector<double> re_ai_samples;
  std::vector<Interval> delta_ci;
  std::vector<Interval> re_an_ci;
  std::vector<Interval> re_ai_ci;
  double p_value = nan_value;  // fraction of finite bootstrap deltas <= 0
  std::size_t degenerate = 0;  // replicates with an undefined similarity
};

/// Stimulus bootstrap of the RE-AI minus RE-AN difference. The same resampled
/// stimulus indices are applied to all three matrices; pairs of a stimulus
/// with its own duplicate are left out of the Spearman vectors.
inline BootstrapResult bootstrap_diff(const ActivationMatrix& re, const ActivationMatrix& an,
                                      const ActivationMatrix& ai, std::size_t n_boot, std::uint64_t seed,
                                      std::vector<double> levels = {0.68, 0.95},
                                      RdmMetric metric = RdmMetric::correlation) {
  detail::require_same_ids(re.stimulus_ids, an.stimulus_ids, "bootstrap_diff");
  detail::require_same_ids(re.stimulus_ids, ai.stimulus_ids, "bootstrap_diff");
  const Rdm r = compute_rdm(re, metric), n = compute_rdm(an, metric), i = compute_rdm(ai, metric);
  const std::size_t k = r.size();
  BootstrapResult res;
  const auto idx = detail::identity_index(k);
  res.re_an = detail::compare_indexed(r, idx, n, idx).rho;
  res.re_ai = detail::compare_indexed(r, idx, i, idx).rho;
  res.delta = res.re_ai - res.re_an;
  res.deltas.resize(n_boot);
  res.re_an_samples.resize(n_boot);
  res.re_ai_samples.resize(n_boot);
  parallel_for(n_boot, [&](std::size_t b) {
    Engine eng = make_engine(seed, {0xb007, b});
    std::vector<std::size_t> pick(k);
    for (auto& p : pick) p = static_cast<std::size_t>(uniform01(eng) * static_cast<double>(k));
    const double ran = detail::compare_indexed(r, pick, n, pick).rho;
    const double rai = detail::compare_indexed(r, pick, i, pick).rho;
    res.re_an_samples[b] = ran;
    res.re_ai_samples[b] = rai;
    res.deltas[b] = rai - ran;
  });
  std::size_t finite = 0, below = 0;
  for (double d : res.deltas) {
    if (std::isnan(d)) {
      ++res.degenerate;
      continue;
    }
    ++finite;
    below += d <= 0.0 ? 1 : 0;
  }
  res.p_value = finite ? static_cast<double>(below) / static_cast<double>(finite) : nan_value;
  for (double level : levels) {
    res.delta_ci.push_back(percentile_interval(res.deltas, level));
    res.re_an_ci.push_back(percentile_interval(res.re_an_samples, level));
    res.re_ai_ci.push_back(percentile_interval(res.re_ai_samples, level));
  }
  return res;
}

// ---- vertex geometry and searchlights ------------------------------------------

struct VertexGeometry {
  std::vector<std::string> ids;
  std::vector<double> x_mm;
  std::vector<double> y_mm;
  std::vector<std::string> hemisphere;  // empty strings when untagged

  std::size_t size() const noexcept { return ids.size(); }

  bool has_hemispheres() const {
    return std::any_of(hemisphere.begin(), hemisphere.end(), [](const std::string& h) { return !h.empty(); });
  }

  void validate() const {
    if (x_mm.size() != ids.size() || y_mm.size() != ids.size() || hemisphere.size() != ids.size()) {
      throw std::invalid_argument("vertex geometry: column lengths differ");
    }
    std::unordered_map<std::string, std::size_t> seen;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!std::isfinite(x_mm[i]) || !std::isfinite(y_mm[i])) {
        throw std::invalid_argument("vertex geometry: non-finite coordinate for vertex '" + ids[i] + "'");
      }
      if (!seen.emplace(ids[i], i).second) throw std::invalid_argument("vertex geometry: duplicate id '" + ids[i] + "'");
    }
  }
};

/// Orders ids numerically when both are unsigned integers, otherwise lexically.
inline bool vertex_id_less(const std::string& a, const std::string& b) {
  auto numeric = [](const std::string& s) {
    return !s.empty() && s.size() < 19 && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
  };
  if (numeric(a) && numeric(b)) return std::stoull(a) < std::stoull(b);
  return a < b;
}

namespace detail {
inline bool within(const VertexGeometry& g, std::size_t i, std::size_t j, double r2) {
  const double dx = g.x_mm[i] - g.x_mm[j], dy = g.y_mm[i] - g.y_mm[j];
  return dx * dx + dy * dy <= r2;
}
}  // namespace detail

/// Disk neighbourhoods (distance <= radius, centre included) by exhaustive scan.
inline std::vector<std::vector<std::size_t>> neighborhoods_brute(const VertexGeometry& g, double radius) {
  const double r2 = radius * radius;
  std::vector<std::vector<std::size_t>> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (detail::within(g, i, j, r2)) out[i].push_back(j);
    }
  }
  return out;
}

/// Same neighbourhoods through a uniform grid with cell size = radius.
inline std::vector<std::vector<std::size_t>> neighborhoods_grid(const VertexGeometry& g, double radius) {
  if (!(radius > 0.0)) return neighborhoods_brute(g, radius);
  const double r2 = radius * radius;
  auto cell = [&](double v) { return static_cast<long long>(std::floor(v / radius)); };
  std::map<std::pair<long long, long long>, std::vector<std::size_t>> grid;
  for (std::size_t i = 0; i < g.size(); ++i) grid[{cell(g.x_mm[i]), cell(g.y_mm[i])}].push_back(i);
  std::vector<std::vector<std::size_t>> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const long long cx = cell(g.x_mm[i]), cy = cell(g.y_mm[i]);
    for (long long dx = -1; dx <= 1; ++dx) {
      for (long long dy = -1; dy <= 1; ++dy) {
        const auto it = grid.find({cx + dx, cy + dy});
        if (it == grid.end()) continue;
        for (std::size_t j : it->second) {
          if (detail::within(g, i, j, r2)) out[i].push_back(j);
        }
      }
    }
    std::sort(out[i].begin(), out[i].end());
  }
  return out;
}

/// Column of `m` for each geometry vertex (matched by id).
inline std::vector<std::size_t> columns_for_geometry(const VertexGeometry& g, const ActivationMatrix& m) {
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < m.cols(); ++c) col.emplace(m.unit_ids[c], c);
  std::vector<std::size_t> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto it = col.find(g.ids[i]);
    if (it == col.end()) {
      throw std::invalid_argument("vertex '" + g.ids[i] + "' has no column in matrix '" + m.source + "'");
    }
    out[i] = it->second;
  }
  return out;
}

struct VertexSelection {
  std::vector<std::string> selected;  // in geometry order
  std::vector<double> scores;         // per geometry vertex; -inf when the disk holds < 2 vertices
};

/// Split-half reliability selection: each vertex is scored by the Spearman
/// similarity of the trial-1 and trial-2 RDMs inside its disk, and the top_n
/// are kept (split evenly across hemispheres when tagged). Ties go to the lower id.
inline VertexSelection select_vertices(const ActivationMatrix& trial1, const ActivationMatrix& trial2,
                                       const VertexGeometry& g, double radius, std::size_t top_n,
                                       RdmMetric metric = RdmMetric::correlation) {
  g.validate();
  detail::require_same_ids(trial1.stimulus_ids, trial2.stimulus_ids, "select_vertices");
  const auto col1 = columns_for_geometry(g, trial1);
  const auto col2 = columns_for_geometry(g, trial2);
  const auto hoods = neighborhoods_grid(g, radius);
  VertexSelection sel;
  sel.scores.assign(g.size(), -std::numeric_limits<double>::infinity());
  parallel_for(g.size(), [&](std::size_t v) {
    if (hoods[v].size() < 2) return;
    std::vector<std::size_t> c1, c2;
    for (std::size_t j : hoods[v]) {
      c1.push_back(col1[j]);
      c2.push_back(col2[j]);
    }
    const double rho = compare_rdms(compute_rdm(trial1.select_columns(c1), metric),
                                    compute_rdm(trial2.select_columns(c2), metric)).rho;
    if (!std::isnan(rho)) sel.scores[v] = rho;
  });
  std::vector<std::size_t> order = detail::identity_index(g.size());
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sel.scores[a] != sel.scores[b]) return sel.scores[a] > sel.scores[b];
    return vertex_id_less(g.ids[a], g.ids[b]);
  });
  std::vector<char> chosen(g.size(), 0);
  std::size_t taken = 0;
  const std::size_t want = std::min(top_n, g.size());
  if (g.has_hemispheres()) {
    std::map<std::string, std::size_t> quota;
    for (const auto& h : g.hemisphere) quota[h] = 0;
    std::size_t rem = want % quota.size();
    for (auto& [h, q] : quota) {
      q = want / quota.size() + (rem ? 1 : 0);
      if (rem) --rem;
    }
    for (std::size_t v : order) {
      if (std::isinf(sel.scores[v])) continue;
      auto& q = quota[g.hemisphere[v]];
      if (q == 0) continue;
      --q;
      chosen[v] = 1;
      ++taken;
    }
  }
  // Fill any remaining slots (untagged geometry, or a hemisphere short of vertices).
  for (std::size_t v : order) {
    if (taken >= want) break;
    if (chosen[v] || std::isinf(sel.scores[v])) continue;
    chosen[v] = 1;
    ++taken;
  }
  for (std::size_t v = 0; v < g.size(); ++v) {
    if (chosen[v]) sel.selected.push_back(g.ids[v]);
  }
  return sel;
}

struct SearchlightRecord {
  std::string vertex;
  std::size_t neighborhood = 0;
  double re_an = nan_value;
  double re_ai = nan_value;
};

/// RE-AN and RE-AI similarity maps from a disk centred on every vertex.
inline std::vector<SearchlightRecord> searchlight(const ActivationMatrix& re, const ActivationMatrix& an,
                                                  const ActivationMatrix& ai, const VertexGeometry& g, double radius,
                                                  RdmMetric metric = RdmMetric::correlation) {
  g.validate();
  const auto cre = columns_for_geometry(g, re);
  const auto can = columns_for_geometry(g, an);
  const auto cai = columns_for_geometry(g, ai);
  const auto hoods = neighborhoods_grid(g, radius);
  std::vector<SearchlightRecord> out(g.size());
  parallel_for(g.size(), [&](std::size_t v) {
    SearchlightRecord& rec = out[v];
    rec.vertex = g.ids[v];
    rec.neighborhood = hoods[v].size();
    if (hoods[v].size() < 2) return;
    std::vector<std::size_t> a, b, c;
    for (std::size_t j : hoods[v]) {
      a.push_back(cre[j]);
      b.push_back(can[j]);
      c.push_back(cai[j]);
    }
    const SimilarityPair sp = similarity_pair(re.select_columns(a), an.select_columns(b), ai.select_columns(c), metric);
    rec.re_an = sp.re_an.rho;
    rec.re_ai = sp.re_ai.rho;
  });
  return out;
}

}  // namespace advrsa
