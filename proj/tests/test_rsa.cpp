#include "oracles.hpp"

#include <advrsa/parallel.hpp>
#include <advrsa/rsa.hpp>
#include <advrsa/stats.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace advrsa;

namespace {

ActivationMatrix random_matrix(std::size_t k, std::size_t u, std::uint64_t seed, const std::string& src = "m") {
  Engine eng = make_engine(seed, {0x55});
  std::normal_distribution<double> n;
  ActivationMatrix m;
  m.source = src;
  for (std::size_t i = 0; i < k; ++i) m.stimulus_ids.push_back("s" + std::to_string(i));
  for (std::size_t j = 0; j < u; ++j) m.unit_ids.push_back(std::to_string(j));
  for (std::size_t i = 0; i < k * u; ++i) m.values.push_back(n(eng));
  return m;
}

double pearson_loop(std::span<const double> a, std::span<const double> b) {
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= a.size();
  mb /= b.size();
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return static_cast<double>(sab / std::sqrt(saa * sbb));
}

std::vector<double> lower_triangle(const Rdm& r) {
  std::vector<double> v;
  for (std::size_t i = 1; i < r.size(); ++i)
    for (std::size_t j = 0; j < i; ++j) v.push_back(r.at(i, j));
  return v;
}

}  // namespace

TEST(Rdm, DuplicateRowsAreAtZeroAndNegatedRowsAtTwo) {
  ActivationMatrix m = random_matrix(3, 6, 1);
  for (std::size_t c = 0; c < 6; ++c) {
    m.at(1, c) = m.at(0, c);
    m.at(2, c) = -m.at(0, c) + 4.0;
  }
  const Rdm r = compute_rdm(m);
  EXPECT_NEAR(r.at(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(r.at(0, 2), 2.0, 1e-12);
  EXPECT_NEAR(r.at(1, 2), 2.0, 1e-12);
}

TEST(Rdm, MatchesPerPairPearsonOracle) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const ActivationMatrix m = random_matrix(3 + seed % 5, 4 + seed % 7, seed);
    const Rdm r = compute_rdm(m);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      EXPECT_EQ(r.at(i, i), 0.0);
      for (std::size_t j = 0; j < m.rows(); ++j) {
        EXPECT_EQ(r.at(i, j), r.at(j, i));
        if (i != j) {
          EXPECT_NEAR(r.at(i, j), 1.0 - pearson_loop(m.row(i), m.row(j)), 1e-12);
          EXPECT_GE(r.at(i, j), 0.0);
        }
      }
    }
  }
}

TEST(Rdm, EuclideanMatchesLoop) {
  const ActivationMatrix m = random_matrix(5, 7, 3);
  const Rdm r = compute_rdm(m, RdmMetric::euclidean);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) s += (m.at(i, c) - m.at(j, c)) * (m.at(i, c) - m.at(j, c));
      EXPECT_NEAR(r.at(i, j), std::sqrt(s), 1e-12);
    }
  }
}

TEST(Rdm, InvariantToColumnPermutation) {
  const ActivationMatrix m = random_matrix(8, 11, 4);
  std::vector<std::size_t> perm = detail::identity_index(11);
  Engine eng = make_engine(9);
  std::shuffle(perm.begin(), perm.end(), eng);
  const Rdm a = compute_rdm(m), b = compute_rdm(m.select_columns(perm));
  for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-12);
}

TEST(Rdm, ZeroVarianceRowsAreFlaggedAndExcluded) {
  ActivationMatrix m = random_matrix(5, 4, 5);
  for (std::size_t c = 0; c < 4; ++c) m.at(2, c) = 1.5;
  const Rdm r = compute_rdm(m);
  EXPECT_EQ(r.undefined_count(), 1u);
  EXPECT_TRUE(std::isnan(r.at(2, 0)));
  const RdmComparison c = compare_rdms(r, compute_rdm(random_matrix(5, 4, 6)));
  EXPECT_EQ(c.pairs_excluded, 4u);
  EXPECT_EQ(c.pairs_used, 6u);
  EXPECT_THROW(compute_rdm(random_matrix(3, 1, 1)), std::invalid_argument);
}

TEST(CompareRdms, IdentityReversalAndOracle) {
  const Rdm a = compute_rdm(random_matrix(6, 9, 7));
  EXPECT_NEAR(compare_rdms(a, a).rho, 1.0, 1e-12);
  Rdm rev = a;
  for (double& v : rev.values) v = 5.0 - v;
  EXPECT_NEAR(compare_rdms(a, rev).rho, -1.0, 1e-12);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Rdm x = compute_rdm(random_matrix(6, 5, 100 + seed)), y = compute_rdm(random_matrix(6, 5, 200 + seed));
    const RdmComparison c = compare_rdms(x, y);
    EXPECT_EQ(c.pairs_used, 15u);
    EXPECT_NEAR(c.rho, oracle::spearman(lower_triangle(x), lower_triangle(y)), 1e-12);
  }
}

TEST(CompareRdms, TiesUseAverageRanks) {
  const std::vector<double> a{1, 2, 2, 3, 3, 3, 4}, b{7, 1, 5, 2, 2, 6, 0};
  EXPECT_NEAR(spearman(a, b), oracle::spearman(a, b), 1e-12);
  EXPECT_EQ(average_ranks(a), (std::vector<double>{1, 2.5, 2.5, 5, 5, 5, 7}));
}

TEST(CompareRdms, InvariantToMonotoneTransform) {
  const Rdm a = compute_rdm(random_matrix(7, 6, 8)), b = compute_rdm(random_matrix(7, 6, 9));
  Rdm t = b;
  for (double& v : t.values) v = std::exp(3.0 * v) + 2.0;
  EXPECT_NEAR(compare_rdms(a, b).rho, compare_rdms(a, t).rho, 1e-12);
}

TEST(CompareRdms, RejectsMismatchedIds) {
  const Rdm a = compute_rdm(random_matrix(4, 3, 1));
  Rdm b = a;
  b.ids[0] = "other";
  EXPECT_THROW(compare_rdms(a, b), std::invalid_argument);
}

TEST(SimilarityPair, IdentityAndOrdering) {
  const ActivationMatrix re = random_matrix(10, 8, 1, "re");
  const ActivationMatrix noise = random_matrix(10, 8, 2, "an");
  const SimilarityPair sp = similarity_pair(re, noise, re);
  EXPECT_NEAR(sp.re_ai.rho, 1.0, 1e-12);
  EXPECT_GT(sp.re_ai.rho, sp.re_an.rho);
  EXPECT_EQ(sp.source_an, "an");
  EXPECT_NEAR(similarity_pair(re, re, noise).re_an.rho, 1.0, 1e-12);
}

TEST(SimilarityPair, InvariantToJointStimulusReorder) {
  const ActivationMatrix re = random_matrix(9, 5, 3), an = random_matrix(9, 5, 4), ai = random_matrix(9, 5, 5);
  std::vector<std::size_t> perm = detail::identity_index(9);
  Engine eng = make_engine(2);
  std::shuffle(perm.begin(), perm.end(), eng);
  const SimilarityPair a = similarity_pair(re, an, ai);
  const SimilarityPair b = similarity_pair(re.select_rows(perm), an.select_rows(perm), ai.select_rows(perm));
  EXPECT_NEAR(a.re_an.rho, b.re_an.rho, 1e-12);
  EXPECT_NEAR(a.re_ai.rho, b.re_ai.rho, 1e-12);
}

TEST(PermutationNull, SelfSimilarityHasMinimalPValue) {
  const ActivationMatrix re = random_matrix(12, 6, 1);
  const PermutationResult r = permutation_null(re, re, 1000, 3);
  EXPECT_NEAR(r.observed, 1.0, 1e-12);
  const auto ties = std::count_if(r.null_samples.begin(), r.null_samples.end(), [](double v) { return v >= 1.0 - 1e-12; });
  EXPECT_DOUBLE_EQ(r.p_value, (1.0 + static_cast<double>(ties)) / 1001.0);
  EXPECT_LE(r.p_value, 2.0 / 1001.0);
  EXPECT_TRUE(r.warning.empty());
  EXPECT_FALSE(permutation_null(re, re, 50, 3).warning.empty());
}

TEST(PermutationNull, ReproducibleAndThreadIndependent) {
  const ActivationMatrix re = random_matrix(10, 6, 1), x = random_matrix(10, 6, 2);
  const std::size_t saved = thread_cap();
  thread_cap() = 1;
  const PermutationResult a = permutation_null(re, x, 300, 11);
  thread_cap() = 4;
  const PermutationResult b = permutation_null(re, x, 300, 11);
  thread_cap() = saved;
  EXPECT_EQ(a.null_samples, b.null_samples);
  EXPECT_EQ(a.p_value, b.p_value);
  EXPECT_GT(a.p_value, 0.0);
  EXPECT_LE(a.p_value, 1.0);
}

TEST(PermutationNull, IndependentDataIsRarelySignificant) {
  std::size_t significant = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const PermutationResult r = permutation_null(random_matrix(10, 6, 2 * seed), random_matrix(10, 6, 2 * seed + 1), 200, seed);
    significant += r.p_value < 0.05;
  }
  EXPECT_LE(significant, 10u);
}

TEST(PermutationNull, PValuesAreCalibrated) {
  std::vector<double> p;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    p.push_back(permutation_null(random_matrix(10, 5, 1000 + seed), random_matrix(10, 5, 5000 + seed), 200, seed).p_value);
  }
  EXPECT_LT(ks_uniform_statistic(p), 1.358 / std::sqrt(200.0));
}

TEST(Bootstrap, IdenticalAiBeatsNoiseAn) {
  const ActivationMatrix re = random_matrix(20, 10, 1);
  const BootstrapResult b = bootstrap_diff(re, random_matrix(20, 10, 2), re, 500, 4);
  EXPECT_GT(b.delta, 0.0);
  EXPECT_LT(b.p_value, 0.01);
  ASSERT_EQ(b.delta_ci.size(), 2u);
  EXPECT_EQ(b.delta_ci[1].level, 0.95);
  EXPECT_LE(b.delta_ci[1].lower, b.delta);
  EXPECT_GE(b.delta_ci[1].upper, b.delta);
  EXPECT_LE(b.delta_ci[1].lower, b.delta_ci[0].lower);
}

TEST(Bootstrap, EqualAnAndAiCentreAtZero) {
  const ActivationMatrix re = random_matrix(15, 8, 5), x = random_matrix(15, 8, 6);
  const BootstrapResult b = bootstrap_diff(re, x, x, 200, 7);
  for (double d : b.deltas) EXPECT_EQ(d, 0.0);
  EXPECT_EQ(b.delta, 0.0);
}

TEST(Bootstrap, ExcludesSelfPairsAndIsReproducible) {
  const ActivationMatrix re = random_matrix(6, 5, 1), an = random_matrix(6, 5, 2), ai = random_matrix(6, 5, 3);
  const Rdm r = compute_rdm(re), n = compute_rdm(an);
  const std::vector<std::size_t> pick{0, 0, 1, 2, 2, 2};
  const RdmComparison c = detail::compare_indexed(r, pick, n, pick);
  EXPECT_EQ(c.pairs_excluded, 1u + 3u);
  EXPECT_EQ(c.pairs_used, 15u - 4u);
  const BootstrapResult a = bootstrap_diff(re, an, ai, 100, 9), b = bootstrap_diff(re, an, ai, 100, 9);
  EXPECT_EQ(a.deltas.size(), 100u);
  for (std::size_t i = 0; i < 100; ++i) {
    if (std::isnan(a.deltas[i])) {
      EXPECT_TRUE(std::isnan(b.deltas[i]));
    } else {
      EXPECT_EQ(a.deltas[i], b.deltas[i]);
    }
  }
}

TEST(MannKendall, Examples) {
  const std::vector<double> inc{1, 2, 3, 4, 5, 6, 7, 8};
  EXPECT_EQ(mann_kendall(inc).s, 28);
  const std::vector<double> flat(8, 2.0);
  const MannKendallResult f = mann_kendall(flat);
  EXPECT_EQ(f.s, 0);
  EXPECT_EQ(f.p_two_sided, 1.0);
  const std::vector<double> pi{3, 1, 4, 1, 5, 9, 2, 6};
  EXPECT_EQ(mann_kendall(pi).s, oracle::mk_s(pi));
  EXPECT_THROW(mann_kendall(std::vector<double>{1, 2, 3}), std::invalid_argument);
}

TEST(MannKendall, MatchesPairLoopAndIsAntisymmetric) {
  Engine eng = make_engine(17);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 4 + eng() % 30;
    std::vector<double> x(n);
    for (double& v : x) v = static_cast<double>(eng() % 6);  // plenty of ties
    const MannKendallResult r = mann_kendall(x);
    ASSERT_EQ(r.s, oracle::mk_s(x));
    std::vector<double> rev(x.rbegin(), x.rend());
    ASSERT_EQ(mann_kendall(rev).s, -r.s);
  }
}

TEST(MannKendall, TieCorrectedVariance) {
  const std::vector<double> x{1, 1, 2, 3, 3, 3, 4};
  // n=7: 7*6*19 = 798; ties t=2 -> 18, t=3 -> 66
  EXPECT_DOUBLE_EQ(mann_kendall(x).variance, (798.0 - 18.0 - 66.0) / 18.0);
  const MannKendallResult r = mann_kendall(x);
  EXPECT_NEAR(r.z, (static_cast<double>(r.s) - 1.0) / std::sqrt(r.variance), 1e-15);
  EXPECT_NEAR(r.p_increasing + r.p_decreasing, 1.0, 1e-15);
}

namespace {

VertexGeometry grid_geometry(std::size_t side, double spacing, bool hemis) {
  VertexGeometry g;
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      g.ids.push_back(std::to_string(y * side + x));
      g.x_mm.push_back(spacing * static_cast<double>(x));
      g.y_mm.push_back(spacing * static_cast<double>(y));
      g.hemisphere.push_back(hemis ? (x < side / 2 ? "L" : "R") : "");
    }
  }
  return g;
}

ActivationMatrix vertex_matrix(const VertexGeometry& g, std::size_t k, std::uint64_t seed) {
  ActivationMatrix m = random_matrix(k, g.size(), seed);
  m.unit_ids = g.ids;
  return m;
}

}  // namespace

TEST(Neighborhoods, GridMatchesBruteForce) {
  Engine eng = make_engine(3);
  for (int t = 0; t < 20; ++t) {
    VertexGeometry g;
    for (int i = 0; i < 150; ++i) {
      g.ids.push_back(std::to_string(i));
      g.x_mm.push_back(20.0 * uniform01(eng) - 10.0);
      g.y_mm.push_back(20.0 * uniform01(eng) - 10.0);
      g.hemisphere.emplace_back();
    }
    const double radius = 0.5 + 3.0 * uniform01(eng);
    EXPECT_EQ(neighborhoods_grid(g, radius), neighborhoods_brute(g, radius));
  }
}

TEST(SelectVertices, IdenticalTrialsSelectFirstIds) {
  const VertexGeometry g = grid_geometry(6, 1.0, false);
  const ActivationMatrix t = vertex_matrix(g, 8, 1);
  const VertexSelection s = select_vertices(t, t, g, 1.5, 10);
  for (double v : s.scores) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(s.selected, std::vector<std::string>(g.ids.begin(), g.ids.begin() + 10));
  EXPECT_EQ(select_vertices(t, t, g, 1.5, g.size()).selected, g.ids);
}

TEST(SelectVertices, IndependentTrialsScoreNearZero) {
  const VertexGeometry g = grid_geometry(8, 1.0, false);
  const VertexSelection s = select_vertices(vertex_matrix(g, 12, 1), vertex_matrix(g, 12, 2), g, 2.0, 5);
  double m = 0;
  for (double v : s.scores) m += v;
  EXPECT_LT(std::abs(m / static_cast<double>(s.scores.size())), 0.1);
}

TEST(SelectVertices, SplitsAcrossHemispheresAndSkipsIsolated) {
  const VertexGeometry g = grid_geometry(6, 1.0, true);
  const ActivationMatrix t1 = vertex_matrix(g, 8, 3), t2 = vertex_matrix(g, 8, 4);
  const VertexSelection s = select_vertices(t1, t2, g, 1.5, 10);
  std::size_t left = 0;
  for (const auto& id : s.selected) left += std::stoul(id) % 6 < 3;
  EXPECT_EQ(left, 5u);
  EXPECT_EQ(s.selected.size(), 10u);
  const VertexSelection lonely = select_vertices(t1, t2, g, 0.5, 4);
  EXPECT_TRUE(lonely.selected.empty());
  for (double v : lonely.scores) EXPECT_TRUE(std::isinf(v));
}

TEST(Searchlight, TwoVertexDiskEqualsTwoUnitPair) {
  VertexGeometry g{{"a", "b"}, {0.0, 1.0}, {0.0, 0.0}, {"", ""}};
  ActivationMatrix re = random_matrix(7, 2, 1), an = random_matrix(7, 2, 2), ai = random_matrix(7, 2, 3);
  re.unit_ids = an.unit_ids = ai.unit_ids = g.ids;
  const auto map = searchlight(re, an, ai, g, 1.5);
  const SimilarityPair sp = similarity_pair(re, an, ai);
  for (const auto& rec : map) {
    EXPECT_EQ(rec.neighborhood, 2u);
    EXPECT_EQ(rec.re_an, sp.re_an.rho);
    EXPECT_EQ(rec.re_ai, sp.re_ai.rho);
  }
  EXPECT_TRUE(std::isnan(searchlight(re, an, ai, g, 0.5)[0].re_an));
}

TEST(Searchlight, TranslationInvariant) {
  VertexGeometry g = grid_geometry(5, 1.0, false);
  const ActivationMatrix re = vertex_matrix(g, 9, 1), an = vertex_matrix(g, 9, 2), ai = vertex_matrix(g, 9, 3);
  const auto a = searchlight(re, an, ai, g, 1.2);
  for (auto& x : g.x_mm) x += 0.25;
  for (auto& y : g.y_mm) y -= 0.25;
  const auto b = searchlight(re, an, ai, g, 1.2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].neighborhood, b[i].neighborhood);
    EXPECT_EQ(a[i].re_an, b[i].re_an);
    EXPECT_EQ(a[i].re_ai, b[i].re_ai);
  }
}

TEST(Geometry, ValidationErrors) {
  VertexGeometry g{{"a", "a"}, {0.0, 1.0}, {0.0, 0.0}, {"", ""}};
  EXPECT_THROW(g.validate(), std::invalid_argument);
  g.ids[1] = "b";
  g.x_mm[1] = NAN;
  EXPECT_THROW(g.validate(), std::invalid_argument);
  EXPECT_TRUE(vertex_id_less("9", "10"));
  EXPECT_TRUE(vertex_id_less("a10", "a9"));
}

TEST(MannKendall, BlockedSumsStatisticAndVariance) {
  const std::vector<double> a{1, 2, 3, 5, 4}, b{2, 1, 4, 3, 6}, c{5, 4, 3, 2, 1};
  const MannKendallResult ra = mann_kendall(a), rb = mann_kendall(b), rc = mann_kendall(c);
  const MannKendallResult all = mann_kendall_blocked({a, b, c});
  EXPECT_EQ(all.s, ra.s + rb.s + rc.s);
  EXPECT_DOUBLE_EQ(all.variance, ra.variance + rb.variance + rc.variance);
  EXPECT_NEAR(all.z, (static_cast<double>(all.s) - 1.0) / std::sqrt(all.variance), 1e-15);
  const MannKendallResult single = mann_kendall_blocked({a});
  EXPECT_EQ(single.s, ra.s);
  EXPECT_EQ(single.p_two_sided, ra.p_two_sided);
  // three strictly increasing length-5 blocks: S = 3 * 10, Var = 3 * (5 * 4 * 15) / 18
  const std::vector<double> up{1, 2, 3, 4, 5};
  const MannKendallResult u = mann_kendall_blocked({up, up, up});
  EXPECT_EQ(u.s, 30);
  EXPECT_DOUBLE_EQ(u.variance, 3.0 * 300.0 / 18.0);
  EXPECT_LT(u.p_two_sided, 0.01);
  EXPECT_THROW(mann_kendall_blocked({}), std::invalid_argument);
}
