#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "neuvv/hh_basis.hpp"

using namespace neuvv;

namespace {

constexpr double kPi = std::numbers::pi;

Vec4d random_unit4(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Vec4d x{g(rng), g(rng), g(rng), g(rng)};
  const double n = std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3]);
  for (auto& v : x) v /= n;
  return x;
}

// Gauss-Legendre nodes on [-1, 1] by Newton iteration on P_n.
void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
  x.resize(n);
  w.resize(n);
  for (int i = 0; i < n; ++i) {
    double z = std::cos(kPi * (i + 0.75) / (n + 0.5));
    double dp = 0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1, p1 = z;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2 * k - 1) * z * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (z * p1 - p0) / (z * z - 1);
      const double dz = p1 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-15) break;
    }
    x[i] = z;
    w[i] = 2 / ((1 - z * z) * dp * dp);
  }
}

}  // namespace

TEST(BasisCount, MatchesTruncationTable) {
  EXPECT_EQ(basis_count(1), 5);
  EXPECT_EQ(basis_count(2), 14);
  EXPECT_EQ(basis_count(3), 30);
  EXPECT_EQ(n_max_for_count(14), 2);
  EXPECT_THROW(n_max_for_count(13), InvalidArgument);
}

TEST(BasisCount, CanonicalOrderIsLexicographic) {
  const auto idx = BasisTruncation{2}.indices();
  ASSERT_EQ(idx.size(), 14u);
  for (std::size_t i = 1; i < idx.size(); ++i) {
    const auto& a = idx[i - 1];
    const auto& b = idx[i];
    EXPECT_TRUE(a.n < b.n || (a.n == b.n && (a.l < b.l || (a.l == b.l && a.m < b.m))));
    EXPECT_TRUE(b.valid());
  }
}

TEST(Gegenbauer, ChebyshevSecondKindIdentity) {
  // C^1_n(cos x) = sin((n+1)x) / sin x
  for (int n = 0; n < 8; ++n)
    for (double x : {0.1, 0.7, 1.3, 2.9}) EXPECT_NEAR(gegenbauer(1.0, n, std::cos(x)), std::sin((n + 1) * x) / std::sin(x), 1e-12);
}

TEST(Gegenbauer, LowDegreeClosedForms) {
  for (double a : {0.5, 1.0, 2.0, 3.0})
    for (double x : {-0.9, -0.2, 0.4, 1.0}) {
      EXPECT_NEAR(gegenbauer(a, 1, x), 2 * a * x, 1e-14);
      EXPECT_NEAR(gegenbauer(a, 2, x), 2 * a * (1 + a) * x * x - a, 1e-13);
      const double h = 1e-6;
      EXPECT_NEAR(gegenbauer_derivative(a, 3, x), (gegenbauer(a, 3, x + h) - gegenbauer(a, 3, x - h)) / (2 * h), 1e-6);
    }
}

TEST(AssocLegendre, ClosedFormsWithoutPhase) {
  for (double x : {-0.8, -0.1, 0.3, 0.95}) {
    const double s = std::sqrt(1 - x * x);
    EXPECT_NEAR(assoc_legendre(0, 0, x), 1.0, 1e-15);
    EXPECT_NEAR(assoc_legendre(1, 1, x), s, 1e-14);
    EXPECT_NEAR(assoc_legendre(2, 0, x), 0.5 * (3 * x * x - 1), 1e-14);
    EXPECT_NEAR(assoc_legendre(2, 1, x), 3 * x * s, 1e-14);
    EXPECT_NEAR(assoc_legendre(2, 2, x), 3 * (1 - x * x), 1e-14);
    EXPECT_NEAR(assoc_legendre(3, 1, x), 1.5 * (5 * x * x - 1) * s, 1e-13);
  }
}

TEST(RealSH, CartesianClosedForms) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  const double c0 = 0.5 / std::sqrt(kPi);
  const double c1 = std::sqrt(3 / (4 * kPi));
  const double c2 = 0.5 * std::sqrt(15 / kPi);
  for (int i = 0; i < 50; ++i) {
    const double th = std::acos(2 * u(rng) - 1);
    const double ph = 2 * kPi * u(rng);
    const double x = std::sin(th) * std::cos(ph), y = std::sin(th) * std::sin(ph), z = std::cos(th);
    EXPECT_NEAR(real_sh(0, 0, th, ph), c0, 1e-14);
    EXPECT_NEAR(real_sh(1, -1, th, ph), -c1 * y, 1e-14);
    EXPECT_NEAR(real_sh(1, 0, th, ph), c1 * z, 1e-14);
    EXPECT_NEAR(real_sh(1, 1, th, ph), -c1 * x, 1e-14);
    EXPECT_NEAR(real_sh(2, -2, th, ph), c2 * x * y, 1e-13);
    EXPECT_NEAR(real_sh(2, 2, th, ph), 0.5 * c2 * (x * x - y * y), 1e-13);
  }
}

TEST(RealSH, OrthonormalByQuadrature) {
  // Gauss-Legendre in cos(theta) times a uniform rule in phi is exact for
  // these band-limited products.
  std::vector<double> xs, ws;
  gauss_legendre(16, xs, ws);
  const int nphi = 32, lmax = 3;
  const int S = (lmax + 1) * (lmax + 1);
  std::vector<double> gram(S * S, 0.0), y(S);
  for (std::size_t i = 0; i < xs.size(); ++i)
    for (int k = 0; k < nphi; ++k) {
      const double th = std::acos(xs[i]), ph = 2 * kPi * (k + 0.5) / nphi;
      for (int l = 0; l <= lmax; ++l)
        for (int m = -l; m <= l; ++m) y[sh_slot(l, m)] = real_sh(l, m, th, ph);
      const double w = ws[i] * 2 * kPi / nphi;
      for (int a = 0; a < S; ++a)
        for (int b = 0; b < S; ++b) gram[a * S + b] += w * y[a] * y[b];
    }
  for (int a = 0; a < S; ++a)
    for (int b = 0; b < S; ++b) EXPECT_NEAR(gram[a * S + b], a == b ? 1.0 : 0.0, 1e-12) << a << "," << b;
}

TEST(HHNorm, ClosedFormValues) {
  EXPECT_NEAR(hh_norm(0, 0), std::sqrt(2 / kPi), 1e-15);
  EXPECT_NEAR(hh_norm(1, 0), std::sqrt(2 / kPi), 1e-15);
  EXPECT_NEAR(hh_norm(1, 1), 2 * std::sqrt(2 / (3 * kPi)), 1e-15);
}

TEST(HHRadial, OrthonormalUnderSinSquaredWeight) {
  // int_0^pi g_nl g_n'l sin^2(gamma) dgamma = delta_nn' for each l.
  std::vector<double> xs, ws;
  gauss_legendre(40, xs, ws);
  for (int l = 0; l <= 3; ++l)
    for (int n = l; n <= 4; ++n)
      for (int n2 = l; n2 <= 4; ++n2) {
        double s = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
          const double g = 0.5 * kPi * (xs[i] + 1);
          s += 0.5 * kPi * ws[i] * hh_radial(n, l, g) * hh_radial(n2, l, g) * std::sin(g) * std::sin(g);
        }
        EXPECT_NEAR(s, n == n2 ? 1.0 : 0.0, 1e-11) << "l=" << l << " n=" << n << " n'=" << n2;
      }
}

TEST(HHRadial, DerivativeMatchesFiniteDifference) {
  const BasisTable table(BasisTruncation{3});
  std::vector<double> d(table.radial_count()), gp(table.radial_count()), gm(table.radial_count());
  for (double g : {0.05, 0.8, 1.6, 2.7, 3.1}) {
    table.radial_derivative(g, d);
    const double h = 1e-6;
    table.radial(g + h, gp);
    table.radial(g - h, gm);
    for (int i = 0; i < table.radial_count(); ++i) {
      EXPECT_NEAR(d[i], (gp[i] - gm[i]) / (2 * h), 1e-7);
      EXPECT_NEAR(d[i], hh_radial_derivative(table.radial_nl[i][0], table.radial_nl[i][1], g), 1e-12);
    }
  }
}

TEST(HHRadial, TableMatchesScalarEvaluation) {
  const BasisTable table(BasisTruncation{4});
  std::vector<double> g(table.radial_count());
  for (double gamma : {0.0, 0.3, 1.0, 2.2, kPi}) {
    table.radial(gamma, g);
    for (int i = 0; i < table.radial_count(); ++i)
      EXPECT_NEAR(g[i], hh_radial(table.radial_nl[i][0], table.radial_nl[i][1], gamma), 1e-13);
  }
}

TEST(HHCartesian, AgreesWithAngularFormAtRandomPoints) {
  std::mt19937_64 rng(11);
  const auto idx = BasisTruncation{3}.indices();
  for (int i = 0; i < 500; ++i) {
    const Vec4d x = random_unit4(rng);
    const HyperDirection d = to_hyper_angles(x);
    for (const auto& k : idx) EXPECT_NEAR(real_hh_cartesian(k, x), real_hh(k, d), 1e-10);
  }
}

TEST(HHCartesian, FiniteAtThePoles) {
  const auto idx = BasisTruncation{2}.indices();
  for (const Vec4d& x : {Vec4d{1, 0, 0, 0}, Vec4d{-1, 0, 0, 0}, Vec4d{0, 1, 0, 0}, Vec4d{0, -1, 0, 0}})
    for (const auto& k : idx) {
      const double v = real_hh_cartesian(k, x);
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_NEAR(v, real_hh(k, to_hyper_angles(x)), 1e-12);
    }
}

TEST(HHCartesian, RejectsNonUnitInput) {
  EXPECT_THROW(real_hh_cartesian(HHIndex{0, 0, 0}, Vec4d{1.1, 0, 0, 0}), InvalidArgument);
}

TEST(HyperAngles, RoundTripProperty) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const Vec4d x = random_unit4(rng);
    const Vec4d y = to_cartesian(to_hyper_angles(x));
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(x[k], y[k], 1e-12);
  }
}

TEST(HHBasis, SliceFactorization) {
  // With gamma fixed, H_nlm is g_nl(gamma) times Y_lm.
  const HyperDirection d{0.9, 2.1, 1.3};
  for (const auto& k : BasisTruncation{2}.indices())
    EXPECT_NEAR(real_hh(k, d), hh_radial(k.n, k.l, d.gamma) * real_sh(k.l, k.m, d.theta, d.phi), 1e-15);
}

TEST(BasisTable, RejectsOversizedTruncation) {
  EXPECT_THROW(BasisTable(BasisTruncation{BasisTable::kMaxNMax + 1}), InvalidArgument);
}

TEST(EvalSH, MatchesAngularEvaluation) {
  std::vector<double> sh(16);
  const double th = 1.1, ph = -2.0;
  eval_sh(3, std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th), sh);
  for (int l = 0; l <= 3; ++l)
    for (int m = -l; m <= l; ++m) EXPECT_NEAR(sh[sh_slot(l, m)], real_sh(l, m, th, ph), 1e-14);
}

TEST(HHGram, MonteCarloIsNearIdentity) {
  const auto r = monte_carlo_gram(BasisTruncation{2}, 200000, 3);
  EXPECT_EQ(r.count, 14);
  EXPECT_LT(r.max_deviation, 2e-2);
  for (int a = 0; a < 14; ++a)
    for (int b = 0; b < 14; ++b) EXPECT_EQ(r.gram[a * 14 + b], r.gram[b * 14 + a]);
  EXPECT_THROW(monte_carlo_gram(BasisTruncation{1}, 0, 1), InvalidArgument);
}
