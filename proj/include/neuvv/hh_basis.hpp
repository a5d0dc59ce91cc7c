#pragma once

/// \file
/// Real-valued 4D hyperspherical harmonics.
///
/// A basis function is indexed by (n, l, m) with 0 <= l <= n and -l <= m <= l
/// and evaluated either from hyper angles (theta, phi, gamma) or from a unit
/// 4-vector x with
///
///     x1 = cos(gamma)
///     x2 = sin(gamma) cos(theta)
///     x3 = sin(gamma) sin(theta) cos(phi)
///     x4 = sin(gamma) sin(theta) sin(phi)
///
/// With gamma fixed, every basis function is a 3D real spherical harmonic
/// Y_lm(theta, phi) scaled by a gamma-only factor; the renderer relies on this
/// to slice a time instant into plain SH coefficients.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "neuvv/errors.hpp"

namespace neuvv {

struct HHIndex {
  int n = 0;
  int l = 0;
  int m = 0;

  constexpr bool valid() const { return n >= 0 && l >= 0 && l <= n && m >= -l && m <= l; }
  friend constexpr bool operator==(const HHIndex&, const HHIndex&) = default;
};

struct HyperDirection {
  double theta = 0.0;  // [0, pi]
  double phi = 0.0;    // [0, 2 pi)
  double gamma = 0.0;  // [0, pi]
};

using Vec4d = std::array<double, 4>;

inline Vec4d to_cartesian(const HyperDirection& d) {
  const double sg = std::sin(d.gamma);
  const double st = std::sin(d.theta);
  return {std::cos(d.gamma), sg * std::cos(d.theta), sg * st * std::cos(d.phi),
          sg * st * std::sin(d.phi)};
}

/// Inverse of to_cartesian. At the coordinate singularities the undefined
/// angles are reported as 0.
inline HyperDirection to_hyper_angles(const Vec4d& x) {
  HyperDirection d;
  const double r3 = std::sqrt(x[1] * x[1] + x[2] * x[2] + x[3] * x[3]);
  d.gamma = std::atan2(r3, x[0]);
  const double r2 = std::sqrt(x[2] * x[2] + x[3] * x[3]);
  d.theta = std::atan2(r2, x[1]);
  double phi = std::atan2(x[3], x[2]);
  if (phi < 0.0) phi += 2.0 * std::numbers::pi;
  d.phi = phi;
  return d;
}

/// Number of basis functions with n <= n_max.
constexpr int basis_count(int n_max) {
  int k = 0;
  for (int n = 0; n <= n_max; ++n) k += (n + 1) * (n + 1);
  return k;
}

/// Inverse of basis_count; throws if `count` is not a valid truncation size.
inline int n_max_for_count(int count) {
  for (int n = 0; basis_count(n) <= count; ++n)
    if (basis_count(n) == count) return n;
  throw InvalidArgument("basis count " + std::to_string(count) +
                        " is not a sum of (n+1)^2 for any n_max");
}

struct BasisTruncation {
  int n_max = 2;

  constexpr int count() const { return basis_count(n_max); }
  constexpr int sh_count() const { return (n_max + 1) * (n_max + 1); }

  /// Canonical order: lexicographic in (n, l, m).
  std::vector<HHIndex> indices() const {
    std::vector<HHIndex> out;
    out.reserve(static_cast<std::size_t>(count()));
    for (int n = 0; n <= n_max; ++n)
      for (int l = 0; l <= n; ++l)
        for (int m = -l; m <= l; ++m) out.push_back({n, l, m});
    return out;
  }
};

/// Position of (l, m) in a flat SH coefficient vector.
constexpr int sh_slot(int l, int m) { return l * l + l + m; }

// ---------------------------------------------------------------------------
// Scalar ingredients

/// Gegenbauer polynomial C^alpha_degree(x) by the three-term recurrence.
inline double gegenbauer(double alpha, int degree, double x) {
  if (degree == 0) return 1.0;
  double c0 = 1.0;
  double c1 = 2.0 * alpha * x;
  for (int d = 2; d <= degree; ++d) {
    const double c2 = (2.0 * x * (d + alpha - 1.0) * c1 - (d + 2.0 * alpha - 2.0) * c0) / d;
    c0 = c1;
    c1 = c2;
  }
  return c1;
}

/// d/dx C^alpha_d(x) = 2 alpha C^{alpha+1}_{d-1}(x).
inline double gegenbauer_derivative(double alpha, int degree, double x) {
  if (degree == 0) return 0.0;
  return 2.0 * alpha * gegenbauer(alpha + 1.0, degree - 1, x);
}

/// Associated Legendre function P^m_l(x) for m >= 0, without the
/// Condon-Shortley phase (the phase is carried by the SH normalization).
inline double assoc_legendre(int l, int m, double x) {
  double pmm = 1.0;
  if (m > 0) {
    const double s = std::sqrt(std::max(0.0, (1.0 - x) * (1.0 + x)));
    double fact = 1.0;
    for (int i = 1; i <= m; ++i) {
      pmm *= fact * s;
      fact += 2.0;
    }
  }
  if (l == m) return pmm;
  double pmm1 = x * (2.0 * m + 1.0) * pmm;
  if (l == m + 1) return pmm1;
  double pll = 0.0;
  for (int ll = m + 2; ll <= l; ++ll) {
    pll = (x * (2.0 * ll - 1.0) * pmm1 - (ll + m - 1.0) * pmm) / (ll - m);
    pmm = pmm1;
    pmm1 = pll;
  }
  return pll;
}

inline double log_factorial(int n) { return std::lgamma(static_cast<double>(n) + 1.0); }

inline double factorial(int n) {
  if (n > 20) return std::exp(log_factorial(n));
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

/// (2l)!! = 2^l l!, with 0!! = 1.
inline double double_factorial_even(int l) { return std::ldexp(factorial(l), l); }

/// sqrt((2l+1)/(4 pi) (l-|m|)!/(l+|m|)!), i.e. |K^m_l| without the phase.
inline double sh_norm(int l, int m) {
  const int am = m < 0 ? -m : m;
  const double ratio = std::exp(log_factorial(l - am) - log_factorial(l + am));
  return std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi) * ratio);
}

/// Real spherical harmonic Y_lm(theta, phi).
///
/// Built from complex harmonics K^m_l P^m_l(cos theta) e^{i m phi} whose
/// normalization carries (-1)^m, combined as
///   m > 0:  (Y^m + (-1)^m Y^-m) / sqrt(2)   = sqrt(2) Re Y^m
///   m < 0:  the imaginary counterpart         = sqrt(2) Im Y^|m|
inline double real_sh(int l, int m, double theta, double phi) {
  const int am = m < 0 ? -m : m;
  const double p = assoc_legendre(l, am, std::cos(theta));
  const double k = sh_norm(l, m);
  if (m == 0) return k * p;
  const double phase = (am & 1) ? -1.0 : 1.0;
  const double trig = m > 0 ? std::cos(am * phi) : std::sin(am * phi);
  return std::numbers::sqrt2 * phase * k * p * trig;
}

/// HH normalization A_{n,l} = (2l)!! sqrt(2 (n+1) (n-l)! / (pi (n+l+1)!)).
inline double hh_norm(int n, int l) {
  const double log_ratio = log_factorial(n - l) - log_factorial(n + l + 1);
  return double_factorial_even(l) *
         std::sqrt(2.0 * (n + 1) / std::numbers::pi * std::exp(log_ratio));
}

/// Gamma-only factor g_nl(gamma) = A_{n,l} sin^l(gamma) C^{l+1}_{n-l}(cos gamma).
inline double hh_radial(int n, int l, double gamma) {
  return hh_norm(n, l) * std::pow(std::sin(gamma), l) * gegenbauer(l + 1.0, n - l, std::cos(gamma));
}

/// d g_nl / d gamma.
inline double hh_radial_derivative(int n, int l, double gamma) {
  const double s = std::sin(gamma);
  const double c = std::cos(gamma);
  const double geg = gegenbauer(l + 1.0, n - l, c);
  const double dgeg = gegenbauer_derivative(l + 1.0, n - l, c);
  double d = -std::pow(s, l + 1) * dgeg;
  if (l > 0) d += l * std::pow(s, l - 1) * c * geg;
  return hh_norm(n, l) * d;
}

/// Real HH in hyperspherical form.
inline double real_hh(const HHIndex& idx, const HyperDirection& dir) {
  return hh_radial(idx.n, idx.l, dir.gamma) * real_sh(idx.l, idx.m, dir.theta, dir.phi);
}

/// Real HH evaluated directly on a unit 4-vector.
///
/// Uses the separated Cartesian form with the powers of sin(gamma) folded
/// into a homogeneous polynomial in (x2, x3, x4), so the evaluation has no
/// singularity at the poles. Agrees with real_hh(idx, to_hyper_angles(x)).
inline double real_hh_cartesian(const HHIndex& idx, const Vec4d& x, double unit_tol = 1e-9) {
  const double norm2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3];
  if (std::abs(std::sqrt(norm2) - 1.0) > unit_tol)
    throw InvalidArgument("real_hh_cartesian: input is not a unit 4-vector (|x| = " +
                          std::to_string(std::sqrt(norm2)) + ")");
  const int l = idx.l;
  const int am = idx.m < 0 ? -idx.m : idx.m;

  // A_m + i B_m = (x3 + i x4)^m
  double re = 1.0;
  double im = 0.0;
  for (int p = 0; p < am; ++p) {
    const double nr = re * x[2] - im * x[3];
    im = re * x[3] + im * x[2];
    re = nr;
  }

  // sum_k B_{k,lm} x2^{l-2k-m} rho^k with rho = x2^2 + x3^2 + x4^2
  const double rho = x[1] * x[1] + x[2] * x[2] + x[3] * x[3];
  double poly = 0.0;
  for (int k = 0; k <= (l - am) / 2; ++k) {
    const double log_b = log_factorial(l) - log_factorial(k) - log_factorial(l - k) +
                         log_factorial(2 * l - 2 * k) - log_factorial(l) - log_factorial(l - 2 * k) +
                         log_factorial(l - 2 * k) - log_factorial(l - 2 * k - am);
    const double b = ((k & 1) ? -1.0 : 1.0) * std::ldexp(std::exp(log_b), -l);
    poly += b * std::pow(x[1], l - 2 * k - am) * std::pow(rho, k);
  }

  double y = sh_norm(l, am) * poly;
  if (idx.m > 0) y *= std::numbers::sqrt2 * ((am & 1) ? -1.0 : 1.0) * re;
  if (idx.m < 0) y *= std::numbers::sqrt2 * ((am & 1) ? -1.0 : 1.0) * im;
  return hh_norm(idx.n, l) * gegenbauer(l + 1.0, idx.n - l, x[0]) * y;
}

/// All K basis values at `dir`, in canonical order.
inline std::vector<double> eval_basis_vector(const BasisTruncation& trunc, const HyperDirection& dir) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(trunc.count()));
  for (const auto& idx : trunc.indices()) out.push_back(real_hh(idx, dir));
  return out;
}

/// Real SH values for l <= l_max at a unit 3D direction (cos theta = dz).
/// Directions are mapped as theta = acos(d.z), phi = atan2(d.y, d.x).
inline void eval_sh(int l_max, double dx, double dy, double dz, std::span<double> out) {
  const double theta = std::acos(std::clamp(dz, -1.0, 1.0));
  const double phi = std::atan2(dy, dx);
  for (int l = 0; l <= l_max; ++l)
    for (int m = -l; m <= l; ++m) out[static_cast<std::size_t>(sh_slot(l, m))] = real_sh(l, m, theta, phi);
}

/// Precomputed (n, l, m) bookkeeping for a truncation, used by the decoders.
struct BasisTable {
  BasisTruncation trunc;
  std::vector<HHIndex> index;    // per basis
  std::vector<int> radial_slot;  // per basis: position of (n, l) in the radial table
  std::vector<int> sh;           // per basis: sh_slot(l, m)
  std::vector<std::array<int, 2>> radial_nl;
  std::vector<double> radial_norm;  // A_{n,l} per radial slot

  static constexpr int kMaxNMax = 9;

  explicit BasisTable(BasisTruncation t = {}) : trunc(t), index(t.indices()) {
    if (t.n_max < 0 || t.n_max > kMaxNMax)
      throw InvalidArgument("BasisTable: n_max must be in [0, " + std::to_string(kMaxNMax) + "]");
    for (int n = 0; n <= t.n_max; ++n)
      for (int l = 0; l <= n; ++l) {
        radial_nl.push_back({n, l});
        radial_norm.push_back(hh_norm(n, l));
      }
    for (const auto& i : index) {
      sh.push_back(sh_slot(i.l, i.m));
      radial_slot.push_back(i.n * (i.n + 1) / 2 + i.l);
    }
  }

  int count() const { return static_cast<int>(index.size()); }
  int radial_count() const { return static_cast<int>(radial_nl.size()); }
  int sh_count() const { return trunc.sh_count(); }

  void radial(double gamma, std::span<double> g) const {
    const double s = std::sin(gamma);
    const double c = std::cos(gamma);
    for (std::size_t i = 0; i < radial_nl.size(); ++i) {
      const auto [n, l] = radial_nl[i];
      double sl = 1.0;
      for (int p = 0; p < l; ++p) sl *= s;
      g[i] = radial_norm[i] * sl * gegenbauer(l + 1.0, n - l, c);
    }
  }

  void radial_derivative(double gamma, std::span<double> dg) const {
    const double s = std::sin(gamma);
    const double c = std::cos(gamma);
    for (std::size_t i = 0; i < radial_nl.size(); ++i) {
      const auto [n, l] = radial_nl[i];
      double sl1 = 1.0;  // s^(l-1)
      for (int p = 1; p < l; ++p) sl1 *= s;
      const double geg = gegenbauer(l + 1.0, n - l, c);
      const double dgeg = gegenbauer_derivative(l + 1.0, n - l, c);
      double d = -(l > 0 ? sl1 * s * s : s) * dgeg;
      if (l > 0) d += l * sl1 * c * geg;
      dg[i] = radial_norm[i] * d;
    }
  }
};

/// Monte-Carlo estimate of the basis Gram matrix over the unit 3-sphere:
/// G_ab = |S^3| E[H_a H_b] with points drawn uniformly (normalized Gaussian
/// 4-vectors), which is the measure sin^2(gamma) sin(theta).
struct GramReport {
  int count = 0;
  std::size_t samples = 0;
  std::vector<double> gram;  // count x count, row-major
  double max_deviation = 0.0;  // max |G - I|
};

inline GramReport monte_carlo_gram(const BasisTruncation& trunc, std::size_t samples, std::uint64_t seed) {
  if (samples == 0) throw InvalidArgument("monte_carlo_gram: need at least one sample");
  const int K = trunc.count();
  const auto idx = trunc.indices();
  GramReport r;
  r.count = K;
  r.samples = samples;
  r.gram.assign(static_cast<std::size_t>(K * K), 0.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> h(static_cast<std::size_t>(K));
  for (std::size_t s = 0; s < samples; ++s) {
    Vec4d x{g(rng), g(rng), g(rng), g(rng)};
    const double n = std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3]);
    for (double& v : x) v /= n;
    const HyperDirection d = to_hyper_angles(x);
    for (int k = 0; k < K; ++k) h[static_cast<std::size_t>(k)] = real_hh(idx[static_cast<std::size_t>(k)], d);
    for (int a = 0; a < K; ++a)
      for (int b = a; b < K; ++b) r.gram[static_cast<std::size_t>(a * K + b)] += h[static_cast<std::size_t>(a)] * h[static_cast<std::size_t>(b)];
  }
  const double scale = 2.0 * std::numbers::pi * std::numbers::pi / static_cast<double>(samples);
  for (int a = 0; a < K; ++a)
    for (int b = a; b < K; ++b) {
      const double v = r.gram[static_cast<std::size_t>(a * K + b)] * scale;
      r.gram[static_cast<std::size_t>(a * K + b)] = r.gram[static_cast<std::size_t>(b * K + a)] = v;
      r.max_deviation = std::max(r.max_deviation, std::abs(v - (a == b ? 1.0 : 0.0)));
    }
  return r;
}

}  // namespace neuvv
