#pragma once

/// \file
/// Decoding of a per-voxel coefficient vector into time-varying density,
/// hyper angle and view/time-dependent color.
///
/// Payload layout (stride 2C + 3K, plus 5 when edit channels are present):
///
///     [ w_sigma (C) | w_gamma (C) | w_hh (K x 3, basis-major) | edit (5) ]
///
/// Density and hyper angle are decoded through two basis matrices A, B of
/// shape T x C shared by all voxels of a tree:
///
///     sigma_t = max(0, (A w_sigma)_t)
///     gamma_t = pi * sigmoid((B w_gamma)_t)

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "neuvv/errors.hpp"
#include "neuvv/hh_basis.hpp"

namespace neuvv {

template <class Real>
inline Real sigmoid(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

template <class Real>
struct TemporalBases {
  int frames = 0;  // T
  int count = 0;   // C
  std::vector<Real> A;  // T x C row-major
  std::vector<Real> B;  // T x C row-major

  TemporalBases() = default;
  TemporalBases(int t, int c)
      : frames(t), count(c), A(static_cast<std::size_t>(t) * c), B(static_cast<std::size_t>(t) * c) {
    if (t < 1 || c < 1) throw InvalidArgument("TemporalBases: T and C must be positive");
  }

  Real a(int t, int c) const { return A[static_cast<std::size_t>(t) * count + c]; }
  Real b(int t, int c) const { return B[static_cast<std::size_t>(t) * count + c]; }
  std::span<const Real> a_row(int t) const { return {A.data() + static_cast<std::size_t>(t) * count, static_cast<std::size_t>(count)}; }
  std::span<const Real> b_row(int t) const { return {B.data() + static_cast<std::size_t>(t) * count, static_cast<std::size_t>(count)}; }

  /// More basis columns than frames; allowed, but the dictionary is then
  /// overcomplete.
  bool overcomplete() const { return count > frames; }

  template <class Other>
  TemporalBases<Other> cast() const {
    TemporalBases<Other> out;
    out.frames = frames;
    out.count = count;
    out.A.assign(A.begin(), A.end());
    out.B.assign(B.begin(), B.end());
    return out;
  }

  friend bool operator==(const TemporalBases&, const TemporalBases&) = default;
};

/// Raised-cosine bump dictionary: C-1 bumps with centers spread evenly over
/// frames [1, T] and one constant column (the last). Used for both A and B.
template <class Real>
TemporalBases<Real> make_bump_bases(int frames, int count) {
  TemporalBases<Real> tb(frames, count);
  const int bumps = count - 1;
  const double span = std::max(frames - 1, 1);
  const double spacing = bumps > 1 ? span / (bumps - 1) : span;
  const double half_width = std::max(2.0 * spacing, 1.0);
  for (int t = 0; t < frames; ++t) {
    const double frame = t + 1.0;
    for (int c = 0; c < count; ++c) {
      double v = 1.0;
      if (c < bumps) {
        const double center = 1.0 + (bumps > 1 ? c * spacing : 0.5 * span);
        const double u = (frame - center) / half_width;
        v = std::abs(u) < 1.0 ? 0.5 * (1.0 + std::cos(std::numbers::pi * u)) : 0.0;
      }
      tb.A[static_cast<std::size_t>(t) * count + c] = static_cast<Real>(v);
      tb.B[static_cast<std::size_t>(t) * count + c] = static_cast<Real>(v);
    }
  }
  return tb;
}

// ---------------------------------------------------------------------------
// Edit channels

struct EditChannels {
  std::array<float, 3> target_rgb{0.f, 0.f, 0.f};
  float target_density = 0.f;  // 0 keeps the decoded density
  int first_frame = -1;        // inclusive; -1 marks "no edit"
  int last_frame = -1;

  bool active(int frame) const { return first_frame >= 0 && frame >= first_frame && frame <= last_frame; }

  static constexpr int kMaxFrame = 4095;

  /// Frame range packed into one float channel, exact in f32.
  float encode_range() const {
    if (first_frame < 0) return -1.f;
    return static_cast<float>(first_frame + (kMaxFrame + 1) * last_frame);
  }

  static void decode_range(double v, int& first, int& last) {
    if (v < 0.0) {
      first = last = -1;
      return;
    }
    const auto packed = static_cast<std::int64_t>(std::llround(v));
    first = static_cast<int>(packed % (kMaxFrame + 1));
    last = static_cast<int>(packed / (kMaxFrame + 1));
  }
};

struct PayloadLayout {
  int C = 31;
  int K = 14;
  bool edits = false;

  static constexpr int kEditChannels = 5;

  constexpr int sigma() const { return 0; }
  constexpr int gamma() const { return C; }
  constexpr int hh() const { return 2 * C; }
  constexpr int edit() const { return 2 * C + 3 * K; }
  constexpr int base_stride() const { return 2 * C + 3 * K; }
  constexpr int stride() const { return base_stride() + (edits ? kEditChannels : 0); }

  friend constexpr bool operator==(const PayloadLayout&, const PayloadLayout&) = default;
};

template <class Real>
EditChannels read_edit(const PayloadLayout& layout, std::span<const Real> payload) {
  EditChannels e;
  if (!layout.edits) return e;
  const Real* p = payload.data() + layout.edit();
  e.target_rgb = {static_cast<float>(p[0]), static_cast<float>(p[1]), static_cast<float>(p[2])};
  e.target_density = static_cast<float>(p[3]);
  EditChannels::decode_range(static_cast<double>(p[4]), e.first_frame, e.last_frame);
  return e;
}

template <class Real>
void write_edit(const PayloadLayout& layout, std::span<Real> payload, const EditChannels& e) {
  if (!layout.edits) throw InvalidArgument("write_edit: payload has no edit channels");
  if (e.target_density < 0.f) throw InvalidArgument("write_edit: target density must be >= 0");
  for (float c : e.target_rgb)
    if (c < 0.f || c > 1.f) throw InvalidArgument("write_edit: target rgb outside [0,1]");
  if (e.first_frame > EditChannels::kMaxFrame || e.last_frame > EditChannels::kMaxFrame ||
      (e.first_frame >= 0 && e.last_frame < e.first_frame))
    throw InvalidArgument("write_edit: invalid frame range");
  Real* p = payload.data() + layout.edit();
  p[0] = static_cast<Real>(e.target_rgb[0]);
  p[1] = static_cast<Real>(e.target_rgb[1]);
  p[2] = static_cast<Real>(e.target_rgb[2]);
  p[3] = static_cast<Real>(e.target_density);
  p[4] = static_cast<Real>(e.encode_range());
}

// ---------------------------------------------------------------------------
// Decoders

template <class Real>
void check_shape(const TemporalBases<Real>& bases, std::size_t n, const char* what) {
  if (n != static_cast<std::size_t>(bases.count))
    throw InvalidArgument(std::string(what) + ": coefficient length " + std::to_string(n) +
                          " does not match basis count " + std::to_string(bases.count));
}

/// Pre-activation (A w)_t.
template <class Real>
Real project_row(std::span<const Real> row, std::span<const Real> w) {
  Real s = 0;
  for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * w[c];
  return s;
}

template <class Real>
std::vector<Real> decode_density(const TemporalBases<Real>& bases, std::span<const Real> w_sigma) {
  check_shape(bases, w_sigma.size(), "decode_density");
  std::vector<Real> out(static_cast<std::size_t>(bases.frames));
  for (int t = 0; t < bases.frames; ++t) out[t] = std::max(Real(0), project_row(bases.a_row(t), w_sigma));
  return out;
}

template <class Real>
std::vector<Real> decode_hyper_angle(const TemporalBases<Real>& bases, std::span<const Real> w_gamma) {
  check_shape(bases, w_gamma.size(), "decode_hyper_angle");
  std::vector<Real> out(static_cast<std::size_t>(bases.frames));
  for (int t = 0; t < bases.frames; ++t)
    out[t] = static_cast<Real>(std::numbers::pi) * sigmoid(project_row(bases.b_row(t), w_gamma));
  return out;
}

template <class Real>
Real density_at(const TemporalBases<Real>& bases, int frame, std::span<const Real> w_sigma) {
  return std::max(Real(0), project_row(bases.a_row(frame), w_sigma));
}

template <class Real>
Real hyper_angle_at(const TemporalBases<Real>& bases, int frame, std::span<const Real> w_gamma) {
  return static_cast<Real>(std::numbers::pi) * sigmoid(project_row(bases.b_row(frame), w_gamma));
}

enum class TimeInterp { Nearest, Linear };

/// Density and hyper angle at a continuous time in [0, T-1].
template <class Real>
std::array<Real, 2> decode_at_time(const TemporalBases<Real>& bases, double time, std::span<const Real> w_sigma,
                                   std::span<const Real> w_gamma, TimeInterp mode = TimeInterp::Nearest) {
  const double t = std::clamp(time, 0.0, static_cast<double>(bases.frames - 1));
  if (mode == TimeInterp::Nearest) {
    const int f = static_cast<int>(std::lround(t));
    return {density_at(bases, f, w_sigma), hyper_angle_at(bases, f, w_gamma)};
  }
  const int f0 = static_cast<int>(std::floor(t));
  const int f1 = std::min(f0 + 1, bases.frames - 1);
  const Real u = static_cast<Real>(t - f0);
  return {(1 - u) * density_at(bases, f0, w_sigma) + u * density_at(bases, f1, w_sigma),
          (1 - u) * hyper_angle_at(bases, f0, w_gamma) + u * hyper_angle_at(bases, f1, w_gamma)};
}

/// Per-(l, m) SH coefficients of the color at hyper angle gamma:
/// S[lm][ch] = sum_n g_nl(gamma) w_hh[(n,l,m)][ch]. Output is S x 3.
template <class Real>
void slice_sh(const BasisTable& table, std::span<const Real> w_hh, double gamma, std::span<Real> out) {
  std::array<double, 64> g{};
  table.radial(gamma, g);
  std::fill(out.begin(), out.begin() + 3 * table.sh_count(), Real(0));
  for (int k = 0; k < table.count(); ++k) {
    const Real gk = static_cast<Real>(g[table.radial_slot[k]]);
    Real* dst = out.data() + 3 * table.sh[k];
    const Real* src = w_hh.data() + 3 * k;
    dst[0] += gk * src[0];
    dst[1] += gk * src[1];
    dst[2] += gk * src[2];
  }
}

template <class Real>
std::vector<Real> slice_sh(const BasisTable& table, std::span<const Real> w_hh, double gamma) {
  std::vector<Real> out(static_cast<std::size_t>(3 * table.sh_count()));
  slice_sh<Real>(table, w_hh, gamma, out);
  return out;
}

/// Dot product of sliced SH coefficients with SH values: pre-sigmoid color.
template <class Real>
std::array<Real, 3> sh_dot(std::span<const Real> sliced, std::span<const double> sh, int sh_count) {
  std::array<Real, 3> c{0, 0, 0};
  for (int s = 0; s < sh_count; ++s) {
    const Real y = static_cast<Real>(sh[s]);
    c[0] += sliced[3 * s] * y;
    c[1] += sliced[3 * s + 1] * y;
    c[2] += sliced[3 * s + 2] * y;
  }
  return c;
}

/// Pre-sigmoid color: sum over all K bases of w_hh * H(theta, phi, gamma).
template <class Real>
std::array<Real, 3> decode_color_raw(const BasisTable& table, std::span<const Real> w_hh, double gamma,
                                     double theta, double phi) {
  std::array<Real, 3> c{0, 0, 0};
  const HyperDirection dir{theta, phi, gamma};
  for (int k = 0; k < table.count(); ++k) {
    const Real h = static_cast<Real>(real_hh(table.index[k], dir));
    for (int ch = 0; ch < 3; ++ch) c[ch] += w_hh[3 * k + ch] * h;
  }
  return c;
}

template <class Real>
std::array<Real, 3> decode_color(const BasisTable& table, std::span<const Real> w_hh, double gamma, double theta,
                                 double phi) {
  if (!(gamma >= 0.0 && gamma <= std::numbers::pi)) throw InvalidArgument("decode_color: gamma outside [0, pi]");
  auto c = decode_color_raw<Real>(table, w_hh, gamma, theta, phi);
  for (auto& v : c) v = sigmoid(v);
  return c;
}

}  // namespace neuvv
