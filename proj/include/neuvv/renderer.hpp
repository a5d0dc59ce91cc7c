#pragma once

/// \file
/// Volume rendering of one video octree at a camera and frame.
///
/// Each ray is cut into leaf segments; a segment contributes
/// w_i = T_i (1 - exp(-sigma_i delta_i)) of its color with
/// T_i = exp(-sum_{j<i} sigma_j delta_j). Rendered layers store straight
/// (un-premultiplied) color: rgb = sum_i w_i c_i / alpha.
///
/// Ray parameters are in the camera's units: for a camera built with
/// Camera::transformed the parameter t equals world distance while the
/// segment length delta is measured in the tree's own frame.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "neuvv/camera.hpp"
#include "neuvv/errors.hpp"
#include "neuvv/image.hpp"
#include "neuvv/parallel.hpp"
#include "neuvv/temporal_field.hpp"
#include "neuvv/voctree.hpp"

namespace neuvv {

struct RenderOptions {
  double far_depth = 1e4;         // depth written where alpha < depth_alpha_min
  double depth_alpha_min = 1e-3;
  double termination = 1e-4;      // stop once transmittance drops below
  double t_near = 0.0;
  double t_far = std::numeric_limits<double>::infinity();
  bool use_cache = true;
  std::size_t rows_per_task = 4;
};

struct LayerImages {
  ImageD rgb;    // H x W x 3, straight color
  ImageD alpha;  // H x W
  ImageD depth;  // H x W

  LayerImages() = default;
  LayerImages(int w, int h, double far_depth)
      : rgb(w, h, 3), alpha(w, h, 1), depth(w, h, 1, far_depth) {}

  int width() const { return rgb.width; }
  int height() const { return rgb.height; }
};

struct RayResult {
  std::array<double, 3> premul{0, 0, 0};  // sum_i w_i c_i
  double alpha = 0.0;
  double depth_sum = 0.0;  // sum_i w_i t_i
  double transmittance = 1.0;
  int segments = 0;
};

/// What a leaf contributes at one frame, independent of view direction.
template <class Real>
struct LeafSample {
  Real sigma = 0;
  const Real* sliced = nullptr;  // sh_count x 3
  bool edited = false;
  std::array<Real, 3> edit_rgb{0, 0, 0};
};

/// Frame-dependent leaf state: density and color, with edits applied.
/// `sliced` must hold 3 * sh_count values. Both render paths go through here.
template <class Real>
LeafSample<Real> sample_leaf(const BasicVOctree<Real>& tree, std::int32_t leaf, int frame, std::span<Real> sliced) {
  const PayloadLayout& lay = tree.layout();
  const auto p = tree.payload(leaf);
  const auto C = static_cast<std::size_t>(lay.C);
  LeafSample<Real> s;
  s.sigma = density_at(tree.bases(), frame, p.subspan(static_cast<std::size_t>(lay.sigma()), C));
  const Real gamma = hyper_angle_at(tree.bases(), frame, p.subspan(static_cast<std::size_t>(lay.gamma()), C));
  slice_sh<Real>(tree.table(), p.subspan(static_cast<std::size_t>(lay.hh()), static_cast<std::size_t>(3 * lay.K)),
                 static_cast<double>(gamma), sliced);
  s.sliced = sliced.data();
  if (lay.edits) {
    const EditChannels e = read_edit<Real>(lay, p);
    if (e.active(frame)) {
      s.edited = true;
      s.edit_rgb = {static_cast<Real>(e.target_rgb[0]), static_cast<Real>(e.target_rgb[1]),
                    static_cast<Real>(e.target_rgb[2])};
      if (e.target_density > 0.f) s.sigma = static_cast<Real>(e.target_density);
    }
  }
  return s;
}

/// Precomputed per-leaf density and sliced SH coefficients for one frame.
template <class Real>
struct FrameSlice {
  int frame = -1;
  int sh_count = 0;
  std::vector<Real> sigma;
  std::vector<Real> sliced;  // leaves x sh_count x 3
  std::vector<std::uint8_t> edited;
  std::vector<std::array<Real, 3>> edit_rgb;
  std::size_t leaves_built = 0;

  LeafSample<Real> get(std::int32_t leaf) const {
    const auto i = static_cast<std::size_t>(leaf);
    LeafSample<Real> s;
    s.sigma = sigma[i];
    s.sliced = sliced.data() + i * 3 * static_cast<std::size_t>(sh_count);
    s.edited = edited[i] != 0;
    s.edit_rgb = edit_rgb[i];
    return s;
  }
};

template <class Real>
void check_frame(const BasicVOctree<Real>& tree, int frame) {
  if (frame < 0 || frame >= tree.frames())
    throw OutOfRange("frame " + std::to_string(frame) + " outside [0, " + std::to_string(tree.frames() - 1) + "]");
}

template <class Real>
FrameSlice<Real> build_frame_cache(const BasicVOctree<Real>& tree, int frame) {
  check_frame(tree, frame);
  FrameSlice<Real> fs;
  fs.frame = frame;
  fs.sh_count = tree.table().sh_count();
  const std::size_t n = tree.leaf_count();
  const auto width = static_cast<std::size_t>(3 * fs.sh_count);
  fs.sigma.resize(n);
  fs.sliced.resize(n * width);
  fs.edited.assign(n, 0);
  fs.edit_rgb.resize(n);
  parallel_for(
      n,
      [&](std::size_t i) {
        const auto s = sample_leaf<Real>(tree, static_cast<std::int32_t>(i), frame,
                                         std::span<Real>(fs.sliced.data() + i * width, width));
        fs.sigma[i] = s.sigma;
        fs.edited[i] = s.edited ? 1 : 0;
        fs.edit_rgb[i] = s.edit_rgb;
      },
      1024);
  fs.leaves_built = n;
  return fs;
}

/// Leaf source computing samples on demand into a per-ray scratch buffer.
template <class Real>
struct OnTheFlySource {
  const BasicVOctree<Real>& tree;
  int frame;
  // The returned sample points into per-thread storage valid until the
  // next call on the same thread.
  LeafSample<Real> get(std::int32_t leaf) const {
    thread_local std::array<Real, 3 * 100> scratch{};
    return sample_leaf<Real>(tree, leaf, frame, scratch);
  }
};

template <class Real>
struct CachedSource {
  const FrameSlice<Real>& cache;
  LeafSample<Real> get(std::int32_t leaf) const { return cache.get(leaf); }
};

/// Final color of a sample seen along a direction with SH values `sh`.
template <class Real>
std::array<Real, 3> shade(const LeafSample<Real>& s, std::span<const double> sh, int sh_count) {
  if (s.edited) return s.edit_rgb;
  auto c = sh_dot<Real>(std::span<const Real>(s.sliced, static_cast<std::size_t>(3 * sh_count)), sh, sh_count);
  for (auto& v : c) v = sigmoid(v);
  return c;
}

/// SH values of the normalized direction, in the tree's frame.
inline std::array<double, 100> direction_sh(int l_max, const Vec3& dir) {
  std::array<double, 100> sh{};
  const Vec3 u = dir.normalized();
  eval_sh(l_max, u.x(), u.y(), u.z(), sh);
  return sh;
}

/// Integrates one ray front to back.
template <class Real, class Source>
RayResult trace_ray(const BasicVOctree<Real>& tree, const Source& src, const Vec3& origin, const Vec3& dir,
                    const RenderOptions& opt) {
  RayResult r;
  const int l_max = tree.truncation().n_max;
  const int sh_count = tree.table().sh_count();
  const auto sh = direction_sh(l_max, dir);
  const double len = dir.norm();
  tree.traverse(origin, dir, opt.t_near, opt.t_far, [&](std::int32_t leaf, double t0, double t1) {
    const LeafSample<Real> s = src.get(leaf);
    ++r.segments;
    const double tau = static_cast<double>(s.sigma) * ((t1 - t0) * len);
    if (tau <= 0.0) return true;
    const auto c = shade<Real>(s, sh, sh_count);
    const double a = -std::expm1(-tau);
    const double w = r.transmittance * a;
    for (int ch = 0; ch < 3; ++ch) r.premul[ch] += w * static_cast<double>(c[ch]);
    r.depth_sum += w * 0.5 * (t0 + t1);
    r.alpha += w;
    r.transmittance *= std::exp(-tau);
    return r.transmittance >= opt.termination;
  });
  return r;
}

template <class Real, class Source>
LayerImages render_with(const BasicVOctree<Real>& tree, const Source& src, const Camera& cam, const RenderOptions& opt) {
  LayerImages out(cam.width, cam.height, opt.far_depth);
  parallel_chunks(static_cast<std::size_t>(cam.height), opt.rows_per_task, [&](std::size_t b, std::size_t e) {
    for (std::size_t j = b; j < e; ++j)
      for (int i = 0; i < cam.width; ++i) {
        const Ray ray = cam.pixel_ray(i, static_cast<int>(j));
        const RayResult r = trace_ray<Real>(tree, src, ray.origin, ray.dir, opt);
        const int y = static_cast<int>(j);
        out.alpha.at(i, y) = r.alpha;
        if (r.alpha > 0.0)
          for (int ch = 0; ch < 3; ++ch) out.rgb.at(i, y, ch) = r.premul[ch] / r.alpha;
        if (r.alpha >= opt.depth_alpha_min) out.depth.at(i, y) = r.depth_sum / std::max(r.alpha, 1e-6);
      }
  });
  return out;
}

/// Renders `tree` from `cam` at `frame`. Uses a cached slice when given one
/// for the same frame, builds one when opts.use_cache is set, and slices on
/// the fly otherwise; all three produce identical images.
template <class Real>
LayerImages render(const BasicVOctree<Real>& tree, const Camera& cam, int frame, const RenderOptions& opt = {},
                   const FrameSlice<Real>* cache = nullptr) {
  check_frame(tree, frame);
  cam.validate_intrinsics();
  if (cache) {
    if (cache->frame != frame || cache->sigma.size() != tree.leaf_count())
      throw InvalidArgument("render: frame cache does not match tree/frame");
    return render_with(tree, CachedSource<Real>{*cache}, cam, opt);
  }
  if (opt.use_cache) {
    const FrameSlice<Real> fs = build_frame_cache(tree, frame);
    return render_with(tree, CachedSource<Real>{fs}, cam, opt);
  }
  return render_with(tree, OnTheFlySource<Real>{tree, frame}, cam, opt);
}

/// C' = alpha C + (1 - alpha) C_bg per pixel.
inline ImageD composite_background(const LayerImages& layer, const ImageD& bg) {
  if (bg.width != layer.width() || bg.height != layer.height() || bg.channels != 3)
    throw InvalidArgument("composite_background: background is " + std::to_string(bg.width) + "x" +
                          std::to_string(bg.height) + "x" + std::to_string(bg.channels) + ", layer is " +
                          std::to_string(layer.width()) + "x" + std::to_string(layer.height()) + "x3");
  ImageD out(bg.width, bg.height, 3);
  for (int y = 0; y < bg.height; ++y)
    for (int x = 0; x < bg.width; ++x) {
      const double a = layer.alpha.at(x, y);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = a * layer.rgb.at(x, y, c) + (1.0 - a) * bg.at(x, y, c);
    }
  return out;
}

inline ImageD constant_image(int w, int h, const std::array<double, 3>& rgb) {
  ImageD img(w, h, 3);
  for (std::size_t p = 0; p < img.pixels(); ++p)
    for (int c = 0; c < 3; ++c) img.data[p * 3 + c] = rgb[static_cast<std::size_t>(c)];
  return img;
}

}  // namespace neuvv
