#pragma once

/// \file
/// Fitting a video octree to posed multi-view video by gradient descent.
///
/// Per ray the blended prediction is C' = sum_i w_i c_i + T_end * C_bg with
/// w_i = T_i (1 - exp(-tau_i)), tau_i = relu(A_f w_sigma) delta_i and
/// c_i = sigmoid(sum_k w_hh[k] g_k(gamma) Y_k(dir)), gamma = pi sigmoid(B_f w_gamma).
/// Gradients are derived by hand and accumulated per leaf.
///
/// Both losses are averaged: L_rgb over the random rays, L_grad over the
/// pixels of the rendered patches. L_total = L_rgb + lambda_grad * L_grad.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "neuvv/camera.hpp"
#include "neuvv/dataset.hpp"
#include "neuvv/errors.hpp"
#include "neuvv/parallel.hpp"
#include "neuvv/renderer.hpp"
#include "neuvv/temporal_field.hpp"
#include "neuvv/voct_io.hpp"
#include "neuvv/voctree.hpp"

namespace neuvv {

struct TrainConfig {
  double lr_payload = 0.1;
  double lr_bases = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-8;
  int batch_rays = 4096;
  int iterations = 3000;
  double lambda_grad = 0.1;
  double bg_ray_fraction = 0.2;
  int patch_size = 8;
  int patches_per_batch = 8;
  int prune_every = 500;
  double prune_threshold = 1e-5;
  int init_resolution = 32;
  int target_resolution = 128;
  std::vector<int> upsample_at;  // iterations at which the grid doubles; empty spreads them evenly
  int basis_count = 31;          // C
  int n_max = 2;                 // K = 14
  double init_sigma = 0.1;       // initial w_sigma ~ U(0, init_sigma)
  bool train_bases = true;
  double termination = 1e-4;
  std::uint64_t seed = 1;
  int log_every = 50;

  void validate() const {
    auto fail = [](const std::string& m) { throw InvalidArgument("train config: " + m); };
    if (!(lambda_grad >= 0.0)) fail("lambda_grad must be >= 0");
    if (!(bg_ray_fraction >= 0.0 && bg_ray_fraction <= 1.0)) fail("bg_ray_fraction must be in [0, 1]");
    if (!(lr_payload > 0.0) || !(lr_bases >= 0.0)) fail("learning rates must be positive");
    if (batch_rays < 1) fail("batch_rays must be >= 1");
    if (iterations < 0) fail("iterations must be >= 0");
    if (patch_size < 2) fail("patch_size must be >= 2");
    if (patches_per_batch < 0) fail("patches_per_batch must be >= 0");
    if (prune_threshold < 0.0) fail("prune_threshold must be >= 0");
    if (basis_count < 1) fail("basis_count must be >= 1");
    if (n_max < 0 || n_max > BasisTable::kMaxNMax) fail("n_max out of range");
    log2_exact(init_resolution);
    log2_exact(target_resolution);
    if (target_resolution < init_resolution) fail("target_resolution must be >= init_resolution");
  }
};

// ---------------------------------------------------------------------------
// Ray batches

struct RayBatch {
  std::vector<Vec3> origins;
  std::vector<Vec3> directions;  // unit length
  std::vector<std::array<double, 3>> colors;
  std::vector<std::array<double, 3>> backgrounds;
  std::vector<std::uint8_t> foreground;
  std::vector<int> frames;

  std::size_t size() const { return origins.size(); }
  void push(const Ray& r, const std::array<double, 3>& c, const std::array<double, 3>& bg, bool fg, int frame) {
    origins.push_back(r.origin);
    directions.push_back(r.dir.normalized());
    colors.push_back(c);
    backgrounds.push_back(bg);
    foreground.push_back(fg ? 1 : 0);
    frames.push_back(frame);
  }
};

/// Square pixel blocks for the gradient loss; rays are patch-major and
/// row-major within a patch.
struct PatchBatch {
  int size = 8;
  RayBatch rays;
  std::size_t count() const { return rays.size() / static_cast<std::size_t>(size * size); }
};

/// Every pixel of a dataset split into foreground (mask > 0.5) and
/// background lists, coded as (view * T + frame) * pixels + pixel.
class RayPool {
 public:
  explicit RayPool(const Dataset& ds) : ds_(ds) {
    if (ds.images.empty()) throw InvalidArgument("ray pool: empty dataset");
    if (!ds.has_masks()) throw InvalidArgument("ray pool: dataset has no foreground masks");
    for (std::size_t img = 0; img < ds.images.size(); ++img) {
      const ImageF& m = ds.masks[img];
      const std::uint64_t base = img << 32;
      for (std::size_t p = 0; p < m.pixels(); ++p) (m.data[p] > 0.5f ? fg_ : bg_).push_back(base | p);
    }
  }

  const std::vector<std::uint64_t>& foreground() const { return fg_; }
  const std::vector<std::uint64_t>& background() const { return bg_; }

  void append(RayBatch& b, std::uint64_t code) const {
    const std::size_t img = code >> 32;
    const auto p = static_cast<int>(code & 0xffffffffu);
    const int view = static_cast<int>(img / static_cast<std::size_t>(ds_.frames));
    const int frame = static_cast<int>(img % static_cast<std::size_t>(ds_.frames));
    append_pixel(b, view, frame, p % ds_.views[static_cast<std::size_t>(view)].width,
                 p / ds_.views[static_cast<std::size_t>(view)].width);
  }

  void append_pixel(RayBatch& b, int view, int frame, int x, int y) const {
    const Camera& cam = ds_.views[static_cast<std::size_t>(view)];
    const ImageF& img = ds_.image(view, frame);
    const ImageF& bg = ds_.backgrounds[static_cast<std::size_t>(view)];
    b.push(cam.pixel_ray(x, y), {img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2)},
           {bg.at(x, y, 0), bg.at(x, y, 1), bg.at(x, y, 2)}, ds_.mask(view, frame).at(x, y) > 0.5f, frame);
  }

  const Dataset& dataset() const { return ds_; }

 private:
  const Dataset& ds_;
  std::vector<std::uint64_t> fg_, bg_;
};

/// round(bg_ray_fraction * batch) background rays, the rest foreground,
/// each drawn uniformly over all views and frames. Falls back to the other
/// kind when one kind does not exist at all.
inline RayBatch sample_rays(const RayPool& pool, const TrainConfig& cfg, std::mt19937_64& rng) {
  const auto batch = static_cast<std::size_t>(cfg.batch_rays);
  auto n_bg = static_cast<std::size_t>(std::llround(cfg.bg_ray_fraction * static_cast<double>(batch)));
  if (pool.background().empty()) n_bg = 0;
  if (pool.foreground().empty()) n_bg = batch;
  RayBatch b;
  auto draw = [&](const std::vector<std::uint64_t>& from, std::size_t n) {
    std::uniform_int_distribution<std::size_t> u(0, from.size() - 1);
    for (std::size_t i = 0; i < n; ++i) pool.append(b, from[u(rng)]);
  };
  draw(pool.foreground(), batch - n_bg);
  draw(pool.background(), n_bg);
  return b;
}

inline RayBatch sample_rays(const Dataset& ds, const TrainConfig& cfg, std::mt19937_64& rng) {
  return sample_rays(RayPool(ds), cfg, rng);
}

/// Patches anchored on random pixels, shifted to lie inside the image.
inline PatchBatch sample_patches(const RayPool& pool, const TrainConfig& cfg, std::mt19937_64& rng) {
  PatchBatch pb;
  pb.size = cfg.patch_size;
  const Dataset& ds = pool.dataset();
  const int P = cfg.patch_size;
  // Uniform over every pixel of every image, background included.
  const auto& fg = pool.foreground();
  const auto& bg = pool.background();
  std::uniform_int_distribution<std::size_t> u(0, fg.size() + bg.size() - 1);
  for (int k = 0; k < cfg.patches_per_batch; ++k) {
    const std::size_t pick = u(rng);
    const std::uint64_t code = pick < fg.size() ? fg[pick] : bg[pick - fg.size()];
    const std::size_t img = code >> 32;
    const int view = static_cast<int>(img / static_cast<std::size_t>(ds.frames));
    const int frame = static_cast<int>(img % static_cast<std::size_t>(ds.frames));
    const Camera& cam = ds.views[static_cast<std::size_t>(view)];
    if (cam.width < P || cam.height < P) throw InvalidArgument("sample_patches: image smaller than patch");
    const auto p = static_cast<int>(code & 0xffffffffu);
    const int x0 = std::clamp(p % cam.width - P / 2, 0, cam.width - P);
    const int y0 = std::clamp(p / cam.width - P / 2, 0, cam.height - P);
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x) pool.append_pixel(pb.rays, view, frame, x0 + x, y0 + y);
  }
  return pb;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over rays of |C' - C|^2.
inline double loss_rgb(std::span<const std::array<double, 3>> pred, std::span<const std::array<double, 3>> target) {
  if (pred.size() != target.size()) throw InvalidArgument("loss_rgb: size mismatch");
  if (pred.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (int c = 0; c < 3; ++c) {
      const double d = pred[i][c] - target[i][c];
      s += d * d;
    }
  return s / static_cast<double>(pred.size());
}

/// Sum over pixels and channels of the squared forward differences of
/// |gt - pred|, horizontally and vertically.
inline double loss_grad(const ImageD& pred, const ImageD& gt) {
  if (pred.width != gt.width || pred.height != gt.height || pred.channels != gt.channels)
    throw InvalidArgument("loss_grad: shape mismatch");
  if (pred.width < 2 || pred.height < 2) throw InvalidArgument("loss_grad: patch must be at least 2x2");
  auto d = [&](int x, int y, int c) { return std::abs(gt.at(x, y, c) - pred.at(x, y, c)); };
  double s = 0.0;
  for (int y = 0; y < pred.height; ++y)
    for (int x = 0; x < pred.width; ++x)
      for (int c = 0; c < pred.channels; ++c) {
        if (x + 1 < pred.width) s += std::pow(d(x + 1, y, c) - d(x, y, c), 2);
        if (y + 1 < pred.height) s += std::pow(d(x, y + 1, c) - d(x, y, c), 2);
      }
  return s;
}

/// d loss_grad / d pred, added into `out` scaled by `scale`.
inline void loss_grad_backward(const ImageD& pred, const ImageD& gt, double scale, ImageD& out) {
  auto d = [&](int x, int y, int c) { return std::abs(gt.at(x, y, c) - pred.at(x, y, c)); };
  auto sgn = [&](int x, int y, int c) {
    const double e = pred.at(x, y, c) - gt.at(x, y, c);
    return e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0);
  };
  for (int y = 0; y < pred.height; ++y)
    for (int x = 0; x < pred.width; ++x)
      for (int c = 0; c < pred.channels; ++c) {
        if (x + 1 < pred.width) {
          const double g = 2.0 * scale * (d(x + 1, y, c) - d(x, y, c));
          out.at(x + 1, y, c) += g * sgn(x + 1, y, c);
          out.at(x, y, c) -= g * sgn(x, y, c);
        }
        if (y + 1 < pred.height) {
          const double g = 2.0 * scale * (d(x, y + 1, c) - d(x, y, c));
          out.at(x, y + 1, c) += g * sgn(x, y + 1, c);
          out.at(x, y, c) -= g * sgn(x, y, c);
        }
      }
}

// ---------------------------------------------------------------------------
// Differentiable forward / backward

struct SegmentRecord {
  std::int32_t leaf = -1;
  double delta = 0.0;  // segment length in tree units
  double tau = 0.0;    // sigma * delta
  double gamma = 0.0;
  double trans = 1.0;  // transmittance before the segment
  double alpha = 0.0;
  std::array<double, 3> color{};
};

struct RayRecord {
  std::size_t begin = 0, end = 0;  // into the chunk's segment list
  std::array<double, 3> pred{};    // C'
  double alpha = 0.0;
  double trans_end = 1.0;
};

/// Forward pass of one ray in double precision. Segments with zero density
/// are skipped (their relu gradient is zero too). `sh` receives the SH
/// values of the direction.
template <class Real>
RayRecord forward_ray(const BasicVOctree<Real>& tree, const Vec3& origin, const Vec3& dir, int frame,
                      const std::array<double, 3>& bg, double termination, std::vector<SegmentRecord>& segs,
                      std::span<double> sh) {
  const PayloadLayout& lay = tree.layout();
  const BasisTable& table = tree.table();
  const Vec3 u = dir.normalized();
  eval_sh(tree.truncation().n_max, u.x(), u.y(), u.z(), sh);
  const auto arow = tree.bases().a_row(frame);
  const auto brow = tree.bases().b_row(frame);
  const double len = dir.norm();
  std::array<double, 64> g{};
  RayRecord r;
  r.begin = segs.size();
  double trans = 1.0;
  tree.traverse(origin, dir, 0.0, std::numeric_limits<double>::infinity(), [&](std::int32_t leaf, double t0, double t1) {
    const auto p = tree.payload(leaf);
    double pre = 0.0;
    for (int c = 0; c < lay.C; ++c) pre += static_cast<double>(arow[c]) * static_cast<double>(p[lay.sigma() + c]);
    if (pre <= 0.0) return true;
    SegmentRecord s;
    s.leaf = leaf;
    s.delta = (t1 - t0) * len;
    s.tau = pre * s.delta;
    double b = 0.0;
    for (int c = 0; c < lay.C; ++c) b += static_cast<double>(brow[c]) * static_cast<double>(p[lay.gamma() + c]);
    s.gamma = std::numbers::pi * sigmoid(b);
    table.radial(s.gamma, g);
    std::array<double, 3> raw{0, 0, 0};
    for (int k = 0; k < lay.K; ++k) {
      const double h = g[table.radial_slot[k]] * sh[table.sh[k]];
      for (int ch = 0; ch < 3; ++ch) raw[ch] += static_cast<double>(p[lay.hh() + 3 * k + ch]) * h;
    }
    for (int ch = 0; ch < 3; ++ch) s.color[ch] = sigmoid(raw[ch]);
    s.trans = trans;
    s.alpha = -std::expm1(-s.tau);
    const double w = trans * s.alpha;
    for (int ch = 0; ch < 3; ++ch) r.pred[ch] += w * s.color[ch];
    r.alpha += w;
    trans *= std::exp(-s.tau);
    segs.push_back(s);
    return trans >= termination;
  });
  r.end = segs.size();
  r.trans_end = trans;
  for (int ch = 0; ch < 3; ++ch) r.pred[ch] += trans * bg[ch];
  return r;
}

/// Per-segment gradient pieces, expanded into parameter gradients when merged.
struct SegmentGrad {
  std::int32_t leaf = -1;
  std::int32_t frame = 0;
  std::uint32_t ray = 0;      // index into the chunk's SH table
  double d_pre_sigma = 0.0;   // dL / d(A_f w_sigma)
  double d_pre_gamma = 0.0;   // dL / d(B_f w_gamma)
  std::array<double, 3> d_raw{};  // dL / d(pre-sigmoid color)
  double gamma = 0.0;
};

template <class Real>
void backward_ray(const BasicVOctree<Real>& tree, const RayRecord& r, std::span<const SegmentRecord> segs,
                  std::span<const double> sh, const std::array<double, 3>& bg, const std::array<double, 3>& d_pred,
                  int frame, std::uint32_t ray, std::vector<SegmentGrad>& out) {
  const PayloadLayout& lay = tree.layout();
  const BasisTable& table = tree.table();
  std::array<double, 64> dg{};
  double bg_term = 0.0;
  for (int ch = 0; ch < 3; ++ch) bg_term += d_pred[ch] * r.trans_end * bg[ch];
  double behind = 0.0;  // d_pred . sum_{k > i} w_k c_k
  for (std::size_t i = r.end; i-- > r.begin;) {
    const SegmentRecord& s = segs[i];
    const double w = s.trans * s.alpha;
    const double t_next = s.trans * std::exp(-s.tau);
    double own = 0.0;
    for (int ch = 0; ch < 3; ++ch) own += d_pred[ch] * s.color[ch];
    const double d_tau = t_next * own - behind - bg_term;
    behind += w * own;

    SegmentGrad sg;
    sg.leaf = s.leaf;
    sg.frame = frame;
    sg.ray = ray;
    sg.gamma = s.gamma;
    sg.d_pre_sigma = d_tau * s.delta;
    for (int ch = 0; ch < 3; ++ch) sg.d_raw[ch] = w * d_pred[ch] * s.color[ch] * (1.0 - s.color[ch]);
    table.radial_derivative(s.gamma, dg);
    const auto p = tree.payload(s.leaf);
    double d_gamma = 0.0;
    for (int k = 0; k < lay.K; ++k) {
      const double h = dg[table.radial_slot[k]] * sh[table.sh[k]];
      for (int ch = 0; ch < 3; ++ch) d_gamma += sg.d_raw[ch] * static_cast<double>(p[lay.hh() + 3 * k + ch]) * h;
    }
    sg.d_pre_gamma = d_gamma * s.gamma * (1.0 - s.gamma / std::numbers::pi);
    out.push_back(sg);
  }
}

/// Dense gradient storage with a list of touched leaves.
struct Gradients {
  int stride = 0;  // base payload length 2C + 3K
  std::vector<double> payload;
  std::vector<std::int32_t> touched;
  std::vector<std::uint8_t> is_touched;
  std::vector<double> A, B;

  void reset(std::size_t leaves, int base_stride, std::size_t basis_size) {
    stride = base_stride;
    payload.assign(leaves * static_cast<std::size_t>(base_stride), 0.0);
    is_touched.assign(leaves, 0);
    touched.clear();
    A.assign(basis_size, 0.0);
    B.assign(basis_size, 0.0);
  }

  void clear() {
    for (auto leaf : touched) {
      std::fill_n(payload.begin() + static_cast<std::ptrdiff_t>(leaf) * stride, stride, 0.0);
      is_touched[static_cast<std::size_t>(leaf)] = 0;
    }
    touched.clear();
    std::fill(A.begin(), A.end(), 0.0);
    std::fill(B.begin(), B.end(), 0.0);
  }

  std::span<double> leaf(std::int32_t l) {
    if (!is_touched[static_cast<std::size_t>(l)]) {
      is_touched[static_cast<std::size_t>(l)] = 1;
      touched.push_back(l);
    }
    return {payload.data() + static_cast<std::size_t>(l) * stride, static_cast<std::size_t>(stride)};
  }
};

struct LossReport {
  double rgb = 0.0;
  double grad = 0.0;
  double total = 0.0;
  std::size_t segments = 0;
};

namespace detail {

struct Chunk {
  std::vector<SegmentRecord> segs;
  std::vector<RayRecord> rays;
  std::vector<double> sh;
  std::vector<SegmentGrad> grads;
};

inline constexpr std::size_t kRaysPerChunk = 64;

}  // namespace detail

/// Losses of `tree` on a batch; when `grads` is given it is reset and filled
/// with dL_total / d(parameters). Work is split into fixed chunks of rays
/// merged in chunk order, so results do not depend on the thread count.
template <class Real>
LossReport evaluate(const BasicVOctree<Real>& tree, const RayBatch& rays, const PatchBatch& patches,
                    const TrainConfig& cfg, Gradients* grads = nullptr) {
  const std::size_t n_rgb = rays.size();
  const std::size_t n_all = n_rgb + patches.rays.size();
  const int sh_count = tree.table().sh_count();
  auto ray_at = [&](std::size_t i, const Vec3*& o, const Vec3*& d, const std::array<double, 3>*& bg, int& f) {
    const RayBatch& b = i < n_rgb ? rays : patches.rays;
    const std::size_t j = i < n_rgb ? i : i - n_rgb;
    o = &b.origins[j];
    d = &b.directions[j];
    bg = &b.backgrounds[j];
    f = b.frames[j];
  };
  for (int f : rays.frames) check_frame(tree, f);
  for (int f : patches.rays.frames) check_frame(tree, f);

  const std::size_t n_chunks = (n_all + detail::kRaysPerChunk - 1) / detail::kRaysPerChunk;
  std::vector<detail::Chunk> chunks(n_chunks);
  parallel_for(
      n_chunks,
      [&](std::size_t c) {
        detail::Chunk& ch = chunks[c];
        const std::size_t b = c * detail::kRaysPerChunk, e = std::min(n_all, b + detail::kRaysPerChunk);
        ch.sh.assign((e - b) * static_cast<std::size_t>(sh_count), 0.0);
        for (std::size_t i = b; i < e; ++i) {
          const Vec3 *o, *d;
          const std::array<double, 3>* bg;
          int f;
          ray_at(i, o, d, bg, f);
          ch.rays.push_back(forward_ray(tree, *o, *d, f, *bg, cfg.termination, ch.segs,
                                        std::span<double>(ch.sh.data() + (i - b) * sh_count, sh_count)));
        }
      },
      1);

  auto record = [&](std::size_t i) -> const RayRecord& {
    return chunks[i / detail::kRaysPerChunk].rays[i % detail::kRaysPerChunk];
  };

  LossReport rep;
  std::vector<std::array<double, 3>> d_pred(n_all, {0.0, 0.0, 0.0});
  {
    std::vector<std::array<double, 3>> pred(n_rgb);
    for (std::size_t i = 0; i < n_rgb; ++i) pred[i] = record(i).pred;
    rep.rgb = loss_rgb(pred, rays.colors);
    for (std::size_t i = 0; i < n_rgb; ++i)
      for (int c = 0; c < 3; ++c) d_pred[i][c] = 2.0 * (pred[i][c] - rays.colors[i][c]) / static_cast<double>(n_rgb);
  }
  const int P = patches.size;
  const std::size_t n_patches = patches.count();
  if (n_patches > 0) {
    const double norm = 1.0 / static_cast<double>(n_patches * static_cast<std::size_t>(P * P));
    double sum = 0.0;
    for (std::size_t k = 0; k < n_patches; ++k) {
      ImageD pred(P, P, 3), gt(P, P, 3), dp(P, P, 3);
      for (int q = 0; q < P * P; ++q) {
        const std::size_t i = k * static_cast<std::size_t>(P * P) + static_cast<std::size_t>(q);
        for (int c = 0; c < 3; ++c) {
          pred.data[static_cast<std::size_t>(q * 3 + c)] = record(n_rgb + i).pred[c];
          gt.data[static_cast<std::size_t>(q * 3 + c)] = patches.rays.colors[i][c];
        }
      }
      sum += loss_grad(pred, gt);
      loss_grad_backward(pred, gt, cfg.lambda_grad * norm, dp);
      for (int q = 0; q < P * P; ++q)
        for (int c = 0; c < 3; ++c)
          d_pred[n_rgb + k * static_cast<std::size_t>(P * P) + static_cast<std::size_t>(q)][c] =
              dp.data[static_cast<std::size_t>(q * 3 + c)];
    }
    rep.grad = sum * norm;
  }
  rep.total = rep.rgb + cfg.lambda_grad * rep.grad;
  for (const auto& ch : chunks) rep.segments += ch.segs.size();
  if (!grads) return rep;

  parallel_for(
      n_chunks,
      [&](std::size_t c) {
        detail::Chunk& ch = chunks[c];
        const std::size_t b = c * detail::kRaysPerChunk;
        for (std::size_t r = 0; r < ch.rays.size(); ++r) {
          const Vec3 *o, *d;
          const std::array<double, 3>* bg;
          int f;
          ray_at(b + r, o, d, bg, f);
          backward_ray(tree, ch.rays[r], ch.segs, std::span<const double>(ch.sh.data() + r * sh_count, sh_count), *bg,
                       d_pred[b + r], f, static_cast<std::uint32_t>(r), ch.grads);
        }
      },
      1);

  const PayloadLayout& lay = tree.layout();
  const auto& bases = tree.bases();
  const BasisTable& table = tree.table();
  if (grads->payload.size() != tree.leaf_count() * static_cast<std::size_t>(lay.base_stride()) ||
      grads->A.size() != bases.A.size())
    grads->reset(tree.leaf_count(), lay.base_stride(), bases.A.size());
  else
    grads->clear();
  std::array<double, 64> g{};
  for (const auto& ch : chunks)
    for (const SegmentGrad& sg : ch.grads) {
      const auto p = tree.payload(sg.leaf);
      auto gp = grads->leaf(sg.leaf);
      const auto row = static_cast<std::size_t>(sg.frame) * static_cast<std::size_t>(lay.C);
      for (int c = 0; c < lay.C; ++c) {
        gp[lay.sigma() + c] += sg.d_pre_sigma * static_cast<double>(bases.A[row + c]);
        gp[lay.gamma() + c] += sg.d_pre_gamma * static_cast<double>(bases.B[row + c]);
        grads->A[row + c] += sg.d_pre_sigma * static_cast<double>(p[lay.sigma() + c]);
        grads->B[row + c] += sg.d_pre_gamma * static_cast<double>(p[lay.gamma() + c]);
      }
      table.radial(sg.gamma, g);
      const double* sh = ch.sh.data() + static_cast<std::size_t>(sg.ray) * sh_count;
      for (int k = 0; k < lay.K; ++k) {
        const double h = g[table.radial_slot[k]] * sh[table.sh[k]];
        for (int c = 0; c < 3; ++c) gp[lay.hh() + 3 * k + c] += sg.d_raw[c] * h;
      }
    }
  return rep;
}

/// L_rgb of `tree` on a batch of rays.
template <class Real>
double loss_rgb(const RayBatch& rays, const BasicVOctree<Real>& tree, const TrainConfig& cfg = {}) {
  return evaluate(tree, rays, PatchBatch{}, cfg).rgb;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with lazy (touched-rows-only) payload updates and dense basis updates.
template <class Real>
class Trainer {
 public:
  Trainer(BasicVOctree<Real> tree, TrainConfig cfg) : tree_(std::move(tree)), cfg_(std::move(cfg)) { resize_state(); }

  const BasicVOctree<Real>& tree() const { return tree_; }
  BasicVOctree<Real>& tree() { return tree_; }
  const TrainConfig& config() const { return cfg_; }
  TrainConfig& config() { return cfg_; }
  long step_count() const { return t_; }
  const Gradients& last_gradients() const { return grads_; }

  LossReport step(const RayBatch& rays, const PatchBatch& patches) {
    const LossReport rep = evaluate(tree_, rays, patches, cfg_, &grads_);
    if (!std::isfinite(rep.total))
      throw Error("training diverged at step " + std::to_string(t_) + ": L_rgb=" + std::to_string(rep.rgb) +
                  " L_grad=" + std::to_string(rep.grad) + " over " + std::to_string(rays.size()) + " rays, " +
                  std::to_string(rep.segments) + " segments");
    ++t_;
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const int stride = tree_.stride();
    const int base = tree_.layout().base_stride();
    auto& payload = tree_.mutable_payload_data();
    auto update = [&](Real& p, Real& m, Real& v, double g, double lr) {
      const double mn = b1 * static_cast<double>(m) + (1.0 - b1) * g;
      const double vn = b2 * static_cast<double>(v) + (1.0 - b2) * g * g;
      m = static_cast<Real>(mn);
      v = static_cast<Real>(vn);
      p = static_cast<Real>(static_cast<double>(p) - lr * (mn / c1) / (std::sqrt(vn / c2) + cfg_.adam_eps));
    };
    for (std::int32_t leaf : grads_.touched) {
      const std::size_t po = static_cast<std::size_t>(leaf) * stride;
      const std::size_t so = static_cast<std::size_t>(leaf) * base;
      for (int i = 0; i < base; ++i)
        update(payload[po + i], m_[so + i], v_[so + i], grads_.payload[so + i], cfg_.lr_payload);
    }
    if (cfg_.train_bases && cfg_.lr_bases > 0.0) {
      auto& bases = tree_.mutable_bases();
      for (std::size_t i = 0; i < bases.A.size(); ++i) {
        update(bases.A[i], mA_[i], vA_[i], grads_.A[i], cfg_.lr_bases);
        update(bases.B[i], mB_[i], vB_[i], grads_.B[i], cfg_.lr_bases);
      }
    }
    return rep;
  }

  /// Removes leaves below the density threshold, carrying optimizer state.
  void prune(double threshold) {
    auto r = neuvv::prune(tree_, threshold);
    remap(r, false);
  }

  /// Doubles the resolution; children inherit payload and optimizer state.
  void subdivide() {
    auto r = neuvv::subdivide(tree_);
    remap(r, true);
  }

  /// Writes `path` (.voct) and `path`.opt with the optimizer moments.
  void save_checkpoint(const std::filesystem::path& path) const
    requires std::same_as<Real, float>
  {
    save_voct(tree_, path);
    std::ofstream f(sidecar(path), std::ios::binary);
    if (!f) throw IoError("cannot write " + sidecar(path).string());
    const std::uint64_t header[3] = {kOptMagic, static_cast<std::uint64_t>(t_), m_.size()};
    f.write(reinterpret_cast<const char*>(header), sizeof(header));
    for (const auto* v : {&m_, &v_, &mA_, &vA_, &mB_, &vB_})
      f.write(reinterpret_cast<const char*>(v->data()), static_cast<std::streamsize>(v->size() * sizeof(Real)));
    if (!f) throw IoError("short write to " + sidecar(path).string());
  }

  static Trainer load_checkpoint(const std::filesystem::path& path, TrainConfig cfg)
    requires std::same_as<Real, float>
  {
    Trainer t(load_voct(path), std::move(cfg));
    std::ifstream f(sidecar(path), std::ios::binary);
    if (!f) throw IoError("missing optimizer state " + sidecar(path).string());
    std::uint64_t header[3] = {};
    f.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!f || header[0] != kOptMagic || header[2] != t.m_.size())
      throw IoError("optimizer state " + sidecar(path).string() + " does not match the tree");
    t.t_ = static_cast<long>(header[1]);
    for (auto* v : {&t.m_, &t.v_, &t.mA_, &t.vA_, &t.mB_, &t.vB_})
      f.read(reinterpret_cast<char*>(v->data()), static_cast<std::streamsize>(v->size() * sizeof(Real)));
    if (!f) throw IoError("optimizer state " + sidecar(path).string() + " is truncated");
    return t;
  }

  static std::filesystem::path sidecar(const std::filesystem::path& p) { return p.string() + ".opt"; }

 private:
  static constexpr std::uint64_t kOptMagic = 0x3174704f54434f56ull;  // "VOCTOpt1"

  void resize_state() {
    const std::size_t n = tree_.leaf_count() * static_cast<std::size_t>(tree_.layout().base_stride());
    m_.assign(n, Real(0));
    v_.assign(n, Real(0));
    const std::size_t nb = tree_.bases().A.size();
    mA_.assign(nb, Real(0));
    vA_.assign(nb, Real(0));
    mB_.assign(nb, Real(0));
    vB_.assign(nb, Real(0));
    grads_.reset(tree_.leaf_count(), tree_.layout().base_stride(), nb);
  }

  void remap(RemappedTree<Real>& r, bool children) {
    const auto base = static_cast<std::size_t>(tree_.layout().base_stride());
    std::vector<Real> m(r.tree.leaf_count() * base), v(m.size());
    for (std::size_t i = 0; i < r.remap.size(); ++i) {
      if (r.remap[i] < 0) continue;
      for (int k = 0; k < (children ? 8 : 1); ++k) {
        const std::size_t dst = (static_cast<std::size_t>(r.remap[i]) + k) * base;
        std::copy_n(m_.begin() + static_cast<std::ptrdiff_t>(i * base), base, m.begin() + static_cast<std::ptrdiff_t>(dst));
        std::copy_n(v_.begin() + static_cast<std::ptrdiff_t>(i * base), base, v.begin() + static_cast<std::ptrdiff_t>(dst));
      }
    }
    tree_ = std::move(r.tree);
    m_ = std::move(m);
    v_ = std::move(v);
    grads_.reset(tree_.leaf_count(), static_cast<int>(base), tree_.bases().A.size());
  }

  BasicVOctree<Real> tree_;
  TrainConfig cfg_;
  Gradients grads_;
  std::vector<Real> m_, v_, mA_, vA_, mB_, vB_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Full fitting loop

struct TrainLogRecord {
  int iter = 0;
  double L_rgb = 0.0;
  double L_grad = 0.0;
  double psnr_train = 0.0;
  std::size_t leaves = 0;

  json to_json() const {
    return {{"iter", iter}, {"L_rgb", L_rgb}, {"L_grad", L_grad}, {"psnr_train", psnr_train}, {"leaves", leaves}};
  }
};

inline double psnr_from_mse(double mse) { return mse > 0.0 ? -10.0 * std::log10(mse) : 99.0; }

/// Iterations at which the grid doubles from init to target resolution.
inline std::vector<int> upsample_schedule(const TrainConfig& cfg) {
  const int levels = log2_exact(cfg.target_resolution) - log2_exact(cfg.init_resolution);
  if (!cfg.upsample_at.empty()) {
    if (static_cast<int>(cfg.upsample_at.size()) != levels)
      throw InvalidArgument("train config: upsample_at needs " + std::to_string(levels) + " entries");
    return cfg.upsample_at;
  }
  std::vector<int> at;
  for (int k = 1; k <= levels; ++k) at.push_back(cfg.iterations * k / (levels + 1));
  return at;
}

/// Dense init_resolution^3 grid: w_sigma ~ U(0, init_sigma), w_gamma = 0,
/// w_hh = 0 (mid gray); bump-dictionary bases.
template <class Real = float>
BasicVOctree<Real> initial_tree(const Dataset& ds, const TrainConfig& cfg) {
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<double> u(0.0, cfg.init_sigma);
  return make_dense<Real>(cfg.init_resolution, BasisTruncation{cfg.n_max},
                          make_bump_bases<Real>(ds.frames, cfg.basis_count), ds.domain,
                          [&](const LeafCell&, std::span<Real> p) {
                            for (int c = 0; c < cfg.basis_count; ++c) p[static_cast<std::size_t>(c)] = static_cast<Real>(u(rng));
                          });
}

using TrainLogger = std::function<void(const TrainLogRecord&)>;

/// Coarse-to-fine fit: dense init, Adam steps, periodic pruning, grid
/// doubling at the scheduled iterations, final prune.
inline VOctree fit(const Dataset& ds, const TrainConfig& cfg, const TrainLogger& log = {}) {
  cfg.validate();
  if (ds.views.empty() || ds.images.empty()) throw InvalidArgument("fit: empty dataset");
  ds.validate();
  const RayPool pool(ds);
  if (pool.foreground().empty() && pool.background().empty()) throw InvalidArgument("fit: dataset has no pixels");
  Trainer<float> trainer(initial_tree<float>(ds, cfg), cfg);
  std::mt19937_64 rng(cfg.seed);
  const auto ups = upsample_schedule(cfg);
  std::size_t next_up = 0;
  for (int it = 0; it < cfg.iterations; ++it) {
    if (next_up < ups.size() && it == ups[next_up]) {
      trainer.prune(cfg.prune_threshold);
      trainer.subdivide();
      ++next_up;
    } else if (cfg.prune_every > 0 && it > 0 && it % cfg.prune_every == 0) {
      trainer.prune(cfg.prune_threshold);
    }
    const RayBatch rays = sample_rays(pool, cfg, rng);
    const PatchBatch patches = cfg.lambda_grad > 0.0 ? sample_patches(pool, cfg, rng) : PatchBatch{cfg.patch_size, {}};
    const LossReport rep = trainer.step(rays, patches);
    if (log && (it % std::max(1, cfg.log_every) == 0 || it + 1 == cfg.iterations))
      log({it, rep.rgb, rep.grad, psnr_from_mse(rep.rgb / 3.0), trainer.tree().leaf_count()});
  }
  trainer.prune(cfg.prune_threshold);
  return std::move(trainer.tree());
}

/// Mean squared error of renders against dataset images, composited over
/// the dataset backgrounds.
inline double dataset_mse(const VOctree& tree, const Dataset& ds, std::span<const int> views = {}) {
  std::vector<int> vs(views.begin(), views.end());
  if (vs.empty())
    for (int v = 0; v < ds.view_count(); ++v) vs.push_back(v);
  double se = 0.0;
  std::size_t n = 0;
  for (int f = 0; f < ds.frames; ++f) {
    const FrameSlice<float> cache = build_frame_cache(tree, f);
    for (int v : vs) {
      const auto layer = render(tree, ds.views[static_cast<std::size_t>(v)], f, {}, &cache);
      const ImageD out = composite_background(layer, ds.backgrounds[static_cast<std::size_t>(v)].cast<double>());
      const ImageF& gt = ds.image(v, f);
      for (std::size_t i = 0; i < out.data.size(); ++i) {
        const double d = out.data[i] - static_cast<double>(gt.data[i]);
        se += d * d;
      }
      n += out.data.size();
    }
  }
  return n ? se / static_cast<double>(n) : 0.0;
}

/// Pixels whose largest per-channel absolute error exceeds `threshold`.
inline std::size_t count_outlier_pixels(const VOctree& tree, const Dataset& ds, double threshold,
                                        std::span<const int> views = {}) {
  std::vector<int> vs(views.begin(), views.end());
  if (vs.empty())
    for (int v = 0; v < ds.view_count(); ++v) vs.push_back(v);
  std::size_t count = 0;
  for (int f = 0; f < ds.frames; ++f) {
    const FrameSlice<float> cache = build_frame_cache(tree, f);
    for (int v : vs) {
      const auto layer = render(tree, ds.views[static_cast<std::size_t>(v)], f, {}, &cache);
      const ImageD out = composite_background(layer, ds.backgrounds[static_cast<std::size_t>(v)].cast<double>());
      const ImageF& gt = ds.image(v, f);
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
          double e = 0.0;
          for (int ch = 0; ch < out.channels; ++ch)
            e = std::max(e, std::abs(out.at(x, y, ch) - static_cast<double>(gt.at(x, y, ch))));
          if (e > threshold) ++count;
        }
    }
  }
  return count;
}

}  // namespace neuvv
