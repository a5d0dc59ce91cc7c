#pragma once

/// \file
/// Multi-instance scenes: each instance is a shared octree seen through an
/// affine transform and a time map. Instances are rendered into layers
/// (rgb, alpha, depth) by transforming the camera, blended with the
/// depth-aware rule below, lit, and composited over the background.

#include <Eigen/Geometry>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include "neuvv/camera.hpp"
#include "neuvv/errors.hpp"
#include "neuvv/image.hpp"
#include "neuvv/renderer.hpp"
#include "neuvv/voct_io.hpp"
#include "neuvv/voctree.hpp"

namespace neuvv {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Time maps

struct TimeOp {
  enum class Kind { Shift, Clip, Reverse, Loop, Pause, Speed };
  Kind kind = Kind::Shift;
  double a = 0.0;
  double b = 0.0;
};

/// Composition of frame-index operators applied left to right to the global
/// frame, then clamped into [0, T-1]:
///   shift(k)  f - k          clip(a,b)  clamp(f, a, b)
///   reverse   T - 1 - f      loop(p)    f mod p (non-negative)
///   pause(t)  min(f, t)      speed(s)   floor(f * s)
class TimeMap {
 public:
  std::vector<TimeOp> ops;

  TimeMap() = default;
  explicit TimeMap(std::vector<TimeOp> o) : ops(std::move(o)) {}

  int operator()(long global_frame, int frames) const {
    if (frames < 1) throw InvalidArgument("time map: frame count must be >= 1");
    long f = global_frame;
    for (const TimeOp& op : ops) {
      switch (op.kind) {
        case TimeOp::Kind::Shift: f -= static_cast<long>(op.a); break;
        case TimeOp::Kind::Clip: f = std::clamp(f, static_cast<long>(op.a), static_cast<long>(op.b)); break;
        case TimeOp::Kind::Reverse: f = frames - 1 - f; break;
        case TimeOp::Kind::Loop: {
          const auto p = static_cast<long>(op.a);
          f = ((f % p) + p) % p;
          break;
        }
        case TimeOp::Kind::Pause: f = std::min(f, static_cast<long>(op.a)); break;
        case TimeOp::Kind::Speed: f = static_cast<long>(std::floor(static_cast<double>(f) * op.a)); break;
      }
    }
    return static_cast<int>(std::clamp<long>(f, 0, frames - 1));
  }

  /// Parses "shift(5)|loop(30)|reverse". Whitespace is ignored; an empty
  /// string is the identity.
  static TimeMap parse(const std::string& text) {
    std::string s;
    for (char c : text)
      if (!std::isspace(static_cast<unsigned char>(c))) s += c;
    TimeMap tm;
    if (s.empty()) return tm;
    std::size_t pos = 0;
    while (pos <= s.size()) {
      const std::size_t bar = s.find('|', pos);
      const std::string tok = s.substr(pos, bar == std::string::npos ? std::string::npos : bar - pos);
      tm.ops.push_back(parse_op(tok, text));
      if (bar == std::string::npos) break;
      pos = bar + 1;
    }
    return tm;
  }

  std::string to_string() const {
    std::ostringstream o;
    for (std::size_t i = 0; i < ops.size(); ++i) {
      if (i) o << '|';
      const TimeOp& op = ops[i];
      switch (op.kind) {
        case TimeOp::Kind::Shift: o << "shift(" << op.a << ')'; break;
        case TimeOp::Kind::Clip: o << "clip(" << op.a << ',' << op.b << ')'; break;
        case TimeOp::Kind::Reverse: o << "reverse"; break;
        case TimeOp::Kind::Loop: o << "loop(" << op.a << ')'; break;
        case TimeOp::Kind::Pause: o << "pause(" << op.a << ')'; break;
        case TimeOp::Kind::Speed: o << "speed(" << op.a << ')'; break;
      }
    }
    return o.str();
  }

 private:
  static TimeOp parse_op(const std::string& tok, const std::string& whole) {
    auto fail = [&](const std::string& why) -> TimeOp {
      throw InvalidArgument("time map '" + whole + "': " + why);
    };
    const std::size_t open = tok.find('(');
    const std::string name = tok.substr(0, open);
    std::vector<double> args;
    if (open != std::string::npos) {
      if (tok.back() != ')') return fail("missing ')' in '" + tok + "'");
      std::stringstream in(tok.substr(open + 1, tok.size() - open - 2));
      std::string a;
      while (std::getline(in, a, ',')) {
        try {
          std::size_t used = 0;
          args.push_back(std::stod(a, &used));
          if (used != a.size()) return fail("bad number '" + a + "'");
        } catch (const std::logic_error&) {
          return fail("bad number '" + a + "'");
        }
      }
    }
    auto need = [&](std::size_t n) {
      if (args.size() != n) fail(name + " takes " + std::to_string(n) + " argument(s)");
    };
    auto integral = [&](double v) {
      if (v != std::floor(v)) fail(name + " needs integer arguments");
    };
    TimeOp op;
    if (name == "shift") {
      need(1);
      integral(args[0]);
      op = {TimeOp::Kind::Shift, args[0], 0};
    } else if (name == "clip") {
      need(2);
      integral(args[0]);
      integral(args[1]);
      if (args[1] < args[0]) fail("clip needs a <= b");
      op = {TimeOp::Kind::Clip, args[0], args[1]};
    } else if (name == "reverse") {
      need(0);
      op = {TimeOp::Kind::Reverse, 0, 0};
    } else if (name == "loop") {
      need(1);
      integral(args[0]);
      if (args[0] < 1) fail("loop period must be >= 1");
      op = {TimeOp::Kind::Loop, args[0], 0};
    } else if (name == "pause") {
      need(1);
      integral(args[0]);
      op = {TimeOp::Kind::Pause, args[0], 0};
    } else if (name == "speed") {
      need(1);
      if (!(args[0] > 0.0)) fail("speed must be > 0");
      op = {TimeOp::Kind::Speed, args[0], 0};
    } else {
      fail("unknown operator '" + name + "'");
    }
    return op;
  }
};

// ---------------------------------------------------------------------------
// Instances, lights

/// A loaded tree shared by every instance that references it.
struct TreeAsset {
  std::string path;  // where it was loaded from / is saved to
  VOctree tree;
  bool dirty = false;  // edited since load
};

struct SceneInstance {
  std::string id;
  std::string name;
  std::shared_ptr<TreeAsset> asset;
  Eigen::Affine3d affine = Eigen::Affine3d::Identity();
  TimeMap timemap;
  bool visible = true;
  double yaw_rate = 0.0;  // self-rotation about the local bbox center, radians per global frame

  /// World transform at a global frame, including self-rotation.
  Eigen::Affine3d world_at(long global_frame) const {
    if (yaw_rate == 0.0) return affine;
    const Vec3 c = asset->tree.bbox().center();
    Eigen::Affine3d spin = Eigen::Affine3d::Identity();
    spin.translate(c).rotate(Eigen::AngleAxisd(yaw_rate * static_cast<double>(global_frame), Vec3::UnitY())).translate(-c);
    return affine * spin;
  }

  int local_frame(long global_frame) const { return timemap(global_frame, asset->tree.frames()); }
};

inline bool invertible(const Eigen::Affine3d& a) { return std::abs(a.linear().determinant()) > 1e-9; }

/// New record pointing at the same tree.
inline SceneInstance duplicate(const SceneInstance& inst, std::string new_id) {
  SceneInstance d = inst;
  d.id = std::move(new_id);
  return d;
}

struct Light {
  Vec3 position = Vec3(0, -3, 0);
  Eigen::Vector4d ground_plane = Eigen::Vector4d(0, -1, 0, 1);  // n.x + d = 0, light on the n side
  bool enabled = true;
  bool shadow = true;
  int shadow_resolution = 128;
  double shadow_fov_deg = 100.0;
  double blur_sigma = 1.5;       // texels
  double shadow_strength = 0.7;
  bool falloff = false;
  double falloff_r0 = 2.0;
  double falloff_min = 0.2;

  Vec3 normal() const { return ground_plane.head<3>().normalized(); }
  double plane_offset() const { return ground_plane[3] / ground_plane.head<3>().norm(); }
  double height() const { return normal().dot(position) + plane_offset(); }

  void validate() const {
    if (ground_plane.head<3>().norm() < 1e-12) throw InvalidArgument("light: ground plane normal is zero");
    if (std::abs(height()) < 1e-9) throw InvalidArgument("light: light lies in the ground plane (degenerate projection)");
    if (height() < 0.0) throw InvalidArgument("light: light must be above the ground plane");
    if (blur_sigma < 0.0) throw InvalidArgument("light: blur_sigma must be >= 0");
    if (shadow_resolution < 1) throw InvalidArgument("light: shadow_resolution must be positive");
    if (!(shadow_strength >= 0.0 && shadow_strength <= 1.0)) throw InvalidArgument("light: shadow_strength outside [0,1]");
    if (!(falloff_r0 > 0.0) || !(falloff_min >= 0.0 && falloff_min <= 1.0))
      throw InvalidArgument("light: bad falloff parameters");
  }
};

// ---------------------------------------------------------------------------
// Blending

/// Depth-aware alpha blending of ordered layers, per pixel:
///   I = I_1, D = D_1, A = A_1
///   for i >= 2:  if D_i <= D:  I = A_i I_i + (1 - A_i) A I,  D = D_i
///                else:         I = A I + (1 - A) A_i I_i
///                A = A + A_i (1 - A)
/// For one layer the output is the layer itself (straight color); from two
/// layers on, I carries premultiplied color.
inline LayerImages blend_layers(const std::vector<LayerImages>& layers) {
  if (layers.empty()) throw InvalidArgument("blend_layers: no layers");
  const int w = layers[0].width(), h = layers[0].height();
  for (const auto& l : layers)
    if (l.width() != w || l.height() != h)
      throw InvalidArgument("blend_layers: layer is " + std::to_string(l.width()) + "x" + std::to_string(l.height()) +
                            ", expected " + std::to_string(w) + "x" + std::to_string(h));
  LayerImages out = layers[0];
  for (std::size_t i = 1; i < layers.size(); ++i) {
    const LayerImages& L = layers[i];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double Ai = L.alpha.at(x, y), A = out.alpha.at(x, y);
        const bool fg = L.depth.at(x, y) <= out.depth.at(x, y);
        for (int c = 0; c < 3; ++c) {
          const double Ii = L.rgb.at(x, y, c), I = out.rgb.at(x, y, c);
          out.rgb.at(x, y, c) = fg ? Ai * Ii + (1 - Ai) * A * I : A * I + (1 - A) * Ai * Ii;
        }
        if (fg) out.depth.at(x, y) = L.depth.at(x, y);
        out.alpha.at(x, y) = A + Ai * (1 - A);
      }
  }
  return out;
}

/// Premultiplied color of a blended layer stack.
inline ImageD premultiplied(const LayerImages& blended, std::size_t layer_count) {
  ImageD out = blended.rgb;
  if (layer_count == 1)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x)
        for (int c = 0; c < 3; ++c) out.at(x, y, c) *= blended.alpha.at(x, y);
  return out;
}

// ---------------------------------------------------------------------------
// Lighting

inline std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

/// Separable normalized Gaussian blur of a single-channel image, zero outside.
inline ImageD gaussian_blur(const ImageD& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  ImageD tmp(img.width, img.height, 1), out(img.width, img.height, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i)
        if (x + i >= 0 && x + i < img.width) s += k[static_cast<std::size_t>(i + r)] * img.at(x + i, y);
      tmp.at(x, y) = s;
    }
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i)
        if (y + i >= 0 && y + i < img.height) s += k[static_cast<std::size_t>(i + r)] * tmp.at(x, y + i);
      out.at(x, y) = s;
    }
  return out;
}

/// Occlusion seen from a point light: the light camera looks straight down
/// at the ground; the blurred alpha map is the probability that light is
/// blocked before reaching the ground along that texel's ray.
struct ShadowMap {
  Camera light_cam;
  ImageD alpha;  // blurred
  Vec3 normal;
  double offset = 0.0;
  double strength = 0.7;

  /// Brightness factor at a ground point: 1 - strength * alpha.
  double darkening(const Vec3& ground_point) const {
    const auto p = light_cam.project(ground_point);
    if (!p) return 1.0;
    const double u = p->x() - 0.5, v = p->y() - 0.5;
    const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
    const double fx = u - x0, fy = v - y0;
    auto at = [&](int x, int y) {
      return (x < 0 || y < 0 || x >= alpha.width || y >= alpha.height) ? 0.0 : alpha.at(x, y);
    };
    const double a = (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) +
                     fy * ((1 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
    return 1.0 - strength * a;
  }

  /// Ground point under light-camera texel (i, j).
  std::optional<Vec3> texel_ground(double px, double py) const {
    const Ray r = light_cam.ray(px, py);
    const double den = normal.dot(r.dir);
    if (std::abs(den) < 1e-12) return std::nullopt;
    const double t = -(normal.dot(r.origin) + offset) / den;
    if (t <= 0.0) return std::nullopt;
    return r.origin + t * r.dir;
  }
};

inline Camera light_camera(const Light& light) {
  const Vec3 n = light.normal();
  const Vec3 target = light.position - light.height() * n;
  const Vec3 helper = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitZ();
  return Camera::look_at(light.position, target, n.cross(helper), light.shadow_resolution, light.shadow_resolution,
                         light.shadow_fov_deg);
}

/// Renders combined alpha of all visible instances from the light.
inline ShadowMap shadow_pass(const std::vector<SceneInstance>& instances, const Light& light, long global_frame,
                             const RenderOptions& opt = {}) {
  light.validate();
  ShadowMap sm;
  sm.light_cam = light_camera(light);
  sm.normal = light.normal();
  sm.offset = light.plane_offset();
  sm.strength = light.shadow_strength;
  ImageD trans(light.shadow_resolution, light.shadow_resolution, 1, 1.0);
  for (const auto& inst : instances) {
    if (!inst.visible) continue;
    const Eigen::Affine3d world = inst.world_at(global_frame);
    const auto layer = render(inst.asset->tree, sm.light_cam.transformed(world.inverse()), inst.local_frame(global_frame), opt);
    for (std::size_t i = 0; i < trans.data.size(); ++i) trans.data[i] *= 1.0 - layer.alpha.data[i];
  }
  ImageD a(trans.width, trans.height, 1);
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] = 1.0 - trans.data[i];
  sm.alpha = gaussian_blur(a, light.blur_sigma);
  return sm;
}

/// Per-pixel brightness scale clamp(r0^2 / (r0^2 + d^2), min, 1) from the
/// distance d between the light and the surface point at the layer depth;
/// 1 where the layer is empty.
inline ImageD falloff_pass(const LayerImages& layer, const Camera& cam, const Light& light) {
  ImageD scale(layer.width(), layer.height(), 1, 1.0);
  const double r2 = light.falloff_r0 * light.falloff_r0;
  for (int y = 0; y < layer.height(); ++y)
    for (int x = 0; x < layer.width(); ++x) {
      if (layer.alpha.at(x, y) <= 0.0) continue;
      const Ray r = cam.pixel_ray(x, y);
      const Vec3 p = r.origin + layer.depth.at(x, y) * r.dir.normalized();
      const double d2 = (p - light.position).squaredNorm();
      scale.at(x, y) = std::clamp(r2 / (r2 + d2), light.falloff_min, 1.0);
    }
  return scale;
}

// ---------------------------------------------------------------------------
// Painting

struct PaintReport {
  std::size_t edits = 0;    // rays that wrote an edit
  std::size_t skipped = 0;  // rays that never reached the alpha threshold
  std::vector<std::int32_t> leaves;
};

/// For every pixel, walks the ray at `frame` and writes the edit into the
/// first leaf where accumulated alpha reaches `threshold`.
inline PaintReport paint(VOctree& tree, const Camera& cam, const std::vector<std::array<int, 2>>& pixels,
                         const std::array<float, 3>& rgb, int first_frame, int last_frame, int frame,
                         double threshold = 0.99, float target_density = 0.f) {
  check_frame(tree, frame);
  EditChannels e;
  e.target_rgb = rgb;
  e.target_density = target_density;
  e.first_frame = first_frame;
  e.last_frame = last_frame;
  {
    // validate before touching the tree
    PayloadLayout probe = tree.layout();
    probe.edits = true;
    std::vector<float> tmp(static_cast<std::size_t>(probe.stride()));
    write_edit<float>(probe, tmp, e);
  }
  PaintReport rep;
  std::vector<std::int32_t> hits;
  std::vector<float> sliced(static_cast<std::size_t>(3 * tree.truncation().sh_count()));
  for (const auto& px : pixels) {
    if (px[0] < 0 || px[1] < 0 || px[0] >= cam.width || px[1] >= cam.height) {
      ++rep.skipped;
      continue;
    }
    const Ray ray = cam.pixel_ray(px[0], px[1]);
    const double len = ray.dir.norm();
    double trans = 1.0;
    std::int32_t hit = -1;
    tree.traverse(ray.origin, ray.dir, 0.0, std::numeric_limits<double>::infinity(),
                  [&](std::int32_t leaf, double t0, double t1) {
                    const double sigma = sample_leaf<float>(tree, leaf, frame, sliced).sigma;
                    trans *= std::exp(-sigma * (t1 - t0) * len);
                    if (1.0 - trans >= threshold) {
                      hit = leaf;
                      return false;
                    }
                    return true;
                  });
    if (hit < 0) {
      ++rep.skipped;
      continue;
    }
    hits.push_back(hit);
  }
  if (!hits.empty()) tree.enable_edits();
  for (auto leaf : hits) write_edit<float>(tree.layout(), tree.mutable_payload(leaf), e);
  rep.edits = hits.size();
  std::sort(hits.begin(), hits.end());
  hits.erase(std::unique(hits.begin(), hits.end()), hits.end());
  rep.leaves = std::move(hits);
  return rep;
}

// ---------------------------------------------------------------------------
// Scene state and rendering

struct SceneState {
  std::vector<SceneInstance> instances;
  std::vector<Light> lights;
  std::array<double, 3> background{0.1, 0.1, 0.12};
  std::string background_image;  // optional PNG, resized by nearest lookup
  long frame_begin = 0;
  long frame_end = 0;  // inclusive

  const SceneInstance* find(const std::string& id) const {
    for (const auto& i : instances)
      if (i.id == id) return &i;
    return nullptr;
  }
  SceneInstance* find(const std::string& id) {
    for (auto& i : instances)
      if (i.id == id) return &i;
    return nullptr;
  }

  /// Distinct trees referenced by instances.
  std::vector<std::shared_ptr<TreeAsset>> assets() const {
    std::vector<std::shared_ptr<TreeAsset>> out;
    for (const auto& i : instances)
      if (std::find(out.begin(), out.end(), i.asset) == out.end()) out.push_back(i.asset);
    return out;
  }

  std::size_t payload_bytes() const {
    std::size_t n = 0;
    for (const auto& a : assets()) n += a->tree.payload_bytes();
    return n;
  }

  std::size_t record_bytes() const {
    std::size_t n = sizeof(SceneState);
    for (const auto& i : instances)
      n += sizeof(SceneInstance) + i.id.capacity() + i.name.capacity() + i.timemap.ops.capacity() * sizeof(TimeOp);
    n += lights.capacity() * sizeof(Light);
    return n;
  }

  std::size_t memory_bytes() const {
    std::size_t n = record_bytes();
    for (const auto& a : assets()) n += a->tree.memory_bytes() + sizeof(TreeAsset);
    return n;
  }
};

struct SceneRenderOptions {
  RenderOptions render;
  bool keep_layers = false;
  bool lighting = true;
};

struct SceneRender {
  ImageD image;  // final rgb
  LayerImages blended;
  std::vector<LayerImages> layers;  // when requested
};

inline ImageD background_for(const SceneState& s, int w, int h) {
  if (s.background_image.empty()) return constant_image(w, h, s.background);
  const ImageF src = read_png(s.background_image);
  ImageD out(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int sx = std::min(src.width - 1, x * src.width / w), sy = std::min(src.height - 1, y * src.height / h);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = src.at(sx, sy, std::min(c, src.channels - 1));
    }
  return out;
}

/// Renders every visible instance, blends the layers, applies light
/// falloff to the blend and shadows to the ground seen in the background.
inline SceneRender render_scene(const SceneState& scene, const Camera& cam, long global_frame,
                                const SceneRenderOptions& opt = {}) {
  cam.validate();
  std::vector<LayerImages> layers;
  for (const auto& inst : scene.instances) {
    if (!inst.visible) continue;
    const Eigen::Affine3d world = inst.world_at(global_frame);
    if (!invertible(world)) throw InvalidArgument("instance " + inst.id + " has a singular transform");
    layers.push_back(render(inst.asset->tree, cam.transformed(world.inverse()), inst.local_frame(global_frame), opt.render));
  }
  if (layers.empty()) throw InvalidArgument("render_scene: no visible instances");
  SceneRender out;
  out.blended = blend_layers(layers);
  ImageD premul = premultiplied(out.blended, layers.size());
  ImageD bg = background_for(scene, cam.width, cam.height);
  if (opt.lighting)
    for (const Light& light : scene.lights) {
      if (!light.enabled) continue;
      if (light.falloff) {
        const ImageD s = falloff_pass(out.blended, cam, light);
        for (std::size_t p = 0; p < s.data.size(); ++p)
          for (int c = 0; c < 3; ++c) premul.data[p * 3 + c] *= s.data[p];
      }
      if (light.shadow) {
        const ShadowMap sm = shadow_pass(scene.instances, light, global_frame, opt.render);
        for (int y = 0; y < cam.height; ++y)
          for (int x = 0; x < cam.width; ++x) {
            const Ray r = cam.pixel_ray(x, y);
            const double den = sm.normal.dot(r.dir);
            if (std::abs(den) < 1e-12) continue;
            const double t = -(sm.normal.dot(r.origin) + sm.offset) / den;
            if (t <= 0.0) continue;
            const double k = sm.darkening(r.origin + t * r.dir);
            for (int c = 0; c < 3; ++c) bg.at(x, y, c) *= k;
          }
      }
    }
  out.image = ImageD(cam.width, cam.height, 3);
  for (std::size_t p = 0; p < out.image.pixels(); ++p) {
    const double a = out.blended.alpha.data[p];
    for (int c = 0; c < 3; ++c) out.image.data[p * 3 + c] = premul.data[p * 3 + c] + (1.0 - a) * bg.data[p * 3 + c];
  }
  if (opt.keep_layers) out.layers = std::move(layers);
  return out;
}

// ---------------------------------------------------------------------------
// Scene file
//
//   { "background": [r, g, b], "background_image": "plate.png",
//     "frames": [first, last],
//     "instances": [ { "id", "name", "voct": "path.voct",
//                      "affine": [16 numbers, row-major 4x4],
//                      "timemap": "shift(5)|loop(30)|reverse",
//                      "visible": true, "yaw_rate": 0 } ],
//     "lights": [ { "position": [x,y,z], "ground_plane": [a,b,c,d], ... } ] }
//
// Relative voct paths are resolved against the scene file's directory;
// instances naming the same file share one loaded tree.

inline json affine_to_json(const Eigen::Affine3d& a) {
  json m = json::array();
  const Eigen::Matrix4d mm = a.matrix();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m.push_back(mm(r, c));
  return m;
}

inline Eigen::Affine3d affine_from_json(const json& j) {
  if (!j.is_array() || j.size() != 16) throw InvalidArgument("affine must be 16 numbers (row-major 4x4)");
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      const auto& v = j.at(static_cast<std::size_t>(4 * r + c));
      if (!v.is_number()) throw InvalidArgument("affine entries must be numbers");
      m(r, c) = v.get<double>();
    }
  if (m(3, 0) != 0.0 || m(3, 1) != 0.0 || m(3, 2) != 0.0 || m(3, 3) != 1.0)
    throw InvalidArgument("affine: last row must be [0, 0, 0, 1]");
  Eigen::Affine3d a(m);
  if (!invertible(a)) throw InvalidArgument("affine is singular (|det| <= 1e-9)");
  return a;
}

inline json light_to_json(const Light& l) {
  return {{"position", {l.position.x(), l.position.y(), l.position.z()}},
          {"ground_plane", {l.ground_plane[0], l.ground_plane[1], l.ground_plane[2], l.ground_plane[3]}},
          {"enabled", l.enabled},
          {"shadow", l.shadow},
          {"shadow_resolution", l.shadow_resolution},
          {"shadow_fov_deg", l.shadow_fov_deg},
          {"blur_sigma", l.blur_sigma},
          {"shadow_strength", l.shadow_strength},
          {"falloff", l.falloff},
          {"falloff_r0", l.falloff_r0},
          {"falloff_min", l.falloff_min}};
}

inline Light light_from_json(const json& j) {
  Light l;
  if (j.contains("position")) {
    const auto& p = j.at("position");
    l.position = Vec3(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
  }
  if (j.contains("ground_plane")) {
    const auto& g = j.at("ground_plane");
    l.ground_plane = Eigen::Vector4d(g.at(0).get<double>(), g.at(1).get<double>(), g.at(2).get<double>(), g.at(3).get<double>());
  }
  l.enabled = j.value("enabled", l.enabled);
  l.shadow = j.value("shadow", l.shadow);
  l.shadow_resolution = j.value("shadow_resolution", l.shadow_resolution);
  l.shadow_fov_deg = j.value("shadow_fov_deg", l.shadow_fov_deg);
  l.blur_sigma = j.value("blur_sigma", l.blur_sigma);
  l.shadow_strength = j.value("shadow_strength", l.shadow_strength);
  l.falloff = j.value("falloff", l.falloff);
  l.falloff_r0 = j.value("falloff_r0", l.falloff_r0);
  l.falloff_min = j.value("falloff_min", l.falloff_min);
  l.validate();
  return l;
}

inline json instance_to_json(const SceneInstance& i) {
  return {{"id", i.id},
          {"name", i.name},
          {"voct", i.asset ? i.asset->path : std::string()},
          {"affine", affine_to_json(i.affine)},
          {"timemap", i.timemap.to_string()},
          {"visible", i.visible},
          {"yaw_rate", i.yaw_rate}};
}

inline json scene_to_json(const SceneState& s) {
  json j;
  j["background"] = {s.background[0], s.background[1], s.background[2]};
  if (!s.background_image.empty()) j["background_image"] = s.background_image;
  j["frames"] = {s.frame_begin, s.frame_end};
  j["instances"] = json::array();
  for (const auto& i : s.instances) j["instances"].push_back(instance_to_json(i));
  j["lights"] = json::array();
  for (const auto& l : s.lights) j["lights"].push_back(light_to_json(l));
  return j;
}

/// Resolves voct paths to shared assets, loading each file once.
using AssetLoader = std::function<std::shared_ptr<TreeAsset>(const std::string&)>;

inline AssetLoader file_loader(const std::filesystem::path& base_dir) {
  auto cache = std::make_shared<std::map<std::string, std::shared_ptr<TreeAsset>>>();
  return [cache, base_dir](const std::string& path) {
    std::filesystem::path p(path);
    if (p.is_relative()) p = base_dir / p;
    const std::string key = p.lexically_normal().string();
    auto it = cache->find(key);
    if (it != cache->end()) return it->second;
    auto a = std::make_shared<TreeAsset>(TreeAsset{key, load_voct(p), false});
    (*cache)[key] = a;
    return a;
  };
}

inline SceneInstance instance_from_json(const json& j, const AssetLoader& load, const std::string& fallback_id) {
  SceneInstance i;
  i.id = j.value("id", fallback_id);
  i.name = j.value("name", i.id);
  i.asset = load(j.at("voct").get<std::string>());
  if (j.contains("affine")) i.affine = affine_from_json(j.at("affine"));
  i.timemap = TimeMap::parse(j.value("timemap", std::string()));
  i.visible = j.value("visible", true);
  i.yaw_rate = j.value("yaw_rate", 0.0);
  return i;
}

inline SceneState scene_from_json(const json& j, const AssetLoader& load) {
  SceneState s;
  if (j.contains("background")) {
    const auto& b = j.at("background");
    s.background = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>()};
  }
  s.background_image = j.value("background_image", std::string());
  for (const auto& ij : j.value("instances", json::array()))
    s.instances.push_back(instance_from_json(ij, load, "i" + std::to_string(s.instances.size())));
  for (const auto& lj : j.value("lights", json::array())) s.lights.push_back(light_from_json(lj));
  long max_frames = 1;
  for (const auto& i : s.instances) max_frames = std::max<long>(max_frames, i.asset->tree.frames());
  s.frame_begin = 0;
  s.frame_end = max_frames - 1;
  if (j.contains("frames")) {
    s.frame_begin = j.at("frames").at(0).get<long>();
    s.frame_end = j.at("frames").at(1).get<long>();
    if (s.frame_end < s.frame_begin) throw InvalidArgument("scene: frame range is empty");
  }
  return s;
}

inline SceneState load_scene(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open scene file " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw IoError("scene file " + path.string() + ": malformed JSON: " + e.what());
  }
  try {
    return scene_from_json(j, file_loader(path.parent_path()));
  } catch (const json::exception& e) {
    throw IoError("scene file " + path.string() + ": " + e.what());
  }
}

/// Writes the scene file and every edited tree back to its path.
inline void save_scene(const SceneState& s, const std::filesystem::path& path) {
  for (const auto& a : s.assets())
    if (a->dirty && !a->path.empty()) {
      save_voct(a->tree, a->path);
      a->dirty = false;
    }
  json j = scene_to_json(s);
  for (auto& ij : j["instances"]) {
    const std::filesystem::path p(ij["voct"].get<std::string>());
    if (p.is_absolute() && !path.parent_path().empty())
      ij["voct"] = std::filesystem::proximate(p, std::filesystem::absolute(path.parent_path())).string();
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot write scene file " + path.string());
  f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Shared scene with serialized mutations

/// Scene graph shared between renderers and editors. Mutations run one at a
/// time and publish a new copy of the instance records with the revision
/// bumped; readers take an immutable snapshot. Payload edits (painting) are
/// the one in-place change and are fenced by an exclusive payload lock.
class Scene {
 public:
  struct Snapshot {
    std::shared_ptr<const SceneState> state;
    std::uint64_t revision = 0;
  };

  explicit Scene(SceneState s) : state_(std::make_shared<const SceneState>(std::move(s))) {}

  Snapshot snapshot() const {
    std::lock_guard lock(publish_mu_);
    return {state_, revision_};
  }

  std::uint64_t revision() const { return snapshot().revision; }

  /// Applies `fn` to a copy of the state and publishes it. Throws whatever
  /// `fn` throws, leaving the scene unchanged.
  template <class Fn>
  std::uint64_t mutate(Fn&& fn) {
    std::lock_guard queue(mutation_mu_);
    SceneState next = *snapshot().state;
    fn(next);
    std::lock_guard lock(publish_mu_);
    state_ = std::make_shared<const SceneState>(std::move(next));
    return ++revision_;
  }

  /// Mutation that edits payloads of a shared tree in place.
  template <class Fn>
  std::uint64_t mutate_payload(Fn&& fn) {
    std::lock_guard queue(mutation_mu_);
    SceneState next = *snapshot().state;
    {
      std::unique_lock payload(payload_mu_);
      fn(next);
    }
    std::lock_guard lock(publish_mu_);
    state_ = std::make_shared<const SceneState>(std::move(next));
    return ++revision_;
  }

  /// Renders a snapshot while holding payloads stable.
  SceneRender render(const Snapshot& snap, const Camera& cam, long global_frame, const SceneRenderOptions& opt = {}) const {
    std::shared_lock payload(payload_mu_);
    return render_scene(*snap.state, cam, global_frame, opt);
  }

  std::string next_id(const std::string& prefix = "i") {
    return prefix + std::to_string(id_counter_++);
  }

 private:
  mutable std::mutex publish_mu_;
  std::mutex mutation_mu_;
  mutable std::shared_mutex payload_mu_;
  std::shared_ptr<const SceneState> state_;
  std::uint64_t revision_ = 0;
  std::atomic<std::uint64_t> id_counter_{1000};
};

}  // namespace neuvv
