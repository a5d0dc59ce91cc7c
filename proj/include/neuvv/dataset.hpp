#pragma once

/// \file
/// Multi-view video datasets: the on-disk layout, camera JSON, and a
/// brute-force synthetic generator whose fine-step ray marcher serves as
/// ground truth for fitting and compositing tests.
///
/// Directory layout:
///
///     cameras.json                 see cameras_to_json
///     frames/<view>/<frame>.png    8-bit RGB
///     masks/<view>/<frame>.png     8-bit gray foreground alpha
///     background/<view>.png        8-bit RGB plate

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "neuvv/camera.hpp"
#include "neuvv/errors.hpp"
#include "neuvv/image.hpp"
#include "neuvv/parallel.hpp"
#include "neuvv/voctree.hpp"

namespace neuvv {

using json = nlohmann::json;

struct Dataset {
  std::vector<Camera> views;
  int frames = 0;
  std::vector<ImageF> images;       // [view * frames + frame], 3 channels
  std::vector<ImageF> masks;        // same indexing, 1 channel; empty if absent
  std::vector<ImageF> backgrounds;  // per view, 3 channels
  Box3 domain{Vec3(-1, -1, -1), Vec3(1, 1, 1)};  // region the fitted tree covers

  int view_count() const { return static_cast<int>(views.size()); }
  bool has_masks() const { return !masks.empty(); }
  const ImageF& image(int view, int frame) const { return images[static_cast<std::size_t>(view) * frames + frame]; }
  const ImageF& mask(int view, int frame) const { return masks[static_cast<std::size_t>(view) * frames + frame]; }

  /// Throws InvalidArgument if counts or shapes disagree.
  void validate() const {
    if (views.empty()) throw InvalidArgument("dataset: no views");
    if (frames < 1) throw InvalidArgument("dataset: frame count must be >= 1");
    const std::size_t n = views.size() * static_cast<std::size_t>(frames);
    if (images.size() != n) throw InvalidArgument("dataset: expected " + std::to_string(n) + " images");
    if (!masks.empty() && masks.size() != n) throw InvalidArgument("dataset: expected " + std::to_string(n) + " masks");
    if (backgrounds.size() != views.size()) throw InvalidArgument("dataset: expected one background per view");
    for (int v = 0; v < view_count(); ++v) {
      const Camera& c = views[static_cast<std::size_t>(v)];
      c.validate();
      auto check = [&](const ImageF& img, int ch, const std::string& what) {
        if (img.width != c.width || img.height != c.height || img.channels != ch)
          throw InvalidArgument("dataset: " + what + " of view " + std::to_string(v) + " is " +
                                std::to_string(img.width) + "x" + std::to_string(img.height) + "x" +
                                std::to_string(img.channels) + ", camera is " + std::to_string(c.width) + "x" +
                                std::to_string(c.height));
      };
      check(backgrounds[static_cast<std::size_t>(v)], 3, "background");
      for (int f = 0; f < frames; ++f) {
        check(image(v, f), 3, "frame " + std::to_string(f));
        if (has_masks()) check(mask(v, f), 1, "mask " + std::to_string(f));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Synthetic scenes

struct Primitive {
  enum class Kind { Sphere, Box };
  Kind kind = Kind::Sphere;
  Vec3 center = Vec3::Zero();  // position at frame 0
  Vec3 travel = Vec3::Zero();  // displacement reached at the last frame (linear)
  double radius = 0.4;         // sphere radius
  Vec3 half_extent = Vec3::Constant(0.3);  // box half sizes
  double density = 40.0;       // interior density
  double edge = 0.05;          // width of the smooth density falloff at the surface
  Vec3 rgb = Vec3(0.7, 0.4, 0.3);         // color at frame 0
  Vec3 rgb_end = Vec3(0.7, 0.4, 0.3);     // color at the last frame (linear in time)
  Vec3 tint = Vec3::Zero();               // view-dependent term tint * dot(dir, tint_axis)
  Vec3 tint_axis = Vec3::UnitZ();

  Vec3 center_at(double s) const { return center + s * travel; }

  /// Density at local offset q from the current center.
  double density_at(const Vec3& q) const {
    double inside;  // signed distance to the surface, positive inside
    if (kind == Kind::Sphere) {
      inside = radius - q.norm();
    } else {
      inside = (half_extent - q.cwiseAbs()).minCoeff();
    }
    if (inside <= 0.0) return 0.0;
    if (edge <= 0.0 || inside >= edge) return density;
    const double u = inside / edge;
    return density * u * u * (3.0 - 2.0 * u);
  }

  Vec3 color(const Vec3& dir, double s) const {
    Vec3 c = (1.0 - s) * rgb + s * rgb_end + tint * dir.dot(tint_axis.normalized());
    return c.cwiseMax(Vec3::Zero()).cwiseMin(Vec3::Ones());
  }

  /// Parameter interval where the ray meets the primitive's support.
  bool clip(const Vec3& o, const Vec3& d, double s, double& t0, double& t1) const {
    const Vec3 c = center_at(s);
    if (kind == Kind::Sphere) {
      const Vec3 oc = o - c;
      const double a = d.squaredNorm(), b = oc.dot(d), cc = oc.squaredNorm() - radius * radius;
      const double disc = b * b - a * cc;
      if (disc <= 0.0) return false;
      const double sq = std::sqrt(disc);
      t0 = (-b - sq) / a;
      t1 = (-b + sq) / a;
      return true;
    }
    t0 = -std::numeric_limits<double>::infinity();
    t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      const double lo = c[a] - half_extent[a], hi = c[a] + half_extent[a];
      if (d[a] == 0.0) {
        if (o[a] < lo || o[a] > hi) return false;
        continue;
      }
      double ta = (lo - o[a]) / d[a], tb = (hi - o[a]) / d[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    return t1 > t0;
  }
};

struct SyntheticSceneSpec {
  std::string name = "scene";
  std::vector<Primitive> primitives;
  Box3 domain{Vec3(-1, -1, -1), Vec3(1, 1, 1)};
  int frames = 16;
  Vec3 background = Vec3(0.1, 0.1, 0.12);
  double camera_distance = 3.2;
  double fov_y_deg = 40.0;

  /// Normalized time s in [0, 1] of a frame.
  double time_of(int frame) const { return frames > 1 ? static_cast<double>(frame) / (frames - 1) : 0.0; }

  void validate() const {
    if (frames < 1) throw InvalidArgument("scene spec: frames must be >= 1");
    if (!((domain.hi.array() > domain.lo.array()).all())) throw InvalidArgument("scene spec: empty domain");
    for (std::size_t i = 0; i < primitives.size(); ++i) {
      const Primitive& p = primitives[i];
      const std::string who = "scene spec: primitive " + std::to_string(i);
      if (p.density < 0.0) throw InvalidArgument(who + " has negative density");
      if (p.edge < 0.0) throw InvalidArgument(who + " has negative edge width");
      if (p.kind == Primitive::Kind::Sphere && !(p.radius > 0.0)) throw InvalidArgument(who + " has radius <= 0");
      const Vec3 ext = p.kind == Primitive::Kind::Sphere ? Vec3::Constant(p.radius) : p.half_extent;
      for (double s : {0.0, 1.0}) {
        const Vec3 c = p.center_at(s);
        if (((c - ext).array() < domain.lo.array()).any() || ((c + ext).array() > domain.hi.array()).any())
          throw InvalidArgument(who + " leaves the domain box along its trajectory");
      }
    }
  }
};

inline Vec3 vec3_from(const json& j) { return Vec3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()); }
inline json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline SyntheticSceneSpec scene_spec_from_json(const json& j) {
  SyntheticSceneSpec s;
  s.name = j.value("name", s.name);
  s.frames = j.value("frames", s.frames);
  if (j.contains("domain")) {
    s.domain.lo = vec3_from(j["domain"].at("lo"));
    s.domain.hi = vec3_from(j["domain"].at("hi"));
  }
  if (j.contains("background")) s.background = vec3_from(j["background"]);
  s.camera_distance = j.value("camera_distance", s.camera_distance);
  s.fov_y_deg = j.value("fov_y_deg", s.fov_y_deg);
  for (const auto& pj : j.value("primitives", json::array())) {
    Primitive p;
    const std::string kind = pj.value("kind", std::string("sphere"));
    if (kind == "sphere")
      p.kind = Primitive::Kind::Sphere;
    else if (kind == "box")
      p.kind = Primitive::Kind::Box;
    else
      throw InvalidArgument("scene spec: unknown primitive kind '" + kind + "'");
    if (pj.contains("center")) p.center = vec3_from(pj["center"]);
    if (pj.contains("travel")) p.travel = vec3_from(pj["travel"]);
    p.radius = pj.value("radius", p.radius);
    if (pj.contains("half_extent")) p.half_extent = vec3_from(pj["half_extent"]);
    p.density = pj.value("density", p.density);
    p.edge = pj.value("edge", p.edge);
    if (pj.contains("rgb")) p.rgb = p.rgb_end = vec3_from(pj["rgb"]);
    if (pj.contains("rgb_end")) p.rgb_end = vec3_from(pj["rgb_end"]);
    if (pj.contains("tint")) p.tint = vec3_from(pj["tint"]);
    if (pj.contains("tint_axis")) p.tint_axis = vec3_from(pj["tint_axis"]);
    s.primitives.push_back(p);
  }
  s.validate();
  return s;
}

inline json scene_spec_to_json(const SyntheticSceneSpec& s) {
  json j;
  j["name"] = s.name;
  j["frames"] = s.frames;
  j["domain"] = {{"lo", to_json(s.domain.lo)}, {"hi", to_json(s.domain.hi)}};
  j["background"] = to_json(s.background);
  j["camera_distance"] = s.camera_distance;
  j["fov_y_deg"] = s.fov_y_deg;
  j["primitives"] = json::array();
  for (const auto& p : s.primitives) {
    j["primitives"].push_back({{"kind", p.kind == Primitive::Kind::Sphere ? "sphere" : "box"},
                               {"center", to_json(p.center)},
                               {"travel", to_json(p.travel)},
                               {"radius", p.radius},
                               {"half_extent", to_json(p.half_extent)},
                               {"density", p.density},
                               {"edge", p.edge},
                               {"rgb", to_json(p.rgb)},
                               {"rgb_end", to_json(p.rgb_end)},
                               {"tint", to_json(p.tint)},
                               {"tint_axis", to_json(p.tint_axis)}});
  }
  return j;
}

/// Built-in scenes addressable by name.
inline SyntheticSceneSpec preset_scene(const std::string& name, int frames = 16) {
  SyntheticSceneSpec s;
  s.name = name;
  s.frames = frames;
  Primitive p;
  if (name == "moving_sphere") {
    // Moving sphere whose color drifts over time and carries a directional tint.
    p.center = Vec3(-0.25, -0.05, 0.0);
    p.travel = Vec3(0.5, 0.1, 0.0);
    p.radius = 0.42;
    p.density = 40.0;
    p.edge = 0.06;
    p.rgb = Vec3(0.85, 0.45, 0.25);
    p.rgb_end = Vec3(0.30, 0.55, 0.85);
    p.tint = Vec3(0.12, 0.10, -0.08);
    p.tint_axis = Vec3(0.3, -0.4, 1.0);
  } else if (name == "static_sphere") {
    p.radius = 0.5;
    p.density = 40.0;
    p.rgb = p.rgb_end = Vec3(0.8, 0.6, 0.3);
  } else if (name == "empty") {
    return s;
  } else if (name == "box") {
    p.kind = Primitive::Kind::Box;
    p.half_extent = Vec3(0.35, 0.25, 0.3);
    p.density = 30.0;
    p.rgb = p.rgb_end = Vec3(0.3, 0.7, 0.4);
  } else {
    throw InvalidArgument("unknown preset scene '" + name + "'");
  }
  s.primitives.push_back(p);
  s.validate();
  return s;
}

inline SyntheticSceneSpec load_scene_spec(const std::string& path_or_preset, int frames_override = 0) {
  SyntheticSceneSpec s;
  if (std::filesystem::exists(path_or_preset)) {
    json j;
    try {
      std::ifstream f(path_or_preset);
      j = json::parse(f);
    } catch (const json::exception& e) {
      throw IoError("scene spec " + path_or_preset + ": malformed JSON: " + e.what());
    }
    try {
      s = scene_spec_from_json(j);
    } catch (const json::exception& e) {
      throw IoError("scene spec " + path_or_preset + ": " + e.what());
    }
  } else {
    s = preset_scene(path_or_preset);
  }
  if (frames_override > 0) {
    s.frames = frames_override;
    s.validate();
  }
  return s;
}

struct OracleSample {
  std::array<double, 3> premul{0, 0, 0};
  double alpha = 0.0;
  double depth_sum = 0.0;
};

/// Fine-step reference integration of one ray through the analytic scene.
/// Support intervals of all primitives are found analytically; each piece
/// between consecutive interval endpoints is marched with equal midpoint
/// steps no longer than `max_step`.
inline OracleSample oracle_ray(const SyntheticSceneSpec& spec, const Vec3& o, const Vec3& d, int frame, double max_step) {
  OracleSample r;
  const double s = spec.time_of(frame);
  const double len = d.norm();
  const Vec3 dir = d / len;
  std::vector<double> cuts;
  std::vector<std::array<double, 2>> spans;
  for (const auto& p : spec.primitives) {
    double t0, t1;
    if (p.density > 0.0 && p.clip(o, d, s, t0, t1)) {
      t0 = std::max(t0, 0.0);
      if (t1 > t0) {
        spans.push_back({t0, t1});
        cuts.push_back(t0);
        cuts.push_back(t1);
      }
    }
  }
  std::sort(cuts.begin(), cuts.end());
  double trans = 1.0;
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    const double a = cuts[k], b = cuts[k + 1];
    if (!(b > a)) continue;
    const double mid = 0.5 * (a + b);
    bool covered = false;
    for (const auto& sp : spans) covered = covered || (mid > sp[0] && mid < sp[1]);
    if (!covered) continue;
    const int n = std::max(1, static_cast<int>(std::ceil((b - a) * len / max_step)));
    const double h = (b - a) / n;
    for (int i = 0; i < n; ++i) {
      const double t = a + (i + 0.5) * h;
      const Vec3 x = o + t * d;
      double sigma = 0.0;
      Vec3 c = Vec3::Zero();
      for (const auto& p : spec.primitives) {
        const double sp = p.density_at(x - p.center_at(s));
        if (sp > 0.0) {
          sigma += sp;
          c += sp * p.color(dir, s);
        }
      }
      if (sigma <= 0.0) continue;
      c /= sigma;
      const double alpha = -std::expm1(-sigma * h * len);
      const double w = trans * alpha;
      for (int ch = 0; ch < 3; ++ch) r.premul[ch] += w * c[ch];
      r.alpha += w;
      r.depth_sum += w * t;
      trans *= 1.0 - alpha;
    }
  }
  return r;
}

/// Cameras on rings around the domain center, looking at it. Elevations
/// cycle through three rings; `phase` rotates all azimuths (radians).
inline std::vector<Camera> ring_cameras(const SyntheticSceneSpec& spec, int n_views, int resolution, double phase,
                                        std::mt19937_64* rng = nullptr) {
  std::vector<Camera> out;
  const Vec3 target = spec.domain.center();
  const double elevations[3] = {-0.30, 0.10, 0.45};
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  for (int i = 0; i < n_views; ++i) {
    const double az = phase + 2.0 * std::numbers::pi * i / n_views + (rng ? jitter(*rng) : 0.0);
    const double el = elevations[i % 3] + (rng ? jitter(*rng) : 0.0);
    // y is "down" in world space so that the image is upright.
    const Vec3 eye = target + spec.camera_distance * Vec3(std::cos(el) * std::sin(az), -std::sin(el), std::cos(el) * std::cos(az));
    out.push_back(Camera::look_at(eye, target, Vec3(0, -1, 0), resolution, resolution, spec.fov_y_deg));
  }
  return out;
}

struct OracleImage {
  ImageD rgb;    // composited over the background
  ImageD alpha;
};

inline OracleImage oracle_render(const SyntheticSceneSpec& spec, const Camera& cam, int frame, double max_step) {
  OracleImage out{ImageD(cam.width, cam.height, 3), ImageD(cam.width, cam.height, 1)};
  parallel_chunks(static_cast<std::size_t>(cam.height), 2, [&](std::size_t b, std::size_t e) {
    for (std::size_t j = b; j < e; ++j)
      for (int i = 0; i < cam.width; ++i) {
        const Ray ray = cam.pixel_ray(i, static_cast<int>(j));
        const OracleSample s = oracle_ray(spec, ray.origin, ray.dir, frame, max_step);
        const int y = static_cast<int>(j);
        out.alpha.at(i, y) = s.alpha;
        for (int c = 0; c < 3; ++c) out.rgb.at(i, y, c) = s.premul[c] + (1.0 - s.alpha) * spec.background[c];
      }
  });
  return out;
}

struct GenerateOptions {
  int n_views = 24;
  int resolution = 128;
  double phase = 0.0;
  double max_step_fraction = 1.0 / 1024.0;  // of the largest domain side
  bool quantize = true;                     // round images to 8-bit levels
  double mask_threshold = 1e-3;
};

/// Renders every view and frame of `spec` with the oracle marcher.
inline Dataset generate_synthetic(const SyntheticSceneSpec& spec, const GenerateOptions& opt, std::mt19937_64& rng) {
  spec.validate();
  if (opt.n_views < 2) throw InvalidArgument("generate_synthetic: need at least 2 views");
  if (opt.resolution < 1) throw InvalidArgument("generate_synthetic: resolution must be positive");
  Dataset ds;
  ds.frames = spec.frames;
  ds.domain = spec.domain;
  ds.views = ring_cameras(spec, opt.n_views, opt.resolution, opt.phase, &rng);
  const double step = spec.domain.size().maxCoeff() * opt.max_step_fraction;
  for (const auto& cam : ds.views) {
    ImageF bg(cam.width, cam.height, 3);
    for (std::size_t p = 0; p < bg.pixels(); ++p)
      for (int c = 0; c < 3; ++c) bg.data[p * 3 + c] = static_cast<float>(spec.background[c]);
    if (opt.quantize) quantize_u8(bg);
    ds.backgrounds.push_back(bg);
    for (int f = 0; f < spec.frames; ++f) {
      const OracleImage o = oracle_render(spec, cam, f, step);
      ImageF img = o.rgb.cast<float>();
      if (opt.quantize) quantize_u8(img);
      ImageF mask(cam.width, cam.height, 1);
      for (std::size_t p = 0; p < mask.pixels(); ++p) mask.data[p] = o.alpha.data[p] > opt.mask_threshold ? 1.f : 0.f;
      ds.images.push_back(std::move(img));
      ds.masks.push_back(std::move(mask));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Camera JSON and directory layout

/// cameras.json schema:
///
///     { "pixel_convention": "...", "frames": T, "domain": {"lo", "hi"},
///       "views": [ { "width", "height", "fx", "fy", "cx", "cy",
///                    "world_to_camera": [16 numbers, row-major 4x4] } ] }
///
/// Camera space is right-handed with +x right, +y down, +z forward; pixel
/// (i, j) covers [i, i+1) x [j, j+1) with its center at (i + 0.5, j + 0.5).
inline constexpr const char* kPixelConvention =
    "camera +x right, +y down, +z forward; pixel (i,j) center at (i+0.5, j+0.5)";

inline json camera_to_json(const Camera& c) {
  const Eigen::Matrix4d w2c = c.pose.inverse(Eigen::Isometry).matrix();
  json m = json::array();
  for (int r = 0; r < 4; ++r)
    for (int k = 0; k < 4; ++k) m.push_back(w2c(r, k));
  return {{"width", c.width}, {"height", c.height}, {"fx", c.fx}, {"fy", c.fy},
          {"cx", c.cx},       {"cy", c.cy},         {"world_to_camera", m}};
}

inline Camera camera_from_json(const json& j, double tol = 1e-9) {
  Camera c;
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  const auto& m = j.at("world_to_camera");
  if (!m.is_array() || m.size() != 16) throw InvalidArgument("camera: world_to_camera must have 16 entries");
  Eigen::Matrix4d w2c;
  for (int r = 0; r < 4; ++r)
    for (int k = 0; k < 4; ++k) w2c(r, k) = m.at(static_cast<std::size_t>(4 * r + k)).get<double>();
  Eigen::Affine3d a(w2c);
  Camera probe = c;
  probe.pose = a;
  probe.validate(tol);  // rotation of w2c is orthonormal iff that of c2w is
  c.pose = a.inverse(Eigen::Isometry);
  return c;
}

inline json cameras_to_json(const Dataset& ds) {
  json j;
  j["pixel_convention"] = kPixelConvention;
  j["frames"] = ds.frames;
  j["domain"] = {{"lo", to_json(ds.domain.lo)}, {"hi", to_json(ds.domain.hi)}};
  j["views"] = json::array();
  for (const auto& c : ds.views) j["views"].push_back(camera_to_json(c));
  return j;
}

inline std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d.png", i);
  return buf;
}

inline std::string view_name(int v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03d", v);
  return buf;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "cameras.json");
    if (!f) throw IoError("cannot write " + (dir / "cameras.json").string());
    f << cameras_to_json(ds).dump(2) << "\n";
  }
  for (int v = 0; v < ds.view_count(); ++v) {
    write_png(dir / "background" / (view_name(v) + ".png"), ds.backgrounds[static_cast<std::size_t>(v)]);
    for (int f = 0; f < ds.frames; ++f) {
      write_png(dir / "frames" / view_name(v) / frame_name(f), ds.image(v, f));
      if (ds.has_masks()) write_png(dir / "masks" / view_name(v) / frame_name(f), ds.mask(v, f));
    }
  }
}

/// Loads a dataset directory. Masks are required unless `require_masks` is
/// false, in which case a missing masks/ directory leaves them empty.
inline Dataset load_dataset(const std::filesystem::path& dir, bool require_masks = true) {
  const auto cam_path = dir / "cameras.json";
  if (!std::filesystem::exists(cam_path)) throw IoError("dataset: missing camera file " + cam_path.string());
  json j;
  try {
    std::ifstream f(cam_path);
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw IoError("dataset: malformed JSON in " + cam_path.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.frames = j.at("frames").get<int>();
    if (j.contains("domain")) {
      ds.domain.lo = vec3_from(j["domain"].at("lo"));
      ds.domain.hi = vec3_from(j["domain"].at("hi"));
    }
    for (const auto& v : j.at("views")) ds.views.push_back(camera_from_json(v));
  } catch (const json::exception& e) {
    throw IoError("dataset: bad camera record in " + cam_path.string() + ": " + e.what());
  }
  if (ds.views.empty() || ds.frames < 1) throw IoError("dataset: " + cam_path.string() + " lists no views or frames");
  const bool masks = std::filesystem::is_directory(dir / "masks");
  if (!masks && require_masks) throw IoError("dataset: missing mask directory " + (dir / "masks").string());
  auto load_rgb = [](const std::filesystem::path& p) {
    ImageF img = read_png(p);
    if (img.channels == 4) {
      ImageF rgb(img.width, img.height, 3);
      for (std::size_t i = 0; i < img.pixels(); ++i)
        for (int c = 0; c < 3; ++c) rgb.data[i * 3 + c] = img.data[i * 4 + c];
      return rgb;
    }
    if (img.channels != 3) throw IoError("dataset: " + p.string() + " is not an RGB image");
    return img;
  };
  for (int v = 0; v < ds.view_count(); ++v) {
    ds.backgrounds.push_back(load_rgb(dir / "background" / (view_name(v) + ".png")));
    for (int f = 0; f < ds.frames; ++f) {
      ds.images.push_back(load_rgb(dir / "frames" / view_name(v) / frame_name(f)));
      if (masks) {
        ImageF m = read_png(dir / "masks" / view_name(v) / frame_name(f));
        if (m.channels != 1) throw IoError("dataset: mask " + view_name(v) + "/" + frame_name(f) + " is not single-channel");
        ds.masks.push_back(std::move(m));
      }
    }
  }
  try {
    ds.validate();
  } catch (const InvalidArgument& e) {
    throw IoError(std::string("dataset: resolution inconsistency: ") + e.what());
  }
  return ds;
}

}  // namespace neuvv
