#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "neuvv/dataset.hpp"

using namespace neuvv;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

Dataset tiny_dataset() {
  auto spec = preset_scene("moving_sphere", 3);
  GenerateOptions opt;
  opt.n_views = 3;
  opt.resolution = 12;
  opt.max_step_fraction = 1.0 / 128;
  std::mt19937_64 rng(4);
  return generate_synthetic(spec, opt, rng);
}

bool contains(const std::string& s, const std::string& what) { return s.find(what) != std::string::npos; }

template <class Fn>
std::string error_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "<no error>";
}

}  // namespace

TEST(Oracle, OppositeViewsOfStaticSphereAreMirrorImages) {
  auto spec = preset_scene("static_sphere", 1);
  const auto a = Camera::look_at(Vec3(0, 0, -3), Vec3::Zero(), Vec3(0, -1, 0), 24, 24, 40);
  const auto b = Camera::look_at(Vec3(0, 0, 3), Vec3::Zero(), Vec3(0, -1, 0), 24, 24, 40);
  const auto ia = oracle_render(spec, a, 0, 1.0 / 512);
  const auto ib = oracle_render(spec, b, 0, 1.0 / 512);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 24; ++x) {
      EXPECT_NEAR(ia.alpha.at(x, y), ib.alpha.at(23 - x, y), 1e-9);
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(ia.rgb.at(x, y, c), ib.rgb.at(23 - x, y, c), 1e-9);
    }
  EXPECT_GT(ia.alpha.at(12, 12), 0.99);
}

TEST(Oracle, AlphaCentroidTracksProjectedTrajectory) {
  auto spec = preset_scene("moving_sphere", 5);
  const auto cams = ring_cameras(spec, 3, 64, 0.4);
  for (const auto& cam : cams)
    for (int f = 0; f < spec.frames; ++f) {
      const auto img = oracle_render(spec, cam, f, 1.0 / 256);
      double m = 0, mx = 0, my = 0;
      for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
          const double a = img.alpha.at(x, y);
          m += a;
          mx += a * (x + 0.5);
          my += a * (y + 0.5);
        }
      const auto p = cam.project(spec.primitives[0].center_at(spec.time_of(f)));
      ASSERT_TRUE(p.has_value());
      EXPECT_NEAR(mx / m, p->x(), 0.5) << "frame " << f;
      EXPECT_NEAR(my / m, p->y(), 0.5) << "frame " << f;
    }
}

TEST(Oracle, EmptySceneGivesBackgroundAndZeroMasks) {
  auto spec = preset_scene("empty", 2);
  GenerateOptions opt;
  opt.n_views = 2;
  opt.resolution = 8;
  std::mt19937_64 rng(1);
  const Dataset ds = generate_synthetic(spec, opt, rng);
  for (int v = 0; v < 2; ++v)
    for (int f = 0; f < 2; ++f) {
      EXPECT_EQ(ds.image(v, f), ds.backgrounds[static_cast<std::size_t>(v)]);
      for (float m : ds.mask(v, f).data) EXPECT_EQ(m, 0.f);
    }
}

TEST(Oracle, HalvingTheStepChangesPixelsByLessThan1e4) {
  auto spec = preset_scene("moving_sphere", 4);
  const auto cams = ring_cameras(spec, 2, 32, 0.0);
  const double step = spec.domain.size().maxCoeff() / 1024;
  for (const auto& cam : cams)
    for (int f : {0, 3}) {
      const auto a = oracle_render(spec, cam, f, step);
      const auto b = oracle_render(spec, cam, f, step / 2);
      for (std::size_t i = 0; i < a.rgb.data.size(); ++i) EXPECT_NEAR(a.rgb.data[i], b.rgb.data[i], 1e-4);
      for (std::size_t i = 0; i < a.alpha.data.size(); ++i) EXPECT_NEAR(a.alpha.data[i], b.alpha.data[i], 1e-4);
    }
}

TEST(Oracle, ViewDependentTintChangesColorWithDirection) {
  auto spec = preset_scene("moving_sphere", 2);
  const Primitive& p = spec.primitives[0];
  const Vec3 axis = p.tint_axis.normalized();
  EXPECT_GT((p.color(axis, 0.0) - p.color(-axis, 0.0)).norm(), 0.1);
  EXPECT_GT((p.color(axis, 0.0) - p.color(axis, 1.0)).norm(), 0.1);
}

TEST(Generate, RejectsFewerThanTwoViews) {
  GenerateOptions opt;
  opt.n_views = 1;
  std::mt19937_64 rng(1);
  EXPECT_THROW(generate_synthetic(preset_scene("box", 1), opt, rng), InvalidArgument);
}

TEST(SceneSpec, JsonRoundTripAndValidation) {
  const auto s = preset_scene("moving_sphere");
  const auto j = scene_spec_to_json(s);
  EXPECT_EQ(scene_spec_to_json(scene_spec_from_json(j)), j);
  auto bad = j;
  bad["primitives"][0]["travel"] = json::array({2.0, 0.0, 0.0});
  EXPECT_THROW(scene_spec_from_json(bad), InvalidArgument);
  bad = j;
  bad["primitives"][0]["kind"] = "torus";
  EXPECT_THROW(scene_spec_from_json(bad), InvalidArgument);
  EXPECT_THROW(preset_scene("nope"), InvalidArgument);
}

TEST(CameraJson, ParsePrintParseIsAFixpoint) {
  std::mt19937_64 rng(9);
  for (const auto& cam : ring_cameras(preset_scene("box"), 6, 40, 0.3, &rng)) {
    const json j1 = camera_to_json(cam);
    const Camera c2 = camera_from_json(j1);
    const json j2 = camera_to_json(c2);
    const json j3 = camera_to_json(camera_from_json(j2));
    EXPECT_EQ(c2.width, cam.width);
    EXPECT_EQ(c2.fx, cam.fx);
    EXPECT_EQ(c2.cy, cam.cy);
    for (int k = 0; k < 16; ++k) {
      EXPECT_NEAR(j1["world_to_camera"][k].get<double>(), j2["world_to_camera"][k].get<double>(), 1e-12);
      EXPECT_NEAR(j2["world_to_camera"][k].get<double>(), j3["world_to_camera"][k].get<double>(), 1e-12);
    }
  }
}

TEST(CameraJson, NonOrthonormalRotationIsRejectedWithTolerance) {
  json j = camera_to_json(Camera::look_at(Vec3(0, 0, -3), Vec3::Zero(), Vec3(0, -1, 0), 8, 8, 40));
  j["world_to_camera"][0] = j["world_to_camera"][0].get<double>() * 1.01;
  const std::string msg = error_of([&] { camera_from_json(j); });
  EXPECT_TRUE(contains(msg, "orthonormal")) << msg;
  EXPECT_TRUE(contains(msg, "tolerance")) << msg;
  j["world_to_camera"] = json::array({1, 2, 3});
  EXPECT_THROW(camera_from_json(j), InvalidArgument);
}

TEST(DatasetIo, RoundTripPreservesPixelsAndCameras) {
  const Dataset ds = tiny_dataset();
  const auto dir = fresh_dir("neuvv_ds_roundtrip");
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  ASSERT_EQ(back.view_count(), ds.view_count());
  EXPECT_EQ(back.frames, ds.frames);
  EXPECT_EQ(back.domain, ds.domain);
  EXPECT_EQ(back.images, ds.images);
  EXPECT_EQ(back.masks, ds.masks);
  EXPECT_EQ(back.backgrounds, ds.backgrounds);
  for (int v = 0; v < ds.view_count(); ++v) {
    const auto& a = ds.views[static_cast<std::size_t>(v)];
    const auto& b = back.views[static_cast<std::size_t>(v)];
    EXPECT_EQ(a.fx, b.fx);
    EXPECT_EQ(a.cx, b.cx);
    EXPECT_LT((a.pose.matrix() - b.pose.matrix()).cwiseAbs().maxCoeff(), 1e-12);
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, DistinctErrorMessages) {
  const Dataset ds = tiny_dataset();
  const auto dir = fresh_dir("neuvv_ds_errors");

  EXPECT_TRUE(contains(error_of([&] { load_dataset(dir); }), "missing camera file"));

  save_dataset(ds, dir);
  fs::remove_all(dir / "masks");
  EXPECT_TRUE(contains(error_of([&] { load_dataset(dir); }), "missing mask directory"));
  EXPECT_FALSE(load_dataset(dir, false).has_masks());

  save_dataset(ds, dir);
  write_png(dir / "frames" / view_name(1) / frame_name(2), ImageF(5, 5, 3));
  EXPECT_TRUE(contains(error_of([&] { load_dataset(dir); }), "resolution inconsistency"));

  {
    std::ofstream f(dir / "cameras.json");
    f << "{ \"frames\": 3, \"views\": [";
  }
  EXPECT_TRUE(contains(error_of([&] { load_dataset(dir); }), "malformed JSON"));
  {
    std::ofstream f(dir / "cameras.json");
    f << "{ \"frames\": 3, \"views\": [ {\"width\": 4} ] }";
  }
  EXPECT_TRUE(contains(error_of([&] { load_dataset(dir); }), "bad camera record"));
  fs::remove_all(dir);
}
