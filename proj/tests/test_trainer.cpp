#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "neuvv/trainer.hpp"
#include "grad_oracles.hpp"

using namespace neuvv;
using namespace neuvv::testing;

namespace {

Dataset small_sphere_dataset(int views, int res, int frames) {
  auto spec = preset_scene("moving_sphere", frames);
  GenerateOptions opt;
  opt.n_views = views;
  opt.resolution = res;
  opt.max_step_fraction = 1.0 / 256;
  std::mt19937_64 rng(3);
  return generate_synthetic(spec, opt, rng);
}

// Independent per-ray oracle: the renderer's integrator plus the blend.
std::array<double, 3> rendered_blend(const TreeD& tree, const RayBatch& b, std::size_t i, double termination) {
  RenderOptions opt;
  opt.termination = termination;
  const RayResult r = trace_ray<double>(tree, OnTheFlySource<double>{tree, b.frames[i]}, b.origins[i], b.directions[i], opt);
  return {r.premul[0] + r.transmittance * b.backgrounds[i][0], r.premul[1] + r.transmittance * b.backgrounds[i][1],
          r.premul[2] + r.transmittance * b.backgrounds[i][2]};
}

}  // namespace

TEST(LossRgb, Examples) {
  std::vector<std::array<double, 3>> a{{0.2, 0.3, 0.4}}, b{{0.2, 0.3, 0.4}};
  EXPECT_EQ(loss_rgb(a, b), 0.0);
  b[0][0] = 0.1;
  EXPECT_NEAR(loss_rgb(a, b), 0.01, 1e-15);
}

TEST(LossRgb, MatchesPerRayRenderLoop) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const TreeD tree = miniature_tree(rng);
    const MiniBatch mb = mini_batch(rng, tree.frames(), 40, 2, 0);
    double naive = 0;
    for (std::size_t i = 0; i < mb.rays.size(); ++i) {
      const auto c = rendered_blend(tree, mb.rays, i, 1e-4);
      for (int k = 0; k < 3; ++k) naive += std::pow(c[k] - mb.rays.colors[i][k], 2);
    }
    naive /= static_cast<double>(mb.rays.size());
    EXPECT_NEAR(loss_rgb(mb.rays, tree), naive, 1e-12);
  }
}

TEST(LossGrad, ZeroCases) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  ImageD a(5, 4, 3);
  for (auto& v : a.data) v = u(rng);
  EXPECT_EQ(loss_grad(a, a), 0.0);
  ImageD b = a;
  for (auto& v : b.data) v += 0.25;
  EXPECT_NEAR(loss_grad(a, b), 0.0, 1e-24);
  EXPECT_THROW(loss_grad(ImageD(1, 4, 3), ImageD(1, 4, 3)), InvalidArgument);
  EXPECT_THROW(loss_grad(ImageD(4, 4, 3), ImageD(4, 3, 3)), InvalidArgument);
}

TEST(LossGrad, MatchesNaiveDoubleLoop) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    ImageD pred(4, 4, 3), gt(4, 4, 3);
    for (auto& v : pred.data) v = u(rng);
    for (auto& v : gt.data) v = u(rng);
    double diff[4][4][3];
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        for (int c = 0; c < 3; ++c) diff[y][x][c] = std::fabs(gt.at(x, y, c) - pred.at(x, y, c));
    double want = 0;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 3; ++x) want += (diff[y][x + 1][c] - diff[y][x][c]) * (diff[y][x + 1][c] - diff[y][x][c]);
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 4; ++x) want += (diff[y + 1][x][c] - diff[y][x][c]) * (diff[y + 1][x][c] - diff[y][x][c]);
    }
    EXPECT_NEAR(loss_grad(pred, gt), want, 1e-13);
  }
}

TEST(LossGrad, BackwardMatchesFiniteDifference) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 1);
  ImageD pred(4, 3, 3), gt(4, 3, 3), g(4, 3, 3);
  for (auto& v : pred.data) v = u(rng);
  for (auto& v : gt.data) v = u(rng);
  loss_grad_backward(pred, gt, 1.0, g);
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double keep = pred.data[i];
    pred.data[i] = keep + 1e-6;
    const double up = loss_grad(pred, gt);
    pred.data[i] = keep - 1e-6;
    const double down = loss_grad(pred, gt);
    pred.data[i] = keep;
    EXPECT_NEAR(g.data[i], (up - down) / 2e-6, 1e-7);
  }
}

TEST(Gradients, MatchCentralDifferencesOnMiniatureTrees) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const GradCheck r = check_gradients(rng);
    EXPECT_GT(r.checked, 20);
    EXPECT_LT(r.sigma, 1e-4) << "trial " << trial;
    EXPECT_LT(r.gamma, 1e-4) << "trial " << trial;
    EXPECT_LT(r.hh, 1e-4) << "trial " << trial;
    EXPECT_LT(r.A, 1e-4) << "trial " << trial;
    EXPECT_LT(r.B, 1e-4) << "trial " << trial;
  }
}

TEST(Evaluate, TotalIsRgbPlusWeightedGrad) {
  std::mt19937_64 rng(5);
  const TreeD tree = miniature_tree(rng);
  const MiniBatch mb = mini_batch(rng, tree.frames(), 10, 4, 2);
  TrainConfig cfg;
  cfg.lambda_grad = 0.1;
  const LossReport r = evaluate(tree, mb.rays, mb.patches, cfg);
  EXPECT_GE(r.rgb, 0.0);
  EXPECT_GT(r.grad, 0.0);
  EXPECT_EQ(r.total, r.rgb + 0.1 * r.grad);
}

TEST(Evaluate, ForwardMatchesRendererOnFittedPrecisionTree) {
  std::mt19937_64 rng(31);
  const TreeD td = miniature_tree(rng);
  VOctree tf(td.depth_max(), td.truncation(), td.bases().cast<float>(), td.bbox());
  for (std::size_t i = 0; i < td.leaf_count(); ++i) {
    const auto p = td.payload(static_cast<std::int32_t>(i));
    std::vector<float> pf(p.begin(), p.end());
    tf.insert_leaf(td.cells()[i], pf);
  }
  const Camera cam = mini_camera(rng, 9, 7);
  const auto layer = render(tf, cam, 2);
  std::vector<SegmentRecord> segs;
  std::vector<double> sh(9);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Ray ray = cam.pixel_ray(x, y);
      const RayRecord r = forward_ray(tf, ray.origin, ray.dir, 2, {0, 0, 0}, 1e-4, segs, sh);
      EXPECT_NEAR(r.alpha, layer.alpha.at(x, y), 1e-5);
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(r.pred[c], layer.alpha.at(x, y) * layer.rgb.at(x, y, c), 1e-5);
    }
}

TEST(SampleRays, BackgroundFractionAndDeterminism) {
  const Dataset ds = small_sphere_dataset(3, 16, 2);
  TrainConfig cfg;
  cfg.batch_rays = 101;
  std::mt19937_64 a(7), b(7);
  const RayBatch x = sample_rays(ds, cfg, a);
  const RayBatch y = sample_rays(ds, cfg, b);
  ASSERT_EQ(x.size(), 101u);
  std::size_t bg = 0;
  for (auto f : x.foreground) bg += f ? 0 : 1;
  EXPECT_EQ(bg, 20u);  // round(0.2 * 101)
  EXPECT_EQ(x.origins, y.origins);
  EXPECT_EQ(x.colors, y.colors);
  EXPECT_EQ(x.frames, y.frames);
  for (const auto& d : x.directions) EXPECT_NEAR(d.norm(), 1.0, 1e-12);
  for (const auto& c : x.colors)
    for (double v : c) EXPECT_TRUE(v >= 0.0 && v <= 1.0);

  cfg.bg_ray_fraction = 0.0;
  const RayBatch z = sample_rays(ds, cfg, a);
  for (auto f : z.foreground) EXPECT_EQ(f, 1);

  Dataset no_masks = ds;
  no_masks.masks.clear();
  EXPECT_THROW(sample_rays(no_masks, cfg, a), InvalidArgument);
}

TEST(Step, ZeroGradientLeavesParametersUnchanged) {
  std::mt19937_64 rng(17);
  TreeD tree = miniature_tree(rng);
  MiniBatch mb = mini_batch(rng, tree.frames(), 16, 2, 0);
  std::vector<SegmentRecord> segs;
  std::vector<double> sh(9);
  for (std::size_t i = 0; i < mb.rays.size(); ++i)
    mb.rays.colors[i] = forward_ray(tree, mb.rays.origins[i], mb.rays.directions[i], mb.rays.frames[i],
                                    mb.rays.backgrounds[i], 1e-4, segs, sh)
                            .pred;
  TrainConfig cfg;
  cfg.lambda_grad = 0.0;
  Trainer<double> t(tree, cfg);
  const LossReport r = t.step(mb.rays, mb.patches);
  EXPECT_EQ(r.rgb, 0.0);
  EXPECT_TRUE(t.tree() == tree);
}

TEST(Step, NonFiniteLossAborts) {
  std::mt19937_64 rng(19);
  TreeD tree = miniature_tree(rng);
  MiniBatch mb = mini_batch(rng, tree.frames(), 4, 2, 0);
  mb.rays.colors[0][0] = std::numeric_limits<double>::quiet_NaN();
  Trainer<double> t(tree, TrainConfig{});
  EXPECT_THROW(t.step(mb.rays, mb.patches), Error);
}

TEST(Step, SingleVoxelConvergesToAlphaMatchingOptimum) {
  // One leaf, two identical rays over black and white backgrounds: the
  // optimum is unique, alpha* = 1 - (C_white - C_black), color* = C_black / alpha*.
  TreeD tree(1, BasisTruncation{0}, make_bump_bases<double>(1, 1), Box3{});
  const double init[5] = {0.2, 0.0, 0.0, 0.0, 0.0};
  tree.insert_leaf({1, 0, 0, 0}, init);
  const double alpha_star = 0.6, color_star = 0.4;
  RayBatch b;
  const Ray ray{Vec3(0.25, 0.25, -1.0), Vec3(0, 0, 1)};
  const double dark = alpha_star * color_star, light = dark + (1 - alpha_star);
  b.push(ray, {dark, dark, dark}, {0, 0, 0}, true, 0);
  b.push(ray, {light, light, light}, {1, 1, 1}, true, 0);
  TrainConfig cfg;
  cfg.lambda_grad = 0.0;
  cfg.lr_payload = 0.02;
  cfg.train_bases = false;
  Trainer<double> t(tree, cfg);
  for (int i = 0; i < 2000; ++i) t.step(b, PatchBatch{});
  const double sigma = density_at(t.tree().bases(), 0, t.tree().payload(0).subspan(0, 1));
  EXPECT_NEAR(1 - std::exp(-sigma * 0.5), alpha_star, 1e-3);
}

TEST(Step, DeterministicAcrossThreadCounts) {
  const Dataset ds = small_sphere_dataset(4, 16, 2);
  TrainConfig cfg;
  cfg.batch_rays = 300;
  cfg.patches_per_batch = 2;
  cfg.patch_size = 4;
  cfg.init_resolution = 8;
  const RayPool pool(ds);
  std::vector<std::vector<double>> runs;
  for (std::size_t threads : {1, 3}) {
    thread_override() = threads;
    Trainer<float> t(initial_tree<float>(ds, cfg), cfg);
    std::mt19937_64 rng(cfg.seed);
    std::vector<double> losses;
    for (int i = 0; i < 5; ++i) {
      const auto rays = sample_rays(pool, cfg, rng);
      const auto patches = sample_patches(pool, cfg, rng);
      losses.push_back(t.step(rays, patches).total);
    }
    runs.push_back(losses);
  }
  thread_override() = 0;
  EXPECT_EQ(runs[0], runs[1]);  // bitwise
}

TEST(Step, SmoothedLossDecreasesOverHundredSteps) {
  const Dataset ds = small_sphere_dataset(6, 24, 2);
  TrainConfig cfg;
  cfg.batch_rays = 2048;
  cfg.patches_per_batch = 4;
  cfg.init_resolution = 16;
  const RayPool pool(ds);
  Trainer<float> t(initial_tree<float>(ds, cfg), cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> window_mean;
  double acc = 0;
  for (int i = 0; i < 100; ++i) {
    acc += t.step(sample_rays(pool, cfg, rng), sample_patches(pool, cfg, rng)).total;
    if (i % 10 == 9) {
      window_mean.push_back(acc / 10);
      acc = 0;
    }
  }
  for (std::size_t w = 1; w < window_mean.size(); ++w) EXPECT_LT(window_mean[w], window_mean[w - 1]) << "window " << w;
}

TEST(Trainer, PruneAndSubdivideCarryState) {
  std::mt19937_64 rng(41);
  TreeD tree = miniature_tree(rng);
  const std::size_t leaves = tree.leaf_count();
  tree.mutable_payload(0)[0] = -5.0;  // density pre-activation negative in every frame
  Trainer<double> t(tree, TrainConfig{});
  t.prune(1e-5);
  EXPECT_EQ(t.tree().leaf_count(), leaves - 1);
  t.subdivide();
  EXPECT_EQ(t.tree().leaf_count(), 8 * (leaves - 1));
  EXPECT_EQ(t.tree().depth_max(), 3);
  const MiniBatch mb = mini_batch(rng, tree.frames(), 8, 2, 1);
  EXPECT_NO_THROW(t.step(mb.rays, mb.patches));
}

TEST(Trainer, CheckpointResumesBitwise) {
  const Dataset ds = small_sphere_dataset(3, 16, 2);
  TrainConfig cfg;
  cfg.batch_rays = 200;
  cfg.patch_size = 4;
  cfg.patches_per_batch = 1;
  cfg.init_resolution = 8;
  const RayPool pool(ds);
  Trainer<float> a(initial_tree<float>(ds, cfg), cfg);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 3; ++i) a.step(sample_rays(pool, cfg, rng), sample_patches(pool, cfg, rng));
  const auto path = std::filesystem::temp_directory_path() / "neuvv_ckpt.voct";
  a.save_checkpoint(path);
  Trainer<float> b = Trainer<float>::load_checkpoint(path, cfg);
  EXPECT_EQ(b.step_count(), 3);
  const auto rays = sample_rays(pool, cfg, rng);
  const auto patches = sample_patches(pool, cfg, rng);
  EXPECT_EQ(a.step(rays, patches).total, b.step(rays, patches).total);
  EXPECT_TRUE(a.tree() == b.tree());
  std::filesystem::remove(path);
  EXPECT_THROW(Trainer<float>::load_checkpoint(path, cfg), IoError);
}

TEST(Fit, RejectsEmptyDataset) { EXPECT_THROW(fit(Dataset{}, TrainConfig{}), InvalidArgument); }

TEST(Fit, ShortRunImprovesTrainingPsnrAndLogs) {
  const Dataset ds = small_sphere_dataset(6, 24, 2);
  TrainConfig cfg;
  cfg.iterations = 120;
  cfg.batch_rays = 512;
  cfg.patches_per_batch = 2;
  cfg.init_resolution = 8;
  cfg.target_resolution = 16;
  cfg.log_every = 20;
  std::vector<TrainLogRecord> log;
  const VOctree tree = fit(ds, cfg, [&](const TrainLogRecord& r) { log.push_back(r); });
  ASSERT_GE(log.size(), 5u);
  EXPECT_EQ(log.back().iter, 119);
  EXPECT_TRUE(log.back().to_json().contains("psnr_train"));
  EXPECT_GT(log.back().psnr_train, log.front().psnr_train + 3.0);
  EXPECT_EQ(tree.depth_max(), 4);
  EXPECT_EQ(tree.stride(), 104);
  EXPECT_GT(psnr_from_mse(dataset_mse(tree, ds)), 20.0);
}

TEST(Fit, ScheduleSplitsLevelsEvenly) {
  TrainConfig cfg;
  cfg.iterations = 300;
  EXPECT_EQ(upsample_schedule(cfg), (std::vector<int>{100, 200}));
  cfg.upsample_at = {10};
  EXPECT_THROW(upsample_schedule(cfg), InvalidArgument);
}
