#pragma once

// Miniature trees and batches for checking analytic gradients against
// central differences; shared by the trainer tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "neuvv/trainer.hpp"

namespace neuvv::testing {

using TreeD = BasicVOctree<double>;

// Up to 64 random depth-2 leaves, T frames, C columns, bases and weights
// chosen so every density pre-activation is positive (away from the relu kink).
TreeD miniature_tree(std::mt19937_64& rng, int T = 4, int C = 3, int n_max = 2) {
  std::uniform_real_distribution<double> pos(0.2, 1.0), wsig(0.3, 1.5);
  std::normal_distribution<double> g(0.0, 1.0);
  TemporalBases<double> bases(T, C);
  for (auto& a : bases.A) a = pos(rng);
  for (auto& b : bases.B) b = 0.5 * g(rng);
  TreeD tree(2, BasisTruncation{n_max}, bases, Box3{Vec3(-1, -1, -1), Vec3(1, 1, 1)});
  const PayloadLayout lay = tree.layout();
  std::bernoulli_distribution keep(0.7);
  std::vector<double> p(static_cast<std::size_t>(tree.stride()));
  for (std::uint32_t z = 0; z < 4; ++z)
    for (std::uint32_t y = 0; y < 4; ++y)
      for (std::uint32_t x = 0; x < 4; ++x) {
        if (!keep(rng)) continue;
        for (int c = 0; c < C; ++c) {
          p[lay.sigma() + c] = wsig(rng);
          p[lay.gamma() + c] = 0.7 * g(rng);
        }
        for (int k = 0; k < 3 * lay.K; ++k) p[lay.hh() + k] = 0.6 * g(rng);
        tree.insert_leaf({2, x, y, z}, p);
      }
  return tree;
}

Camera mini_camera(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Vec3 eye = Vec3(u(rng), u(rng), u(rng)).normalized() * 3.0;
  return Camera::look_at(eye, Vec3(0.1 * u(rng), 0.1 * u(rng), 0.1 * u(rng)), Vec3(0, -1, 0), w, h, 45);
}

std::array<double, 3> random_rgb(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {u(rng), u(rng), u(rng)};
}

struct MiniBatch {
  RayBatch rays;
  PatchBatch patches;
};

MiniBatch mini_batch(std::mt19937_64& rng, int frames, int n_rays, int patch, int n_patches) {
  MiniBatch b;
  std::uniform_int_distribution<int> f(0, frames - 1);
  const Camera cam = mini_camera(rng, 10, 10);
  std::uniform_real_distribution<double> px(2.0, 8.0);
  for (int i = 0; i < n_rays; ++i)
    b.rays.push(cam.ray(px(rng), px(rng)), random_rgb(rng), random_rgb(rng), true, f(rng));
  b.patches.size = patch;
  for (int k = 0; k < n_patches; ++k) {
    const Camera pc = mini_camera(rng, 6, 6);
    const int frame = f(rng);
    const auto bg = random_rgb(rng);
    for (int y = 0; y < patch; ++y)
      for (int x = 0; x < patch; ++x) b.patches.rays.push(pc.pixel_ray(x + 1, y + 1), random_rgb(rng), bg, true, frame);
  }
  return b;
}

double rel_err(double a, double f) { return std::abs(a - f) / (std::max(std::abs(a), std::abs(f)) + 1e-8); }

// Worst relative error between analytic and central-difference gradients
// over sampled parameters of every class.
struct GradCheck {
  double sigma = 0, gamma = 0, hh = 0, A = 0, B = 0;
  int checked = 0;
};

GradCheck check_gradients(std::mt19937_64& rng, int hh_stride = 5) {
  TreeD tree = miniature_tree(rng);
  const MiniBatch mb = mini_batch(rng, tree.frames(), 12, 3, 2);
  TrainConfig cfg;
  cfg.lambda_grad = 0.5;
  cfg.termination = 0.0;
  Gradients grads;
  evaluate(tree, mb.rays, mb.patches, cfg, &grads);
  const double h = 1e-4;
  auto fd = [&](double& param) {
    const double keep = param;
    param = keep + h;
    const double up = evaluate(tree, mb.rays, mb.patches, cfg).total;
    param = keep - h;
    const double down = evaluate(tree, mb.rays, mb.patches, cfg).total;
    param = keep;
    return (up - down) / (2 * h);
  };
  GradCheck out;
  const PayloadLayout lay = tree.layout();
  const int base = lay.base_stride();
  for (std::int32_t leaf : grads.touched) {
    auto p = tree.mutable_payload(leaf);
    const double* g = grads.payload.data() + static_cast<std::size_t>(leaf) * base;
    for (int c = 0; c < lay.C; ++c) {
      out.sigma = std::max(out.sigma, rel_err(g[lay.sigma() + c], fd(p[lay.sigma() + c])));
      out.gamma = std::max(out.gamma, rel_err(g[lay.gamma() + c], fd(p[lay.gamma() + c])));
      out.checked += 2;
    }
    for (int k = 0; k < 3 * lay.K; k += hh_stride) {
      out.hh = std::max(out.hh, rel_err(g[lay.hh() + k], fd(p[lay.hh() + k])));
      ++out.checked;
    }
  }
  auto& bases = tree.mutable_bases();
  for (std::size_t i = 0; i < bases.A.size(); ++i) {
    out.A = std::max(out.A, rel_err(grads.A[i], fd(bases.A[i])));
    out.B = std::max(out.B, rel_err(grads.B[i], fd(bases.B[i])));
    out.checked += 2;
  }
  return out;
}

}  // namespace neuvv::testing
