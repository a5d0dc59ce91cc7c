// neuvv command line: dataset generation, fitting, rendering, composition,
// batch painting, basis checks, benchmarks and the edit service.
//
// Exit status: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <thread>

#include "neuvv/compositor.hpp"
#include "neuvv/dataset.hpp"
#include "neuvv/service.hpp"
#include "neuvv/trainer.hpp"

using namespace neuvv;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw IoError("cannot open " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw IoError(p.string() + ": malformed JSON: " + e.what());
  }
}

std::array<double, 3> rgb3(const std::vector<double>& v, const char* flag) {
  if (v.size() != 3) throw UsageError(std::string(flag) + ": expected three comma-separated values");
  return {v[0], v[1], v[2]};
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Camera selection shared by render, compose and paint: an explicit camera
// JSON, a view out of a cameras.json, or an orbit around the domain center.
struct CameraArgs {
  std::string camera_file;
  std::string cameras_file;
  int view = -1;
  double azimuth = 0.0;    // degrees
  double elevation = 15.0;  // degrees
  double distance = 3.2;
  double fov = 40.0;
  int width = 256;
  int height = 256;

  void add(CLI::App* cmd) {
    cmd->add_option("--camera", camera_file, "Single camera JSON (cameras.json view schema)");
    cmd->add_option("--cameras", cameras_file, "Dataset cameras.json");
    cmd->add_option("--view", view, "View index into --cameras")->check(CLI::NonNegativeNumber);
    cmd->add_option("--azimuth", azimuth, "Orbit azimuth in degrees");
    cmd->add_option("--elevation", elevation, "Orbit elevation in degrees");
    cmd->add_option("--distance", distance, "Orbit distance from the target")->check(CLI::PositiveNumber);
    cmd->add_option("--fov", fov, "Vertical field of view in degrees")->check(CLI::Range(1.0, 179.0));
    cmd->add_option("--width", width, "Image width")->check(CLI::PositiveNumber);
    cmd->add_option("--height", height, "Image height")->check(CLI::PositiveNumber);
  }

  Camera orbit(const Vec3& target, double az_deg) const {
    const double az = az_deg * std::numbers::pi / 180.0, el = elevation * std::numbers::pi / 180.0;
    const Vec3 eye = target + distance * Vec3(std::cos(el) * std::sin(az), -std::sin(el), std::cos(el) * std::cos(az));
    return Camera::look_at(eye, target, Vec3(0, -1, 0), width, height, fov);
  }

  Camera resolve(const Vec3& target) const {
    if (!camera_file.empty()) return camera_from_json(read_json(camera_file), 1e-6);
    if (!cameras_file.empty()) {
      const json j = read_json(cameras_file);
      const auto& views = j.at("views");
      if (view < 0) throw UsageError("--view: required with --cameras");
      if (view >= static_cast<int>(views.size()))
        throw OutOfRange("view " + std::to_string(view) + " outside [0, " + std::to_string(views.size() - 1) + "]");
      return camera_from_json(views.at(static_cast<std::size_t>(view)), 1e-6);
    }
    return orbit(target, azimuth);
  }
};

// Solid sphere of radius 0.4 (in domain units) at `res`^3; only cells inside
// are stored. Used when bench runs without a tree.
VOctree sphere_tree(int res, int frames) {
  const Box3 box{Vec3(-1, -1, -1), Vec3(1, 1, 1)};
  VOctree tree(log2_exact(res), BasisTruncation{2}, make_bump_bases<float>(frames, std::min(frames, 31)), box);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 0.3);
  std::vector<float> p(static_cast<std::size_t>(tree.stride()), 0.f);
  const auto& lay = tree.layout();
  for (int z = 0; z < res; ++z)
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const Vec3 c = (Vec3(x, y, z) + Vec3::Constant(0.5)) * (2.0 / res) - Vec3::Ones();
        if (c.norm() > 0.4 * 2.0) continue;
        std::fill(p.begin(), p.end(), 0.f);
        p[static_cast<std::size_t>(lay.C - 1)] = 20.f;
        for (int i = lay.hh(); i < lay.base_stride(); ++i) p[static_cast<std::size_t>(i)] = static_cast<float>(g(rng));
        tree.insert_leaf(LeafCell{static_cast<std::uint32_t>(tree.depth_max()), static_cast<std::uint32_t>(x),
                                  static_cast<std::uint32_t>(y), static_cast<std::uint32_t>(z)},
                         p);
      }
  return tree;
}

void write_layer(const LayerImages& layer, const std::array<double, 3>& bg, const std::string& out,
                 const std::string& depth, const std::string& alpha) {
  const ImageD img = composite_background(layer, constant_image(layer.width(), layer.height(), bg));
  write_png(out, img);
  if (!depth.empty()) write_pfm(depth, layer.depth);
  if (!alpha.empty()) write_pfm(alpha, layer.alpha);
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string spec = "moving_sphere";
  std::string out;
  int views = 24;
  int frames = 0;
  int resolution = 128;
  double phase = 0.0;
  std::uint64_t seed = 1;
  bool no_quantize = false;
  bool dump_spec = false;
};

int run_gen(const GenArgs& a) {
  const SyntheticSceneSpec spec = load_scene_spec(a.spec, a.frames);
  if (a.dump_spec) {
    std::cout << scene_spec_to_json(spec).dump(2) << "\n";
    return 0;
  }
  GenerateOptions opt;
  opt.n_views = a.views;
  opt.resolution = a.resolution;
  opt.phase = a.phase;
  opt.quantize = !a.no_quantize;
  std::mt19937_64 rng(a.seed);
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = generate_synthetic(spec, opt, rng);
  save_dataset(ds, a.out);
  std::printf("wrote %d views x %d frames at %dx%d to %s (%.1fs)\n", ds.view_count(), ds.frames, a.resolution,
              a.resolution, a.out.c_str(), elapsed_since(t0));
  return 0;
}

struct FitArgs {
  std::string data;
  std::string out;
  std::string log;
  std::string heldout;
  int threads = 0;
  TrainConfig cfg;
};

int run_fit(FitArgs a) {
  if (a.threads > 0) thread_override() = static_cast<std::size_t>(a.threads);
  const Dataset ds = load_dataset(a.data);
  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log);
    if (!log) throw IoError("cannot write " + a.log);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const VOctree tree = fit(ds, a.cfg, [&](const TrainLogRecord& r) {
    const std::string line = r.to_json().dump();
    if (log) log << line << "\n" << std::flush;
    std::printf("%7.1fs %s\n", elapsed_since(t0), line.c_str());
    std::fflush(stdout);
  });
  save_voct(tree, a.out);
  std::printf("fit: %zu leaves, %.1f MB payload, %.1fs -> %s\n", tree.leaf_count(), tree.payload_bytes() / 1e6,
              elapsed_since(t0), a.out.c_str());
  std::printf("train psnr %.2f dB\n", psnr_from_mse(dataset_mse(tree, ds)));
  if (!a.heldout.empty()) {
    const Dataset held = load_dataset(a.heldout, false);
    std::printf("held-out psnr %.2f dB\n", psnr_from_mse(dataset_mse(tree, held)));
  }
  return 0;
}

struct RenderArgs {
  std::string voct;
  int frame = 0;
  std::string out = "render.png";
  std::string depth;
  std::string alpha;
  std::vector<double> background{0.1, 0.1, 0.12};
  bool on_the_fly = false;
  CameraArgs cam;
};

int run_render(const RenderArgs& a) {
  const VOctree tree = load_voct(a.voct);
  check_frame(tree, a.frame);
  const Camera cam = a.cam.resolve(tree.bbox().center());
  RenderOptions opt;
  opt.use_cache = !a.on_the_fly;
  const auto t0 = std::chrono::steady_clock::now();
  const LayerImages layer = render(tree, cam, a.frame, opt);
  write_layer(layer, rgb3(a.background, "--background"), a.out, a.depth, a.alpha);
  std::printf("rendered frame %d at %dx%d in %.3fs -> %s\n", a.frame, cam.width, cam.height, elapsed_since(t0),
              a.out.c_str());
  return 0;
}

struct ComposeArgs {
  std::string scene;
  std::string out;
  long first = 0;
  long last = -1;
  double degrees_per_frame = 0.0;
  bool no_lighting = false;
  CameraArgs cam;
};

int run_compose(const ComposeArgs& a) {
  const SceneState s = load_scene(a.scene);
  const long first = a.first, last = a.last < 0 ? s.frame_end : a.last;
  if (last < first) throw UsageError("--last: must be >= --first");
  Vec3 target = Vec3::Zero();
  int n = 0;
  for (const auto& i : s.instances) {
    target += i.affine * i.asset->tree.bbox().center();
    ++n;
  }
  if (n) target /= n;
  fs::create_directories(a.out);
  SceneRenderOptions opt;
  opt.lighting = !a.no_lighting;
  const auto t0 = std::chrono::steady_clock::now();
  for (long f = first; f <= last; ++f) {
    Camera cam = a.cam.resolve(target);
    if (a.cam.camera_file.empty() && a.cam.cameras_file.empty())
      cam = a.cam.orbit(target, a.cam.azimuth + a.degrees_per_frame * static_cast<double>(f - first));
    const SceneRender r = render_scene(s, cam, f, opt);
    write_png(fs::path(a.out) / frame_name(static_cast<int>(f - first)), r.image);
  }
  std::printf("composed %ld frames in %.1fs -> %s\n", last - first + 1, elapsed_since(t0), a.out.c_str());
  return 0;
}

struct PaintArgs {
  std::string voct;
  std::string out;
  std::string mask;
  std::vector<double> rgb;
  std::vector<int> frames;
  int frame = 0;
  double threshold = 0.99;
  double density = 0.0;
  CameraArgs cam;
};

int run_paint(const PaintArgs& a) {
  VOctree tree = load_voct(a.voct);
  check_frame(tree, a.frame);
  const Camera cam = a.cam.resolve(tree.bbox().center());
  const ImageF mask = read_png(a.mask);
  if (mask.width != cam.width || mask.height != cam.height)
    throw InvalidArgument("mask is " + std::to_string(mask.width) + "x" + std::to_string(mask.height) + ", camera is " +
                          std::to_string(cam.width) + "x" + std::to_string(cam.height));
  std::vector<std::array<int, 2>> pixels;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(x, y, 0) > 0.5f) pixels.push_back({x, y});
  if (a.frames.size() != 2) throw UsageError("--frames: expected first,last");
  const auto c = rgb3(a.rgb, "--rgb");
  const PaintReport r = paint(tree, cam, pixels, {static_cast<float>(c[0]), static_cast<float>(c[1]), static_cast<float>(c[2])},
                              a.frames[0], a.frames[1], a.frame, a.threshold, static_cast<float>(a.density));
  save_voct(tree, a.out.empty() ? a.voct : a.out);
  std::printf("painted %zu leaves from %zu rays (%zu rays missed)\n", r.leaves.size(), r.edits, r.skipped);
  return 0;
}

struct BasisArgs {
  int n_max = 2;
  std::size_t samples = 1000000;
  std::uint64_t seed = 1;
  bool matrix = false;
};

int run_verify_basis(const BasisArgs& a) {
  if (a.n_max < 0 || a.n_max > BasisTable::kMaxNMax) throw UsageError("--n-max: out of range");
  const auto t0 = std::chrono::steady_clock::now();
  const GramReport r = monte_carlo_gram(BasisTruncation{a.n_max}, a.samples, a.seed);
  const double secs = elapsed_since(t0);
  if (a.matrix) {
    for (int i = 0; i < r.count; ++i) {
      for (int j = 0; j < r.count; ++j) std::printf("%s%9.5f", j ? " " : "", r.gram[static_cast<std::size_t>(i * r.count + j)]);
      std::printf("\n");
    }
  }
  std::printf("n_max %d  K %d  samples %zu  max|G-I| %.3e  %.2fs\n", a.n_max, r.count, r.samples, r.max_deviation, secs);
  return 0;
}

struct BenchArgs {
  std::string voct;
  int resolution = 128;
  int frame = 0;
  int threads = 8;
  int repeat = 10;
  CameraArgs cam;
};

int run_bench(BenchArgs a) {
  thread_override() = static_cast<std::size_t>(a.threads);
  const VOctree tree = a.voct.empty() ? sphere_tree(a.resolution, 16) : load_voct(a.voct);
  check_frame(tree, a.frame);
  const Camera cam = a.cam.resolve(tree.bbox().center());
  auto t0 = std::chrono::steady_clock::now();
  const FrameSlice<float> cache = build_frame_cache(tree, a.frame);
  const double slice = elapsed_since(t0);
  render(tree, cam, a.frame, {}, &cache);  // warm-up
  t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < a.repeat; ++i) render(tree, cam, a.frame, {}, &cache);
  const double per = elapsed_since(t0) / a.repeat;
  RenderOptions fly;
  fly.use_cache = false;
  t0 = std::chrono::steady_clock::now();
  render(tree, cam, a.frame, fly);
  const double uncached = elapsed_since(t0);
  std::printf("leaves %zu  %dx%d  threads %d (hardware %u)\n", tree.leaf_count(), cam.width, cam.height, a.threads,
              std::thread::hardware_concurrency());
  std::printf("slice %.3fs  cached %.4fs/frame (%.1f fps)  on-the-fly %.3fs/frame (%.1f fps)\n", slice, per, 1.0 / per,
              uncached, 1.0 / uncached);
  return 0;
}

struct ServeArgs {
  std::string scene;
  std::string host = "127.0.0.1";
  int port = 8080;
  int io_threads = 2;
  double fps = 30.0;
};

std::atomic<bool> g_stop{false};

int run_serve(const ServeArgs& a) {
  if (a.port < 0 || a.port > 65535) throw UsageError("--port: out of range");
  service::ServiceOptions opt;
  opt.host = a.host;
  opt.port = static_cast<unsigned short>(a.port);
  opt.io_threads = a.io_threads;
  opt.fps = a.fps;
  opt.scene_path = a.scene;
  service::SceneSession session(load_scene(a.scene), opt);
  service::Server server(session);
  server.start();
  std::printf("serving %s on http://%s:%u\n", a.scene.c_str(), a.host.c_str(), server.port());
  std::fflush(stdout);
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neuvv: sparse octree volumetric video tools"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file with option defaults; flags override it");

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen", "Render a synthetic multi-view dataset");
  c_gen->add_option("--spec", gen.spec, "Scene spec JSON file or preset name")->capture_default_str();
  c_gen->add_option("--out", gen.out, "Output dataset directory")->required();
  c_gen->add_option("--views", gen.views, "Number of cameras")->check(CLI::Range(2, 4096));
  c_gen->add_option("--frames", gen.frames, "Override frame count")->check(CLI::NonNegativeNumber);
  c_gen->add_option("--resolution", gen.resolution, "Image side in pixels")->check(CLI::PositiveNumber);
  c_gen->add_option("--phase", gen.phase, "Azimuth offset of the camera ring (radians)");
  c_gen->add_option("--seed", gen.seed, "Camera jitter seed");
  c_gen->add_flag("--no-quantize", gen.no_quantize, "Keep float pixel values before PNG encoding");
  c_gen->add_flag("--dump-spec", gen.dump_spec, "Print the resolved spec as JSON and exit");

  FitArgs fitc;
  std::vector<int> upsample_at;
  bool freeze_bases = false;
  auto* c_fit = app.add_subcommand("fit", "Fit a tree to a dataset");
  c_fit->add_option("--data", fitc.data, "Dataset directory")->required();
  c_fit->add_option("--out", fitc.out, "Output .voct")->required();
  c_fit->add_option("--log", fitc.log, "Progress log (one JSON record per line)");
  c_fit->add_option("--heldout", fitc.heldout, "Dataset directory for a held-out PSNR report");
  c_fit->add_option("--threads", fitc.threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  c_fit->add_option("--iterations", fitc.cfg.iterations)->check(CLI::NonNegativeNumber);
  c_fit->add_option("--batch-rays", fitc.cfg.batch_rays)->check(CLI::PositiveNumber);
  c_fit->add_option("--lr-payload", fitc.cfg.lr_payload)->check(CLI::PositiveNumber);
  c_fit->add_option("--lr-bases", fitc.cfg.lr_bases)->check(CLI::NonNegativeNumber);
  c_fit->add_option("--lambda-grad", fitc.cfg.lambda_grad)->check(CLI::NonNegativeNumber);
  c_fit->add_option("--bg-ray-fraction", fitc.cfg.bg_ray_fraction)->check(CLI::Range(0.0, 1.0));
  c_fit->add_option("--patch-size", fitc.cfg.patch_size)->check(CLI::Range(2, 256));
  c_fit->add_option("--patches-per-batch", fitc.cfg.patches_per_batch)->check(CLI::NonNegativeNumber);
  c_fit->add_option("--prune-every", fitc.cfg.prune_every)->check(CLI::NonNegativeNumber);
  c_fit->add_option("--prune-threshold", fitc.cfg.prune_threshold)->check(CLI::NonNegativeNumber);
  c_fit->add_option("--init-resolution", fitc.cfg.init_resolution)->check(CLI::PositiveNumber);
  c_fit->add_option("--target-resolution", fitc.cfg.target_resolution)->check(CLI::PositiveNumber);
  c_fit->add_option("--upsample-at", upsample_at, "Iterations at which the grid doubles")->delimiter(',');
  c_fit->add_option("--basis-count", fitc.cfg.basis_count)->check(CLI::PositiveNumber);
  c_fit->add_option("--n-max", fitc.cfg.n_max)->check(CLI::Range(0, BasisTable::kMaxNMax));
  c_fit->add_option("--init-sigma", fitc.cfg.init_sigma)->check(CLI::NonNegativeNumber);
  c_fit->add_flag("--freeze-bases", freeze_bases, "Keep the temporal bases fixed");
  c_fit->add_option("--seed", fitc.cfg.seed);
  c_fit->add_option("--log-every", fitc.cfg.log_every)->check(CLI::PositiveNumber);

  RenderArgs rend;
  auto* c_render = app.add_subcommand("render", "Render one frame of a tree");
  c_render->add_option("--voct", rend.voct, "Input .voct")->required();
  c_render->add_option("--frame", rend.frame, "Frame index");
  c_render->add_option("--out", rend.out, "Output PNG");
  c_render->add_option("--depth", rend.depth, "Depth PFM");
  c_render->add_option("--alpha", rend.alpha, "Alpha PFM");
  c_render->add_option("--background", rend.background, "Background r,g,b")->delimiter(',');
  c_render->add_flag("--on-the-fly", rend.on_the_fly, "Slice the tree per sample instead of caching");
  rend.cam.add(c_render);

  ComposeArgs comp;
  auto* c_compose = app.add_subcommand("compose", "Render a scene file to a PNG sequence");
  c_compose->add_option("--scene", comp.scene, "Scene JSON")->required();
  c_compose->add_option("--out", comp.out, "Output directory")->required();
  c_compose->add_option("--first", comp.first, "First global frame");
  c_compose->add_option("--last", comp.last, "Last global frame (default: scene end)");
  c_compose->add_option("--orbit-speed", comp.degrees_per_frame, "Camera azimuth step per frame (degrees)");
  c_compose->add_flag("--no-lighting", comp.no_lighting, "Skip shadows and falloff");
  comp.cam.add(c_compose);

  PaintArgs pnt;
  auto* c_edit = app.add_subcommand("edit", "Edit a tree");
  c_edit->require_subcommand(1);
  auto* c_paint = c_edit->add_subcommand("paint", "Recolor the leaves under a mask");
  c_paint->add_option("--voct", pnt.voct, "Tree to edit")->required();
  c_paint->add_option("--out", pnt.out, "Output .voct (default: in place)");
  c_paint->add_option("--mask", pnt.mask, "Mask PNG; pixels above 0.5 are painted")->required();
  c_paint->add_option("--rgb", pnt.rgb, "Target color r,g,b")->delimiter(',')->required();
  c_paint->add_option("--frames", pnt.frames, "Edit frame range first,last")->delimiter(',')->required();
  c_paint->add_option("--frame", pnt.frame, "Frame the mask was drawn on");
  c_paint->add_option("--threshold", pnt.threshold, "Accumulated alpha that stops a ray")->check(CLI::Range(0.0, 1.0));
  c_paint->add_option("--density", pnt.density, "Replacement density (0 keeps the fitted one)")->check(CLI::NonNegativeNumber);
  pnt.cam.add(c_paint);

  BasisArgs basis;
  auto* c_basis = app.add_subcommand("verify-basis", "Monte-Carlo Gram matrix of the HH basis");
  c_basis->add_option("--n-max", basis.n_max, "Truncation order");
  c_basis->add_option("--samples", basis.samples, "Sample count")->check(CLI::PositiveNumber);
  c_basis->add_option("--seed", basis.seed);
  c_basis->add_flag("--matrix", basis.matrix, "Print the full matrix");

  BenchArgs bench;
  bench.cam.width = bench.cam.height = 400;
  auto* c_bench = app.add_subcommand("bench", "Render throughput");
  c_bench->add_option("--voct", bench.voct, "Tree to render (default: synthetic sphere)");
  c_bench->add_option("--resolution", bench.resolution, "Synthetic tree resolution")->check(CLI::PositiveNumber);
  c_bench->add_option("--frame", bench.frame);
  c_bench->add_option("--threads", bench.threads)->check(CLI::PositiveNumber);
  c_bench->add_option("--repeat", bench.repeat)->check(CLI::PositiveNumber);
  bench.cam.add(c_bench);

  ServeArgs serve;
  auto* c_serve = app.add_subcommand("serve", "Start the edit service");
  c_serve->add_option("--scene", serve.scene, "Scene JSON")->required();
  c_serve->add_option("--host", serve.host);
  c_serve->add_option("--port", serve.port);
  c_serve->add_option("--io-threads", serve.io_threads)->check(CLI::PositiveNumber);
  c_serve->add_option("--fps", serve.fps)->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*c_gen) return run_gen(gen);
    if (*c_fit) {
      fitc.cfg.upsample_at = upsample_at;
      fitc.cfg.train_bases = !freeze_bases;
      return run_fit(fitc);
    }
    if (*c_render) return run_render(rend);
    if (*c_compose) return run_compose(comp);
    if (*c_paint) return run_paint(pnt);
    if (*c_basis) return run_verify_basis(basis);
    if (*c_bench) return run_bench(bench);
    if (*c_serve) return run_serve(serve);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
