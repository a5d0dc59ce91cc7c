#pragma once

/// \file
/// Editing service: HTTP request/response for scene state and mutations,
/// and a WebSocket frame stream, on one port.
///
///   GET  /scene                         scene graph, revision, clock
///   GET  /render?pose=..&frame=..&w=..&h=..&fov=..   PNG
///   POST /instances                     add {voct, id?, name?, affine?, timemap?, visible?, yaw_rate?}
///   POST /instances/{id}/duplicate      {id?, affine?, timemap?}
///   POST /instances/{id}/transform      {affine, yaw_rate?, visible?}
///   POST /instances/{id}/timemap        {timemap}
///   DELETE /instances/{id}
///   POST /lights                        {lights: [...]}
///   POST /clock                         {playing?, frame?, speed?, step?}
///   POST /paint                         {instance, pose, w?, h?, fov?, pixels: [[x,y]..], rgb, frames: [a,b], frame?, density?}
///   WS   /stream                        in: {pose, w?, h?, fov?, frame?}; out: binary frames
///
/// `pose` is a row-major 4x4 world-to-camera matrix (16 numbers; comma
/// separated in query strings). Errors are JSON {code, field, message}.
///
/// Stream frame message: u32 little-endian header length, the header JSON
/// {revision, frame, camera_hash, width, height, encoding}, then the PNG.

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "neuvv/compositor.hpp"
#include "neuvv/image.hpp"

namespace neuvv::service {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using json = nlohmann::json;

/// Request failure carried to the client as {code, field, message}.
class ApiError : public Error {
 public:
  ApiError(unsigned status, std::string code, std::string field, const std::string& message)
      : Error(message), status(status), code(std::move(code)), field(std::move(field)) {}
  unsigned status;
  std::string code;
  std::string field;
};

struct Reply {
  unsigned status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::vector<std::pair<std::string, std::string>> headers;
};

inline Reply json_reply(const json& j, unsigned status = 200) { return {status, "application/json", j.dump(), {}}; }

inline Reply error_reply(const ApiError& e) {
  return json_reply({{"code", e.code}, {"field", e.field}, {"message", e.what()}}, e.status);
}

struct ServiceOptions {
  std::string host = "127.0.0.1";
  unsigned short port = 0;  // 0 picks a free port
  int io_threads = 2;
  double fps = 30.0;        // clock rate while playing
  int default_width = 256;
  int default_height = 256;
  double default_fov_deg = 40.0;
  int stream_poll_ms = 15;
  std::filesystem::path scene_path;  // flushed on shutdown when set
  SceneRenderOptions render;
};

// ---------------------------------------------------------------------------
// Small parsing helpers

inline std::string url_decode(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '%' && i + 2 < s.size()) {
      out += static_cast<char>(std::stoi(s.substr(i + 1, 2), nullptr, 16));
      i += 2;
    } else if (s[i] == '+') {
      out += ' ';
    } else {
      out += s[i];
    }
  }
  return out;
}

struct Target {
  std::string path;
  std::map<std::string, std::string> query;
};

inline Target parse_target(const std::string& target) {
  Target t;
  const auto q = target.find('?');
  t.path = target.substr(0, q);
  if (q == std::string::npos) return t;
  std::stringstream in(target.substr(q + 1));
  std::string kv;
  while (std::getline(in, kv, '&')) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) t.query[url_decode(kv)] = "";
    else t.query[url_decode(kv.substr(0, eq))] = url_decode(kv.substr(eq + 1));
  }
  return t;
}

inline std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::stringstream in(path);
  std::string p;
  while (std::getline(in, p, '/'))
    if (!p.empty()) parts.push_back(p);
  return parts;
}

inline double number_field(const json& j, const std::string& field) {
  if (!j.contains(field) || !j.at(field).is_number())
    throw ApiError(400, "invalid_argument", field, "'" + field + "' must be a number");
  return j.at(field).get<double>();
}

/// Camera from a world-to-camera matrix and image size / vertical fov.
inline Camera camera_from_pose(const std::vector<double>& w2c, int width, int height, double fov_deg) {
  if (w2c.size() != 16) throw ApiError(400, "invalid_argument", "pose", "pose must have 16 numbers (row-major world-to-camera)");
  if (width < 1 || height < 1 || width > 4096 || height > 4096)
    throw ApiError(400, "invalid_argument", "w", "image size must be in [1, 4096]");
  if (!(fov_deg > 0.0 && fov_deg < 180.0)) throw ApiError(400, "invalid_argument", "fov", "fov must be in (0, 180)");
  Camera c = Camera::look_at(Vec3::Zero(), Vec3::UnitZ(), Vec3(0, -1, 0), width, height, fov_deg);
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int k = 0; k < 4; ++k) m(r, k) = w2c[static_cast<std::size_t>(4 * r + k)];
  Camera probe = c;
  probe.pose = Eigen::Affine3d(m);
  if (m(3, 0) != 0.0 || m(3, 1) != 0.0 || m(3, 2) != 0.0 || m(3, 3) != 1.0 || probe.rotation_error() > 1e-6)
    throw ApiError(400, "invalid_argument", "pose", "pose rotation must be orthonormal (tolerance 1e-6) with last row [0,0,0,1]");
  c.pose = Eigen::Affine3d(m).inverse(Eigen::Isometry);
  return c;
}

inline std::vector<double> pose_of(const Camera& c) {
  const Eigen::Matrix4d m = c.pose.inverse(Eigen::Isometry).matrix();
  std::vector<double> out;
  for (int r = 0; r < 4; ++r)
    for (int k = 0; k < 4; ++k) out.push_back(m(r, k));
  return out;
}

inline std::uint64_t camera_hash(const Camera& c) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
  };
  for (double v : pose_of(c)) mix(&v, sizeof v);
  for (double v : {c.fx, c.fy, c.cx, c.cy}) mix(&v, sizeof v);
  mix(&c.width, sizeof c.width);
  mix(&c.height, sizeof c.height);
  return h;
}

/// A view request: camera plus an optional explicit frame.
struct ViewRequest {
  Camera camera;
  std::optional<long> frame;
};

inline ViewRequest view_from_json(const json& j, const ServiceOptions& opt) {
  if (!j.contains("pose") || !j.at("pose").is_array())
    throw ApiError(400, "invalid_argument", "pose", "'pose' must be an array of 16 numbers");
  std::vector<double> pose;
  for (const auto& v : j.at("pose")) {
    if (!v.is_number()) throw ApiError(400, "invalid_argument", "pose", "'pose' entries must be numbers");
    pose.push_back(v.get<double>());
  }
  ViewRequest r;
  r.camera = camera_from_pose(pose, j.value("w", opt.default_width), j.value("h", opt.default_height),
                              j.value("fov", opt.default_fov_deg));
  if (j.contains("frame")) r.frame = static_cast<long>(number_field(j, "frame"));
  return r;
}

// ---------------------------------------------------------------------------
// Session: scene, clock and request handling, independent of transport

struct ClockState {
  bool playing = false;
  double frame = 0.0;  // at `since`
  double speed = 1.0;
};

struct Frame {
  std::uint64_t revision = 0;
  long frame = 0;
  std::uint64_t camera_hash = 0;
  int width = 0, height = 0;
  std::vector<std::uint8_t> png;

  json header() const {
    return {{"revision", revision}, {"frame", frame}, {"camera_hash", std::to_string(camera_hash)},
            {"width", width},       {"height", height}, {"encoding", "png"}};
  }

  /// Stream wire format.
  std::string message() const {
    const std::string h = header().dump();
    std::string out(4, '\0');
    const auto n = static_cast<std::uint32_t>(h.size());
    for (int i = 0; i < 4; ++i) out[static_cast<std::size_t>(i)] = static_cast<char>((n >> (8 * i)) & 0xff);
    out += h;
    out.append(reinterpret_cast<const char*>(png.data()), png.size());
    return out;
  }

  static std::pair<json, std::vector<std::uint8_t>> parse(const std::string& msg) {
    if (msg.size() < 4) throw InvalidArgument("frame message shorter than its length prefix");
    std::uint32_t n = 0;
    for (int i = 0; i < 4; ++i) n |= static_cast<std::uint32_t>(static_cast<unsigned char>(msg[static_cast<std::size_t>(i)])) << (8 * i);
    if (msg.size() < 4 + static_cast<std::size_t>(n)) throw InvalidArgument("frame message header truncated");
    return {json::parse(msg.substr(4, n)), std::vector<std::uint8_t>(msg.begin() + 4 + n, msg.end())};
  }
};

class SceneSession {
 public:
  SceneSession(SceneState state, ServiceOptions opt)
      : opt_(std::move(opt)), scene_(std::move(state)), since_(std::chrono::steady_clock::now()) {}

  Scene& scene() { return scene_; }
  const ServiceOptions& options() const { return opt_; }

  ClockState clock() const {
    std::lock_guard lock(clock_mu_);
    return clock_;
  }

  /// Global frame right now, wrapped into the scene's frame range.
  long current_frame() const {
    const auto snap = scene_.snapshot();
    std::lock_guard lock(clock_mu_);
    return wrap(clock_frame_locked(), *snap.state);
  }

  Frame render_frame(const ViewRequest& v) const {
    const auto snap = scene_.snapshot();
    long frame = v.frame ? *v.frame : 0;
    if (!v.frame) {
      std::lock_guard lock(clock_mu_);
      frame = wrap(clock_frame_locked(), *snap.state);
    }
    const auto out = scene_.render(snap, v.camera, frame, opt_.render);
    Frame f;
    f.revision = snap.revision;
    f.frame = frame;
    f.camera_hash = camera_hash(v.camera);
    f.width = v.camera.width;
    f.height = v.camera.height;
    f.png = encode_png(out.image);
    return f;
  }

  Reply handle(const std::string& method, const std::string& target, const std::string& body) {
    try {
      return route(method, parse_target(target), body);
    } catch (const ApiError& e) {
      return error_reply(e);
    } catch (const OutOfRange& e) {
      return error_reply(ApiError(400, "out_of_range", "frame", e.what()));
    } catch (const InvalidArgument& e) {
      return error_reply(ApiError(400, "invalid_argument", "", e.what()));
    } catch (const IoError& e) {
      return error_reply(ApiError(400, "io_error", "", e.what()));
    } catch (const json::exception& e) {
      return error_reply(ApiError(400, "invalid_argument", "", std::string("bad request body: ") + e.what()));
    } catch (const std::exception& e) {
      return error_reply(ApiError(500, "internal", "", e.what()));
    }
  }

  /// Writes the scene file and edited trees.
  void flush() {
    if (opt_.scene_path.empty()) return;
    const auto snap = scene_.snapshot();
    std::shared_lock payload(flush_mu_);
    save_scene(*snap.state, opt_.scene_path);
  }

 private:
  static long wrap(double f, const SceneState& s) {
    const long span = s.frame_end - s.frame_begin + 1;
    long i = static_cast<long>(std::floor(f)) - s.frame_begin;
    i = ((i % span) + span) % span;
    return s.frame_begin + i;
  }

  double clock_frame_locked() const {
    if (!clock_.playing) return clock_.frame;
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - since_).count();
    return clock_.frame + clock_.speed * opt_.fps * dt;
  }

  json clock_json() const {
    const auto c = clock();
    return {{"playing", c.playing}, {"speed", c.speed}, {"frame", current_frame()}, {"fps", opt_.fps}};
  }

  static json parse_body(const std::string& body) {
    if (body.empty()) return json::object();
    json j;
    try {
      j = json::parse(body);
    } catch (const json::exception& e) {
      throw ApiError(400, "malformed_json", "", std::string("malformed JSON body: ") + e.what());
    }
    if (!j.is_object()) throw ApiError(400, "invalid_argument", "", "request body must be a JSON object");
    return j;
  }

  static SceneInstance& instance_or_404(SceneState& s, const std::string& id) {
    SceneInstance* i = s.find(id);
    if (!i) throw ApiError(404, "not_found", "id", "unknown instance '" + id + "'");
    return *i;
  }

  static Eigen::Affine3d affine_field(const json& j) {
    if (!j.contains("affine")) throw ApiError(400, "invalid_argument", "affine", "'affine' is required");
    const json& a = j.at("affine");
    if (!a.is_array() || a.size() != 16) throw ApiError(400, "invalid_argument", "affine", "'affine' must be 16 numbers");
    try {
      return affine_from_json(a);
    } catch (const InvalidArgument& e) {
      throw ApiError(422, "singular_transform", "affine", e.what());
    }
  }

  static TimeMap timemap_field(const json& j) {
    try {
      return TimeMap::parse(j.at("timemap").get<std::string>());
    } catch (const InvalidArgument& e) {
      throw ApiError(400, "invalid_argument", "timemap", e.what());
    } catch (const json::exception&) {
      throw ApiError(400, "invalid_argument", "timemap", "'timemap' must be a string");
    }
  }

  std::shared_ptr<TreeAsset> load_asset(const SceneState& s, const std::string& path) {
    std::filesystem::path p(path);
    if (p.is_relative() && !opt_.scene_path.empty()) p = opt_.scene_path.parent_path() / p;
    const std::string key = p.lexically_normal().string();
    for (const auto& a : s.assets())
      if (a->path == key) return a;
    try {
      return std::make_shared<TreeAsset>(TreeAsset{key, load_voct(p), false});
    } catch (const Error& e) {
      throw ApiError(400, "io_error", "voct", e.what());
    }
  }

  Reply revision_reply(std::uint64_t rev, json extra = json::object(), unsigned status = 200) {
    extra["revision"] = rev;
    return json_reply(extra, status);
  }

  Reply route(const std::string& method, const Target& t, const std::string& body) {
    const auto parts = split_path(t.path);
    auto not_allowed = [&]() -> Reply {
      throw ApiError(405, "method_not_allowed", "", method + " not allowed on " + t.path);
    };

    if (parts.size() == 1 && parts[0] == "scene") {
      if (method != "GET") return not_allowed();
      const auto snap = scene_.snapshot();
      json j = scene_to_json(*snap.state);
      for (std::size_t i = 0; i < snap.state->instances.size(); ++i)
        j["instances"][i]["shared_with"] = snap.state->instances[i].asset.use_count() - 1;
      return json_reply({{"revision", snap.revision},
                         {"scene", j},
                         {"clock", clock_json()},
                         {"payload_bytes", snap.state->payload_bytes()}});
    }

    if (parts.size() == 1 && parts[0] == "render") {
      if (method != "GET") return not_allowed();
      json v = json::object();
      if (!t.query.count("pose")) throw ApiError(400, "invalid_argument", "pose", "'pose' query parameter is required");
      v["pose"] = json::array();
      std::stringstream in(t.query.at("pose"));
      std::string num;
      while (std::getline(in, num, ',')) {
        try {
          v["pose"].push_back(std::stod(num));
        } catch (const std::logic_error&) {
          throw ApiError(400, "invalid_argument", "pose", "bad number '" + num + "' in pose");
        }
      }
      auto int_param = [&](const char* key) {
        try {
          return std::stod(t.query.at(key));
        } catch (const std::logic_error&) {
          throw ApiError(400, "invalid_argument", key, std::string("bad value for '") + key + "'");
        }
      };
      if (t.query.count("w")) v["w"] = static_cast<int>(int_param("w"));
      if (t.query.count("h")) v["h"] = static_cast<int>(int_param("h"));
      if (t.query.count("fov")) v["fov"] = int_param("fov");
      if (t.query.count("frame")) v["frame"] = static_cast<long>(int_param("frame"));
      const Frame f = render_frame(view_from_json(v, opt_));
      Reply r{200, "image/png", std::string(f.png.begin(), f.png.end()), {}};
      r.headers = {{"X-Revision", std::to_string(f.revision)},
                   {"X-Frame", std::to_string(f.frame)},
                   {"X-Camera-Hash", std::to_string(f.camera_hash)}};
      return r;
    }

    if (parts.size() == 1 && parts[0] == "instances") {
      if (method != "POST") return not_allowed();
      const json j = parse_body(body);
      if (!j.contains("voct") || !j.at("voct").is_string())
        throw ApiError(400, "invalid_argument", "voct", "'voct' path is required");
      const auto asset = load_asset(*scene_.snapshot().state, j.at("voct").get<std::string>());
      std::string id;
      const auto rev = scene_.mutate([&](SceneState& s) {
        id = j.value("id", scene_.next_id());
        if (s.find(id)) throw ApiError(409, "conflict", "id", "instance '" + id + "' already exists");
        SceneInstance inst;
        inst.id = id;
        inst.name = j.value("name", id);
        inst.asset = asset;
        for (const auto& a : s.assets())
          if (a->path == asset->path) inst.asset = a;
        if (j.contains("affine")) inst.affine = affine_field(j);
        if (j.contains("timemap")) inst.timemap = timemap_field(j);
        inst.visible = j.value("visible", true);
        inst.yaw_rate = j.value("yaw_rate", 0.0);
        s.instances.push_back(std::move(inst));
      });
      return revision_reply(rev, {{"id", id}}, 201);
    }

    if (parts.size() == 2 && parts[0] == "instances") {
      if (method != "DELETE") return not_allowed();
      const auto rev = scene_.mutate([&](SceneState& s) {
        instance_or_404(s, parts[1]);
        std::erase_if(s.instances, [&](const SceneInstance& i) { return i.id == parts[1]; });
      });
      return revision_reply(rev);
    }

    if (parts.size() == 3 && parts[0] == "instances") {
      if (method != "POST") return not_allowed();
      const std::string& id = parts[1];
      const json j = parse_body(body);
      if (parts[2] == "duplicate") {
        std::string new_id;
        const auto rev = scene_.mutate([&](SceneState& s) {
          const SceneInstance src = instance_or_404(s, id);
          new_id = j.value("id", scene_.next_id());
          if (s.find(new_id)) throw ApiError(409, "conflict", "id", "instance '" + new_id + "' already exists");
          SceneInstance d = duplicate(src, new_id);
          d.name = j.value("name", src.name + "-copy");
          if (j.contains("affine")) d.affine = affine_field(j);
          if (j.contains("timemap")) d.timemap = timemap_field(j);
          s.instances.push_back(std::move(d));
        });
        return revision_reply(rev, {{"id", new_id}}, 201);
      }
      if (parts[2] == "transform") {
        const auto rev = scene_.mutate([&](SceneState& s) {
          SceneInstance& inst = instance_or_404(s, id);
          const Eigen::Affine3d a = affine_field(j);
          if (j.contains("yaw_rate")) inst.yaw_rate = number_field(j, "yaw_rate");
          if (j.contains("visible")) inst.visible = j.at("visible").get<bool>();
          inst.affine = a;
        });
        return revision_reply(rev);
      }
      if (parts[2] == "timemap") {
        const auto rev = scene_.mutate([&](SceneState& s) { instance_or_404(s, id).timemap = timemap_field(j); });
        return revision_reply(rev);
      }
      throw ApiError(404, "not_found", "", "no such endpoint " + t.path);
    }

    if (parts.size() == 1 && parts[0] == "lights") {
      if (method != "POST") return not_allowed();
      const json j = parse_body(body);
      if (!j.contains("lights") || !j.at("lights").is_array())
        throw ApiError(400, "invalid_argument", "lights", "'lights' must be an array");
      std::vector<Light> lights;
      for (const auto& lj : j.at("lights")) {
        try {
          lights.push_back(light_from_json(lj));
        } catch (const InvalidArgument& e) {
          throw ApiError(400, "invalid_argument", "lights", e.what());
        }
      }
      const auto rev = scene_.mutate([&](SceneState& s) { s.lights = lights; });
      return revision_reply(rev);
    }

    if (parts.size() == 1 && parts[0] == "clock") {
      if (method != "POST") return not_allowed();
      const json j = parse_body(body);
      const auto rev = scene_.mutate([&](SceneState&) {
        std::lock_guard lock(clock_mu_);
        const double now_frame = clock_frame_locked();
        ClockState c = clock_;
        c.frame = now_frame;
        if (j.contains("frame")) c.frame = number_field(j, "frame");
        if (j.contains("step")) c.frame += number_field(j, "step");
        if (j.contains("speed")) c.speed = number_field(j, "speed");
        if (j.contains("playing")) {
          if (!j.at("playing").is_boolean()) throw ApiError(400, "invalid_argument", "playing", "'playing' must be a boolean");
          c.playing = j.at("playing").get<bool>();
        }
        clock_ = c;
        since_ = std::chrono::steady_clock::now();
      });
      return revision_reply(rev, {{"clock", clock_json()}});
    }

    if (parts.size() == 1 && parts[0] == "paint") {
      if (method != "POST") return not_allowed();
      const json j = parse_body(body);
      const ViewRequest view = view_from_json(j, opt_);
      if (!j.contains("instance")) throw ApiError(400, "invalid_argument", "instance", "'instance' is required");
      const std::string id = j.at("instance").get<std::string>();
      std::vector<std::array<int, 2>> pixels;
      for (const auto& p : j.value("pixels", json::array())) pixels.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
      const auto rgb = j.at("rgb");
      const std::array<float, 3> color{rgb.at(0).get<float>(), rgb.at(1).get<float>(), rgb.at(2).get<float>()};
      PaintReport rep;
      const auto rev = scene_.mutate_payload([&](SceneState& s) {
        SceneInstance& inst = instance_or_404(s, id);
        long global = 0;
        if (view.frame) {
          global = *view.frame;
        } else {
          std::lock_guard lock(clock_mu_);
          global = wrap(clock_frame_locked(), s);
        }
        const int local = inst.local_frame(global);
        const auto frames = j.value("frames", json::array({local, local}));
        const Camera local_cam = view.camera.transformed(inst.world_at(global).inverse());
        std::unique_lock flush(flush_mu_);
        rep = paint(inst.asset->tree, local_cam, pixels, color, frames.at(0).get<int>(), frames.at(1).get<int>(), local,
                    0.99, j.value("density", 0.f));
        if (rep.edits > 0) inst.asset->dirty = true;
      });
      return revision_reply(rev, {{"edits", rep.edits}, {"skipped", rep.skipped}, {"leaves", rep.leaves.size()}});
    }

    throw ApiError(404, "not_found", "", "no such endpoint " + t.path);
  }

  ServiceOptions opt_;
  Scene scene_;
  mutable std::mutex clock_mu_;
  ClockState clock_;
  std::chrono::steady_clock::time_point since_;
  std::shared_mutex flush_mu_;
};

// ---------------------------------------------------------------------------
// Transport

namespace detail {

class StreamSession : public std::enable_shared_from_this<StreamSession> {
 public:
  StreamSession(tcp::socket&& socket, SceneSession& session)
      : ws_(std::move(socket)), session_(session), timer_(ws_.get_executor()) {}

  void run(http::request<http::string_body> req) {
    ws_.binary(true);
    ws_.async_accept(req, beast::bind_front_handler(&StreamSession::on_accept, shared_from_this()));
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return;
    read();
    tick();
  }

  void read() { ws_.async_read(buffer_, beast::bind_front_handler(&StreamSession::on_read, shared_from_this())); }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      closed_ = true;
      timer_.cancel();
      return;
    }
    const std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    try {
      json j = json::parse(text);
      view_ = view_from_json(j, session_.options());
      force_ = true;
    } catch (const ApiError& e) {
      send_text(json{{"code", e.code}, {"field", e.field}, {"message", e.what()}}.dump());
    } catch (const std::exception& e) {
      send_text(json{{"code", "invalid_argument"}, {"field", ""}, {"message", e.what()}}.dump());
    }
    read();
  }

  void tick() {
    if (closed_) return;
    maybe_render();
    timer_.expires_after(std::chrono::milliseconds(session_.options().stream_poll_ms));
    timer_.async_wait([self = shared_from_this()](beast::error_code ec) {
      if (!ec) self->tick();
    });
  }

  void maybe_render() {
    if (!view_ || writing_) return;
    const std::uint64_t rev = session_.scene().revision();
    const long frame = view_->frame ? *view_->frame : session_.current_frame();
    if (!force_ && rev == last_revision_ && frame == last_frame_) return;
    try {
      const Frame f = session_.render_frame(*view_);
      force_ = false;
      last_revision_ = f.revision;
      last_frame_ = f.frame;
      queue_.push_back({f.message(), true});
    } catch (const std::exception& e) {
      force_ = false;
      queue_.push_back({json{{"code", "render_failed"}, {"field", ""}, {"message", e.what()}}.dump(), false});
    }
    write();
  }

  void send_text(std::string s) {
    queue_.push_back({std::move(s), false});
    write();
  }

  void write() {
    if (writing_ || queue_.empty()) return;
    writing_ = true;
    ws_.binary(queue_.front().second);
    ws_.async_write(asio::buffer(queue_.front().first),
                    [self = shared_from_this()](beast::error_code ec, std::size_t) {
                      self->writing_ = false;
                      self->queue_.pop_front();
                      if (ec) {
                        self->closed_ = true;
                        return;
                      }
                      self->write();
                    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  SceneSession& session_;
  asio::steady_timer timer_;
  beast::flat_buffer buffer_;
  std::optional<ViewRequest> view_;
  std::deque<std::pair<std::string, bool>> queue_;
  bool writing_ = false;
  bool force_ = false;
  bool closed_ = false;
  std::uint64_t last_revision_ = ~0ull;
  long last_frame_ = -1;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket&& socket, SceneSession& session) : stream_(std::move(socket)), session_(session) {}

  void run() {
    asio::dispatch(stream_.get_executor(), beast::bind_front_handler(&HttpSession::read, shared_from_this()));
  }

 private:
  void read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(60));
    http::async_read(stream_, buffer_, req_, beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) return;
    if (websocket::is_upgrade(req_)) {
      if (parse_target(std::string(req_.target())).path == "/stream") {
        stream_.expires_never();
        std::make_shared<StreamSession>(stream_.release_socket(), session_)->run(std::move(req_));
        return;
      }
    }
    const Reply r = session_.handle(std::string(req_.method_string()), std::string(req_.target()), req_.body());
    auto res = std::make_shared<http::response<http::string_body>>(static_cast<http::status>(r.status), req_.version());
    res->set(http::field::content_type, r.content_type);
    res->set(http::field::access_control_allow_origin, "*");
    for (const auto& [k, v] : r.headers) res->set(k, v);
    res->keep_alive(req_.keep_alive());
    res->body() = r.body;
    res->prepare_payload();
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (!res->keep_alive()) {
        beast::error_code ignored;
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
        return;
      }
      self->read();
    });
  }

  beast::tcp_stream stream_;
  SceneSession& session_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

}  // namespace detail

/// Runs the service on its own I/O threads until stop().
class Server {
 public:
  explicit Server(SceneSession& session) : session_(session), acceptor_(ioc_) {}
  ~Server() { stop(); }

  void start() {
    const auto& opt = session_.options();
    beast::error_code ec;
    const tcp::endpoint ep(asio::ip::make_address(opt.host, ec), opt.port);
    if (ec) throw InvalidArgument("serve: bad host '" + opt.host + "'");
    acceptor_.open(ep.protocol(), ec);
    if (!ec) acceptor_.set_option(asio::socket_base::reuse_address(true), ec);
    if (!ec) acceptor_.bind(ep, ec);
    if (!ec) acceptor_.listen(asio::socket_base::max_listen_connections, ec);
    if (ec) throw IoError("serve: cannot listen on " + opt.host + ":" + std::to_string(opt.port) + " (port busy?): " + ec.message());
    port_ = acceptor_.local_endpoint().port();
    accept();
    for (int i = 0; i < std::max(1, opt.io_threads); ++i) threads_.emplace_back([this] { ioc_.run(); });
  }

  unsigned short port() const { return port_; }

  /// Stops serving and flushes the scene to disk.
  void stop() {
    if (threads_.empty()) return;
    ioc_.stop();
    for (auto& t : threads_) t.join();
    threads_.clear();
    session_.flush();
  }

 private:
  void accept() {
    acceptor_.async_accept(asio::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (!ec) std::make_shared<detail::HttpSession>(std::move(socket), session_)->run();
      if (acceptor_.is_open()) accept();
    });
  }

  SceneSession& session_;
  asio::io_context ioc_;
  tcp::acceptor acceptor_;
  std::vector<std::thread> threads_;
  unsigned short port_ = 0;
};

}  // namespace neuvv::service
