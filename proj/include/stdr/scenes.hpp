#pragma once

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "stdr/geometry.hpp"
#include "stdr/image.hpp"
#include "stdr/splat.hpp"

namespace stdr {

enum class Motion { Linear, Circular };

inline std::string motion_name(Motion m) { return m == Motion::Linear ? "linear" : "circular"; }

inline Motion parse_motion(const std::string& name) {
  if (name == "linear") return Motion::Linear;
  if (name == "circular") return Motion::Circular;
  throw InvalidInput("motion: expected 'linear' or 'circular', got '" + name + "'");
}

struct SceneSpec {
  int timestamps = 8;
  int n_static = 200;
  int n_dynamic = 50;
  Motion motion = Motion::Linear;
  double amplitude = 0.8;
  int cameras = 12;  // training ring; one extra held-out camera is added
  double camera_radius = 4.0;
  double camera_elevation = 0.8;
  // dynamic blob shape: cluster center height, member scatter, and the
  // per-member gaussian radius range
  double blob_z = 0.1;
  double blob_spread = 0.12;
  double blob_sigma_min = 0.03;
  double blob_sigma_max = 0.06;
  bool blob_colorful = false;  // full-range member colors instead of the red palette
  int width = 64;
  int height = 64;
  std::uint64_t seed = 1;

  void validate() const {
    require(timestamps >= 2, "scene spec: at least two timestamps required");
    require(n_static >= 0 && n_dynamic >= 0, "scene spec: negative Gaussian count");
    require(amplitude >= 0.0, "scene spec: negative amplitude");
    require(cameras >= 1, "scene spec: at least one training camera required");
    require(camera_radius > 0.0, "scene spec: camera radius must be positive");
    require(blob_spread >= 0.0, "scene spec: negative blob spread");
    require(blob_sigma_min > 0.0 && blob_sigma_max >= blob_sigma_min,
            "scene spec: bad blob sigma range");
    require(width >= 1 && height >= 1, "scene spec: empty image size");
  }
};

struct InitPoint {
  Vec3 position;
  Vec3 color;
  bool dynamic = false;
  int source_timestamp = -1;  // which timestamp produced this copy; -1 for static
};

struct Frame {
  int camera_id = 0;
  int timestamp = 0;
  std::string image_name;
  Image image;
};

struct Dataset {
  int timestamps = 0;
  int width = 0;
  int height = 0;
  Motion motion = Motion::Linear;
  double amplitude = 0.0;
  std::vector<Camera> cameras;
  std::vector<char> held_out;  // per camera
  std::vector<Frame> frames;
  std::vector<InitPoint> init_points;

  void validate() const {
    require(timestamps >= 1, "dataset: missing timestamps");
    require(cameras.size() == held_out.size(), "dataset: camera flag size mismatch");
    for (const Frame& f : frames) {
      require(f.timestamp >= 0 && f.timestamp < timestamps,
              "dataset: frame timestamp index out of range for " + f.image_name);
      require(f.camera_id >= 0 && f.camera_id < static_cast<int>(cameras.size()),
              "dataset: frame camera id out of range for " + f.image_name);
      require(f.image.width == width && f.image.height == height,
              "dataset: image size mismatch for " + f.image_name);
    }
  }

  std::vector<int> training_frames() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(frames.size()); ++i)
      if (!held_out[frames[i].camera_id]) out.push_back(i);
    return out;
  }

  std::vector<int> held_out_frames() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(frames.size()); ++i)
      if (held_out[frames[i].camera_id]) out.push_back(i);
    return out;
  }
};

// Camera on a ring around the origin, looking at the origin.
inline Camera ring_camera(double angle, double radius, double elevation, int width, int height) {
  const Vec3 position(radius * std::cos(angle), radius * std::sin(angle), elevation);
  const Vec3 forward = (-position).normalized();
  const Vec3 up(0, 0, 1);
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right);

  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = width;  // roughly 53 degree horizontal field of view
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = down.transpose();
  cam.rotation.row(2) = forward.transpose();
  cam.translation = -cam.rotation * position;
  cam.validate();
  return cam;
}

// Dynamic-set displacement at timestamp t. Linear sweeps the y axis from
// -amplitude to +amplitude; circular loops in the xy plane starting at zero
// offset.
inline Vec3 motion_offset(Motion motion, double amplitude, int t, int timestamps) {
  require(timestamps >= 2 && t >= 0 && t < timestamps, "motion offset: bad timestamp");
  if (motion == Motion::Linear) {
    const double s = 2.0 * t / (timestamps - 1.0) - 1.0;
    return Vec3(0.0, amplitude * s, 0.0);
  }
  const double theta = 2.0 * kPi * t / timestamps;
  return Vec3(amplitude * (std::cos(theta) - 1.0), amplitude * std::sin(theta), 0.0);
}

namespace detail {

struct GtGaussian {
  Vec3 position;
  Vec3 color;
  double sigma;
  double alpha;
};

}  // namespace detail

inline Dataset generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  std::vector<detail::GtGaussian> statics, dynamics;
  for (int i = 0; i < spec.n_static; ++i) {
    detail::GtGaussian g;
    g.position = Vec3(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.0, 1.0));
    g.color = Vec3(rng.uniform(0.15, 0.9), rng.uniform(0.15, 0.9), rng.uniform(0.15, 0.9));
    g.sigma = rng.uniform(0.03, 0.09);
    g.alpha = rng.uniform(0.55, 0.9);
    statics.push_back(g);
  }
  const Vec3 blob_center(0.5, 0.0, spec.blob_z);
  for (int i = 0; i < spec.n_dynamic; ++i) {
    detail::GtGaussian g;
    g.position = blob_center + spec.blob_spread * Vec3(rng.normal(), rng.normal(), rng.normal());
    g.color = spec.blob_colorful
                  ? Vec3(rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95))
                  : Vec3(rng.uniform(0.7, 0.95), rng.uniform(0.1, 0.3), rng.uniform(0.05, 0.2));
    g.sigma = rng.uniform(spec.blob_sigma_min, spec.blob_sigma_max);
    g.alpha = rng.uniform(0.7, 0.95);
    dynamics.push_back(g);
  }

  Dataset ds;
  ds.timestamps = spec.timestamps;
  ds.width = spec.width;
  ds.height = spec.height;
  ds.motion = spec.motion;
  ds.amplitude = spec.amplitude;
  for (int c = 0; c < spec.cameras; ++c) {
    ds.cameras.push_back(ring_camera(2.0 * kPi * c / spec.cameras, spec.camera_radius,
                                     spec.camera_elevation, spec.width, spec.height));
    ds.held_out.push_back(0);
  }
  ds.cameras.push_back(ring_camera(kPi / spec.cameras, spec.camera_radius,
                                   spec.camera_elevation, spec.width, spec.height));
  ds.held_out.push_back(1);

  // ground-truth renders in exact mode so they depend only on the blend
  // expression, not on thresholds
  RenderConfig exact;
  exact.alpha_skip = 0.0;
  exact.transmittance_floor = 0.0;
  const int total = spec.n_static + spec.n_dynamic;
  const Quaternion qid = Quaternion::identity();
  for (int c = 0; c < static_cast<int>(ds.cameras.size()); ++c) {
    for (int t = 0; t < spec.timestamps; ++t) {
      const Vec3 offset = motion_offset(spec.motion, spec.amplitude, t, spec.timestamps);
      std::vector<Splat2D> splats;
      Eigen::Matrix3Xd colors(3, total);
      Eigen::RowVectorXd alphas(total);
      int idx = 0;
      auto add = [&](const detail::GtGaussian& g, const Vec3& pos) {
        const Vec3 ls = Vec3::Constant(std::log(g.sigma));
        splats.push_back(project_gaussian(pos, qid, ls, ds.cameras[c]));
        colors.col(idx) = g.color;
        alphas[idx] = g.alpha;
        ++idx;
      };
      for (const auto& g : statics) add(g, g.position);
      for (const auto& g : dynamics) add(g, g.position + offset);

      Frame frame;
      frame.camera_id = c;
      frame.timestamp = t;
      frame.image_name = "images/cam" + std::to_string(c) + "_t" + std::to_string(t) + ".png";
      frame.image = render_forward(splats, colors, alphas, spec.width, spec.height, Vec3::Zero(),
                                   exact)
                        .image;
      ds.frames.push_back(std::move(frame));
    }
  }

  // the temporally entangled canonical initialization: every static Gaussian
  // once, every dynamic Gaussian once per timestamp
  for (const auto& g : statics) ds.init_points.push_back({g.position, g.color, false, -1});
  for (int t = 0; t < spec.timestamps; ++t) {
    const Vec3 offset = motion_offset(spec.motion, spec.amplitude, t, spec.timestamps);
    for (const auto& g : dynamics)
      ds.init_points.push_back({g.position + offset, g.color, true, t});
  }

  ds.validate();
  return ds;
}

namespace detail {

inline nlohmann::json vec3_json(const Vec3& v) { return nlohmann::json{v.x(), v.y(), v.z()}; }

inline Vec3 vec3_from_json(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw InvalidInput("manifest: " + what + " must be [x,y,z]");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

inline const nlohmann::json& field(const nlohmann::json& j, const std::string& key) {
  auto it = j.find(key);
  if (it == j.end()) throw InvalidInput("manifest: missing field '" + key + "'");
  return *it;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  ds.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  if (ec) throw IoError("save dataset: cannot create " + dir);

  for (const Frame& f : ds.frames) save_png((fs::path(dir) / f.image_name).string(), f.image);

  nlohmann::json j;
  j["timestamps"] = ds.timestamps;
  j["width"] = ds.width;
  j["height"] = ds.height;
  j["motion"] = motion_name(ds.motion);
  j["amplitude"] = ds.amplitude;
  j["cameras"] = nlohmann::json::array();
  for (int c = 0; c < static_cast<int>(ds.cameras.size()); ++c) {
    const Camera& cam = ds.cameras[c];
    nlohmann::json cj;
    cj["id"] = c;
    cj["held_out"] = static_cast<bool>(ds.held_out[c]);
    cj["width"] = cam.width;
    cj["height"] = cam.height;
    cj["fx"] = cam.fx;
    cj["fy"] = cam.fy;
    cj["cx"] = cam.cx;
    cj["cy"] = cam.cy;
    cj["rotation"] = nlohmann::json::array();
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) cj["rotation"].push_back(cam.rotation(r, k));
    cj["translation"] = detail::vec3_json(cam.translation);
    j["cameras"].push_back(cj);
  }
  j["frames"] = nlohmann::json::array();
  for (const Frame& f : ds.frames) {
    nlohmann::json fj;
    fj["camera"] = f.camera_id;
    fj["timestamp"] = f.timestamp;
    fj["image"] = f.image_name;
    j["frames"].push_back(fj);
  }
  j["init_points"] = nlohmann::json::array();
  for (const InitPoint& p : ds.init_points) {
    nlohmann::json pj;
    pj["position"] = detail::vec3_json(p.position);
    pj["color"] = detail::vec3_json(p.color);
    pj["dynamic"] = p.dynamic;
    pj["source_timestamp"] = p.source_timestamp;
    j["init_points"].push_back(pj);
  }

  std::ofstream out(fs::path(dir) / "manifest");
  if (!out) throw IoError("save dataset: cannot write manifest in " + dir);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("save dataset: manifest write failed in " + dir);
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = fs::path(dir) / "manifest";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("load dataset: cannot open " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load dataset: malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  Dataset ds;
  ds.timestamps = detail::field(j, "timestamps").get<int>();
  ds.width = detail::field(j, "width").get<int>();
  ds.height = detail::field(j, "height").get<int>();
  ds.motion = parse_motion(detail::field(j, "motion").get<std::string>());
  ds.amplitude = detail::field(j, "amplitude").get<double>();

  for (const auto& cj : detail::field(j, "cameras")) {
    Camera cam;
    cam.width = detail::field(cj, "width").get<int>();
    cam.height = detail::field(cj, "height").get<int>();
    cam.fx = detail::field(cj, "fx").get<double>();
    cam.fy = detail::field(cj, "fy").get<double>();
    cam.cx = detail::field(cj, "cx").get<double>();
    cam.cy = detail::field(cj, "cy").get<double>();
    const auto& rot = detail::field(cj, "rotation");
    if (!rot.is_array() || rot.size() != 9)
      throw InvalidInput("manifest: camera rotation must have 9 entries");
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) cam.rotation(r, k) = rot[3 * r + k].get<double>();
    cam.translation = detail::vec3_from_json(detail::field(cj, "translation"), "translation");
    cam.validate();
    const int id = detail::field(cj, "id").get<int>();
    require(id == static_cast<int>(ds.cameras.size()), "manifest: camera ids must be sequential");
    ds.cameras.push_back(cam);
    ds.held_out.push_back(detail::field(cj, "held_out").get<bool>() ? 1 : 0);
  }

  for (const auto& fj : detail::field(j, "frames")) {
    Frame f;
    f.camera_id = detail::field(fj, "camera").get<int>();
    f.timestamp = detail::field(fj, "timestamp").get<int>();
    f.image_name = detail::field(fj, "image").get<std::string>();
    f.image = load_png((fs::path(dir) / f.image_name).string());
    ds.frames.push_back(std::move(f));
  }

  for (const auto& pj : detail::field(j, "init_points")) {
    InitPoint p;
    p.position = detail::vec3_from_json(detail::field(pj, "position"), "init point position");
    p.color = detail::vec3_from_json(detail::field(pj, "color"), "init point color");
    p.dynamic = detail::field(pj, "dynamic").get<bool>();
    p.source_timestamp = detail::field(pj, "source_timestamp").get<int>();
    ds.init_points.push_back(p);
  }

  ds.validate();
  return ds;
}

}  // namespace stdr
