#pragma once

#include "relight/conditioning.hpp"
#include "relight/core.hpp"
#include "relight/envmap.hpp"
#include "relight/image.hpp"
#include "relight/renderer.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace relight {

using Json = nlohmann::json;

struct Material {
  Vec3d albedo = Vec3d::Constant(0.5);
  double roughness = 0.5;
  bool metallic = false;
};

enum class PrimitiveKind { Sphere, Torus, Box };

/// Sphere: size.x = radius. Torus (axis +Z): size.x = major, size.y = minor
/// radius. Box: size = half extents.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  Vec3d center = Vec3d::Zero();
  Vec3d size = Vec3d::Constant(0.5);
  Material material;

  Vec3d half_extent() const {
    switch (kind) {
      case PrimitiveKind::Sphere: return Vec3d::Constant(size.x());
      case PrimitiveKind::Torus: return {size.x() + size.y(), size.x() + size.y(), size.y()};
      case PrimitiveKind::Box: return size;
    }
    return size;
  }

  double sdf(const Vec3d& p) const {
    const Vec3d q = p - center;
    switch (kind) {
      case PrimitiveKind::Sphere: return q.norm() - size.x();
      case PrimitiveKind::Torus: {
        const double a = std::hypot(q.x(), q.y()) - size.x();
        return std::hypot(a, q.z()) - size.y();
      }
      case PrimitiveKind::Box: {
        const Vec3d d = q.cwiseAbs() - size;
        return d.cwiseMax(0.0).norm() + std::min(d.maxCoeff(), 0.0);
      }
    }
    return 1e30;
  }

  /// Analytic unit gradient of the SDF.
  Vec3d normal(const Vec3d& p) const {
    const Vec3d q = p - center;
    switch (kind) {
      case PrimitiveKind::Sphere: return q.norm() > 0 ? Vec3d(q.normalized()) : Vec3d::UnitZ();
      case PrimitiveKind::Torus: {
        const double rho = std::hypot(q.x(), q.y());
        const Vec3d ring = rho > 0 ? Vec3d(q.x() / rho * size.x(), q.y() / rho * size.x(), 0.0)
                                   : Vec3d(size.x(), 0.0, 0.0);
        const Vec3d n = q - ring;
        return n.norm() > 0 ? Vec3d(n.normalized()) : Vec3d::UnitZ();
      }
      case PrimitiveKind::Box: {
        const Vec3d d = q.cwiseAbs() - size;
        Vec3d n;
        if (d.maxCoeff() > 0) {
          n = d.cwiseMax(0.0);
        } else {
          Eigen::Index a;
          d.maxCoeff(&a);
          n = Vec3d::Zero();
          n[a] = 1.0;
        }
        for (int a = 0; a < 3; ++a)
          if (q[a] < 0) n[a] = -n[a];
        return n.normalized();
      }
    }
    return Vec3d::UnitZ();
  }
};

struct SceneSpec {
  std::vector<Primitive> primitives;

  void validate() const {
    if (primitives.empty()) throw ArgumentError("scene has no primitives");
    for (const auto& p : primitives) {
      const Vec3d lo = p.center - p.half_extent(), hi = p.center + p.half_extent();
      if (lo.minCoeff() < -0.8 - 1e-12 || hi.maxCoeff() > 0.8 + 1e-12)
        throw ArgumentError("primitive extends outside [-0.8, 0.8]^3");
      if (p.size.minCoeff() <= 0 && p.kind == PrimitiveKind::Box) throw ArgumentError("box extents must be positive");
      if (p.size.x() <= 0 || (p.kind == PrimitiveKind::Torus && p.size.y() <= 0))
        throw ArgumentError("primitive dimensions must be positive");
      const Material& m = p.material;
      if (m.albedo.minCoeff() < 0 || m.albedo.maxCoeff() > 1) throw ArgumentError("albedo must lie in [0, 1]");
      if (!(m.roughness > 0 && m.roughness < 1)) throw ArgumentError("roughness must lie in (0, 1)");
    }
  }

  /// Signed distance and index of the closest primitive.
  std::pair<double, int> sdf(const Vec3d& p) const {
    double best = 1e30;
    int idx = -1;
    for (std::size_t i = 0; i < primitives.size(); ++i) {
      const double d = primitives[i].sdf(p);
      if (d < best) {
        best = d;
        idx = int(i);
      }
    }
    return {best, idx};
  }
};

// -- scene (de)serialization --------------------------------------------------

inline Json vec_json(const Vec3d& v) { return Json::array({v.x(), v.y(), v.z()}); }

inline Vec3d json_vec(const Json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ArgumentError(std::string(what) + " must be a 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Json scene_to_json(const SceneSpec& s) {
  Json prims = Json::array();
  for (const auto& p : s.primitives) {
    Json j;
    j["center"] = vec_json(p.center);
    switch (p.kind) {
      case PrimitiveKind::Sphere:
        j["type"] = "sphere";
        j["radius"] = p.size.x();
        break;
      case PrimitiveKind::Torus:
        j["type"] = "torus";
        j["major_radius"] = p.size.x();
        j["minor_radius"] = p.size.y();
        break;
      case PrimitiveKind::Box:
        j["type"] = "box";
        j["half_extents"] = vec_json(p.size);
        break;
    }
    j["material"] = {{"albedo", vec_json(p.material.albedo)},
                     {"roughness", p.material.roughness},
                     {"metallic", p.material.metallic}};
    prims.push_back(j);
  }
  return Json{{"primitives", prims}};
}

inline SceneSpec scene_from_json(const Json& j) {
  SceneSpec s;
  try {
    for (const auto& pj : j.at("primitives")) {
      Primitive p;
      const std::string type = pj.at("type").get<std::string>();
      p.center = json_vec(pj.at("center"), "center");
      if (type == "sphere") {
        p.kind = PrimitiveKind::Sphere;
        p.size = Vec3d(pj.at("radius").get<double>(), 0, 0);
      } else if (type == "torus") {
        p.kind = PrimitiveKind::Torus;
        p.size = Vec3d(pj.at("major_radius").get<double>(), pj.at("minor_radius").get<double>(), 0);
      } else if (type == "box") {
        p.kind = PrimitiveKind::Box;
        p.size = json_vec(pj.at("half_extents"), "half_extents");
      } else {
        throw ArgumentError("unknown primitive type '" + type + "'");
      }
      const Json& m = pj.at("material");
      p.material.albedo = json_vec(m.at("albedo"), "albedo");
      p.material.roughness = m.at("roughness").get<double>();
      p.material.metallic = m.value("metallic", false);
      s.primitives.push_back(p);
    }
  } catch (const Json::exception& e) {
    throw ArgumentError(std::string("invalid scene description: ") + e.what());
  }
  s.validate();
  return s;
}

/// 64-bit FNV-1a of the canonical JSON text, in hex.
inline std::string scene_hash(const SceneSpec& s) {
  const std::string text = scene_to_json(s).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Glossy metal sphere and rough dielectric torus resting on a diffuse box.
inline SceneSpec desk_scene() {
  SceneSpec s;
  Primitive table;
  table.kind = PrimitiveKind::Box;
  table.center = {0.0, 0.0, -0.55};
  table.size = {0.75, 0.75, 0.2};
  table.material = {{0.55, 0.5, 0.42}, 0.9, false};
  Primitive sphere;
  sphere.kind = PrimitiveKind::Sphere;
  sphere.center = {-0.3, -0.2, -0.05};
  sphere.size = {0.3, 0, 0};
  sphere.material = {{0.9, 0.9, 0.9}, 0.05, true};
  Primitive torus;
  torus.kind = PrimitiveKind::Torus;
  torus.center = {0.35, 0.3, -0.25};
  torus.size = {0.28, 0.1, 0};
  torus.material = {{0.8, 0.3, 0.2}, 0.6, false};
  s.primitives = {table, sphere, torus};
  return s;
}

inline SceneSpec builtin_scene(const std::string& name) {
  if (name == "desk") return desk_scene();
  throw ArgumentError("unknown builtin scene '" + name + "'");
}

/// Builtin name, or a path to a scene JSON file.
inline SceneSpec load_scene(const std::string& name_or_path) {
  if (name_or_path == "desk") return desk_scene();
  if (!std::filesystem::exists(name_or_path)) throw ArgumentError("unknown scene '" + name_or_path + "'");
  const std::string text = detail::read_file(name_or_path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ParseError("scene file " + name_or_path + ": " + e.what(), e.byte);
  }
  return scene_from_json(j);
}

// -- tracing and shading -------------------------------------------------------

struct Hit {
  Vec3d position;
  Vec3d normal;
  Material material;
  int primitive = -1;
};

inline constexpr double kTraceEpsilon = 1e-4;
inline constexpr int kTraceMaxSteps = 256;

/// Sphere tracing on the union SDF.
inline std::optional<Hit> trace(const SceneSpec& scene, const Ray& ray) {
  double t = ray.near, far = ray.far;
  if (auto iv = box_interval(Ray{ray.origin, ray.dir, ray.near, ray.far})) {
    t = std::max(t, iv->first);
    far = std::min(far, iv->second);
  } else {
    return std::nullopt;
  }
  for (int step = 0; step < kTraceMaxSteps; ++step) {
    const Vec3d p = ray.origin + t * ray.dir;
    const auto [d, idx] = scene.sdf(p);
    if (d < kTraceEpsilon) {
      const Primitive& prim = scene.primitives[std::size_t(idx)];
      return Hit{p, prim.normal(p), prim.material, idx};
    }
    t += d;
    if (t > far) return std::nullopt;
  }
  return std::nullopt;
}

/// Prefilter level used for a roughness value.
inline std::size_t level_for(double roughness) {
  if (roughness < 0.15) return 0;
  if (roughness < 0.5) return 1;
  return 2;
}

inline double specular_weight(const Material& m) { return m.metallic ? 1.0 : 0.04; }

/// Per-environment state of the oracle.
struct OracleLight {
  PrefilterStack stack;
  IrradianceTable irradiance;

  explicit OracleLight(const EnvMap& env)
      : stack(prefilter(env, scale_sigmas(default_reference_sigmas(), env.width()))), irradiance(stack.base) {}
  OracleLight(const OracleLight&) = delete;
  OracleLight& operator=(const OracleLight&) = delete;
};

/// Linear in the environment: diffuse irradiance term plus one prefiltered
/// specular lookup.
inline Vec3d shade(const Hit& hit, const Vec3d& view_dir, const OracleLight& light) {
  Vec3d c = Vec3d::Zero();
  if (!hit.material.metallic) c += hit.material.albedo.cwiseProduct(light.irradiance(hit.normal));
  const std::size_t level = std::min(level_for(hit.material.roughness), light.stack.level_count() - 1);
  const Vec3d r = reflect<double>(view_dir, hit.normal);
  c += specular_weight(hit.material) * sample<double>(light.stack.level(level), r);
  return c;
}

struct OracleImage {
  Image color;
  Image alpha;
};

/// Ground-truth render; background pixels show the map along the ray.
inline OracleImage render_oracle(const SceneSpec& scene, const EnvMap& env, const Camera& cam) {
  cam.validate();
  const OracleLight light(env);
  OracleImage out{Image(cam.width, cam.height, 3), Image(cam.width, cam.height, 1)};
  parallel_for(std::size_t(cam.height), [&](std::size_t yy) {
    const int y = int(yy);
    for (int x = 0; x < cam.width; ++x) {
      const Ray ray = camera_ray(cam, x, y);
      Vec3d c;
      if (auto hit = trace(scene, ray)) {
        c = shade(*hit, ray.dir, light);
        out.alpha.at(x, y) = 1.f;
      } else {
        c = sample<double>(env, ray.dir);
      }
      for (int k = 0; k < 3; ++k) out.color.at(x, y, k) = float(c[k]);
    }
  });
  return out;
}

/// 1 where the primary ray first hits primitive `index`, else 0.
inline Image primitive_mask(const SceneSpec& scene, const Camera& cam, int index) {
  cam.validate();
  Image mask(cam.width, cam.height, 1);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const auto hit = trace(scene, camera_ray(cam, x, y));
      if (hit && hit->primitive == index) mask.at(x, y) = 1.f;
    }
  return mask;
}

// -- procedural environments -----------------------------------------------------

/// Sky gradient, ground, a soft sun and two colored blobs.
inline EnvMap procedural_env(std::uint64_t seed, int width = 64, int height = 32, std::string id = {}) {
  CounterRng rng(hash_key(seed, 0x5e17));
  auto color = [&](double lo, double hi) {
    return Vec3d(lo + (hi - lo) * rng.uniform(), lo + (hi - lo) * rng.uniform(), lo + (hi - lo) * rng.uniform());
  };
  const Vec3d zenith = color(0.1, 0.6), horizon = color(0.3, 0.9), ground = color(0.05, 0.35);
  auto direction = [&](double min_el, double max_el) {
    const double az = 2 * kPi<double> * rng.uniform();
    const double el = (min_el + (max_el - min_el) * rng.uniform()) * kPi<double> / 180.0;
    return Vec3d(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
  };
  const Vec3d sun_dir = direction(10, 65);
  const Vec3d sun = (1.5 + 2.0 * rng.uniform()) * Vec3d(1.0, 0.85 + 0.15 * rng.uniform(), 0.6 + 0.3 * rng.uniform());
  const double sun_width = 0.12 + 0.1 * rng.uniform();
  Vec3d blob_dir[2], blob_col[2];
  double blob_width[2];
  for (int i = 0; i < 2; ++i) {
    blob_dir[i] = direction(-30, 60);
    blob_col[i] = color(0.2, 1.2);
    blob_width[i] = 0.25 + 0.25 * rng.uniform();
  }
  std::vector<float> tex(std::size_t(width) * height * 3);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const Vec3d d = texel_direction(x, y, width, height);
      Vec3d c;
      if (d.z() >= 0) {
        const double t = std::sqrt(d.z());
        c = (1 - t) * horizon + t * zenith;
      } else {
        c = ground * (0.6 + 0.4 * (1.0 + d.z()));
      }
      c += sun * std::exp((d.dot(sun_dir) - 1.0) / (sun_width * sun_width));
      for (int i = 0; i < 2; ++i)
        c += blob_col[i] * std::exp((d.dot(blob_dir[i]) - 1.0) / (blob_width[i] * blob_width[i]));
      for (int k = 0; k < 3; ++k) tex[(std::size_t(y) * width + x) * 3 + k] = float(c[k]);
    }
  return EnvMap(width, height, std::move(tex), std::move(id));
}

// -- cameras -------------------------------------------------------------------

struct CameraSpec {
  Vec3d position = Vec3d(3, 0, 0);
  Vec3d target = Vec3d::Zero();
  Vec3d up = Vec3d::UnitZ();
  int width = 64, height = 64;
  double focal = 100.0;

  Camera camera() const { return Camera::look_at(position, target, up, width, height, focal); }
};

inline Json camera_to_json(const CameraSpec& c) {
  return Json{{"position", vec_json(c.position)}, {"target", vec_json(c.target)}, {"up", vec_json(c.up)},
              {"width", c.width},                 {"height", c.height},           {"focal", c.focal}};
}

inline CameraSpec camera_from_json(const Json& j) {
  CameraSpec c;
  try {
    c.position = json_vec(j.at("position"), "position");
    c.target = json_vec(j.value("target", Json::array({0.0, 0.0, 0.0})), "target");
    c.up = json_vec(j.value("up", Json::array({0.0, 0.0, 1.0})), "up");
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.focal = j.at("focal").get<double>();
  } catch (const Json::exception& e) {
    throw ArgumentError(std::string("invalid camera pose: ") + e.what());
  }
  if (c.width <= 0 || c.height <= 0 || !(c.focal > 0)) throw ArgumentError("invalid camera pose: bad intrinsics");
  if ((c.position - c.target).norm() < 1e-9) throw ArgumentError("invalid camera pose: position equals target");
  return c;
}

/// Cameras on the upper hemisphere (Fibonacci spiral in elevation band
/// [15, 60] degrees) looking at the origin. `phase` offsets the azimuths.
inline std::vector<CameraSpec> hemisphere_cameras(int count, int width, int height, double phase = 0.0,
                                                  double distance = 3.0) {
  std::vector<CameraSpec> out;
  const double golden = kPi<double> * (3.0 - std::sqrt(5.0));
  const double zlo = std::sin(15.0 * kPi<double> / 180.0), zhi = std::sin(60.0 * kPi<double> / 180.0);
  for (int i = 0; i < count; ++i) {
    const double z = zlo + (zhi - zlo) * (i + 0.5) / count;
    const double r = std::sqrt(1 - z * z);
    const double az = golden * i + phase;
    CameraSpec c;
    c.position = distance * Vec3d(r * std::cos(az), r * std::sin(az), z);
    c.width = width;
    c.height = height;
    c.focal = 1.6 * width;
    out.push_back(c);
  }
  return out;
}

// -- datasets --------------------------------------------------------------------

struct ImageEntry {
  int view = 0;
  int env = 0;
  std::string path;
  std::string alpha_path;
  std::string split;
  Mat3d env_rotation = Mat3d::Identity();  ///< camera-from-world; rotate(env, R) is the camera-aligned map
};

struct EnvEntry {
  std::string id;
  std::string path;
  bool held_out = false;
};

struct Manifest {
  std::string scene_hash;
  std::vector<CameraSpec> cameras;
  std::vector<EnvEntry> envmaps;
  std::vector<ImageEntry> images;

  std::vector<int> indices(const std::string& split) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < images.size(); ++i)
      if (images[i].split == split) out.push_back(int(i));
    return out;
  }
};

inline Json manifest_to_json(const Manifest& m) {
  Json cams = Json::array(), envs = Json::array(), imgs = Json::array();
  for (const auto& c : m.cameras) cams.push_back(camera_to_json(c));
  for (const auto& e : m.envmaps) envs.push_back({{"id", e.id}, {"path", e.path}, {"held_out", e.held_out}});
  for (const auto& im : m.images) {
    Json r = Json::array();
    for (int i = 0; i < 3; ++i) r.push_back({im.env_rotation(i, 0), im.env_rotation(i, 1), im.env_rotation(i, 2)});
    imgs.push_back({{"view", im.view},
                    {"env", im.env},
                    {"path", im.path},
                    {"alpha_path", im.alpha_path},
                    {"split", im.split},
                    {"env_rotation", r}});
  }
  return Json{{"scene_hash", m.scene_hash}, {"cameras", cams}, {"envmaps", envs}, {"images", imgs}};
}

inline Manifest manifest_from_json(const Json& j) {
  Manifest m;
  try {
    m.scene_hash = j.at("scene_hash").get<std::string>();
    for (const auto& c : j.at("cameras")) m.cameras.push_back(camera_from_json(c));
    for (const auto& e : j.at("envmaps"))
      m.envmaps.push_back({e.at("id").get<std::string>(), e.at("path").get<std::string>(), e.value("held_out", false)});
    for (const auto& r : j.at("images")) {
      ImageEntry im;
      im.view = r.at("view").get<int>();
      im.env = r.at("env").get<int>();
      im.path = r.at("path").get<std::string>();
      im.alpha_path = r.value("alpha_path", std::string());
      im.split = r.at("split").get<std::string>();
      const Json& rot = r.at("env_rotation");
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) im.env_rotation(a, b) = rot.at(std::size_t(a)).at(std::size_t(b)).get<double>();
      if (im.view < 0 || im.view >= int(m.cameras.size()) || im.env < 0 || im.env >= int(m.envmaps.size()))
        throw ArgumentError("manifest image refers to a missing camera or map");
      m.images.push_back(im);
    }
  } catch (const Json::exception& e) {
    throw ArgumentError(std::string("invalid manifest: ") + e.what());
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& dir, const Manifest& m) {
  detail::write_file(dir / "manifest.json", manifest_to_json(m).dump(2) + "\n");
}

inline Manifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  const std::string text = detail::read_file(path);
  try {
    return manifest_from_json(Json::parse(text));
  } catch (const Json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), e.byte);
  }
}

struct GenerateOptions {
  int views = 24;
  int eval_views = 8;
  int holdout = 2;
  int width = 64, height = 64;
  std::uint64_t seed = 0;
};

/// Renders views x train maps (split "train") and eval views x held-out maps
/// (split "eval"). The held-out maps are the last `holdout` of `envs`. Maps
/// are copied into the dataset in the world frame.
inline Manifest generate(const SceneSpec& scene, const std::vector<EnvMap>& envs, const GenerateOptions& opt,
                         const std::filesystem::path& out) {
  scene.validate();
  if (opt.views < 1 || opt.eval_views < 0) throw ArgumentError("view counts must be positive");
  if (envs.empty()) throw ArgumentError("at least one environment map is required");
  if (opt.holdout < 0 || opt.holdout >= int(envs.size()))
    throw ArgumentError("holdout must be smaller than the number of environment maps");
  if (opt.width <= 0 || opt.height <= 0) throw ArgumentError("image size must be positive");
  const double phase = 2 * kPi<double> * uniform_from(hash_key(opt.seed, 0xca3));
  Manifest m;
  m.scene_hash = scene_hash(scene);
  m.cameras = hemisphere_cameras(opt.views, opt.width, opt.height, phase);
  const auto eval_cams = hemisphere_cameras(opt.eval_views, opt.width, opt.height, phase + 0.5);
  m.cameras.insert(m.cameras.end(), eval_cams.begin(), eval_cams.end());

  const int train_envs = int(envs.size()) - opt.holdout;
  for (std::size_t e = 0; e < envs.size(); ++e) {
    const std::string id = envs[e].id().empty() ? "env" + std::to_string(e) : envs[e].id();
    const std::string rel = "envs/" + id + ".pfm";
    save_envmap(out / rel, envs[e]);
    m.envmaps.push_back({id, rel, int(e) >= train_envs});
  }
  auto add = [&](int view, int env, const std::string& split) {
    ImageEntry im;
    im.view = view;
    im.env = env;
    im.split = split;
    char name[64];
    std::snprintf(name, sizeof name, "images/v%03d_e%03d", view, env);
    im.path = std::string(name) + ".pfm";
    im.alpha_path = std::string(name) + "_alpha.pfm";
    im.env_rotation = m.cameras[std::size_t(view)].camera().rotation.transpose();
    m.images.push_back(im);
  };
  for (int e = 0; e < train_envs; ++e)
    for (int v = 0; v < opt.views; ++v) add(v, e, "train");
  for (int e = train_envs; e < int(envs.size()); ++e)
    for (int v = 0; v < opt.eval_views; ++v) add(opt.views + v, e, "eval");

  for (const auto& im : m.images) {
    const OracleImage img = render_oracle(scene, envs[std::size_t(im.env)], m.cameras[std::size_t(im.view)].camera());
    write_pfm(out / im.path, img.color);
    write_pfm(out / im.alpha_path, img.alpha);
  }
  write_manifest(out, m);
  return m;
}

/// A loaded dataset: manifest plus maps and images in memory.
struct Dataset {
  std::filesystem::path root;
  Manifest manifest;
  std::vector<EnvMap> envs;
  std::vector<Image> images;  ///< parallel to manifest.images
  std::vector<Image> alphas;

  static Dataset load(const std::filesystem::path& dir) {
    Dataset d;
    d.root = dir;
    d.manifest = read_manifest(dir);
    for (const auto& e : d.manifest.envmaps) {
      EnvMap env = load_envmap(dir / e.path);
      env.set_id(e.id);
      d.envs.push_back(std::move(env));
    }
    for (const auto& im : d.manifest.images) {
      d.images.push_back(read_pfm(dir / im.path));
      if (d.images.back().channels != 3) throw ParseError(im.path + ": expected an RGB image", 0);
      d.alphas.push_back(im.alpha_path.empty() ? Image() : read_pfm(dir / im.alpha_path));
    }
    return d;
  }

  Camera camera(int image) const {
    return manifest.cameras[std::size_t(manifest.images[std::size_t(image)].view)].camera();
  }
};

}  // namespace relight
