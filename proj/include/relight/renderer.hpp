#pragma once

#include "relight/conditioning.hpp"
#include "relight/core.hpp"
#include "relight/envmap.hpp"
#include "relight/field.hpp"
#include "relight/image.hpp"

#include <unsupported/Eigen/AutoDiff>

#include <optional>
#include <vector>

namespace relight {

struct Ray {
  Vec3d origin = Vec3d::Zero();
  Vec3d dir = Vec3d::UnitZ();
  double near = 0.0;
  double far = 1e30;
};

/// Pinhole camera. Camera frame: +X right, +Y down, +Z forward.
struct Camera {
  Mat3d rotation = Mat3d::Identity();  ///< world-from-camera
  Vec3d position = Vec3d::Zero();
  double focal = 1.0;  ///< pixels
  double cx = 0.0, cy = 0.0;
  int width = 1, height = 1;

  static Camera look_at(const Vec3d& eye, const Vec3d& target, const Vec3d& up, int width, int height,
                        double focal) {
    const Vec3d fwd = (target - eye).normalized();
    Vec3d right = fwd.cross(up);
    if (right.norm() < 1e-9) right = fwd.cross(Vec3d::UnitX());
    right.normalize();
    const Vec3d down = fwd.cross(right);
    Camera c;
    c.rotation.col(0) = right;
    c.rotation.col(1) = down;
    c.rotation.col(2) = fwd;
    c.position = eye;
    c.focal = focal;
    c.width = width;
    c.height = height;
    c.cx = width * 0.5;
    c.cy = height * 0.5;
    return c;
  }

  /// Orbit around the origin; yaw about +Z, pitch above the XY plane (degrees).
  static Camera orbit(double yaw_deg, double pitch_deg, double dist, int width, int height, double focal) {
    const double yaw = yaw_deg * kPi<double> / 180.0, pitch = pitch_deg * kPi<double> / 180.0;
    const Vec3d eye = dist * Vec3d(std::cos(pitch) * std::cos(yaw), std::cos(pitch) * std::sin(yaw), std::sin(pitch));
    return look_at(eye, Vec3d::Zero(), Vec3d::UnitZ(), width, height, focal);
  }

  void validate() const {
    if (!(focal > 0)) throw ArgumentError("camera focal length must be positive");
    if (width <= 0 || height <= 0) throw ArgumentError("camera image size must be positive");
    if (!is_rotation(rotation)) throw ArgumentError("camera rotation is not orthonormal");
  }
};

/// Ray through the center of pixel (x, y).
inline Ray camera_ray(const Camera& cam, int x, int y) {
  if (x < 0 || y < 0 || x >= cam.width || y >= cam.height)
    throw ArgumentError("pixel (" + std::to_string(x) + ", " + std::to_string(y) + ") outside the image");
  const Vec3d local((x + 0.5 - cam.cx) / cam.focal, (y + 0.5 - cam.cy) / cam.focal, 1.0);
  Ray r;
  r.origin = cam.position;
  r.dir = (cam.rotation * local).normalized();
  return r;
}

struct RenderConfig {
  int primary_samples = 64;
  int reflect_samples = 32;
  int reflect_rays = 5;
  std::uint64_t seed = 0;
  bool white_background = false;
  bool jitter = true;
  /// Rays whose accumulated opacity is below this show the background only.
  double background_opacity = 0.05;
  double reflect_offset = 0.1;
  double reflect_length = 1.6;

  void validate() const {
    if (primary_samples < 1 || reflect_samples < 1 || reflect_rays < 1)
      throw ArgumentError("sample counts must be >= 1");
  }
};

/// Entry and exit distances of a ray through [-1, 1]^3 clipped to [near, far].
inline std::optional<std::pair<double, double>> box_interval(const Ray& r) {
  double t0 = r.near, t1 = r.far;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(r.dir[a]) < 1e-15) {
      if (std::abs(r.origin[a]) > 1.0) return std::nullopt;
      continue;
    }
    double ta = (-1.0 - r.origin[a]) / r.dir[a], tb = (1.0 - r.origin[a]) / r.dir[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (!(t0 < t1)) return std::nullopt;
  return std::make_pair(t0, t1);
}

// ---------------------------------------------------------------------------
// Volume compositing

/// alpha_i = 1 - exp(-density_i * delta_i), w_i = alpha_i * prod_{j<i}(1 - alpha_j).
template <class T>
struct CompositeResult {
  std::vector<T> weights;
  T opacity{};
};

template <class T>
CompositeResult<T> composite_weights(const std::vector<T>& density, const std::vector<T>& delta) {
  CompositeResult<T> r;
  r.weights.resize(density.size());
  T trans = T(1);
  for (std::size_t i = 0; i < density.size(); ++i) {
    const T alpha = T(1) - std::exp(-density[i] * delta[i]);
    r.weights[i] = trans * alpha;
    trans *= T(1) - alpha;
  }
  r.opacity = T(1) - trans;
  return r;
}

/// Composited value sum_i w_i v_i together with the accumulated opacity.
template <class T, class V>
std::pair<V, T> composite(const std::vector<T>& density, const std::vector<T>& delta, const std::vector<V>& values) {
  const auto c = composite_weights(density, delta);
  V out = values.at(0) * T(0);
  for (std::size_t i = 0; i < values.size(); ++i) out += c.weights[i] * values[i];
  return {out, c.opacity};
}

namespace detail {

/// Uniform-spacing compositing over `n` samples starting at `tau`.
template <class T>
T composite_uniform(const T* tau, int n, T delta, T* w) {
  T trans = T(1);
  for (int i = 0; i < n; ++i) {
    const T alpha = T(1) - std::exp(-tau[i] * delta);
    w[i] = trans * alpha;
    trans *= T(1) - alpha;
  }
  return T(1) - trans;
}

/// Given d(loss)/d(w_i), accumulates d(loss)/d(tau_i).
template <class T>
void composite_uniform_backward(const T* w, int n, T delta, const T* gw, T* dtau) {
  T suffix = T(0);  // sum_{i>k} w_i gw_i
  T total_w = T(0);
  for (int i = 0; i < n; ++i) total_w += w[i];
  // T_{k+1} = 1 - sum_{i<=k} w_i
  std::vector<T> trans_next(static_cast<std::size_t>(n));
  T acc = T(0);
  for (int k = 0; k < n; ++k) {
    acc += w[k];
    trans_next[std::size_t(k)] = T(1) - acc;
  }
  for (int k = n - 1; k >= 0; --k) {
    dtau[k] += delta * (trans_next[std::size_t(k)] * gw[k] - suffix);
    suffix += w[k] * gw[k];
  }
  (void)total_w;
}

using AD4 = Eigen::AutoDiffScalar<Eigen::Matrix<double, 4, 1>>;
using AD3 = Eigen::AutoDiffScalar<Eigen::Matrix<double, 3, 1>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// von Mises-Fisher sampling

/// Concentration of the reflection lobe for a composited roughness.
template <class T>
T vmf_width(T roughness) {
  return T(2) / (roughness * roughness);
}

/// One vMF draw by inverse CDF on cos(theta) and uniform azimuth. Works with
/// autodiff scalars (derivatives w.r.t. mean and kappa).
template <class S>
Vec3<S> vmf_direction(const Vec3<S>& mean, const S& kappa, double u1, double u2) {
  using std::cos;
  using std::exp;
  using std::log;
  using std::sin;
  using std::sqrt;
  u1 = std::max(u1, 1e-12);
  const S w = S(1.0) + log(u1 + (1.0 - u1) * exp(S(-2.0) * kappa)) / kappa;
  S s2 = S(1.0) - w * w;
  S st = value_of(s2) > 1e-20 ? S(sqrt(s2)) : S(0.0);
  // orthonormal basis around the mean (branchless construction)
  const double sign = value_of(mean.z()) >= 0 ? 1.0 : -1.0;
  const S a = S(-1.0) / (sign + mean.z());
  const S b = mean.x() * mean.y() * a;
  const Vec3<S> e1(S(1.0) + sign * mean.x() * mean.x() * a, sign * b, -sign * mean.x());
  const Vec3<S> e2(b, sign + mean.y() * mean.y() * a, -mean.y());
  const double phi = 2 * kPi<double> * u2;
  return w * mean + st * (std::cos(phi) * e1 + std::sin(phi) * e2);
}

/// K unit directions from vMF(mean, kappa); the first is the mean itself.
inline std::vector<Vec3d> sample_vmf(const Vec3d& mean, double kappa, int count, CounterRng& rng) {
  if (!(kappa > 0)) throw ArgumentError("vMF concentration must be positive");
  if (count < 1) throw ArgumentError("vMF sample count must be >= 1");
  std::vector<Vec3d> out{mean};
  for (int j = 1; j < count; ++j) {
    const double u1 = rng.uniform(), u2 = rng.uniform();
    out.push_back(vmf_direction<double>(mean, kappa, u1, u2).normalized());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering context: everything derived once per environment map

template <class T>
struct RenderContext {
  PrefilterStack stack;
  MatX<T> general;  ///< 128 x 1 (shared) or 128 x R (per ray)
  EnvMap background;
};

/// Downsamples per the field config, prefilters, and computes the general
/// embedding (or the mean appearance code in per-image mode).
template <class T>
RenderContext<T> make_render_context(const FieldParams<T>& params, const EnvMap& env) {
  RenderContext<T> ctx;
  const EnvMap used = downsample(env, params.config.env_downsample);
  ctx.stack = prefilter(used, scale_sigmas(params.config.reference_sigmas, used.width()));
  ctx.background = used;
  if (params.config.general == GeneralConditioning::Encoder) {
    ctx.general = params.encode_general(used);
  } else {
    Eigen::Map<const MatX<T>> codes(params.data() + params.model.codes_offset(), kGeneralEmbeddingDim,
                                    params.config.appearance_codes);
    ctx.general = codes.rowwise().mean();
  }
  return ctx;
}

// ---------------------------------------------------------------------------
// Reflection casting

template <class T>
struct ReflectionTape {
  int surfaces = 0, rays = 0, samples = 0;
  T delta{};
  std::vector<double> t;  ///< distance of every sample along its ray
  MatX<T> pos;
  GeometryCache<T> geo;
  nn::MlpCache<T> sample_feature;
  MatX<T> radiance;  ///< 3 x (surfaces*rays), escape lookups
  std::vector<Eigen::Matrix3d> radiance_jac;
  nn::MlpCache<T> escape_feature;
  VecX<T> w;
  VecX<T> opacity;  ///< per reflected ray
  MatX<T> feature;  ///< D_f x surfaces
};

/// Marches every direction from its surface origin, composites per-sample
/// features, adds the escaped environment feature, and averages per surface.
/// `dirs` holds `rays` consecutive columns per surface.
template <class T>
void reflection_forward(const FieldModel& model, const T* p, const PrefilterStack& stack, const MatX<T>& origins,
                        const MatX<T>& dirs, const std::vector<std::uint64_t>& keys, const RenderConfig& cfg,
                        ReflectionTape<T>& tp) {
  const int S = int(origins.cols()), K = int(dirs.cols()) / std::max(S, 1), N = cfg.reflect_samples;
  tp.surfaces = S;
  tp.rays = K;
  tp.samples = N;
  tp.delta = T(cfg.reflect_length / N);
  const Eigen::Index cols = Eigen::Index(S) * K * N;
  tp.pos.resize(3, cols);
  tp.t.resize(std::size_t(cols));
  for (int s = 0; s < S; ++s)
    for (int j = 0; j < K; ++j)
      for (int k = 0; k < N; ++k) {
        const double xi = cfg.jitter ? uniform_from(hash_key(keys[std::size_t(s)], 3, std::uint64_t(j), std::uint64_t(k))) : 0.5;
        const Eigen::Index c = (Eigen::Index(s) * K + j) * N + k;
        const double t = cfg.reflect_offset + (k + xi) * cfg.reflect_length / N;
        tp.t[std::size_t(c)] = t;
        tp.pos.col(c) = origins.col(s) + T(t) * dirs.col(Eigen::Index(s) * K + j);
      }
  model.geometry_forward(p, tp.pos, tp.geo);
  model.sample_feature_forward(p, tp.geo.features, tp.sample_feature);

  const Eigen::Index nd = Eigen::Index(S) * K;
  tp.radiance = MatX<T>::Zero(3, nd);
  tp.radiance_jac.assign(std::size_t(nd), Eigen::Matrix3d::Zero());
  if (model.config().specular_conditioning) {
    for (Eigen::Index d = 0; d < nd; ++d) {
      Vec3<detail::AD3> ad;
      for (int a = 0; a < 3; ++a) ad[a] = detail::AD3(double(dirs(a, d)), 3, a);
      const Vec3<detail::AD3> v = sample<detail::AD3>(stack.base, ad);
      for (int a = 0; a < 3; ++a) {
        tp.radiance(a, d) = T(v[a].value());
        tp.radiance_jac[std::size_t(d)].row(a) = v[a].derivatives().transpose();
      }
    }
  }
  model.escape_feature_forward(p, tp.radiance, tp.escape_feature);

  const int df = model.config().reflection_features;
  tp.w.resize(cols);
  tp.opacity.resize(nd);
  tp.feature = MatX<T>::Zero(df, S);
  const MatX<T>& f = tp.sample_feature.output;
  const MatX<T>& e = tp.escape_feature.output;
  for (Eigen::Index d = 0; d < nd; ++d) {
    const Eigen::Index c0 = d * N;
    tp.opacity(d) = detail::composite_uniform(tp.geo.density.data() + c0, N, tp.delta, tp.w.data() + c0);
    VecX<T> F = (T(1) - tp.opacity(d)) * e.col(d);
    for (int k = 0; k < N; ++k) F += tp.w(c0 + k) * f.col(c0 + k);
    tp.feature.col(d / K) += F / T(K);
  }
}

template <class T>
void reflection_backward(const FieldModel& model, const T* p, const ReflectionTape<T>& tp, const MatX<T>& dfeature,
                         T* grad, MatX<T>& dorigins, MatX<T>& ddirs) {
  const int S = tp.surfaces, K = tp.rays, N = tp.samples;
  const Eigen::Index nd = Eigen::Index(S) * K, cols = nd * N;
  const MatX<T>& f = tp.sample_feature.output;
  const MatX<T>& e = tp.escape_feature.output;
  MatX<T> df(f.rows(), cols), de(e.rows(), nd);
  VecX<T> dtau = VecX<T>::Zero(cols);
  std::vector<T> gw(static_cast<std::size_t>(N));
  for (Eigen::Index d = 0; d < nd; ++d) {
    const VecX<T> dF = dfeature.col(d / K) / T(K);
    const Eigen::Index c0 = d * N;
    const T de_dot = dF.dot(e.col(d));
    for (int k = 0; k < N; ++k) {
      gw[std::size_t(k)] = dF.dot(f.col(c0 + k)) - de_dot;
      df.col(c0 + k) = tp.w(c0 + k) * dF;
    }
    de.col(d) = (T(1) - tp.opacity(d)) * dF;
    detail::composite_uniform_backward(tp.w.data() + c0, N, tp.delta, gw.data(), dtau.data() + c0);
  }
  MatX<T> dfin;
  model.feature_mlp().backward(p, tp.sample_feature, df, grad, &dfin);
  const MatX<T> dgrid = dfin.topRows(model.grid().output_dim());
  MatX<T> dein;
  model.feature_mlp().backward(p, tp.escape_feature, de, grad, &dein);

  ddirs = MatX<T>::Zero(3, nd);
  if (model.config().specular_conditioning) {
    for (Eigen::Index d = 0; d < nd; ++d) {
      Eigen::Vector3d drad;
      for (int a = 0; a < 3; ++a)
        drad[a] = double(dein(dein.rows() - 3 + a, d)) / (1.0 + double(tp.radiance(a, d)));
      ddirs.col(d) += (tp.radiance_jac[std::size_t(d)].transpose() * drad).template cast<T>();
    }
  }
  MatX<T> dpos;
  model.geometry_backward<T>(p, tp.geo, &dtau, nullptr, nullptr, nullptr, nullptr, &dgrid, grad, &dpos);
  dorigins = MatX<T>::Zero(3, S);
  for (Eigen::Index c = 0; c < cols; ++c) {
    const Eigen::Index d = c / N;
    dorigins.col(d / K) += dpos.col(c);
    ddirs.col(d) += T(tp.t[std::size_t(c)]) * dpos.col(c);
  }
}

/// Reflection feature for one surface point and explicit directions.
template <class T>
VecX<T> cast_reflection(const FieldParams<T>& params, const PrefilterStack& stack, const Vec3<T>& origin,
                        const std::vector<Vec3<T>>& directions, const RenderConfig& cfg, std::uint64_t key = 0) {
  MatX<T> o = origin;
  MatX<T> d(3, Eigen::Index(directions.size()));
  for (std::size_t j = 0; j < directions.size(); ++j) d.col(Eigen::Index(j)) = directions[j];
  ReflectionTape<T> tp;
  reflection_forward(params.model, params.data(), stack, o, d, {key}, cfg, tp);
  return tp.feature.col(0);
}

// ---------------------------------------------------------------------------
// Batched ray rendering with a reverse pass

template <class T>
struct RayBatchTape {
  std::vector<Ray> rays;
  std::vector<std::uint64_t> keys;
  RenderConfig cfg;
  // rays that intersect the box
  std::vector<int> active;
  std::vector<double> tnear, delta;
  MatX<T> ppos;
  std::vector<double> pt;
  GeometryCache<T> pgeo;
  VecX<T> pw;
  VecX<T> popacity;
  // surface rays (indices into `active`)
  std::vector<int> surface;
  VecX<T> tbar, rbar, mbar, kappa, nsum_len;
  MatX<T> bbar, nbar, xbar, omega;
  std::vector<Eigen::Matrix3d> reflect_jac;
  std::vector<Eigen::Matrix<double, 3, 4>> vmf_jac;
  std::vector<Eigen::Matrix3d> spec_jac;  // per surface and level
  MatX<T> dirs;
  ReflectionTape<T> refl;
  ColorInputs<T> color_in;
  ColorCache<T> color_cache;
  MatX<T> surface_color;
  // outputs
  MatX<T> background;  ///< 3 x R
  MatX<T> blended;     ///< 3 x R
  MatX<T> color;       ///< 3 x R final
  std::vector<int> surface_of_ray;  ///< index into `surface` or -1
  bool shared_general = true;
};

/// Renders a batch of rays. `general` is 128 x 1 or 128 x R.
template <class T>
MatX<T> render_rays(const FieldParams<T>& params, const PrefilterStack& stack, const EnvMap& background,
                    const MatX<T>& general, const std::vector<Ray>& rays, const std::vector<std::uint64_t>& keys,
                    const RenderConfig& cfg, RayBatchTape<T>& tp) {
  cfg.validate();
  const FieldModel& model = params.model;
  const T* p = params.data();
  const int R = int(rays.size()), Np = cfg.primary_samples, K = cfg.reflect_rays;
  if (general.rows() != kGeneralEmbeddingDim || (general.cols() != 1 && general.cols() != R))
    throw ArgumentError("general embedding must be 128 x 1 or 128 x rays");
  tp.rays = rays;
  tp.keys = keys;
  tp.cfg = cfg;
  tp.shared_general = general.cols() == 1;
  tp.active.clear();
  tp.tnear.clear();
  tp.delta.clear();
  tp.background.resize(3, R);
  for (int r = 0; r < R; ++r) {
    if (cfg.white_background)
      tp.background.col(r).setOnes();
    else
      tp.background.col(r) = sample<double>(background, rays[std::size_t(r)].dir).template cast<T>();
    if (auto iv = box_interval(rays[std::size_t(r)])) {
      tp.active.push_back(r);
      tp.tnear.push_back(iv->first);
      tp.delta.push_back((iv->second - iv->first) / Np);
    }
  }
  const int A = int(tp.active.size());

  // primary samples
  tp.ppos.resize(3, Eigen::Index(A) * Np);
  tp.pt.resize(std::size_t(A) * Np);
  for (int a = 0; a < A; ++a) {
    const Ray& ray = rays[std::size_t(tp.active[std::size_t(a)])];
    const std::uint64_t key = keys[std::size_t(tp.active[std::size_t(a)])];
    for (int i = 0; i < Np; ++i) {
      const double xi = cfg.jitter ? uniform_from(hash_key(key, 1, std::uint64_t(i))) : 0.5;
      const double t = tp.tnear[std::size_t(a)] + (i + xi) * tp.delta[std::size_t(a)];
      tp.pt[std::size_t(a) * Np + i] = t;
      tp.ppos.col(Eigen::Index(a) * Np + i) = (ray.origin + t * ray.dir).template cast<T>();
    }
  }
  model.geometry_forward(p, tp.ppos, tp.pgeo);
  tp.pw.resize(Eigen::Index(A) * Np);
  tp.popacity.resize(A);
  tp.surface.clear();
  for (int a = 0; a < A; ++a) {
    const Eigen::Index c0 = Eigen::Index(a) * Np;
    tp.popacity(a) =
        detail::composite_uniform(tp.pgeo.density.data() + c0, Np, T(tp.delta[std::size_t(a)]), tp.pw.data() + c0);
    if (double(tp.popacity(a)) >= cfg.background_opacity && double(tp.popacity(a)) > 0) tp.surface.push_back(a);
  }

  // expected surface
  const int S = int(tp.surface.size());
  const int db = model.config().bottleneck;
  tp.tbar.resize(S);
  tp.rbar.resize(S);
  tp.mbar.resize(S);
  tp.kappa.resize(S);
  tp.nsum_len.resize(S);
  tp.bbar.resize(db, S);
  tp.nbar.resize(3, S);
  tp.xbar.resize(3, S);
  tp.omega.resize(3, S);
  tp.reflect_jac.assign(std::size_t(S), Eigen::Matrix3d::Zero());
  tp.vmf_jac.assign(std::size_t(S) * K, Eigen::Matrix<double, 3, 4>::Zero());
  const int L = int(stack.level_count());
  tp.spec_jac.assign(std::size_t(S) * L, Eigen::Matrix3d::Zero());
  tp.dirs.resize(3, Eigen::Index(S) * K);
  tp.color_in.specular.resize(3 * L, S);
  std::vector<std::uint64_t> surface_keys(static_cast<std::size_t>(S));
  for (int s = 0; s < S; ++s) {
    const int a = tp.surface[std::size_t(s)];
    const Ray& ray = rays[std::size_t(tp.active[std::size_t(a)])];
    surface_keys[std::size_t(s)] = keys[std::size_t(tp.active[std::size_t(a)])];
    const Eigen::Index c0 = Eigen::Index(a) * Np;
    const T acc = tp.popacity(a);
    T st = T(0), sr = T(0), sm = T(0);
    VecX<T> sb = VecX<T>::Zero(db);
    Vec3<T> sn = Vec3<T>::Zero();
    for (int i = 0; i < Np; ++i) {
      const T w = tp.pw(c0 + i);
      st += w * T(tp.pt[std::size_t(c0 + i)]);
      sr += w * tp.pgeo.roughness(c0 + i);
      sm += w * tp.pgeo.mix(c0 + i);
      sb += w * tp.pgeo.bottleneck.col(c0 + i);
      sn += w * tp.pgeo.normal.col(c0 + i);
    }
    tp.tbar(s) = st / acc;
    tp.rbar(s) = sr / acc;
    tp.mbar(s) = sm / acc;
    tp.bbar.col(s) = sb / acc;
    tp.nsum_len(s) = sn.norm();
    tp.nbar.col(s) = tp.nsum_len(s) > T(1e-12) ? Vec3<T>(sn / tp.nsum_len(s)) : Vec3<T>::UnitZ();
    tp.xbar.col(s) = (ray.origin + double(tp.tbar(s)) * ray.dir).template cast<T>();
    tp.kappa(s) = vmf_width(tp.rbar(s));

    // reflection direction and its Jacobian w.r.t. the normal
    Vec3<detail::AD3> nad, dad;
    for (int c = 0; c < 3; ++c) {
      nad[c] = detail::AD3(double(tp.nbar(c, s)), 3, c);
      dad[c] = detail::AD3(ray.dir[c], Eigen::Vector3d::Zero());
    }
    const Vec3<detail::AD3> om = reflect<detail::AD3>(dad, nad);
    for (int c = 0; c < 3; ++c) {
      tp.omega(c, s) = T(om[c].value());
      tp.reflect_jac[std::size_t(s)].row(c) = om[c].derivatives().transpose();
    }
    // vMF lobe
    Vec3<detail::AD4> mad;
    for (int c = 0; c < 3; ++c) mad[c] = detail::AD4(double(tp.omega(c, s)), 4, c);
    const detail::AD4 kad(double(tp.kappa(s)), 4, 3);
    for (int j = 0; j < K; ++j) {
      const Eigen::Index col = Eigen::Index(s) * K + j;
      if (j == 0) {
        tp.dirs.col(col) = tp.omega.col(s);
        tp.vmf_jac[std::size_t(col)].template leftCols<3>().setIdentity();
        continue;
      }
      const std::uint64_t key = surface_keys[std::size_t(s)];
      const Vec3<detail::AD4> v =
          vmf_direction<detail::AD4>(mad, kad, uniform_from(hash_key(key, 2, std::uint64_t(j), 0)),
                                     uniform_from(hash_key(key, 2, std::uint64_t(j), 1)));
      for (int c = 0; c < 3; ++c) {
        tp.dirs(c, col) = T(v[c].value());
        tp.vmf_jac[std::size_t(col)].row(c) = v[c].derivatives().transpose();
      }
    }
    // specular conditioning
    Vec3<detail::AD3> oad;
    for (int c = 0; c < 3; ++c) oad[c] = detail::AD3(double(tp.omega(c, s)), 3, c);
    const auto spec = encode_specular<detail::AD3>(stack, oad);
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < 3; ++c) {
        tp.color_in.specular(3 * l + c, s) = T(spec[std::size_t(l)][c].value());
        tp.spec_jac[std::size_t(s) * L + l].row(c) = spec[std::size_t(l)][c].derivatives().transpose();
      }
  }

  // reflected rays
  reflection_forward(model, p, stack, tp.xbar, tp.dirs, surface_keys, cfg, tp.refl);

  // color decoder
  tp.color_in.bottleneck = tp.bbar;
  tp.color_in.mix = tp.mbar;
  tp.color_in.view.resize(3, S);
  tp.color_in.general.resize(kGeneralEmbeddingDim, S);
  for (int s = 0; s < S; ++s) {
    const int r = tp.active[std::size_t(tp.surface[std::size_t(s)])];
    tp.color_in.view.col(s) = rays[std::size_t(r)].dir.template cast<T>();
    tp.color_in.general.col(s) = general.col(tp.shared_general ? 0 : r);
  }
  tp.color_in.reflection = tp.refl.feature;
  tp.surface_color = S > 0 ? model.decode_color(p, tp.color_in, tp.color_cache) : MatX<T>(3, 0);

  // blend with the background
  tp.blended = tp.background;
  tp.surface_of_ray.assign(std::size_t(R), -1);
  for (int s = 0; s < S; ++s) {
    const int a = tp.surface[std::size_t(s)];
    const int r = tp.active[std::size_t(a)];
    tp.surface_of_ray[std::size_t(r)] = s;
    const T acc = tp.popacity(a);
    tp.blended.col(r) = acc * tp.surface_color.col(s) + (T(1) - acc) * tp.background.col(r);
  }
  tp.color = tp.blended;
  return tp.color;
}

/// Extra per-primary-sample gradients (from regularizers on the tape).
template <class T>
struct SampleGrads {
  VecX<T> weight;  ///< d loss / d w_i
  MatX<T> normal;  ///< d loss / d n_i (3 x samples)
};

/// Reverse pass of render_rays. Accumulates parameter gradients into `grad`
/// and, if requested, the gradient of the general embedding (same shape as
/// the forward `general`).
template <class T>
void render_rays_backward(const FieldParams<T>& params, const RayBatchTape<T>& tp, const MatX<T>& dcolor, T* grad,
                          MatX<T>* dgeneral, const SampleGrads<T>* extra = nullptr) {
  const FieldModel& model = params.model;
  const T* p = params.data();
  const RenderConfig& cfg = tp.cfg;
  const int R = int(tp.rays.size()), Np = cfg.primary_samples, K = cfg.reflect_rays;
  const int A = int(tp.active.size()), S = int(tp.surface.size());
  const int db = model.config().bottleneck;
  const int L = int(tp.color_in.specular.rows() / 3);
  if (dgeneral) *dgeneral = MatX<T>::Zero(kGeneralEmbeddingDim, tp.shared_general ? 1 : R);

  // blend
  MatX<T> dsurf(3, S);
  VecX<T> dacc = VecX<T>::Zero(A);
  for (int s = 0; s < S; ++s) {
    const int a = tp.surface[std::size_t(s)];
    const int r = tp.active[std::size_t(a)];
    const Vec3<T> g = dcolor.col(r);
    dsurf.col(s) = tp.popacity(a) * g;
    dacc(a) += g.dot(tp.surface_color.col(s) - tp.background.col(r));
  }

  // color decoder
  ColorGrads<T> cg;
  if (S > 0) cg = model.decode_color_backward(p, tp.color_in, tp.color_cache, dsurf, grad);
  if (dgeneral && S > 0)
    for (int s = 0; s < S; ++s) {
      const int r = tp.active[std::size_t(tp.surface[std::size_t(s)])];
      dgeneral->col(tp.shared_general ? 0 : r) += cg.general.col(s);
    }

  // reflected rays
  MatX<T> dxbar = MatX<T>::Zero(3, S), ddirs = MatX<T>::Zero(3, Eigen::Index(S) * K);
  if (S > 0) reflection_backward(model, p, tp.refl, cg.reflection, grad, dxbar, ddirs);

  // per-surface chain: dirs/spec -> omega, kappa -> normal, roughness
  VecX<T> dtbar(S), drbar(S), dmbar(S);
  MatX<T> dnbar(3, S), dbbar(db, S);
  for (int s = 0; s < S; ++s) {
    const Ray& ray = tp.rays[std::size_t(tp.active[std::size_t(tp.surface[std::size_t(s)])])];
    Eigen::Vector3d domega = Eigen::Vector3d::Zero();
    double dkappa = 0;
    for (int j = 0; j < K; ++j) {
      const Eigen::Index col = Eigen::Index(s) * K + j;
      const Eigen::Vector4d g = tp.vmf_jac[std::size_t(col)].transpose() * ddirs.col(col).template cast<double>();
      domega += g.head<3>();
      dkappa += g[3];
    }
    for (int l = 0; l < L; ++l)
      domega += tp.spec_jac[std::size_t(s) * L + l].transpose() *
                cg.specular.block(3 * l, s, 3, 1).template cast<double>();
    dnbar.col(s) = (tp.reflect_jac[std::size_t(s)].transpose() * domega).template cast<T>();
    const T rb = tp.rbar(s);
    drbar(s) = T(dkappa) * (T(-4) / (rb * rb * rb));
    dtbar(s) = dxbar.col(s).dot(ray.dir.template cast<T>());
    dmbar(s) = cg.mix(s);
    dbbar.col(s) = cg.bottleneck.col(s);
  }

  // primary composite
  const Eigen::Index P = Eigen::Index(A) * Np;
  VecX<T> ddensity = VecX<T>::Zero(P), drough = VecX<T>::Zero(P), dmix = VecX<T>::Zero(P);
  MatX<T> dnormal = MatX<T>::Zero(3, P), dbott = MatX<T>::Zero(db, P);
  std::vector<T> gw(static_cast<std::size_t>(Np));
  std::vector<int> surface_of_active(std::size_t(A), -1);
  for (int s = 0; s < S; ++s) surface_of_active[std::size_t(tp.surface[std::size_t(s)])] = s;
  for (int a = 0; a < A; ++a) {
    const Eigen::Index c0 = Eigen::Index(a) * Np;
    const int s = surface_of_active[std::size_t(a)];
    for (int i = 0; i < Np; ++i) gw[std::size_t(i)] = extra ? extra->weight(c0 + i) : T(0);
    if (extra) dnormal.middleCols(c0, Np) += extra->normal.middleCols(c0, Np);
    if (s >= 0) {
      const T acc = tp.popacity(a);
      const T inv = T(1) / acc;
      // q_bar = S_q / acc
      const T gt = dtbar(s) * inv, gr = drbar(s) * inv, gm = dmbar(s) * inv;
      const VecX<T> gb = dbbar.col(s) * inv;
      T dacc_total = dacc(a) - (dtbar(s) * tp.tbar(s) + drbar(s) * tp.rbar(s) + dmbar(s) * tp.mbar(s) +
                                dbbar.col(s).dot(tp.bbar.col(s))) * inv;
      Vec3<T> gn = Vec3<T>::Zero();
      if (tp.nsum_len(s) > T(1e-12)) {
        const Vec3<T> nb = tp.nbar.col(s);
        const Vec3<T> g = dnbar.col(s);
        gn = (g - nb * nb.dot(g)) / tp.nsum_len(s);
      }
      for (int i = 0; i < Np; ++i) {
        const Eigen::Index c = c0 + i;
        gw[std::size_t(i)] += gt * T(tp.pt[std::size_t(c)]) + gr * tp.pgeo.roughness(c) + gm * tp.pgeo.mix(c) +
                              gb.dot(tp.pgeo.bottleneck.col(c)) + gn.dot(tp.pgeo.normal.col(c)) + dacc_total;
        const T w = tp.pw(c);
        drough(c) += w * gr;
        dmix(c) += w * gm;
        dbott.col(c) += w * gb;
        dnormal.col(c) += w * gn;
      }
    }
    detail::composite_uniform_backward(tp.pw.data() + c0, Np, T(tp.delta[std::size_t(a)]), gw.data(),
                                       ddensity.data() + c0);
  }
  model.geometry_backward<T>(p, tp.pgeo, &ddensity, &drough, &dnormal, &dmix, &dbott, nullptr, grad, nullptr);
}

// ---------------------------------------------------------------------------
// Single-ray and image entry points

/// Key for the counter RNG of one pixel ray.
inline std::uint64_t pixel_key(std::uint64_t seed, std::uint64_t image, int x, int y) {
  return hash_key(seed, image, std::uint64_t(std::uint32_t(x)) | (std::uint64_t(std::uint32_t(y)) << 32));
}

template <class T>
struct ExpectedSurface {
  bool background = true;
  T opacity{};
  Vec3<T> position = Vec3<T>::Zero();
  Vec3<T> normal = Vec3<T>::UnitZ();
  T roughness{};
  T kappa{};
  VecX<T> bottleneck;
  T mix{};
};

template <class T>
ExpectedSurface<T> expected_surface(const FieldParams<T>& params, const Ray& ray, const RenderConfig& cfg,
                                    std::uint64_t key = 0) {
  // reflections are not needed here; a dark map keeps the batch path uniform
  RenderConfig c = cfg;
  c.reflect_rays = 1;
  c.reflect_samples = 1;
  const EnvMap dark = EnvMap::constant(8, 4, Vec3f::Zero());
  const PrefilterStack stack = prefilter(dark, scale_sigmas(params.config.reference_sigmas, dark.width()));
  RayBatchTape<T> tp;
  render_rays(params, stack, stack.base, MatX<T>(MatX<T>::Zero(kGeneralEmbeddingDim, 1)), std::vector<Ray>{ray},
              std::vector<std::uint64_t>{key}, c, tp);
  ExpectedSurface<T> out;
  out.opacity = tp.popacity.size() ? tp.popacity(0) : T(0);
  if (tp.surface.empty()) return out;
  out.background = false;
  out.position = tp.xbar.col(0);
  out.normal = tp.nbar.col(0);
  out.roughness = tp.rbar(0);
  out.kappa = tp.kappa(0);
  out.bottleneck = tp.bbar.col(0);
  out.mix = tp.mbar(0);
  return out;
}

template <class T>
Vec3<T> render_pixel(const FieldParams<T>& params, const RenderContext<T>& ctx, const Camera& cam, int x, int y,
                     const RenderConfig& cfg, std::uint64_t image_index = 0) {
  RayBatchTape<T> tp;
  const MatX<T> c = render_rays(params, ctx.stack, ctx.background, ctx.general, {camera_ray(cam, x, y)},
                                {pixel_key(cfg.seed, image_index, x, y)}, cfg, tp);
  return c.col(0);
}

/// Renders the full image, rows in parallel. Output is linear RGB.
template <class T>
Image render_image(const FieldParams<T>& params, const RenderContext<T>& ctx, const Camera& cam,
                   const RenderConfig& cfg, std::uint64_t image_index = 0) {
  cam.validate();
  Image img(cam.width, cam.height, 3);
  parallel_for(std::size_t(cam.height), [&](std::size_t yy) {
    const int y = int(yy);
    std::vector<Ray> rays;
    std::vector<std::uint64_t> keys;
    for (int x = 0; x < cam.width; ++x) {
      rays.push_back(camera_ray(cam, x, y));
      keys.push_back(pixel_key(cfg.seed, image_index, x, y));
    }
    RayBatchTape<T> tp;
    const MatX<T> c = render_rays(params, ctx.stack, ctx.background, ctx.general, rays, keys, cfg, tp);
    for (int x = 0; x < cam.width; ++x)
      for (int k = 0; k < 3; ++k) img.at(x, y, k) = float(c(k, x));
  });
  return img;
}

template <class T>
Image render_image(const FieldParams<T>& params, const EnvMap& env, const Camera& cam, const RenderConfig& cfg,
                   std::uint64_t image_index = 0) {
  return render_image(params, make_render_context(params, env), cam, cfg, image_index);
}

}  // namespace relight
