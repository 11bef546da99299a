#pragma once

#include "relight/conditioning.hpp"
#include "relight/core.hpp"
#include "relight/nn.hpp"

#include <string>
#include <vector>

namespace relight {

enum class GeneralConditioning {
  Encoder,          ///< embedding computed from the environment map
  PerImageEmbedding ///< learned code per training image (no generalization)
};

struct FieldConfig {
  std::vector<int> grid_resolutions{16, 32, 64};
  int grid_features = 4;
  std::vector<int> geometry_hidden{64, 64};
  std::vector<int> color_hidden{64, 64, 64};
  std::vector<int> feature_hidden{32};
  int bottleneck = 16;
  int reflection_features = 16;
  int sh_degree = 3;  ///< bands 0..sh_degree of the view-direction encoding
  EncoderConfig encoder;
  /// Blur widths in pixels for a 512-pixel-wide map; scaled to the actual width.
  std::vector<double> reference_sigmas{10.0, 20.0};
  GeneralConditioning general = GeneralConditioning::Encoder;
  int appearance_codes = 0;  ///< code table size for PerImageEmbedding
  bool specular_conditioning = true;
  int env_downsample = 1;  ///< maps are area-downsampled by this factor before use
  double color_margin = 3.0;  ///< decoded color is clamped to [0, 1 + color_margin]

  int grid_output() const { return int(grid_resolutions.size()) * grid_features; }
  int geometry_output() const { return 6 + bottleneck; }
  int sh_size() const { return (sh_degree + 1) * (sh_degree + 1); }
  int spec_levels() const { return 1 + int(reference_sigmas.size()); }

  void validate() const {
    if (grid_resolutions.empty()) throw ArgumentError("field needs at least one grid level");
    for (std::size_t i = 0; i < grid_resolutions.size(); ++i) {
      if (grid_resolutions[i] < 2) throw ArgumentError("grid resolution must be >= 2");
      if (i > 0 && grid_resolutions[i] <= grid_resolutions[i - 1])
        throw ArgumentError("grid resolutions must be strictly increasing");
    }
    if (grid_features <= 0 || bottleneck <= 0 || reflection_features <= 0)
      throw ArgumentError("feature widths must be positive");
    if (sh_degree < 0 || sh_degree > 3) throw ArgumentError("sh_degree must be in [0, 3]");
    if (general == GeneralConditioning::PerImageEmbedding && appearance_codes <= 0)
      throw ArgumentError("per-image conditioning needs appearance_codes > 0");
    if (env_downsample < 1) throw ArgumentError("env_downsample must be >= 1");
    if (!(color_margin >= 0)) throw ArgumentError("color_margin must be >= 0");
    encoder.validate();
  }
};

/// Geometry-decoder output rows.
namespace geo {
inline constexpr int kDensity = 0;
inline constexpr int kRoughness = 1;
inline constexpr int kNormal = 2;  // 3 rows
inline constexpr int kMix = 5;
inline constexpr int kBottleneck = 6;
}  // namespace geo

/// Real spherical harmonics, bands 0..3 (16 values), of a unit direction.
template <class T>
void sh_encode(const Vec3<T>& d, int degree, T* out) {
  const T x = d.x(), y = d.y(), z = d.z();
  out[0] = T(0.28209479177387814);
  if (degree < 1) return;
  out[1] = T(-0.48860251190291987) * y;
  out[2] = T(0.48860251190291987) * z;
  out[3] = T(-0.48860251190291987) * x;
  if (degree < 2) return;
  out[4] = T(1.0925484305920792) * x * y;
  out[5] = T(-1.0925484305920792) * y * z;
  out[6] = T(0.31539156525252005) * (T(3) * z * z - T(1));
  out[7] = T(-1.0925484305920792) * x * z;
  out[8] = T(0.54627421529603959) * (x * x - y * y);
  if (degree < 3) return;
  out[9] = T(-0.59004358992664352) * y * (T(3) * x * x - y * y);
  out[10] = T(2.8906114426405538) * x * y * z;
  out[11] = T(-0.45704579946446572) * y * (T(5) * z * z - T(1));
  out[12] = T(0.3731763325901154) * z * (T(5) * z * z - T(3));
  out[13] = T(-0.45704579946446572) * x * (T(5) * z * z - T(1));
  out[14] = T(1.4453057213202769) * z * (x * x - y * y);
  out[15] = T(-0.59004358992664352) * x * (x * x - T(3) * y * y);
}

/// Output of the geometry branch at one point.
template <class T>
struct PointPrediction {
  T density{};
  T roughness{};
  Vec3<T> normal = Vec3<T>::UnitZ();
  T mix{};  ///< specular gate beta
  VecX<T> bottleneck;
};

// ---------------------------------------------------------------------------
// Dense multi-resolution feature grid over [-1, 1]^3

struct GridLevel {
  int res = 0;
  std::size_t offset = 0;
};

struct GridCache {
  // per column and level: flat vertex index of the lower corner and fractions
  std::vector<std::int32_t> corner;
  std::vector<double> frac;
  std::vector<char> inside;
};

class FeatureGrid {
 public:
  FeatureGrid() = default;
  FeatureGrid(nn::ParamLayout& layout, const std::vector<int>& res, int features) : features_(features) {
    for (std::size_t i = 0; i < res.size(); ++i)
      levels_.push_back({res[i], layout.add("grid.level" + std::to_string(i), {res[i], res[i], res[i], features})});
  }

  int output_dim() const { return int(levels_.size()) * features_; }
  const std::vector<GridLevel>& levels() const { return levels_; }
  int features() const { return features_; }

  template <class T>
  void initialize(T* p, std::uint64_t seed, double scale) const {
    for (const auto& l : levels_) {
      const std::size_t n = std::size_t(l.res) * l.res * l.res * features_;
      for (std::size_t i = 0; i < n; ++i)
        p[l.offset + i] = T(scale * (2.0 * uniform_from(hash_key(seed, l.offset + i)) - 1.0));
    }
  }

  static bool in_box(double x, double y, double z) {
    return std::abs(x) <= 1.0 && std::abs(y) <= 1.0 && std::abs(z) <= 1.0;
  }

  /// Trilinear interpolation per level; columns outside the box give zeros.
  template <class T>
  void forward(const T* p, const MatX<T>& pos, MatX<T>& out, GridCache& c) const {
    const Eigen::Index n = pos.cols();
    const std::size_t nl = levels_.size();
    out.setZero(output_dim(), n);
    c.corner.assign(std::size_t(n) * nl, 0);
    c.frac.assign(std::size_t(n) * nl * 3, 0.0);
    c.inside.assign(std::size_t(n), 0);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double px = double(pos(0, j)), py = double(pos(1, j)), pz = double(pos(2, j));
      if (!in_box(px, py, pz)) continue;
      c.inside[std::size_t(j)] = 1;
      for (std::size_t l = 0; l < nl; ++l) {
        const int r = levels_[l].res;
        int idx[3];
        double f[3];
        const double q[3] = {px, py, pz};
        for (int a = 0; a < 3; ++a) {
          const double g = (q[a] + 1.0) * 0.5 * (r - 1);
          idx[a] = std::clamp(int(std::floor(g)), 0, r - 2);
          f[a] = g - idx[a];
        }
        const std::int32_t base = std::int32_t((idx[2] * r + idx[1]) * r + idx[0]);
        c.corner[std::size_t(j) * nl + l] = base;
        for (int a = 0; a < 3; ++a) c.frac[(std::size_t(j) * nl + l) * 3 + a] = f[a];
        const T* g = p + levels_[l].offset;
        T* o = out.data() + j * out.rows() + Eigen::Index(l) * features_;
        for (int corner = 0; corner < 8; ++corner) {
          const int dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
          const T w = T((dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]));
          const T* v = g + std::size_t(base + (dz * r + dy) * r + dx) * features_;
          for (int k = 0; k < features_; ++k) o[k] += w * v[k];
        }
      }
    }
  }

  /// Scatters d(out) into `grad` (if non-null); writes d(out)/d(pos) into dpos
  /// (if non-null).
  template <class T>
  void backward(const T* p, const GridCache& c, const MatX<T>& dout, T* grad, MatX<T>* dpos) const {
    const Eigen::Index n = dout.cols();
    const std::size_t nl = levels_.size();
    if (dpos) dpos->setZero(3, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!c.inside[std::size_t(j)]) continue;
      for (std::size_t l = 0; l < nl; ++l) {
        const int r = levels_[l].res;
        const std::int32_t base = c.corner[std::size_t(j) * nl + l];
        const double* f = &c.frac[(std::size_t(j) * nl + l) * 3];
        const T* d = dout.data() + j * dout.rows() + Eigen::Index(l) * features_;
        const double s = 0.5 * (r - 1);
        double dp[3] = {0, 0, 0};
        for (int corner = 0; corner < 8; ++corner) {
          const int dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
          const double wx = dx ? f[0] : 1 - f[0], wy = dy ? f[1] : 1 - f[1], wz = dz ? f[2] : 1 - f[2];
          const std::size_t vi = std::size_t(base + (dz * r + dy) * r + dx) * features_;
          if (grad) {
            const T w = T(wx * wy * wz);
            T* gv = grad + levels_[l].offset + vi;
            for (int k = 0; k < features_; ++k) gv[k] += w * d[k];
          }
          if (dpos) {
            const T* v = p + levels_[l].offset + vi;
            double dot = 0;
            for (int k = 0; k < features_; ++k) dot += double(v[k]) * double(d[k]);
            dp[0] += (dx ? 1 : -1) * wy * wz * s * dot;
            dp[1] += (dy ? 1 : -1) * wx * wz * s * dot;
            dp[2] += (dz ? 1 : -1) * wx * wy * s * dot;
          }
        }
        if (dpos)
          for (int a = 0; a < 3; ++a) (*dpos)(a, j) += T(dp[a]);
      }
    }
  }

 private:
  int features_ = 0;
  std::vector<GridLevel> levels_;
};

// ---------------------------------------------------------------------------
// The model: parameter offsets for every sub-network

template <class T>
struct GeometryCache {
  GridCache grid;
  MatX<T> features;
  nn::MlpCache<T> mlp;
  std::vector<char> inside;
  VecX<T> density, roughness, mix, normal_len;
  MatX<T> normal, bottleneck;
};

/// Per-ray color decoder inputs, one column per ray.
template <class T>
struct ColorInputs {
  MatX<T> bottleneck;  ///< D_b x R
  VecX<T> mix;         ///< R
  MatX<T> view;        ///< 3 x R, camera-to-surface unit directions
  MatX<T> reflection;  ///< D_f x R
  MatX<T> general;     ///< 128 x R
  MatX<T> specular;    ///< 3*levels x R, linear radiance
};

template <class T>
struct ColorCache {
  nn::MlpCache<T> diffuse, specular;
  MatX<T> diffuse_rgb;   ///< after sigmoid
  MatX<T> spec_pre;      ///< before the ReLU
  MatX<T> spec_rgb;
  MatX<T> unclamped;
};

template <class T>
struct ColorGrads {
  MatX<T> bottleneck, reflection, general, specular;
  VecX<T> mix;
};

class FieldModel {
 public:
  FieldModel() = default;

  FieldModel(nn::ParamLayout& layout, const FieldConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    grid_ = FeatureGrid(layout, cfg.grid_resolutions, cfg.grid_features);
    geometry_ = nn::make_mlp(layout, "geometry", grid_.output_dim(), cfg.geometry_hidden, cfg.geometry_output());
    feature_ = nn::make_mlp(layout, "reflection_feature", grid_.output_dim() + 3, cfg.feature_hidden,
                            cfg.reflection_features);
    diffuse_ = nn::make_mlp(layout, "diffuse", cfg.bottleneck + kGeneralEmbeddingDim, cfg.color_hidden, 3);
    specular_ = nn::make_mlp(layout, "specular",
                             cfg.bottleneck + cfg.sh_size() + cfg.reflection_features + 3 * cfg.spec_levels(),
                             cfg.color_hidden, 3 * cfg.spec_levels() + 3);
    encoder_ = GeneralEncoder(layout, cfg.encoder);
    if (cfg.general == GeneralConditioning::PerImageEmbedding)
      codes_ = layout.add("appearance_codes", {kGeneralEmbeddingDim, cfg.appearance_codes});
  }

  const FieldConfig& config() const { return cfg_; }
  const FeatureGrid& grid() const { return grid_; }
  const nn::Mlp& geometry_mlp() const { return geometry_; }
  const nn::Mlp& feature_mlp() const { return feature_; }
  const nn::Mlp& diffuse_mlp() const { return diffuse_; }
  const nn::Mlp& specular_mlp() const { return specular_; }
  const GeneralEncoder& encoder() const { return encoder_; }
  std::size_t codes_offset() const { return codes_; }

  template <class T>
  void initialize(T* p, std::uint64_t seed) const {
    grid_.initialize(p, hash_key(seed, 1), 1e-2);
    nn::init_mlp(geometry_, p, hash_key(seed, 2), 0.1);
    nn::init_mlp(feature_, p, hash_key(seed, 3));
    nn::init_mlp(diffuse_, p, hash_key(seed, 4), 0.1);
    nn::init_mlp(specular_, p, hash_key(seed, 5), 0.1);
    encoder_.initialize(p, hash_key(seed, 6));
    if (cfg_.general == GeneralConditioning::PerImageEmbedding)
      for (std::size_t i = 0; i < std::size_t(kGeneralEmbeddingDim) * cfg_.appearance_codes; ++i)
        p[codes_ + i] = T(0.1 * (2.0 * uniform_from(hash_key(seed, 7, i)) - 1.0));
  }

  // -- geometry ------------------------------------------------------------

  /// Batched geometry query; positions are columns of `pos`.
  template <class T>
  void geometry_forward(const T* p, const MatX<T>& pos, GeometryCache<T>& c) const {
    grid_.forward(p, pos, c.features, c.grid);
    geometry_.forward(p, c.features, c.mlp);
    const MatX<T>& raw = c.mlp.output;
    const Eigen::Index n = pos.cols();
    c.inside = c.grid.inside;
    c.density.resize(n);
    c.roughness.resize(n);
    c.mix.resize(n);
    c.normal_len.resize(n);
    c.normal.resize(3, n);
    c.bottleneck.resize(cfg_.bottleneck, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!c.inside[std::size_t(j)]) {
        c.density(j) = T(0);
        c.roughness(j) = T(1);
        c.mix(j) = T(0);
        c.normal_len(j) = T(0);
        c.normal.col(j) = Vec3<T>::UnitZ();
        c.bottleneck.col(j).setZero();
        continue;
      }
      c.density(j) = softplus(raw(geo::kDensity, j));
      c.roughness(j) = sigmoid(raw(geo::kRoughness, j));
      c.mix(j) = sigmoid(raw(geo::kMix, j));
      const Vec3<T> nr = raw.template block<3, 1>(geo::kNormal, j);
      const T len = nr.norm();
      c.normal_len(j) = len;
      c.normal.col(j) = len > T(1e-12) ? Vec3<T>(nr / len) : Vec3<T>::UnitZ();
      c.bottleneck.col(j) = raw.block(geo::kBottleneck, j, cfg_.bottleneck, 1);
    }
  }

  /// Backpropagates gradients of the activated outputs. Empty matrices mean
  /// "no gradient". `dfeatures_extra` adds to the grid-feature gradient (for
  /// consumers other than the geometry decoder).
  template <class T>
  void geometry_backward(const T* p, const GeometryCache<T>& c, const VecX<T>* ddensity, const VecX<T>* drough,
                         const MatX<T>* dnormal, const VecX<T>* dmix, const MatX<T>* dbottleneck,
                         const MatX<T>* dfeatures_extra, T* grad, MatX<T>* dpos) const {
    const MatX<T>& raw = c.mlp.output;
    const Eigen::Index n = raw.cols();
    MatX<T> draw = MatX<T>::Zero(raw.rows(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!c.inside[std::size_t(j)]) continue;
      if (ddensity) draw(geo::kDensity, j) = (*ddensity)(j) * sigmoid(raw(geo::kDensity, j));
      if (drough) draw(geo::kRoughness, j) = (*drough)(j) * c.roughness(j) * (T(1) - c.roughness(j));
      if (dmix) draw(geo::kMix, j) = (*dmix)(j) * c.mix(j) * (T(1) - c.mix(j));
      if (dnormal && c.normal_len(j) > T(1e-12)) {
        const Vec3<T> nn_ = c.normal.col(j);
        const Vec3<T> g = dnormal->col(j);
        draw.template block<3, 1>(geo::kNormal, j) = (g - nn_ * nn_.dot(g)) / c.normal_len(j);
      }
      if (dbottleneck) draw.block(geo::kBottleneck, j, cfg_.bottleneck, 1) = dbottleneck->col(j);
    }
    MatX<T> dfeat;
    geometry_.backward(p, c.mlp, draw, grad, &dfeat);
    if (dfeatures_extra) dfeat += *dfeatures_extra;
    for (Eigen::Index j = 0; j < n; ++j)
      if (!c.inside[std::size_t(j)]) dfeat.col(j).setZero();
    grid_.backward(p, c.grid, dfeat, grad, dpos);
  }

  template <class T>
  PointPrediction<T> query_geometry(const T* p, const Vec3<T>& x) const {
    GeometryCache<T> c;
    geometry_forward(p, MatX<T>(x), c);
    PointPrediction<T> out;
    out.density = c.density(0);
    out.roughness = c.roughness(0);
    out.normal = c.normal.col(0);
    out.mix = c.mix(0);
    out.bottleneck = c.bottleneck.col(0);
    return out;
  }

  /// d density / d x at each column (exact, through grid and decoder).
  template <class T>
  MatX<T> density_gradient(const T* p, const GeometryCache<T>& c) const {
    const VecX<T> one = VecX<T>::Ones(c.density.size());
    MatX<T> dpos;
    geometry_backward<T>(p, c, &one, nullptr, nullptr, nullptr, nullptr, nullptr, nullptr, &dpos);
    return dpos;
  }

  /// -grad(density) / |grad(density)|, or +Z where the gradient vanishes.
  template <class T>
  Vec3<T> density_gradient_normal(const T* p, const Vec3<T>& x) const {
    GeometryCache<T> c;
    geometry_forward(p, MatX<T>(x), c);
    const Vec3<T> g = density_gradient(p, c).col(0);
    const T len = g.norm();
    if (!(len >= T(1e-8))) return Vec3<T>::UnitZ();
    return -g / len;
  }

  // -- reflection features ---------------------------------------------------

  /// Per-sample reflection feature from grid features alone.
  template <class T>
  void sample_feature_forward(const T* p, const MatX<T>& grid_features, nn::MlpCache<T>& c) const {
    MatX<T> in = MatX<T>::Zero(feature_.in(), grid_features.cols());
    in.topRows(grid_.output_dim()) = grid_features;
    feature_.forward(p, in, c);
  }

  /// Feature of light escaping to the environment, from its radiance.
  template <class T>
  void escape_feature_forward(const T* p, const MatX<T>& radiance, nn::MlpCache<T>& c) const {
    MatX<T> in = MatX<T>::Zero(feature_.in(), radiance.cols());
    if (cfg_.specular_conditioning) in.bottomRows(3) = radiance.array().log1p().matrix();
    feature_.forward(p, in, c);
  }

  // -- color ---------------------------------------------------------------

  static void check_inputs(const FieldConfig& cfg, Eigen::Index br, Eigen::Index bc, Eigen::Index m,
                           Eigen::Index vr, Eigen::Index vc, Eigen::Index fr, Eigen::Index fc, Eigen::Index gr,
                           Eigen::Index gc, Eigen::Index sr, Eigen::Index sc) {
    const Eigen::Index r = bc;
    if (br != cfg.bottleneck || fr != cfg.reflection_features || gr != kGeneralEmbeddingDim || vr != 3 ||
        sr != 3 * cfg.spec_levels())
      throw ArgumentError("color decoder input has the wrong feature width");
    if (m != r || vc != r || fc != r || gc != r || sc != r)
      throw ArgumentError("color decoder inputs disagree on the ray count");
  }

  /// color = sigmoid(diffuse(b, g)) + mix * max(0, sum_l a_l * s_l + r), with
  /// (a, r) = specular(b, SH(view), f, log(1 + s)), clamped to [0, 1 + margin].
  template <class T>
  MatX<T> decode_color(const T* p, const ColorInputs<T>& in, ColorCache<T>& c) const {
    check_inputs(cfg_, in.bottleneck.rows(), in.bottleneck.cols(), in.mix.size(), in.view.rows(),
                 in.view.cols(), in.reflection.rows(), in.reflection.cols(), in.general.rows(),
                 in.general.cols(), in.specular.rows(), in.specular.cols());
    const Eigen::Index r = in.bottleneck.cols();
    const int db = cfg_.bottleneck, sh = cfg_.sh_size(), df = cfg_.reflection_features,
              ns = 3 * cfg_.spec_levels();
    MatX<T> din(db + kGeneralEmbeddingDim, r);
    din.topRows(db) = in.bottleneck;
    din.bottomRows(kGeneralEmbeddingDim) = in.general;
    diffuse_.forward(p, din, c.diffuse);
    c.diffuse_rgb = c.diffuse.output.unaryExpr([](T v) { return sigmoid(v); });

    const MatX<T> s = cfg_.specular_conditioning ? in.specular : MatX<T>::Zero(ns, r);
    MatX<T> sin(specular_.in(), r);
    sin.topRows(db) = in.bottleneck;
    for (Eigen::Index j = 0; j < r; ++j) {
      T buf[16];
      sh_encode<T>(Vec3<T>(in.view.col(j)), cfg_.sh_degree, buf);
      for (int k = 0; k < sh; ++k) sin(db + k, j) = buf[k];
    }
    sin.block(db + sh, 0, df, r) = in.reflection;
    sin.bottomRows(ns) = s.array().log1p().matrix();
    specular_.forward(p, sin, c.specular);
    const MatX<T>& so = c.specular.output;
    c.spec_pre = so.bottomRows(3);
    for (int l = 0; l < cfg_.spec_levels(); ++l)
      c.spec_pre += (so.middleRows(3 * l, 3).array() * s.middleRows(3 * l, 3).array()).matrix();
    c.spec_rgb = c.spec_pre.cwiseMax(T(0));
    MatX<T> color = c.diffuse_rgb;
    for (Eigen::Index j = 0; j < r; ++j) color.col(j) += in.mix(j) * c.spec_rgb.col(j);
    c.unclamped = color;
    return color.cwiseMin(T(1 + cfg_.color_margin));
  }

  template <class T>
  ColorGrads<T> decode_color_backward(const T* p, const ColorInputs<T>& in, const ColorCache<T>& c,
                                      const MatX<T>& dcolor_out, T* grad) const {
    const Eigen::Index r = dcolor_out.cols();
    const MatX<T> dcolor = (c.unclamped.array() <= T(1 + cfg_.color_margin)).select(dcolor_out, T(0));
    const int db = cfg_.bottleneck, sh = cfg_.sh_size(), df = cfg_.reflection_features,
              ns = 3 * cfg_.spec_levels();
    ColorGrads<T> out;
    // diffuse
    const MatX<T> ddiff_pre = (dcolor.array() * c.diffuse_rgb.array() * (T(1) - c.diffuse_rgb.array())).matrix();
    MatX<T> ddin;
    diffuse_.backward(p, c.diffuse, ddiff_pre, grad, &ddin);
    out.bottleneck = ddin.topRows(db);
    out.general = ddin.bottomRows(kGeneralEmbeddingDim);
    // gate
    out.mix.resize(r);
    MatX<T> dspec_rgb(3, r);
    for (Eigen::Index j = 0; j < r; ++j) {
      out.mix(j) = dcolor.col(j).dot(c.spec_rgb.col(j));
      dspec_rgb.col(j) = in.mix(j) * dcolor.col(j);
    }
    const MatX<T> dpre = (c.spec_pre.array() > T(0)).select(dspec_rgb, T(0));
    const MatX<T> s = cfg_.specular_conditioning ? in.specular : MatX<T>::Zero(ns, r);
    const MatX<T>& so = c.specular.output;
    MatX<T> dso(so.rows(), r);
    dso.bottomRows(3) = dpre;
    out.specular = MatX<T>::Zero(ns, r);
    for (int l = 0; l < cfg_.spec_levels(); ++l) {
      dso.middleRows(3 * l, 3) = (dpre.array() * s.middleRows(3 * l, 3).array()).matrix();
      out.specular.middleRows(3 * l, 3) = (dpre.array() * so.middleRows(3 * l, 3).array()).matrix();
    }
    MatX<T> dsin;
    specular_.backward(p, c.specular, dso, grad, &dsin);
    out.bottleneck += dsin.topRows(db);
    out.reflection = dsin.block(db + sh, 0, df, r);
    out.specular += (dsin.bottomRows(ns).array() / (T(1) + s.array())).matrix();
    if (!cfg_.specular_conditioning) out.specular.setZero();
    return out;
  }

 private:
  FieldConfig cfg_;
  FeatureGrid grid_;
  nn::Mlp geometry_, feature_, diffuse_, specular_;
  GeneralEncoder encoder_;
  std::size_t codes_ = 0;
};

/// All trainable parameters: grid, decoders and the general encoder.
template <class T>
struct FieldParams {
  FieldConfig config;
  nn::ParamLayout layout;
  FieldModel model;
  Buffer<T> values;

  FieldParams() = default;
  explicit FieldParams(const FieldConfig& cfg, std::uint64_t seed = 1) : config(cfg) {
    model = FieldModel(layout, cfg);
    values.assign(layout.size(), T(0));
    model.initialize(values.data(), seed);
  }

  FieldParams(const FieldParams& o) : config(o.config), values(o.values) { model = FieldModel(layout, config); }
  FieldParams& operator=(const FieldParams& o) {
    if (this != &o) {
      config = o.config;
      layout = nn::ParamLayout();
      model = FieldModel(layout, config);
      values = o.values;
    }
    return *this;
  }
  FieldParams(FieldParams&&) = default;
  FieldParams& operator=(FieldParams&&) = default;

  const T* data() const { return values.data(); }
  T* data() { return values.data(); }

  template <class U>
  FieldParams<U> cast() const {
    FieldParams<U> out(config);
    for (std::size_t i = 0; i < values.size(); ++i) out.values[i] = U(values[i]);
    return out;
  }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(double(v)); });
  }

  PointPrediction<T> query_geometry(const Vec3<T>& x) const { return model.query_geometry(data(), x); }
  Vec3<T> density_gradient_normal(const Vec3<T>& x) const { return model.density_gradient_normal(data(), x); }

  /// General embedding of `env` with this field's encoder.
  GeneralEmbedding<T> encode_general(const EnvMap& env) const {
    return model.encoder().forward(data(), encoder_input<T>(env, config.encoder));
  }
};

}  // namespace relight
