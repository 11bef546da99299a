#pragma once

#include "relight/core.hpp"
#include "relight/image.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace relight {

/// Equirectangular environment map of linear-RGB radiance.
///
/// Convention: +Z is up. Column u follows azimuth atan2(y, x) + pi, row v
/// follows the polar angle acos(z), so row 0 looks straight up.
class EnvMap {
 public:
  EnvMap() = default;

  EnvMap(int width, int height, std::vector<float> texels, std::string id = {})
      : width_(width), height_(height), texels_(std::move(texels)), id_(std::move(id)) {
    if (width <= 0 || height <= 0) throw ShapeError("environment map must be non-empty");
    if (width != 2 * height)
      throw ShapeError("environment map must have width == 2*height, got " + std::to_string(width) +
                       "x" + std::to_string(height));
    if (texels_.size() != std::size_t(width) * height * 3)
      throw ShapeError("texel buffer size does not match dimensions");
    for (std::size_t i = 0; i < texels_.size(); ++i)
      if (!std::isfinite(texels_[i]) || texels_[i] < 0.f)
        throw NumericError("environment texel " + std::to_string(i / 3) + " is negative or not finite");
  }

  static EnvMap constant(int width, int height, const Vec3f& c, std::string id = {}) {
    std::vector<float> t(std::size_t(width) * height * 3);
    for (std::size_t i = 0; i < t.size(); i += 3) {
      t[i] = c.x();
      t[i + 1] = c.y();
      t[i + 2] = c.z();
    }
    return EnvMap(width, height, std::move(t), std::move(id));
  }

  int width() const { return width_; }
  int height() const { return height_; }
  const std::string& id() const { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }
  const std::vector<float>& texels() const { return texels_; }

  Vec3f texel(int x, int y) const {
    const float* p = &texels_[(std::size_t(y) * width_ + x) * 3];
    return {p[0], p[1], p[2]};
  }

  float max_value() const { return texels_.empty() ? 0.f : *std::max_element(texels_.begin(), texels_.end()); }

  Image to_image() const {
    Image img(width_, height_, 3);
    img.data = texels_;
    return img;
  }

  static EnvMap from_image(const Image& img, std::string id = {}) {
    if (img.channels != 3) throw ShapeError("environment map image must have 3 channels");
    return EnvMap(img.width, img.height, img.data, std::move(id));
  }

  /// Elementwise a*this + b*other.
  EnvMap combine(float a, const EnvMap& other, float b) const {
    if (other.width_ != width_ || other.height_ != height_) throw ShapeError("env map size mismatch");
    std::vector<float> t(texels_.size());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = a * texels_[i] + b * other.texels_[i];
    return EnvMap(width_, height_, std::move(t), id_);
  }

  EnvMap scaled(float a) const {
    std::vector<float> t(texels_);
    for (float& v : t) v *= a;
    return EnvMap(width_, height_, std::move(t), id_);
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<float> texels_;
  std::string id_;
};

// ---------------------------------------------------------------------------
// Texture coordinates

/// Unit direction to (u, v) in [0,1)^2 with u wrapping at the -X axis.
template <class S>
std::pair<S, S> dir_to_texcoord(const Vec3<S>& d) {
  using std::acos;
  using std::atan2;
  S u = (atan2(d.y(), d.x()) + kPi<double>) / (2 * kPi<double>);
  if (value_of(u) >= 1.0) u -= S(1.0);
  S z = d.z();
  if (value_of(z) > 1.0) z = S(1.0);
  if (value_of(z) < -1.0) z = S(-1.0);
  S v = acos(z) / kPi<double>;
  return {u, v};
}

inline Vec3d texcoord_to_dir(double u, double v) {
  const double phi = u * 2 * kPi<double> - kPi<double>;
  const double theta = v * kPi<double>;
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

/// Direction through the center of texel (x, y).
inline Vec3d texel_direction(int x, int y, int width, int height) {
  return texcoord_to_dir((x + 0.5) / width, (y + 0.5) / height);
}

/// Exact solid angle of a texel in row y.
inline double texel_solid_angle(int y, int width, int height) {
  const double t0 = kPi<double> * y / height, t1 = kPi<double> * (y + 1) / height;
  return (std::cos(t0) - std::cos(t1)) * (2 * kPi<double> / width);
}

/// Bilinear lookup with horizontal wraparound and vertical clamping. Works
/// for plain scalars and for Eigen::AutoDiffScalar (derivative w.r.t. d).
template <class S>
Vec3<S> sample(const EnvMap& env, const Vec3<S>& d) {
  using std::floor;
  auto [u, v] = dir_to_texcoord(d);
  S x = u * double(env.width()) - 0.5;
  S y = v * double(env.height()) - 0.5;
  // Snap lookups that land on a texel center so node lookups are exact.
  const double xr = std::round(value_of(x)), yr = std::round(value_of(y));
  if (std::abs(value_of(x) - xr) < 1e-9) x -= S(value_of(x) - xr);
  if (std::abs(value_of(y) - yr) < 1e-9) y -= S(value_of(y) - yr);
  if (value_of(y) < 0.0) y = S(0.0);
  if (value_of(y) > env.height() - 1.0) y = S(double(env.height() - 1));

  const double x0f = std::floor(value_of(x));
  const double y0f = std::floor(value_of(y));
  const S fx = x - x0f;
  const S fy = y - y0f;
  const int w = env.width();
  const int x0 = ((int(x0f) % w) + w) % w;
  const int x1 = (x0 + 1) % w;
  const int y0 = int(y0f);
  const int y1 = std::min(y0 + 1, env.height() - 1);

  const Vec3f a = env.texel(x0, y0), b = env.texel(x1, y0);
  const Vec3f c = env.texel(x0, y1), e = env.texel(x1, y1);
  Vec3<S> out;
  for (int k = 0; k < 3; ++k) {
    const S top = double(a[k]) + fx * double(b[k] - a[k]);
    const S bottom = double(c[k]) + fx * double(e[k] - c[k]);
    out[k] = top + fy * (bottom - top);
  }
  return out;
}

/// Resamples so that output(d) = env(R^T d).
inline EnvMap rotate(const EnvMap& env, const Mat3d& r) {
  std::vector<float> t(env.texels().size());
  const Mat3d rt = r.transpose();
  for (int y = 0; y < env.height(); ++y)
    for (int x = 0; x < env.width(); ++x) {
      const Vec3d c = sample<double>(env, Vec3d(rt * texel_direction(x, y, env.width(), env.height())));
      float* p = &t[(std::size_t(y) * env.width() + x) * 3];
      for (int k = 0; k < 3; ++k) p[k] = float(c[k]);
    }
  return EnvMap(env.width(), env.height(), std::move(t), env.id());
}

// ---------------------------------------------------------------------------
// Tonemapped encodings

/// Clamp to [0,1], then the sRGB transfer function.
inline EnvMap tonemap_ldr(const EnvMap& env) {
  std::vector<float> t(env.texels());
  for (float& v : t) v = float(srgb_encode(std::clamp(double(v), 0.0, 1.0)));
  return EnvMap(env.width(), env.height(), std::move(t), env.id());
}

/// log(1 + x), then min/max normalization jointly over all texels and
/// channels. A constant map yields all zeros.
inline EnvMap tonemap_hdr_log(const EnvMap& env) {
  std::vector<double> y(env.texels().size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::log1p(double(env.texels()[i]));
  const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
  const double mn = *lo, mx = *hi;
  std::vector<float> t(y.size(), 0.f);
  if (mx > mn)
    for (std::size_t i = 0; i < y.size(); ++i) t[i] = float((y[i] - mn) / (mx - mn));
  return EnvMap(env.width(), env.height(), std::move(t), env.id());
}

/// Area-weighted resampling to an arbitrary raster size (box filter over the
/// exact overlap of source and destination pixels). Returns an Image because
/// the target need not be 2:1.
inline Image resize_area(const Image& src, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw ArgumentError("resize target must be positive");
  auto weights = [](int n_src, int n_dst) {
    // per destination pixel: list of (source index, weight)
    std::vector<std::vector<std::pair<int, double>>> w(static_cast<std::size_t>(n_dst));
    const double scale = double(n_src) / n_dst;
    for (int j = 0; j < n_dst; ++j) {
      const double a = j * scale, b = (j + 1) * scale;
      for (int i = int(std::floor(a)); i < int(std::ceil(b)) && i < n_src; ++i) {
        const double overlap = std::min(b, i + 1.0) - std::max(a, double(i));
        if (overlap > 0) w[std::size_t(j)].push_back({i, overlap / scale});
      }
    }
    return w;
  };
  const auto wx = weights(src.width, out_w);
  const auto wy = weights(src.height, out_h);
  Image out(out_w, out_h, src.channels);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      for (int c = 0; c < src.channels; ++c) {
        double acc = 0;
        for (const auto& [sy, ay] : wy[std::size_t(y)])
          for (const auto& [sx, ax] : wx[std::size_t(x)]) acc += ay * ax * src.at(sx, sy, c);
        out.at(x, y, c) = float(acc);
      }
  return out;
}

inline EnvMap downsample(const EnvMap& env, int factor) {
  if (factor <= 1) return env;
  const int h = std::max(1, env.height() / factor);
  const Image small = resize_area(env.to_image(), 2 * h, h);
  return EnvMap::from_image(small, env.id());
}

// ---------------------------------------------------------------------------
// Prefiltering

struct PrefilterLevel {
  double sigma = 0;  ///< pixels at the map's own resolution
  EnvMap blurred;
};

struct PrefilterStack {
  EnvMap base;
  std::vector<PrefilterLevel> levels;

  /// Level 0 is the unblurred base map; level i > 0 is levels[i-1].
  const EnvMap& level(std::size_t i) const { return i == 0 ? base : levels.at(i - 1).blurred; }
  std::size_t level_count() const { return 1 + levels.size(); }
};

/// Kernel truncation radius in pixels for a given standard deviation.
inline int blur_radius(double sigma) { return std::max(1, int(std::ceil(2.0 * sigma - 1e-9))); }

/// Reference sigmas are given for a map 512 pixels wide; they scale with width.
inline std::vector<double> scale_sigmas(const std::vector<double>& reference, int width) {
  std::vector<double> out;
  out.reserve(reference.size());
  for (double s : reference) out.push_back(s * width / 512.0);
  return out;
}

inline const std::vector<double>& default_reference_sigmas() {
  static const std::vector<double> s{10.0, 20.0};
  return s;
}

/// Separable pixel-space Gaussian blur: wraps horizontally, renormalizes the
/// kernel where it is clipped at the top and bottom rows.
inline EnvMap gaussian_blur(const EnvMap& env, double sigma) {
  const int w = env.width(), h = env.height(), r = blur_radius(sigma);
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double ksum = 0;
  for (int i = -r; i <= r; ++i) ksum += k[std::size_t(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= ksum;

  std::vector<double> tmp(env.texels().size());
  const auto& src = env.texels();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          const int sx = ((x + i) % w + w) % w;
          acc += k[std::size_t(i + r)] * src[(std::size_t(y) * w + sx) * 3 + c];
        }
        tmp[(std::size_t(y) * w + x) * 3 + c] = acc;
      }
  std::vector<float> out(tmp.size());
  for (int y = 0; y < h; ++y) {
    double norm = 0;
    for (int i = -r; i <= r; ++i)
      if (y + i >= 0 && y + i < h) norm += k[std::size_t(i + r)];
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          const int sy = y + i;
          if (sy < 0 || sy >= h) continue;
          acc += k[std::size_t(i + r)] * tmp[(std::size_t(sy) * w + x) * 3 + c];
        }
        out[(std::size_t(y) * w + x) * 3 + c] = float(acc / norm);
      }
  }
  return EnvMap(w, h, std::move(out), env.id());
}

/// Builds the blurred stack; `sigmas` are in pixels at env's resolution.
inline PrefilterStack prefilter(const EnvMap& env, const std::vector<double>& sigmas) {
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (!(sigmas[i] > 0)) throw ArgumentError("prefilter sigmas must be positive");
    if (i > 0 && !(sigmas[i] > sigmas[i - 1]))
      throw ArgumentError("prefilter sigmas must be strictly increasing");
  }
  PrefilterStack stack{env, {}};
  for (double s : sigmas) stack.levels.push_back({s, gaussian_blur(env, s)});
  return stack;
}

/// Prefilter with the default reference sigmas scaled to env's height.
inline PrefilterStack prefilter_default(const EnvMap& env) {
  return prefilter(env, scale_sigmas(default_reference_sigmas(), env.width()));
}

// ---------------------------------------------------------------------------
// Diffuse irradiance

/// Precomputed texel directions and solid angles for repeated irradiance
/// queries against one map.
class IrradianceTable {
 public:
  explicit IrradianceTable(const EnvMap& env) : env_(&env) {
    const int w = env.width(), h = env.height();
    dirs_.reserve(std::size_t(w) * h);
    weights_.reserve(std::size_t(w) * h);
    for (int y = 0; y < h; ++y) {
      const double omega = texel_solid_angle(y, w, h);
      for (int x = 0; x < w; ++x) {
        dirs_.push_back(texel_direction(x, y, w, h));
        weights_.push_back(omega);
      }
    }
  }

  /// Cosine-weighted mean of L over the hemisphere around n, i.e. the
  /// irradiance divided by pi. The quadrature weights are renormalized so a
  /// constant map returns its value exactly.
  Vec3d operator()(const Vec3d& n) const {
    Vec3d acc = Vec3d::Zero();
    double norm = 0;
    const auto& t = env_->texels();
    for (std::size_t i = 0; i < dirs_.size(); ++i) {
      const double c = dirs_[i].dot(n);
      if (c <= 0) continue;
      const double wgt = c * weights_[i];
      norm += wgt;
      acc += wgt * Vec3d(t[3 * i], t[3 * i + 1], t[3 * i + 2]);
    }
    return norm > 0 ? Vec3d(acc / norm) : Vec3d::Zero();
  }

 private:
  const EnvMap* env_;
  std::vector<Vec3d> dirs_;
  std::vector<double> weights_;
};

inline Vec3d irradiance(const EnvMap& env, const Vec3d& n) { return IrradianceTable(env)(n); }

// ---------------------------------------------------------------------------
// File I/O: PFM, plus the plain "ENVF1 <w> <h>\n" + little-endian float32 format.

inline std::string encode_envf(const EnvMap& env) {
  std::string out = "ENVF1 " + std::to_string(env.width()) + " " + std::to_string(env.height()) + "\n";
  out.reserve(out.size() + env.texels().size() * 4);
  for (float v : env.texels()) detail::put_f32_le(out, v);
  return out;
}

inline EnvMap decode_envf(const std::string& bytes, std::string id = {}) {
  detail::HeaderReader rd{bytes};
  if (rd.token() != "ENVF1") throw ParseError("not an ENVF1 file", 0);
  const long w = rd.integer();
  const long h = rd.integer();
  rd.end_of_header();
  const std::size_t need = std::size_t(w) * std::size_t(h) * 12;
  if (bytes.size() - rd.pos < need)
    throw ParseError("truncated ENVF1 payload: need " + std::to_string(need) + " bytes", bytes.size());
  if (bytes.size() - rd.pos > need) throw ParseError("trailing bytes after ENVF1 payload", rd.pos + need);
  std::vector<float> t(std::size_t(w) * std::size_t(h) * 3);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + rd.pos;
  for (std::size_t i = 0; i < t.size(); ++i, p += 4) t[i] = detail::get_f32(p, true);
  return EnvMap(int(w), int(h), std::move(t), std::move(id));
}

inline EnvMap decode_envmap(const std::string& bytes, std::string id = {}) {
  if (bytes.rfind("ENVF1", 0) == 0) return decode_envf(bytes, std::move(id));
  if (bytes.rfind("PF", 0) == 0 || bytes.rfind("Pf", 0) == 0) {
    const Image img = decode_pfm(bytes);
    if (img.channels != 3) throw ShapeError("environment map PFM must be RGB");
    return EnvMap::from_image(img, std::move(id));
  }
  throw ParseError("unrecognized environment map format", 0);
}

/// Loads a PFM or ENVF1 map; the id is the file stem.
inline EnvMap load_envmap(const std::filesystem::path& path) {
  return decode_envmap(detail::read_file(path), path.stem().string());
}

/// Writes ENVF1 when the extension is ".envf", PFM otherwise.
inline void save_envmap(const std::filesystem::path& path, const EnvMap& env) {
  detail::write_file(path, path.extension() == ".envf" ? encode_envf(env) : encode_pfm(env.to_image()));
}

/// Sorted list of loadable map files (.pfm / .envf) in a directory.
inline std::vector<std::filesystem::path> list_envmap_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".pfm" || ext == ".envf")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace relight
