#pragma once

#include "relight/relight.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

namespace relight::testing {

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("relight_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Smooth, low-frequency non-negative map.
inline EnvMap smooth_env(int w = 64, int h = 32, double phase = 0.0) {
  std::vector<float> t(std::size_t(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Vec3d d = texel_direction(x, y, w, h);
      for (int c = 0; c < 3; ++c)
        t[(std::size_t(y) * w + x) * 3 + c] =
            float(1.0 + 0.5 * std::sin(d.x() * 1.3 + phase + c) + 0.3 * d.z() + 0.2 * std::cos(2 * d.y() + c));
    }
  return EnvMap(w, h, std::move(t), "smooth");
}

/// Deterministic random map with values in [lo, hi].
inline EnvMap random_env(int w, int h, std::uint64_t seed, double lo = 0.0, double hi = 2.0) {
  std::vector<float> t(std::size_t(w) * h * 3);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = float(lo + (hi - lo) * uniform_from(hash_key(seed, i)));
  return EnvMap(w, h, std::move(t), "random" + std::to_string(seed));
}

/// A map that is zero except for one texel.
inline EnvMap delta_env(int w, int h, int x, int y, float value = 1.f) {
  std::vector<float> t(std::size_t(w) * h * 3, 0.f);
  for (int c = 0; c < 3; ++c) t[(std::size_t(y) * w + x) * 3 + c] = value;
  return EnvMap(w, h, std::move(t), "delta");
}

/// Small field for gradient checks: 8^3 top grid level, narrow decoders.
inline FieldConfig micro_field() {
  FieldConfig fc;
  fc.grid_resolutions = {4, 8};
  fc.grid_features = 2;
  fc.geometry_hidden = {16, 16};
  fc.color_hidden = {16, 16};
  fc.feature_hidden = {8};
  fc.bottleneck = 4;
  fc.reflection_features = 4;
  fc.encoder.input_size = 16;
  fc.encoder.patch = 8;
  fc.encoder.layers = 1;
  fc.encoder.width = 8;
  fc.encoder.heads = 2;
  fc.encoder.mlp_hidden = 8;
  return fc;
}

/// Scales the grid so the field has substantial, varying density.
template <class T>
void boost_grid(FieldParams<T>& p, double factor) {
  for (const auto& s : p.layout.slots())
    if (s.name.rfind("grid", 0) == 0)
      for (std::size_t i = 0; i < s.size; ++i) p.values[s.offset + i] *= T(factor);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central-difference derivative of f with respect to x[i].
template <class Vec, class F>
double central_diff(Vec& x, std::size_t i, F&& f, double h) {
  const double v = x[i];
  x[i] = v + h;
  const double fp = f();
  x[i] = v - h;
  const double fm = f();
  x[i] = v;
  return (fp - fm) / (2 * h);
}

inline Dataset tiny_dataset(const std::filesystem::path& dir, int views = 4, int eval_views = 2, int envs = 3,
                            int holdout = 1, int size = 16, std::uint64_t seed = 0) {
  std::vector<EnvMap> maps;
  for (int i = 0; i < envs; ++i) maps.push_back(procedural_env(hash_key(seed, std::uint64_t(i)), 32, 16, "e" + std::to_string(i)));
  GenerateOptions opt;
  opt.views = views;
  opt.eval_views = eval_views;
  opt.holdout = holdout;
  opt.width = size;
  opt.height = size;
  opt.seed = seed;
  generate(desk_scene(), maps, opt, dir);
  return Dataset::load(dir);
}

}  // namespace relight::testing
