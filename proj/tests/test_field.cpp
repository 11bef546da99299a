#include "support.hpp"

using namespace relight;
using namespace relight::testing;

namespace {

ColorInputs<double> random_inputs(const FieldConfig& fc, int rays, std::uint64_t seed) {
  auto r = [&](int rows, int cols, std::uint64_t tag, double lo, double hi) {
    MatX<double> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = lo + (hi - lo) * uniform_from(hash_key(seed, tag, std::uint64_t(i)));
    return m;
  };
  ColorInputs<double> in;
  in.bottleneck = r(fc.bottleneck, rays, 1, -1, 1);
  in.mix = r(rays, 1, 2, 0.1, 0.9);
  in.view = r(3, rays, 3, -1, 1);
  for (int j = 0; j < rays; ++j) in.view.col(j).normalize();
  in.reflection = r(fc.reflection_features, rays, 4, -1, 1);
  in.general = r(kGeneralEmbeddingDim, rays, 5, -1, 1);
  in.specular = r(3 * fc.spec_levels(), rays, 6, 0, 2);
  return in;
}

}  // namespace

TEST(FieldConfigTest, Validation) {
  FieldConfig c;
  c.grid_resolutions = {16, 16};
  EXPECT_THROW(c.validate(), ArgumentError);
  c.grid_resolutions = {32, 16};
  EXPECT_THROW(c.validate(), ArgumentError);
  c = FieldConfig{};
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.grid_resolutions, (std::vector<int>{16, 32, 64}));
  EXPECT_EQ(c.bottleneck, 16);
  EXPECT_EQ(c.reflection_features, 16);
  EXPECT_EQ(c.spec_levels(), 3);
}

TEST(FieldTest, ZeroHeadGivesLn2Density) {
  FieldParams<double> p(micro_field(), 2);
  const auto& layers = p.model.geometry_mlp().layers;
  for (std::size_t i = 0; i < std::size_t(layers.back().in) * layers.back().out; ++i) p.values[layers.back().w + i] = 0;
  for (int i = 0; i < layers.back().out; ++i) p.values[layers.back().b + std::size_t(i)] = 0;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(-1, 1);
  for (int i = 0; i < 50; ++i) {
    const auto q = p.query_geometry(Vec3d(U(rng), U(rng), U(rng)));
    EXPECT_NEAR(q.density, std::log(2.0), 1e-15);
    EXPECT_NEAR(q.roughness, 0.5, 1e-15);
    EXPECT_NEAR(q.mix, 0.5, 1e-15);
  }
}

TEST(FieldTest, PredictionInvariantsAndDeterminism) {
  FieldParams<double> p(FieldConfig{}, 5);
  boost_grid(p, 30);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> U(-1, 1);
  for (int i = 0; i < 200; ++i) {
    const Vec3d x(U(rng), U(rng), U(rng));
    const auto a = p.query_geometry(x), b = p.query_geometry(x);
    EXPECT_GE(a.density, 0.0);
    EXPECT_GT(a.roughness, 0.0);
    EXPECT_LT(a.roughness, 1.0);
    EXPECT_GE(a.mix, 0.0);
    EXPECT_LE(a.mix, 1.0);
    EXPECT_NEAR(a.normal.norm(), 1.0, 1e-6);
    EXPECT_EQ(a.density, b.density);
    EXPECT_EQ(a.normal, b.normal);
    EXPECT_EQ(a.bottleneck, b.bottleneck);
  }
}

TEST(FieldTest, OutsideBoxIsFreeSpace) {
  FieldParams<double> p(micro_field(), 2);
  for (const Vec3d& x : {Vec3d(1.2, 0, 0), Vec3d(0, -3, 0.5), Vec3d(0.1, 0.1, 1.0001)}) {
    const auto q = p.query_geometry(x);
    EXPECT_EQ(q.density, 0.0);
    EXPECT_EQ(q.roughness, 1.0);
    EXPECT_EQ(q.normal, Vec3d::UnitZ());
    EXPECT_EQ(q.bottleneck, VecX<double>::Zero(p.config.bottleneck));
  }
}

TEST(FieldTest, ContinuousAcrossCellBoundaries) {
  FieldParams<double> p(FieldConfig{}, 7);
  const Vec3d a(-0.9, -0.3, 0.2), b(0.9, 0.4, -0.1);
  const int n = 20000;
  double worst = 0;
  auto prev = p.query_geometry(a);
  for (int i = 1; i <= n; ++i) {
    const auto q = p.query_geometry(Vec3d(a + (b - a) * (double(i) / n)));
    worst = std::max({worst, std::abs(q.density - prev.density), std::abs(q.roughness - prev.roughness),
                      (q.bottleneck - prev.bottleneck).cwiseAbs().maxCoeff()});
    prev = q;
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(FieldTest, RadialDensityGivesRadialNormal) {
  // one grid level storing 1 - |x| at the vertices, decoder passing it to the density
  FieldConfig fc = micro_field();
  fc.grid_resolutions = {128};
  fc.grid_features = 1;
  fc.geometry_hidden = {4};
  FieldParams<double> p(fc, 1);
  std::fill(p.values.begin(), p.values.end(), 0.0);
  const auto& lvl = p.model.grid().levels()[0];
  const int r = lvl.res;
  for (int z = 0; z < r; ++z)
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x) {
        const Vec3d v(-1 + 2.0 * x / (r - 1), -1 + 2.0 * y / (r - 1), -1 + 2.0 * z / (r - 1));
        p.values[lvl.offset + std::size_t((z * r + y) * r + x)] = 1.0 - v.norm();
      }
  const auto& l0 = p.model.geometry_mlp().layers[0];
  const auto& l1 = p.model.geometry_mlp().layers[1];
  p.values[l0.w] = 1.0;  // hidden0 = relu(f + 2)
  p.values[l0.b] = 2.0;
  p.values[l1.w + std::size_t(geo::kDensity)] = 1.0;  // density raw = hidden0 - 2
  p.values[l1.b + std::size_t(geo::kDensity)] = -2.0;

  const double h = 2.0 / (r - 1);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> N;
  for (int i = 0; i < 100; ++i) {
    Vec3d x = 0.5 * Vec3d(N(rng), N(rng), N(rng)).normalized();
    for (int a = 0; a < 3; ++a) x[a] = -1 + (std::floor((x[a] + 1) / h) + 0.5) * h;  // cell center
    const Vec3d n = p.density_gradient_normal(x);
    EXPECT_LT((n - x.normalized()).norm(), 1e-3) << x.transpose();
  }
}

TEST(FieldTest, ConstantDensityFallsBackToUp) {
  FieldParams<double> p(micro_field(), 1);
  for (const auto& s : p.layout.slots())
    if (s.name.rfind("grid", 0) == 0) std::fill_n(p.values.begin() + std::ptrdiff_t(s.offset), s.size, 0.25);
  EXPECT_EQ(p.density_gradient_normal(Vec3d(0.1, 0.2, 0.3)), Vec3d::UnitZ());
}

TEST(FieldTest, DensityGradientMatchesFiniteDifferences) {
  FieldParams<double> p(FieldConfig{}, 9);
  boost_grid(p, 50);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> U(-0.9, 0.9);
  for (int i = 0; i < 50; ++i) {
    const Vec3d x(U(rng), U(rng), U(rng));
    GeometryCache<double> c;
    p.model.geometry_forward(p.data(), MatX<double>(x), c);
    const Vec3d g = p.model.density_gradient(p.data(), c).col(0);
    Vec3d fd;
    for (int a = 0; a < 3; ++a) {
      Vec3d xp = x, xm = x;
      xp[a] += 1e-7;
      xm[a] -= 1e-7;
      fd[a] = (p.query_geometry(xp).density - p.query_geometry(xm).density) / 2e-7;
    }
    EXPECT_LT((g - fd).norm() / std::max(g.norm(), 1e-3), 1e-4) << x.transpose();
  }
}

TEST(DecoderTest, ZeroWeightsGiveHalfGray) {
  FieldParams<double> p(micro_field(), 1);
  std::fill(p.values.begin(), p.values.end(), 0.0);
  ColorCache<double> c;
  const MatX<double> color = p.model.decode_color(p.data(), random_inputs(p.config, 5, 1), c);
  EXPECT_EQ(color, MatX<double>::Constant(3, 5, 0.5));
}

TEST(DecoderTest, ZeroGateIgnoresSpecularInputs) {
  FieldParams<double> p(FieldConfig{}, 3);
  ColorInputs<double> in = random_inputs(p.config, 6, 2);
  in.mix.setZero();
  ColorCache<double> c;
  const MatX<double> a = p.model.decode_color(p.data(), in, c);
  in.specular = MatX<double>::Constant(in.specular.rows(), in.specular.cols(), 7.0);
  in.reflection = -in.reflection;
  const MatX<double> b = p.model.decode_color(p.data(), in, c);
  EXPECT_EQ(a, b);
}

TEST(DecoderTest, GeneralEmbeddingChangesOutput) {
  FieldParams<double> p(FieldConfig{}, 3);
  ColorInputs<double> in = random_inputs(p.config, 1, 3);
  ColorCache<double> c;
  const MatX<double> a = p.model.decode_color(p.data(), in, c);
  in.general(17, 0) += 0.5;
  const MatX<double> b = p.model.decode_color(p.data(), in, c);
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(DecoderTest, ShapeMismatchRejected) {
  FieldParams<double> p(micro_field(), 1);
  ColorInputs<double> in = random_inputs(p.config, 3, 1);
  in.general = MatX<double>::Zero(64, 3);
  ColorCache<double> c;
  EXPECT_THROW(p.model.decode_color(p.data(), in, c), ArgumentError);
  in = random_inputs(p.config, 3, 1);
  in.mix = VecX<double>::Zero(2);
  EXPECT_THROW(p.model.decode_color(p.data(), in, c), ArgumentError);
}

TEST(DecoderTest, ColorGradientsMatchFiniteDifferences) {
  FieldParams<double> p(micro_field(), 4);
  ColorInputs<double> in = random_inputs(p.config, 4, 4);
  const MatX<double> w = MatX<double>::NullaryExpr(3, 4, [](Eigen::Index i, Eigen::Index j) {
    return std::cos(1.3 * double(i) + 0.7 * double(j));
  });
  ColorCache<double> c;
  p.model.decode_color(p.data(), in, c);
  std::vector<double> grad(p.values.size(), 0.0);
  const ColorGrads<double> g = p.model.decode_color_backward(p.data(), in, c, w, grad.data());
  auto f = [&] {
    ColorCache<double> cc;
    return (p.model.decode_color(p.data(), in, cc).array() * w.array()).sum();
  };
  for (std::string prefix : {"diffuse", "specular"}) {
    double worst = 0;
    for (const auto& s : p.layout.slots()) {
      if (s.name.rfind(prefix, 0) != 0) continue;
      for (std::size_t k = 0; k < s.size; ++k) {
        const std::size_t i = s.offset + k;
        worst = std::max(worst, rel_err(central_diff(p.values, i, f, 1e-6), grad[i], 1e-3));
      }
    }
    EXPECT_LT(worst, 1e-4) << prefix;
  }
  // input gradients
  auto check_input = [&](MatX<double>& m, const MatX<double>& analytic, const char* what) {
    double worst = 0;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double v = m.data()[i];
      m.data()[i] = v + 1e-6;
      const double fp = f();
      m.data()[i] = v - 1e-6;
      const double fm = f();
      m.data()[i] = v;
      worst = std::max(worst, rel_err((fp - fm) / 2e-6, analytic.data()[i], 1e-3));
    }
    EXPECT_LT(worst, 1e-4) << what;
  };
  check_input(in.bottleneck, g.bottleneck, "bottleneck");
  check_input(in.reflection, g.reflection, "reflection");
  check_input(in.general, g.general, "general");
  check_input(in.specular, g.specular, "specular");
  MatX<double> mix = in.mix;
  VecX<double> gm = g.mix;
  double worst = 0;
  for (Eigen::Index j = 0; j < mix.size(); ++j) {
    const double v = in.mix(j);
    in.mix(j) = v + 1e-6;
    const double fp = f();
    in.mix(j) = v - 1e-6;
    const double fm = f();
    in.mix(j) = v;
    worst = std::max(worst, rel_err((fp - fm) / 2e-6, gm(j), 1e-3));
  }
  EXPECT_LT(worst, 1e-4) << "mix";
}

TEST(DecoderTest, GeometryGradientsMatchFiniteDifferences) {
  FieldParams<double> p(micro_field(), 6);
  boost_grid(p, 20);
  const int n = 6;
  MatX<double> pos(3, n);
  for (int j = 0; j < n; ++j) pos.col(j) = Vec3d(0.13 * j - 0.4, 0.31 - 0.07 * j, 0.05 * j - 0.2);
  const VecX<double> wd = VecX<double>::LinSpaced(n, 0.3, 1.1), wr = VecX<double>::LinSpaced(n, -0.5, 0.8),
                     wm = VecX<double>::LinSpaced(n, 0.9, -0.2);
  const MatX<double> wn = MatX<double>::NullaryExpr(3, n, [](Eigen::Index i, Eigen::Index j) { return std::sin(double(i + 2 * j)); });
  const MatX<double> wb = MatX<double>::NullaryExpr(p.config.bottleneck, n, [](Eigen::Index i, Eigen::Index j) {
    return std::cos(double(3 * i + j));
  });
  auto f = [&] {
    GeometryCache<double> c;
    p.model.geometry_forward(p.data(), pos, c);
    double s = c.density.dot(wd) + c.roughness.dot(wr) + c.mix.dot(wm);
    s += (c.normal.array() * wn.array()).sum() + (c.bottleneck.array() * wb.array()).sum();
    return s;
  };
  GeometryCache<double> c;
  p.model.geometry_forward(p.data(), pos, c);
  std::vector<double> grad(p.values.size(), 0.0);
  MatX<double> dpos;
  p.model.geometry_backward<double>(p.data(), c, &wd, &wr, &wn, &wm, &wb, nullptr, grad.data(), &dpos);
  for (std::string prefix : {"grid", "geometry"}) {
    double worst = 0;
    for (const auto& s : p.layout.slots()) {
      if (s.name.rfind(prefix, 0) != 0) continue;
      for (std::size_t k = 0; k < s.size; k += (s.size > 400 ? 7 : 1)) {
        const std::size_t i = s.offset + k;
        worst = std::max(worst, rel_err(central_diff(p.values, i, f, 1e-6), grad[i], 1e-3));
      }
    }
    EXPECT_LT(worst, 1e-4) << prefix;
  }
}

TEST(DecoderTest, FeatureMlpGradientsMatchFiniteDifferences) {
  FieldParams<double> p(micro_field(), 8);
  const MatX<double> feat = MatX<double>::NullaryExpr(p.model.grid().output_dim(), 5, [](Eigen::Index i, Eigen::Index j) {
    return std::sin(double(i) * 0.7 + double(j) * 1.9);
  });
  const MatX<double> rad = MatX<double>::NullaryExpr(3, 5, [](Eigen::Index i, Eigen::Index j) {
    return 0.5 + 0.4 * std::cos(double(i + j));
  });
  const MatX<double> w = MatX<double>::NullaryExpr(p.config.reflection_features, 5, [](Eigen::Index i, Eigen::Index j) {
    return std::cos(double(i) - 0.3 * double(j));
  });
  auto f = [&] {
    nn::MlpCache<double> a, b;
    p.model.sample_feature_forward(p.data(), feat, a);
    p.model.escape_feature_forward(p.data(), rad, b);
    return (a.output.array() * w.array()).sum() + (b.output.array() * w.array()).sum();
  };
  nn::MlpCache<double> a, b;
  p.model.sample_feature_forward(p.data(), feat, a);
  p.model.escape_feature_forward(p.data(), rad, b);
  std::vector<double> grad(p.values.size(), 0.0);
  p.model.feature_mlp().backward<double>(p.data(), a, w, grad.data(), nullptr);
  p.model.feature_mlp().backward<double>(p.data(), b, w, grad.data(), nullptr);
  double worst = 0;
  for (const auto& s : p.layout.slots()) {
    if (s.name.rfind("reflection_feature", 0) != 0) continue;
    for (std::size_t k = 0; k < s.size; ++k)
      worst = std::max(worst, rel_err(central_diff(p.values, s.offset + k, f, 1e-6), grad[s.offset + k], 1e-3));
  }
  EXPECT_LT(worst, 1e-4);
}
