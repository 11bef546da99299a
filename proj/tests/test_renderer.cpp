#include "support.hpp"

#include <cstdlib>

using namespace relight;
using namespace relight::testing;

namespace {

void set_density_bias(FieldParams<double>& p, double bias) {
  const auto& layers = p.model.geometry_mlp().layers;
  const auto& last = layers.back();
  for (std::size_t i = 0; i < std::size_t(last.in); ++i) p.values[last.w + std::size_t(geo::kDensity) * last.in + i] = 0;
  p.values[last.b + std::size_t(geo::kDensity)] = bias;
}

Camera small_camera(int w = 12, int h = 10) { return Camera::orbit(35, 20, 3.0, w, h, 1.6 * w); }

}  // namespace

TEST(CameraTest, CenterRayAndBounds) {
  Camera c;
  c.width = 4;
  c.height = 4;
  c.cx = 2;
  c.cy = 2;
  c.focal = 2;
  const Ray r = camera_ray(c, 1, 1);
  EXPECT_LT((r.dir - Vec3d(-0.25, -0.25, 1).normalized()).norm(), 1e-12);
  EXPECT_EQ(r.origin, Vec3d::Zero());
  EXPECT_THROW(camera_ray(c, 4, 0), ArgumentError);
  EXPECT_THROW(camera_ray(c, 0, -1), ArgumentError);

  const Camera o = Camera::orbit(0, 0, 3, 9, 9, 10);
  EXPECT_LT((camera_ray(o, 4, 4).dir - Vec3d(-1, 0, 0)).norm(), 1e-12);
  EXPECT_LT((o.position - Vec3d(3, 0, 0)).norm(), 1e-12);
  EXPECT_NO_THROW(o.validate());
}

TEST(CameraTest, BoxInterval) {
  Ray r;
  r.origin = Vec3d(-3, 0, 0);
  r.dir = Vec3d(1, 0, 0);
  const auto iv = box_interval(r);
  ASSERT_TRUE(iv.has_value());
  EXPECT_DOUBLE_EQ(iv->first, 2.0);
  EXPECT_DOUBLE_EQ(iv->second, 4.0);
  r.origin = Vec3d(-3, 1.5, 0);
  EXPECT_FALSE(box_interval(r).has_value());
}

TEST(CompositeTest, Examples) {
  {
    const auto c = composite_weights<double>({1.0}, {1.0});
    EXPECT_NEAR(c.weights[0], 1 - std::exp(-1.0), 1e-15);
    EXPECT_NEAR(c.opacity, 1 - std::exp(-1.0), 1e-15);
  }
  {
    const auto c = composite_weights<double>({0.0, 0.0, 0.0}, {0.5, 0.5, 0.5});
    for (double w : c.weights) EXPECT_EQ(w, 0.0);
    EXPECT_EQ(c.opacity, 0.0);
  }
  {
    // an opaque first sample hides everything behind it
    const auto [v, a] = composite<double, double>({1e6, 2.0}, {1.0, 1.0}, {3.0, 7.0});
    EXPECT_NEAR(v, 3.0, 1e-12);
    EXPECT_NEAR(a, 1.0, 1e-12);
  }
  {
    const auto c = composite_weights<double>({2.0, 1.0}, {0.5, 0.5});
    const double a0 = 1 - std::exp(-1.0), a1 = 1 - std::exp(-0.5);
    EXPECT_NEAR(c.weights[0], a0, 1e-15);
    EXPECT_NEAR(c.weights[1], (1 - a0) * a1, 1e-15);
  }
}

TEST(CompositeTest, SlabMatchesClosedForm) {
  const int n = 256;
  const double L = 1.3;
  for (double tau : {0.1, 1.0, 4.0}) {
    const auto c = composite_weights(std::vector<double>(n, tau), std::vector<double>(n, L / n));
    EXPECT_NEAR(c.opacity, 1 - std::exp(-tau * L), 1e-3);
  }
}

TEST(CompositeTest, WeightsBounded) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(0, 50);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> d(32), dt(32);
    for (auto& x : d) x = U(rng);
    for (auto& x : dt) x = U(rng) / 200;
    const auto c = composite_weights(d, dt);
    double s = 0;
    for (double w : c.weights) {
      EXPECT_GE(w, 0.0);
      s += w;
    }
    EXPECT_LE(s, 1.0 + 1e-12);
    EXPECT_NEAR(s, c.opacity, 1e-12);
  }
}

TEST(CompositeTest, UniformBackwardMatchesFiniteDifferences) {
  const int n = 7;
  std::vector<double> tau{0.3, 2.0, 0.1, 5.0, 1.0, 0.0, 3.0}, w(n), gw{0.2, -1.0, 0.5, 0.7, -0.3, 0.9, 0.4};
  detail::composite_uniform(tau.data(), n, 0.2, w.data());
  std::vector<double> dtau(n, 0.0);
  detail::composite_uniform_backward(w.data(), n, 0.2, gw.data(), dtau.data());
  auto f = [&] {
    std::vector<double> ww(n);
    detail::composite_uniform(tau.data(), n, 0.2, ww.data());
    double s = 0;
    for (int i = 0; i < n; ++i) s += ww[std::size_t(i)] * gw[std::size_t(i)];
    return s;
  };
  for (std::size_t i = 0; i < std::size_t(n); ++i) EXPECT_LT(rel_err(central_diff(tau, i, f, 1e-6), dtau[i], 1e-6), 1e-6);
}

TEST(VmfTest, WidthAndDegenerateConcentration) {
  EXPECT_DOUBLE_EQ(vmf_width(0.5), 8.0);
  const Vec3d mu = Vec3d(0.2, -0.5, 0.7).normalized();
  for (int i = 0; i < 20; ++i) {
    const Vec3d v = vmf_direction<double>(mu, 1e9, 0.05 * i + 0.01, 0.37 * i);
    EXPECT_LT((v - mu).norm(), 1e-3);
  }
  CounterRng rng(3);
  EXPECT_THROW(sample_vmf(mu, 0.0, 4, rng), ArgumentError);
  const auto s = sample_vmf(mu, 5.0, 4, rng);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s[0], mu);
}

TEST(VmfTest, UnitNormAndMeanResultant) {
  for (const Vec3d& mu : {Vec3d(0, 0, 1), Vec3d(0, 0, -1), Vec3d(1, 2, -3).normalized()}) {
    for (double kappa : {0.5, 2.0, 8.0}) {
      CounterRng rng(hash_key(7, std::uint64_t(kappa * 10)));
      const auto s = sample_vmf(mu, kappa, 100000, rng);
      double m = 0;
      for (std::size_t j = 1; j < s.size(); ++j) {
        EXPECT_NEAR(s[j].norm(), 1.0, 1e-9);
        m += s[j].dot(mu);
      }
      m /= double(s.size() - 1);
      EXPECT_NEAR(m, 1.0 / std::tanh(kappa) - 1.0 / kappa, 0.01) << kappa;
    }
  }
}

TEST(RenderTest, EmptyFieldShowsEnvironment) {
  FieldParams<double> p(micro_field(), 1);
  set_density_bias(p, -100);
  const EnvMap env = random_env(32, 16, 4, 0.1, 2.0);
  const Camera cam = small_camera();
  RenderConfig rc;
  const Image img = render_image(p, env, cam, rc);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Vec3d e = sample<double>(env, camera_ray(cam, x, y).dir);
      for (int c = 0; c < 3; ++c) EXPECT_EQ(img.at(x, y, c), float(e[c]));
    }
  rc.white_background = true;
  const Image white = render_image(p, env, cam, rc);
  for (float v : white.data) EXPECT_EQ(v, 1.0f);
}

TEST(RenderTest, EnclosedPointIgnoresEnvironment) {
  FieldParams<double> p(micro_field(), 2);
  set_density_bias(p, 40);
  RenderConfig rc;
  rc.reflect_samples = 16;
  const std::vector<Vec3d> dirs{Vec3d(1, 0, 0), Vec3d(0, 0.6, 0.8), Vec3d(-0.6, 0, -0.8)};
  const EnvMap a = random_env(32, 16, 1, 0, 5), b = EnvMap::constant(32, 16, Vec3f(9, 0, 3));
  const auto sa = prefilter_default(a), sb = prefilter_default(b);
  const VecX<double> fa = cast_reflection<double>(p, sa, Vec3d(0.1, 0.0, -0.1), dirs, rc, 5);
  const VecX<double> fb = cast_reflection<double>(p, sb, Vec3d(0.1, 0.0, -0.1), dirs, rc, 5);
  EXPECT_LT((fa - fb).cwiseAbs().maxCoeff(), 1e-12);

  // an empty field passes the environment through
  set_density_bias(p, -100);
  const VecX<double> ea = cast_reflection<double>(p, sa, Vec3d::Zero(), dirs, rc, 5);
  const VecX<double> eb = cast_reflection<double>(p, sb, Vec3d::Zero(), dirs, rc, 5);
  EXPECT_GT((ea - eb).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(RenderTest, ExpectedSurfaceOfHomogeneousSlab) {
  FieldParams<double> p(micro_field(), 3);
  const double tau = 5.0, L = 2.0;
  set_density_bias(p, std::log(std::expm1(tau)));
  RenderConfig rc;
  rc.primary_samples = 256;
  Ray r;
  r.origin = Vec3d(-3, 0.2, -0.1);
  r.dir = Vec3d(1, 0, 0);
  const auto s = expected_surface(p, r, rc);
  ASSERT_FALSE(s.background);
  EXPECT_NEAR(s.opacity, 1 - std::exp(-tau * L), 1e-3);
  // mean depth of an exponential truncated to the slab
  const double depth = 1 / tau - L * std::exp(-tau * L) / (1 - std::exp(-tau * L));
  EXPECT_NEAR(s.position.x(), -1 + depth, 5e-3);
  EXPECT_NEAR(s.position.y(), 0.2, 1e-12);
  EXPECT_NEAR(s.normal.norm(), 1.0, 1e-12);
  EXPECT_GT(s.roughness, 0.0);
  EXPECT_LT(s.roughness, 1.0);

  set_density_bias(p, -100);
  EXPECT_TRUE(expected_surface(p, r, rc).background);
}

TEST(RenderTest, EndToEndGradientMatchesFiniteDifferences) {
  FieldParams<double> p(micro_field(), 3);
  boost_grid(p, 15);
  const EnvMap env = smooth_env(32, 16);
  const auto stack = prefilter_default(env);
  MatX<double> general(kGeneralEmbeddingDim, 1);
  for (Eigen::Index i = 0; i < general.size(); ++i) general(i) = std::sin(0.3 * double(i));
  RenderConfig rc;
  rc.primary_samples = 4;
  rc.reflect_samples = 4;
  rc.reflect_rays = 3;
  rc.background_opacity = 0.0;
  const Camera cam = small_camera(6, 5);
  std::vector<Ray> rays;
  std::vector<std::uint64_t> keys;
  for (int y = 0; y < cam.height; y += 2)
    for (int x = 0; x < cam.width; x += 2) {
      rays.push_back(camera_ray(cam, x, y));
      keys.push_back(pixel_key(9, 0, x, y));
    }
  const MatX<double> wc = MatX<double>::NullaryExpr(3, Eigen::Index(rays.size()), [](Eigen::Index i, Eigen::Index j) {
    return std::cos(0.9 * double(i) + 0.4 * double(j));
  });
  auto f = [&] {
    RayBatchTape<double> t;
    return (render_rays(p, stack, env, general, rays, keys, rc, t).array() * wc.array()).sum();
  };
  RayBatchTape<double> tp;
  render_rays(p, stack, env, general, rays, keys, rc, tp);
  ASSERT_FALSE(tp.surface.empty());
  std::vector<double> grad(p.values.size(), 0.0);
  MatX<double> dgeneral;
  render_rays_backward(p, tp, wc, grad.data(), &dgeneral);
  for (const auto& s : p.layout.slots()) {
    if (s.name.rfind("encoder", 0) == 0 || s.name == "appearance_codes") continue;
    double worst = 0;
    for (std::size_t k = 0; k < s.size; k += (s.size > 300 ? 5 : 1))
      worst = std::max(worst, rel_err(central_diff(p.values, s.offset + k, f, 1e-6), grad[s.offset + k], 1e-3));
    EXPECT_LT(worst, 1e-3) << s.name;
  }
  std::vector<double> gv(general.data(), general.data() + general.size());
  double worst = 0;
  for (std::size_t i = 0; i < gv.size(); i += 3) {
    auto fg = [&] {
      general = Eigen::Map<const MatX<double>>(gv.data(), kGeneralEmbeddingDim, 1);
      return f();
    };
    worst = std::max(worst, rel_err(central_diff(gv, i, fg, 1e-6), dgeneral(Eigen::Index(i)), 1e-3));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(RenderTest, DeterministicAcrossThreadCounts) {
  FieldParams<float> p(micro_field(), 4);
  boost_grid(p, 15);
  const EnvMap env = smooth_env(32, 16);
  const Camera cam = small_camera(14, 11);
  RenderConfig rc;
  rc.seed = 5;
  setenv("RELIGHT_THREADS", "1", 1);
  const Image a = render_image(p, env, cam, rc);
  setenv("RELIGHT_THREADS", "3", 1);
  const Image b = render_image(p, env, cam, rc);
  unsetenv("RELIGHT_THREADS");
  EXPECT_EQ(a.data, b.data);
  const Image c = render_image(p, env, cam, rc);
  EXPECT_EQ(a.data, c.data);
}

TEST(RenderTest, PrimarySampleCountConverges) {
  FieldParams<double> p(micro_field(), 6);
  boost_grid(p, 6);
  const EnvMap env = smooth_env(32, 16);
  const Camera cam = small_camera(10, 8);
  RenderConfig rc;
  rc.jitter = false;
  rc.background_opacity = 0.0;
  rc.primary_samples = 256;
  const Image a = render_image(p, env, cam, rc);
  rc.primary_samples = 512;
  const Image b = render_image(p, env, cam, rc);
  double worst = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) worst = std::max(worst, double(std::abs(a.data[i] - b.data[i])));
  EXPECT_LT(worst, 1e-2);
}

TEST(RenderTest, RejectsBadInputs) {
  FieldParams<double> p(micro_field(), 1);
  const auto stack = prefilter_default(smooth_env(32, 16));
  RenderConfig rc;
  RayBatchTape<double> tp;
  EXPECT_THROW(render_rays(p, stack, stack.base, MatX<double>(MatX<double>::Zero(64, 1)), std::vector<Ray>{Ray{}}, std::vector<std::uint64_t>{0}, rc, tp), ArgumentError);
  rc.primary_samples = 0;
  EXPECT_THROW(render_rays(p, stack, stack.base, MatX<double>(MatX<double>::Zero(128, 1)), std::vector<Ray>{Ray{}}, std::vector<std::uint64_t>{0}, rc, tp), ArgumentError);
  Camera bad = small_camera();
  bad.focal = -1;
  EXPECT_THROW(render_image(p, smooth_env(32, 16), bad, RenderConfig{}), ArgumentError);
}
