#include "support.hpp"

#include "relight/http.hpp"

#include <thread>

using namespace relight;
using namespace relight::testing;

namespace {

Checkpoint small_checkpoint() {
  Checkpoint ck;
  ck.params = FieldParams<double>(micro_field(), 3);
  boost_grid(ck.params, 10);
  ck.render.primary_samples = 16;
  ck.render.reflect_samples = 4;
  ck.render.reflect_rays = 2;
  return ck;
}

std::vector<EnvMap> three_maps() {
  return {procedural_env(1, 32, 16, "alpha"), procedural_env(2, 32, 16, "beta"), procedural_env(3, 32, 16, "gamma")};
}

class ServerFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    service_ = std::make_unique<FrameService>(small_checkpoint(), three_maps());
    install_routes(server_, *service_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }

  std::unique_ptr<FrameService> service_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace

TEST(FrameRequestTest, ParsingAndValidation) {
  const FrameRequest d = parse_frame_request({});
  EXPECT_EQ(d.size, 64);
  EXPECT_DOUBLE_EQ(d.yaw, 30.0);
  const FrameRequest r = parse_frame_request({{"yaw", "-12.5"}, {"pitch", "10"}, {"dist", "2.5"}, {"env", "x"}, {"rot", "93"}, {"size", "32"}});
  EXPECT_DOUBLE_EQ(r.yaw, -12.5);
  EXPECT_EQ(r.env, "x");
  EXPECT_EQ(r.size, 32);
  EXPECT_THROW(parse_frame_request({{"size", "0"}}), ArgumentError);
  EXPECT_THROW(parse_frame_request({{"size", "513"}}), ArgumentError);
  EXPECT_THROW(parse_frame_request({{"size", "12.5"}}), ArgumentError);
  EXPECT_THROW(parse_frame_request({{"pitch", "90"}}), ArgumentError);
  EXPECT_THROW(parse_frame_request({{"dist", "0"}}), ArgumentError);
  EXPECT_THROW(parse_frame_request({{"yaw", "abc"}}), ArgumentError);
  EXPECT_THROW(parse_frame_request({{"yaw", "1e999"}}), ArgumentError);
  EXPECT_THROW(parse_frame_request({{"yaw", "3x"}}), ArgumentError);
  EXPECT_THROW(parse_frame_request({{"zoom", "1"}}), ArgumentError);
}

TEST(FrameRequestTest, RotationBuckets) {
  EXPECT_EQ(rotation_bucket(0), 0);
  EXPECT_EQ(rotation_bucket(2.4), 0);
  EXPECT_EQ(rotation_bucket(2.6), 1);
  EXPECT_EQ(rotation_bucket(360), 0);
  EXPECT_EQ(rotation_bucket(-5), 71);
  EXPECT_EQ(rotation_bucket(725), 1);
}

TEST(FrameServiceTest, ConstructionErrors) {
  EXPECT_THROW(FrameService(small_checkpoint(), {}), ArgumentError);
  EXPECT_THROW(FrameService(small_checkpoint(), {procedural_env(1, 32, 16, "a"), procedural_env(2, 32, 16, "a")}),
               ArgumentError);
  EXPECT_THROW(FrameService(small_checkpoint(), {procedural_env(1, 32, 16)}), ArgumentError);
}

TEST(FrameServiceTest, DeterministicFramesAndLru) {
  FrameService s(small_checkpoint(), three_maps());
  FrameRequest r;
  r.size = 12;
  r.env = "beta";
  const std::string a = s.render_png(r), b = s.render_png(r);
  EXPECT_EQ(a, b);
  EXPECT_EQ(s.cache_misses(), 1u);
  r.rot = 1.0;  // same bucket
  EXPECT_EQ(s.render_png(r), a);
  EXPECT_EQ(s.cache_misses(), 1u);
  r.rot = 90.0;
  EXPECT_NE(s.render_png(r), a);
  EXPECT_EQ(s.cache_misses(), 2u);
  r.env = "nope";
  EXPECT_THROW(s.render(r), NotFoundError);

  // capacity is bounded and the least recently used entry goes first
  r.env = "alpha";
  r.size = 2;
  for (int k = 0; k < 40; ++k) {
    r.rot = 5.0 * k;
    s.render(r);
  }
  EXPECT_EQ(s.cache_size(), FrameService::kCacheCapacity);
  const std::size_t misses = s.cache_misses();
  r.rot = 5.0 * 39;
  s.render(r);
  EXPECT_EQ(s.cache_misses(), misses);
  r.rot = 0.0;
  s.render(r);
  EXPECT_EQ(s.cache_misses(), misses + 1);
}

TEST(FrameServiceTest, MatchesDirectRender) {
  const Checkpoint ck = small_checkpoint();
  FrameService s(ck, three_maps());
  FrameRequest r;
  r.size = 10;
  r.env = "gamma";
  r.yaw = 100;
  const Image a = s.render(r);
  const FieldParams<float> pf = ck.params.cast<float>();
  const Image b = render_image(pf, three_maps()[2], Camera::orbit(100, 25, 3, 10, 10, 16), ck.render);
  EXPECT_EQ(a.data, b.data);
}

TEST_F(ServerFixture, HealthAndEnvList) {
  auto cli = client();
  auto h = cli.Get("/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  EXPECT_EQ(Json::parse(h->body), Json({{"status", "ok"}}));
  auto e = cli.Get("/envmaps");
  ASSERT_TRUE(e);
  EXPECT_EQ(e->status, 200);
  const Json list = Json::parse(e->body);
  ASSERT_EQ(list.size(), 3u);
  EXPECT_EQ(list[0]["id"], "alpha");
  EXPECT_EQ(list[2]["id"], "gamma");
  auto p = cli.Get(list[1]["preview"].get<std::string>());
  ASSERT_TRUE(p);
  EXPECT_EQ(p->status, 200);
  EXPECT_EQ(p->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(p->body.substr(1, 3), "PNG");
}

TEST_F(ServerFixture, RenderIsDeterministicPng) {
  auto cli = client();
  auto a = cli.Get("/render?yaw=40&pitch=20&dist=3&env=beta&rot=10&size=16");
  auto b = cli.Get("/render?yaw=40&pitch=20&dist=3&env=beta&rot=10&size=16");
  ASSERT_TRUE(a);
  ASSERT_TRUE(b);
  EXPECT_EQ(a->status, 200);
  EXPECT_EQ(a->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(a->body, b->body);
  FrameRequest fr;
  fr.yaw = 40;
  fr.pitch = 20;
  fr.env = "beta";
  fr.rot = 10;
  fr.size = 16;
  EXPECT_EQ(a->body, service_->render_png(fr));
  auto c = cli.Get("/render?yaw=40&pitch=20&dist=3&env=gamma&rot=10&size=16");
  ASSERT_TRUE(c);
  EXPECT_NE(a->body, c->body);
}

TEST_F(ServerFixture, ErrorStatuses) {
  auto cli = client();
  auto nf = cli.Get("/render?env=unknown&size=8");
  ASSERT_TRUE(nf);
  EXPECT_EQ(nf->status, 404);
  EXPECT_TRUE(Json::parse(nf->body).contains("error"));
  for (const char* bad : {"/render?size=0", "/render?size=abc", "/render?pitch=95", "/render?colour=red",
                          "/render?yaw=1&yaw=2", "/preview", "/preview?env=alpha&x=1"}) {
    auto r = cli.Get(bad);
    ASSERT_TRUE(r) << bad;
    EXPECT_EQ(r->status, 400) << bad;
    EXPECT_TRUE(Json::parse(r->body).contains("error")) << bad;
  }
  auto pv = cli.Get("/preview?env=zeta");
  ASSERT_TRUE(pv);
  EXPECT_EQ(pv->status, 404);
  auto missing = cli.Get("/nowhere");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  EXPECT_TRUE(Json::parse(missing->body).contains("error"));
}
