#include "relight/http.hpp"
#include "relight/relight.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace relight;

namespace {

std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t a = 0, b = 0;
    const int w = std::stoi(s.substr(0, x), &a), h = std::stoi(s.substr(x + 1), &b);
    if (a != x || b != s.size() - x - 1 || w <= 0 || h <= 0) throw std::invalid_argument(s);
    return {w, h};
  } catch (const std::logic_error&) {
    throw ArgumentError("size must look like WxH, got '" + s + "'");
  }
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t n = 0;
      out.push_back(std::stod(item, &n));
      if (n != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ArgumentError("bad number '" + item + "' in list '" + s + "'");
    }
  }
  if (out.empty()) throw ArgumentError("empty list");
  return out;
}

Json read_json(const fs::path& p) {
  const std::string text = detail::read_file(p);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ParseError(p.string() + ": " + e.what(), e.byte);
  }
}

/// Either a full camera {position, target, up, width, height, focal} or an
/// orbit {yaw, pitch, dist, size}.
Camera camera_from_pose(const Json& j) {
  if (!j.is_object()) throw ArgumentError("pose must be a JSON object");
  if (j.contains("position")) return camera_from_json(j).camera();
  try {
    const int size = j.value("size", 64);
    if (size <= 0) throw ArgumentError("pose size must be positive");
    return Camera::orbit(j.value("yaw", 30.0), j.value("pitch", 25.0), j.value("dist", 3.0), size, size,
                         1.6 * size);
  } catch (const Json::exception& e) {
    throw ArgumentError(std::string("invalid pose: ") + e.what());
  }
}

void write_frame(const fs::path& path, const Image& linear) {
  if (path.extension() == ".png")
    detail::write_file(path, encode_png(to_ldr(linear)));
  else
    write_pfm(path, linear);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ull;
  return h;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lighting-conditioned relightable radiance field"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // gen-envs
  auto* genv = app.add_subcommand("gen-envs", "Write procedural environment maps");
  int genv_count = 10;
  std::uint64_t genv_seed = 0;
  std::string genv_size = "64x32", genv_out;
  genv->add_option("--count", genv_count, "number of maps")->check(CLI::PositiveNumber);
  genv->add_option("--seed", genv_seed, "seed");
  genv->add_option("--size", genv_size, "WxH, W = 2H");
  genv->add_option("--out", genv_out, "output directory")->required();

  // gen-data
  auto* gd = app.add_subcommand("gen-data", "Render a multi-illumination dataset");
  std::string gd_scene = "desk", gd_envs, gd_size = "64x64", gd_out;
  int gd_views = 24, gd_eval_views = 8, gd_holdout = 2;
  std::uint64_t gd_seed = 0;
  gd->add_option("--scene", gd_scene, "builtin scene name or JSON scene file");
  gd->add_option("--views", gd_views, "training views")->check(CLI::PositiveNumber);
  gd->add_option("--eval-views", gd_eval_views, "views rendered under held-out maps")->check(CLI::NonNegativeNumber);
  gd->add_option("--envs", gd_envs, "directory of environment maps")->required();
  gd->add_option("--holdout", gd_holdout, "maps held out for evaluation")->check(CLI::NonNegativeNumber);
  gd->add_option("--size", gd_size, "image size WxH");
  gd->add_option("--seed", gd_seed, "seed");
  gd->add_option("--out", gd_out, "output directory")->required();

  // prefilter
  auto* pf = app.add_subcommand("prefilter", "Blur an environment map at several widths");
  std::string pf_in, pf_sigmas = "10,20", pf_out;
  bool pf_absolute = false;
  pf->add_option("--in", pf_in, "input map (.pfm or .envf)")->required();
  pf->add_option("--sigmas", pf_sigmas, "comma-separated widths in pixels for a 512-pixel-wide map");
  pf->add_flag("--absolute", pf_absolute, "treat sigmas as pixels of the input map");
  pf->add_option("--out", pf_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Fit a field to a dataset");
  std::string tr_data, tr_out, tr_ablation = "none", tr_log;
  TrainConfig tcfg;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--steps", tcfg.steps, "optimizer steps")->check(CLI::NonNegativeNumber);
  tr->add_option("--batch", tcfg.batch_rays, "rays per step")->check(CLI::PositiveNumber);
  tr->add_option("--lr", tcfg.learning_rate, "initial learning rate")->check(CLI::PositiveNumber);
  tr->add_option("--seed", tcfg.seed, "seed");
  tr->add_option("--eval-every", tcfg.eval_every, "held-out PSNR period (0 = off)")->check(CLI::NonNegativeNumber);
  tr->add_option("--log-every", tcfg.log_every, "loss log period")->check(CLI::NonNegativeNumber);
  tr->add_option("--ablation", tr_ablation, "none | per-image | no-specular | quarter-env");
  tr->add_option("--log", tr_log, "write the loss curve as CSV");
  tr->add_option("--out", tr_out, "checkpoint path")->required();

  // render
  auto* rd = app.add_subcommand("render", "Render one view under one map");
  std::string rd_ckpt, rd_env, rd_pose, rd_out;
  rd->add_option("--ckpt", rd_ckpt, "checkpoint")->required();
  rd->add_option("--env", rd_env, "environment map")->required();
  rd->add_option("--pose", rd_pose, "camera JSON")->required();
  rd->add_option("--out", rd_out, "output image (.pfm linear or .png)")->required();

  // relight
  auto* rl = app.add_subcommand("relight", "Render every pose under every map in a directory");
  std::string rl_ckpt, rl_envs, rl_poses, rl_out, rl_format = "pfm";
  rl->add_option("--ckpt", rl_ckpt, "checkpoint")->required();
  rl->add_option("--env-dir", rl_envs, "directory of environment maps")->required();
  rl->add_option("--poses", rl_poses, "JSON array of cameras")->required();
  rl->add_option("--format", rl_format, "pfm | png")->check(CLI::IsMember({"pfm", "png"}));
  rl->add_option("--out", rl_out, "output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Score renders against a dataset split");
  std::string ev_ckpt, ev_data, ev_split = "eval", ev_scale = "per-image", ev_out, ev_summary;
  int ev_limit = -1;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "train | eval");
  ev->add_option("--scale", ev_scale, "per-image | global")->check(CLI::IsMember({"per-image", "global"}));
  ev->add_option("--limit", ev_limit, "score at most this many images");
  ev->add_option("--out", ev_out, "CSV path")->required();
  ev->add_option("--summary", ev_summary, "summary JSON path");

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP frame service");
  std::string sv_ckpt, sv_envs, sv_host = "127.0.0.1";
  int sv_port = 8080;
  sv->add_option("--ckpt", sv_ckpt, "checkpoint")->required();
  sv->add_option("--envs", sv_envs, "directory of environment maps")->required();
  sv->add_option("--host", sv_host, "bind address");
  sv->add_option("--port", sv_port, "port")->check(CLI::Range(0, 65535));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*genv) {
      const auto [w, h] = parse_size(genv_size);
      if (w != 2 * h) throw ArgumentError("map width must be twice the height");
      fs::create_directories(genv_out);
      for (int i = 0; i < genv_count; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "env%02d", i);
        save_envmap(fs::path(genv_out) / (std::string(id) + ".pfm"),
                    procedural_env(hash_key(genv_seed, std::uint64_t(i)), w, h, id));
      }
      std::cout << "wrote " << genv_count << " maps to " << genv_out << "\n";
    } else if (*gd) {
      const auto [w, h] = parse_size(gd_size);
      const SceneSpec scene = load_scene(gd_scene);
      std::vector<EnvMap> envs;
      for (const auto& p : list_envmap_files(gd_envs)) envs.push_back(load_envmap(p));
      if (gd_holdout >= int(envs.size()))
        throw ArgumentError("--holdout must be smaller than the number of maps in " + gd_envs);
      GenerateOptions opt;
      opt.views = gd_views;
      opt.eval_views = gd_eval_views;
      opt.holdout = gd_holdout;
      opt.width = w;
      opt.height = h;
      opt.seed = gd_seed;
      const Manifest m = generate(scene, envs, opt, gd_out);
      std::cout << "wrote " << m.images.size() << " images (" << m.indices("train").size() << " train, "
                << m.indices("eval").size() << " eval) to " << gd_out << "\n";
    } else if (*pf) {
      const EnvMap env = load_envmap(pf_in);
      const auto ref = parse_list(pf_sigmas);
      const auto sig = pf_absolute ? ref : scale_sigmas(ref, env.width());
      const PrefilterStack stack = prefilter(env, sig);
      fs::create_directories(pf_out);
      Json levels = Json::array();
      save_envmap(fs::path(pf_out) / "level0.pfm", stack.base);
      for (std::size_t i = 0; i < stack.levels.size(); ++i) {
        const std::string name = "level" + std::to_string(i + 1) + ".pfm";
        save_envmap(fs::path(pf_out) / name, stack.levels[i].blurred);
        levels.push_back({{"file", name}, {"sigma", stack.levels[i].sigma}, {"radius", blur_radius(stack.levels[i].sigma)}});
      }
      detail::write_file(fs::path(pf_out) / "stack.json",
                         Json{{"base", "level0.pfm"}, {"levels", levels}}.dump(2) + "\n");
      std::cout << "wrote " << stack.levels.size() + 1 << " levels to " << pf_out << "\n";
    } else if (*tr) {
      const Dataset ds = Dataset::load(tr_data);
      const FieldConfig fcfg = apply_ablation(FieldConfig{}, parse_ablation(tr_ablation),
                                              int(ds.manifest.indices("train").size()));
      std::ofstream log;
      if (!tr_log.empty()) {
        log.open(tr_log);
        if (!log) throw IoError("cannot write " + tr_log);
        log << "step,loss,lr,eval_psnr\n";
      }
      const fs::path failure = fs::path(tr_out).concat(".lastgood");
      const TrainResult r = train(ds, fcfg, tcfg, [&](const TrainLogEntry& e) {
        std::cout << "step " << e.step << " loss " << e.loss << " lr " << e.lr;
        if (std::isfinite(e.eval_psnr)) std::cout << " eval_psnr " << e.eval_psnr;
        std::cout << std::endl;
        if (log) log << e.step << "," << e.loss << "," << e.lr << "," << e.eval_psnr << "\n";
      }, failure);
      save_checkpoint(tr_out, r.checkpoint);
      std::cout << "saved " << tr_out << "\n";
    } else if (*rd) {
      const Checkpoint ck = load_checkpoint(rd_ckpt);
      const EnvMap env = load_envmap(rd_env);
      const Camera cam = camera_from_pose(read_json(rd_pose));
      const auto params = ck.params.cast<float>();
      write_frame(rd_out, render_image(params, env, cam, ck.render));
      std::cout << "wrote " << rd_out << "\n";
    } else if (*rl) {
      const std::string before = detail::read_file(rl_ckpt);
      const Checkpoint ck = decode_checkpoint(before);
      const Json poses = read_json(rl_poses);
      if (!poses.is_array() || poses.empty()) throw ArgumentError("--poses must be a non-empty JSON array");
      std::vector<Camera> cams;
      for (const auto& p : poses) cams.push_back(camera_from_pose(p));
      const auto params = ck.params.cast<float>();
      fs::create_directories(rl_out);
      int written = 0;
      for (const auto& path : list_envmap_files(rl_envs)) {
        const EnvMap env = load_envmap(path);
        const auto ctx = make_render_context(params, env);
        for (std::size_t k = 0; k < cams.size(); ++k) {
          char name[64];
          std::snprintf(name, sizeof name, "_p%03zu.", k);
          write_frame(fs::path(rl_out) / (env.id() + name + rl_format), render_image(params, ctx, cams[k], ck.render));
          ++written;
        }
      }
      const std::string digest = hex64(fnv1a(encode_checkpoint(ck)));
      if (digest != hex64(fnv1a(before))) throw Error("checkpoint changed during relighting");
      std::cout << "wrote " << written << " images to " << rl_out << " (checkpoint " << digest << ")\n";
    } else if (*ev) {
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      const Dataset ds = Dataset::load(ev_data);
      const ScaleMode mode = ev_scale == "global" ? ScaleMode::Global : ScaleMode::PerImage;
      const EvalResult r = evaluate(ck.params.cast<float>(), ds, ev_split, mode, ck.render, ev_limit);
      detail::write_file(ev_out, eval_csv(r));
      if (!ev_summary.empty()) detail::write_file(ev_summary, eval_summary(r, ev_split, mode).dump(2) + "\n");
      std::cout << "psnr " << r.mean_psnr << " +- " << r.std_psnr << "  ssim " << r.mean_ssim << " +- " << r.std_ssim
                << "  (" << r.rows.size() << " images)\n";
    } else if (*sv) {
      const Checkpoint ck = load_checkpoint(sv_ckpt);
      FrameService service(ck, FrameService::load_dir(sv_envs));
      httplib::Server server;
      install_routes(server, service);
      std::cout << "serving " << service.envs().size() << " maps on http://" << sv_host << ":" << sv_port << std::endl;
      if (!server.listen(sv_host, sv_port)) throw IoError("cannot listen on " + sv_host + ":" + std::to_string(sv_port));
    }
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
