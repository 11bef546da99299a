#pragma once

#include "relight/core.hpp"
#include "relight/field.hpp"
#include "relight/metrics.hpp"
#include "relight/nn.hpp"
#include "relight/renderer.hpp"
#include "relight/synthdata.hpp"

#include "json.hpp"

#include <bit>
#include <chrono>
#include <cstring>
#include <functional>
#include <map>
#include <random>
#include <sstream>

namespace relight {

struct TrainConfig {
  int batch_rays = 256;
  int steps = 20000;
  double learning_rate = 5e-3;
  double final_lr_fraction = 0.02;  ///< cosine decay ends at lr * this
  double photometric_weight = 1.0;
  double normal_weight = 3e-4;
  double orientation_weight = 0.1;
  std::uint64_t seed = 0;
  int chunk_rays = 128;  ///< reduction granularity; fixed so results ignore thread count
  int regularized_rays = 128;  ///< leading rays of each batch that carry the normal terms
  int log_every = 100;
  int eval_every = 0;    ///< held-out PSNR period in steps (0 = never)
  int eval_images = 2;   ///< eval images rendered per periodic check
  RenderConfig render;   ///< sampling used while training

  TrainConfig() {
    render.primary_samples = 32;
    render.reflect_samples = 8;
    render.background_opacity = 1e-4;
  }

  void validate() const {
    if (batch_rays < 1 || steps < 0 || chunk_rays < 1 || regularized_rays < 0)
      throw ArgumentError("batch size and steps must be positive");
    if (!(learning_rate > 0)) throw ArgumentError("learning rate must be positive");
    if (photometric_weight < 0 || normal_weight < 0 || orientation_weight < 0)
      throw ArgumentError("loss weights must be >= 0");
    render.validate();
  }

  double lr_at(int step) const {
    if (steps <= 0) return learning_rate;
    const double t = std::min(1.0, double(step) / steps);
    return learning_rate * (final_lr_fraction + (1 - final_lr_fraction) * 0.5 * (1 + std::cos(kPi<double> * t)));
  }
};

// -- config (de)serialization ---------------------------------------------------

inline Json render_config_to_json(const RenderConfig& c) {
  return Json{{"primary_samples", c.primary_samples},       {"reflect_samples", c.reflect_samples},
              {"reflect_rays", c.reflect_rays},             {"seed", c.seed},
              {"white_background", c.white_background},     {"jitter", c.jitter},
              {"background_opacity", c.background_opacity}, {"reflect_offset", c.reflect_offset},
              {"reflect_length", c.reflect_length}};
}

inline RenderConfig render_config_from_json(const Json& j) {
  RenderConfig c;
  c.primary_samples = j.at("primary_samples").get<int>();
  c.reflect_samples = j.at("reflect_samples").get<int>();
  c.reflect_rays = j.at("reflect_rays").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.white_background = j.at("white_background").get<bool>();
  c.jitter = j.at("jitter").get<bool>();
  c.background_opacity = j.at("background_opacity").get<double>();
  c.reflect_offset = j.at("reflect_offset").get<double>();
  c.reflect_length = j.at("reflect_length").get<double>();
  return c;
}

inline Json field_config_to_json(const FieldConfig& c) {
  const auto& e = c.encoder;
  return Json{{"grid_resolutions", c.grid_resolutions},
              {"grid_features", c.grid_features},
              {"geometry_hidden", c.geometry_hidden},
              {"color_hidden", c.color_hidden},
              {"feature_hidden", c.feature_hidden},
              {"bottleneck", c.bottleneck},
              {"reflection_features", c.reflection_features},
              {"sh_degree", c.sh_degree},
              {"reference_sigmas", c.reference_sigmas},
              {"general", c.general == GeneralConditioning::Encoder ? "encoder" : "per_image"},
              {"appearance_codes", c.appearance_codes},
              {"specular_conditioning", c.specular_conditioning},
              {"env_downsample", c.env_downsample},
              {"encoder",
               {{"input_size", e.input_size},
                {"patch", e.patch},
                {"layers", e.layers},
                {"heads", e.heads},
                {"width", e.width},
                {"mlp_hidden", e.mlp_hidden}}}};
}

inline FieldConfig field_config_from_json(const Json& j) {
  FieldConfig c;
  c.grid_resolutions = j.at("grid_resolutions").get<std::vector<int>>();
  c.grid_features = j.at("grid_features").get<int>();
  c.geometry_hidden = j.at("geometry_hidden").get<std::vector<int>>();
  c.color_hidden = j.at("color_hidden").get<std::vector<int>>();
  c.feature_hidden = j.at("feature_hidden").get<std::vector<int>>();
  c.bottleneck = j.at("bottleneck").get<int>();
  c.reflection_features = j.at("reflection_features").get<int>();
  c.sh_degree = j.at("sh_degree").get<int>();
  c.reference_sigmas = j.at("reference_sigmas").get<std::vector<double>>();
  const std::string g = j.at("general").get<std::string>();
  if (g != "encoder" && g != "per_image") throw ArgumentError("unknown general conditioning '" + g + "'");
  c.general = g == "encoder" ? GeneralConditioning::Encoder : GeneralConditioning::PerImageEmbedding;
  c.appearance_codes = j.at("appearance_codes").get<int>();
  c.specular_conditioning = j.at("specular_conditioning").get<bool>();
  c.env_downsample = j.at("env_downsample").get<int>();
  const Json& e = j.at("encoder");
  c.encoder.input_size = e.at("input_size").get<int>();
  c.encoder.patch = e.at("patch").get<int>();
  c.encoder.layers = e.at("layers").get<int>();
  c.encoder.heads = e.at("heads").get<int>();
  c.encoder.width = e.at("width").get<int>();
  c.encoder.mlp_hidden = e.at("mlp_hidden").get<int>();
  c.validate();
  return c;
}

inline Json train_config_to_json(const TrainConfig& c) {
  return Json{{"batch_rays", c.batch_rays},
              {"steps", c.steps},
              {"learning_rate", c.learning_rate},
              {"final_lr_fraction", c.final_lr_fraction},
              {"photometric_weight", c.photometric_weight},
              {"normal_weight", c.normal_weight},
              {"orientation_weight", c.orientation_weight},
              {"seed", c.seed},
              {"chunk_rays", c.chunk_rays},
              {"regularized_rays", c.regularized_rays},
              {"log_every", c.log_every},
              {"eval_every", c.eval_every},
              {"eval_images", c.eval_images},
              {"render", render_config_to_json(c.render)}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  c.batch_rays = j.at("batch_rays").get<int>();
  c.steps = j.at("steps").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.final_lr_fraction = j.at("final_lr_fraction").get<double>();
  c.photometric_weight = j.at("photometric_weight").get<double>();
  c.normal_weight = j.at("normal_weight").get<double>();
  c.orientation_weight = j.at("orientation_weight").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.chunk_rays = j.at("chunk_rays").get<int>();
  c.regularized_rays = j.at("regularized_rays").get<int>();
  c.log_every = j.at("log_every").get<int>();
  c.eval_every = j.at("eval_every").get<int>();
  c.eval_images = j.at("eval_images").get<int>();
  c.render = render_config_from_json(j.at("render"));
  return c;
}

// -- checkpoints -------------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "RLFC1";

struct Checkpoint {
  FieldParams<double> params;
  TrainConfig train;
  RenderConfig render;  ///< default sampling for inference
  long step = 0;
  std::string rng_state;
  std::vector<std::string> env_ids;
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.append(reinterpret_cast<const char*>(b), sizeof(U));
}

struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (bytes.size() - pos < n) throw ParseError(std::string("truncated checkpoint while reading ") + what, pos);
  }
  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    unsigned char b[sizeof(U)];
    std::memcpy(b, bytes.data() + pos, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    U v;
    std::memcpy(&v, b, sizeof(U));
    pos += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  Json meta{{"field", field_config_to_json(ck.params.config)},
            {"train", train_config_to_json(ck.train)},
            {"render", render_config_to_json(ck.render)},
            {"step", ck.step},
            {"rng_state", ck.rng_state},
            {"env_ids", ck.env_ids}};
  const std::string m = meta.dump();
  std::string out(kCheckpointMagic, 5);
  detail::put_le<std::uint64_t>(out, m.size());
  out += m;
  const auto& slots = ck.params.layout.slots();
  detail::put_le<std::uint32_t>(out, std::uint32_t(slots.size()));
  for (const auto& s : slots) {
    detail::put_le<std::uint32_t>(out, std::uint32_t(s.name.size()));
    out += s.name;
    detail::put_le<std::uint32_t>(out, std::uint32_t(s.dims.size()));
    for (int d : s.dims) detail::put_le<std::uint64_t>(out, std::uint64_t(d));
    for (std::size_t i = 0; i < s.size; ++i) detail::put_le<double>(out, ck.params.values[s.offset + i]);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r{bytes};
  if (r.str(5, "magic") != std::string(kCheckpointMagic, 5)) throw ParseError("not a checkpoint (bad magic)", 0);
  const auto mlen = r.get<std::uint64_t>("metadata length");
  const std::size_t meta_at = r.pos;
  const std::string m = r.str(std::size_t(mlen), "metadata");
  Checkpoint ck;
  try {
    const Json meta = Json::parse(m);
    ck.params = FieldParams<double>(field_config_from_json(meta.at("field")));
    ck.train = train_config_from_json(meta.at("train"));
    ck.render = render_config_from_json(meta.at("render"));
    ck.step = meta.at("step").get<long>();
    ck.rng_state = meta.at("rng_state").get<std::string>();
    ck.env_ids = meta.at("env_ids").get<std::vector<std::string>>();
  } catch (const Json::parse_error& e) {
    throw ParseError(std::string("checkpoint metadata: ") + e.what(), meta_at + e.byte);
  } catch (const Json::exception& e) {
    throw ParseError(std::string("checkpoint metadata: ") + e.what(), meta_at);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  const auto& slots = ck.params.layout.slots();
  if (count != slots.size())
    throw ParseError("checkpoint has " + std::to_string(count) + " tensors, expected " + std::to_string(slots.size()),
                     r.pos);
  for (const auto& s : slots) {
    const std::size_t at = r.pos;
    const auto nlen = r.get<std::uint32_t>("tensor name length");
    const std::string name = r.str(nlen, "tensor name");
    if (name != s.name) throw ParseError("unexpected tensor '" + name + "' (expected '" + s.name + "')", at);
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank != s.dims.size()) throw ParseError("tensor '" + name + "' has the wrong rank", at);
    for (int d : s.dims)
      if (r.get<std::uint64_t>("tensor dims") != std::uint64_t(d))
        throw ParseError("tensor '" + name + "' has the wrong shape", at);
    r.need(s.size * 8, "tensor data");
    for (std::size_t i = 0; i < s.size; ++i) ck.params.values[s.offset + i] = r.get<double>("tensor data");
  }
  if (r.pos != bytes.size()) throw ParseError("trailing bytes after checkpoint", r.pos);
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

// -- loss --------------------------------------------------------------------------

template <class T>
struct LossTerms {
  T photometric{};
  T normal{};
  T orientation{};
  T total() const { return photometric + normal + orientation; }
};

struct LossWeights {
  double photometric = 1.0;
  double normal = 3e-4;
  double orientation = 0.1;
};

/// Loss over `rays` (one map):
///   photometric * sum|c - gt|^2 / (3 norm)
/// + normal * sum_r sum_i w_i |n_i - n'_i|^2 / reg_norm      (n' = -grad density, held fixed)
/// + orientation * sum_r sum_i w_i max(0, n_i . d)^2 / reg_norm
/// where the normal terms cover the first `reg_count` rays (all when < 0).
/// Adds parameter gradients into `grad` and the embedding gradient into
/// `dgeneral` (if non-null).
template <class T>
LossTerms<T> ray_loss(const FieldParams<T>& params, const PrefilterStack& stack, const EnvMap& background,
                      const MatX<T>& general, const std::vector<Ray>& rays, const std::vector<std::uint64_t>& keys,
                      const MatX<T>& gt, const LossWeights& wts, const RenderConfig& rcfg, double norm, T* grad,
                      MatX<T>* dgeneral, int reg_count = -1, double reg_norm = 0,
                      RayBatchTape<T>* tape_out = nullptr) {
  RayBatchTape<T> local;
  RayBatchTape<T>& tp = tape_out ? *tape_out : local;
  const MatX<T> c = render_rays(params, stack, background, general, rays, keys, rcfg, tp);
  LossTerms<T> out;
  const T inv = T(1.0 / norm);
  const MatX<T> diff = c - gt;
  out.photometric = T(wts.photometric) * diff.squaredNorm() * inv / T(3);
  const MatX<T> dcolor = T(wts.photometric) * T(2) * diff * inv / T(3);

  const int Np = rcfg.primary_samples;
  const Eigen::Index P = tp.pw.size();
  if (reg_count < 0) {
    reg_count = int(rays.size());
    reg_norm = norm;
  }
  // primary samples of the regularized rays form a leading block
  Eigen::Index PR = 0;
  while (PR < P && tp.active[std::size_t(PR / Np)] < reg_count) PR += Np;
  SampleGrads<T> sg;
  sg.weight = VecX<T>::Zero(P);
  sg.normal = MatX<T>::Zero(3, P);
  const bool regularize = (wts.normal > 0 || wts.orientation > 0) && PR > 0;
  const T rinv = regularize ? T(1.0 / reg_norm) : T(0);
  if (regularize) {
    MatX<T> target;
    if (wts.normal > 0) {
      GeometryCache<T> sub;
      if (PR == P) {
        target = -params.model.density_gradient(params.data(), tp.pgeo);
      } else {
        params.model.geometry_forward(params.data(), MatX<T>(tp.ppos.leftCols(PR)), sub);
        target = -params.model.density_gradient(params.data(), sub);
      }
      for (Eigen::Index j = 0; j < PR; ++j) {
        const T len = target.col(j).norm();
        target.col(j) = len > T(1e-8) ? Vec3<T>(target.col(j) / len) : Vec3<T>::UnitZ();
      }
    }
    for (Eigen::Index j = 0; j < PR; ++j) {
      const Vec3<T> d = tp.rays[std::size_t(tp.active[std::size_t(j / Np)])].dir.template cast<T>();
      const Vec3<T> n = tp.pgeo.normal.col(j);
      const T w = tp.pw(j);
      if (wts.normal > 0) {
        const Vec3<T> e = n - Vec3<T>(target.col(j));
        out.normal += T(wts.normal) * w * e.squaredNorm() * rinv;
        sg.weight(j) += T(wts.normal) * e.squaredNorm() * rinv;
        sg.normal.col(j) += T(wts.normal) * T(2) * w * e * rinv;
      }
      if (wts.orientation > 0) {
        const T dot = std::max(T(0), n.dot(d));
        out.orientation += T(wts.orientation) * w * dot * dot * rinv;
        sg.weight(j) += T(wts.orientation) * dot * dot * rinv;
        sg.normal.col(j) += T(wts.orientation) * T(2) * w * dot * d * rinv;
      }
    }
  }
  if (grad || dgeneral) {
    std::vector<T> scratch;
    T* g = grad;
    if (!g) {
      scratch.assign(params.values.size(), T(0));
      g = scratch.data();
    }
    render_rays_backward(params, tp, dcolor, g, dgeneral, regularize ? &sg : nullptr);
  }
  return out;
}

// -- training -----------------------------------------------------------------------

struct TrainLogEntry {
  int step = 0;
  double loss = 0;
  double lr = 0;
  double eval_psnr = std::numeric_limits<double>::quiet_NaN();
};

/// Per-map state computed once: prefilter stack, background and encoder input.
template <class T>
struct EnvContext {
  PrefilterStack stack;
  EnvMap background;
  MatX<T> patches;
};

template <class T>
EnvContext<T> make_env_context(const FieldConfig& cfg, const EnvMap& env) {
  const EnvMap used = downsample(env, cfg.env_downsample);
  return {prefilter(used, scale_sigmas(cfg.reference_sigmas, used.width())), used,
          encoder_input<T>(used, cfg.encoder)};
}

/// Field configuration for an ablation variant.
enum class Ablation { None, PerImageEmbedding, NoSpecular, QuarterEnv };

inline Ablation parse_ablation(const std::string& s) {
  if (s == "none") return Ablation::None;
  if (s == "per-image") return Ablation::PerImageEmbedding;
  if (s == "no-specular") return Ablation::NoSpecular;
  if (s == "quarter-env") return Ablation::QuarterEnv;
  throw ArgumentError("unknown ablation '" + s + "'");
}

inline FieldConfig apply_ablation(FieldConfig cfg, Ablation a, int train_images) {
  switch (a) {
    case Ablation::None: break;
    case Ablation::PerImageEmbedding:
      // learned codes stand in for every lighting input, as in GLO-style appearance codes
      cfg.general = GeneralConditioning::PerImageEmbedding;
      cfg.appearance_codes = train_images;
      cfg.specular_conditioning = false;
      break;
    case Ablation::NoSpecular: cfg.specular_conditioning = false; break;
    case Ablation::QuarterEnv: cfg.env_downsample = 4; break;
  }
  return cfg;
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogEntry> log;
};

inline std::string rng_state_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

template <class T>
double eval_psnr_subset(const FieldParams<T>& params, const Dataset& ds, const RenderConfig& rcfg, int count);

/// Optimizes a field on the "train" split. Every step draws one training
/// map uniformly, then `batch_rays` pixels uniformly from that map's images.
/// On a non-finite loss or gradient the last good checkpoint is written to
/// `failure_path` (if given) and NumericError is thrown.
inline TrainResult train(const Dataset& ds, const FieldConfig& field_cfg, const TrainConfig& cfg,
                         const std::function<void(const TrainLogEntry&)>& on_log = {},
                         const std::filesystem::path& failure_path = {}) {
  using T = float;
  cfg.validate();
  const std::vector<int> train_idx = ds.manifest.indices("train");
  std::vector<int> env_ids;
  for (int i : train_idx)
    if (std::find(env_ids.begin(), env_ids.end(), ds.manifest.images[std::size_t(i)].env) == env_ids.end())
      env_ids.push_back(ds.manifest.images[std::size_t(i)].env);
  std::sort(env_ids.begin(), env_ids.end());
  if (env_ids.size() < 2) throw ArgumentError("training needs at least 2 environment maps");

  FieldParams<T> params(field_cfg, hash_key(cfg.seed, 0xf1e1d));
  const FieldModel& model = params.model;
  const bool per_image = field_cfg.general == GeneralConditioning::PerImageEmbedding;
  if (per_image && field_cfg.appearance_codes != int(train_idx.size()))
    throw ArgumentError("per-image conditioning needs one code per training image");

  std::vector<EnvContext<T>> ctx;
  std::vector<std::vector<int>> images_of_env;
  for (int e : env_ids) {
    ctx.push_back(make_env_context<T>(field_cfg, ds.envs[std::size_t(e)]));
    std::vector<int> list;
    for (int i : train_idx)
      if (ds.manifest.images[std::size_t(i)].env == e) list.push_back(i);
    images_of_env.push_back(list);
  }
  std::vector<int> code_of_image(ds.manifest.images.size(), -1);
  for (std::size_t k = 0; k < train_idx.size(); ++k) code_of_image[std::size_t(train_idx[k])] = int(k);
  std::vector<Camera> cams;
  for (std::size_t i = 0; i < ds.manifest.images.size(); ++i) cams.push_back(ds.camera(int(i)));

  TrainResult result;
  std::mt19937_64 rng(cfg.seed);
  nn::Adam<T> adam;
  adam.reset(params.values.size());
  const std::size_t P = params.values.size();
  const int nchunks = (cfg.batch_rays + cfg.chunk_rays - 1) / cfg.chunk_rays;
  std::vector<Buffer<T>> chunk_grad(std::size_t(nchunks), Buffer<T>(P, T(0)));
  std::vector<MatX<T>> chunk_dgen(static_cast<std::size_t>(nchunks));
  std::vector<LossTerms<T>> chunk_loss(static_cast<std::size_t>(nchunks));
  Buffer<T> grad(P);
  Buffer<T> last_good = params.values;
  const LossWeights wts{cfg.photometric_weight, cfg.normal_weight, cfg.orientation_weight};

  auto make_checkpoint = [&](const Buffer<T>& values, long step) {
    Checkpoint ck;
    ck.params = FieldParams<double>(field_cfg);
    for (std::size_t i = 0; i < P; ++i) ck.params.values[i] = double(values[i]);
    ck.train = cfg;
    ck.render = RenderConfig{};
    ck.render.seed = cfg.seed;
    ck.step = step;
    ck.rng_state = rng_state_string(rng);
    for (int e : env_ids) ck.env_ids.push_back(ds.manifest.envmaps[std::size_t(e)].id);
    return ck;
  };

  double smoothed = std::numeric_limits<double>::quiet_NaN();
  for (int step = 0; step < cfg.steps; ++step) {
    const int ei = int(rng() % env_ids.size());
    const auto& imgs = images_of_env[std::size_t(ei)];
    std::vector<Ray> rays(static_cast<std::size_t>(cfg.batch_rays));
    std::vector<std::uint64_t> keys(static_cast<std::size_t>(cfg.batch_rays));
    MatX<T> gt(3, cfg.batch_rays);
    std::vector<int> ray_image(static_cast<std::size_t>(cfg.batch_rays));
    for (int r = 0; r < cfg.batch_rays; ++r) {
      const int im = imgs[std::size_t(rng() % imgs.size())];
      const Camera& cam = cams[std::size_t(im)];
      const int x = int(rng() % std::uint64_t(cam.width)), y = int(rng() % std::uint64_t(cam.height));
      rays[std::size_t(r)] = camera_ray(cam, x, y);
      keys[std::size_t(r)] = hash_key(cfg.seed, std::uint64_t(step), std::uint64_t(r));
      ray_image[std::size_t(r)] = im;
      for (int k = 0; k < 3; ++k) gt(k, r) = ds.images[std::size_t(im)].at(x, y, k);
    }
    // conditioning for this step
    EncoderCache<T> enc_cache;
    MatX<T> general;
    if (per_image) {
      general.resize(kGeneralEmbeddingDim, cfg.batch_rays);
      Eigen::Map<const MatX<T>> codes(params.data() + model.codes_offset(), kGeneralEmbeddingDim,
                                      field_cfg.appearance_codes);
      for (int r = 0; r < cfg.batch_rays; ++r)
        general.col(r) = codes.col(code_of_image[std::size_t(ray_image[std::size_t(r)])]);
    } else {
      general = model.encoder().forward(params.data(), ctx[std::size_t(ei)].patches, enc_cache);
    }

    parallel_for(std::size_t(nchunks), [&](std::size_t ci) {
      const int r0 = int(ci) * cfg.chunk_rays, r1 = std::min(cfg.batch_rays, r0 + cfg.chunk_rays);
      std::vector<Ray> cr(rays.begin() + r0, rays.begin() + r1);
      std::vector<std::uint64_t> ck(keys.begin() + r0, keys.begin() + r1);
      const MatX<T> cg = gt.middleCols(r0, r1 - r0);
      const MatX<T> cgen = per_image ? MatX<T>(general.middleCols(r0, r1 - r0)) : general;
      auto& g = chunk_grad[ci];
      std::fill(g.begin(), g.end(), T(0));
      const int reg = std::clamp(std::min(cfg.regularized_rays, cfg.batch_rays) - r0, 0, r1 - r0);
      chunk_loss[ci] = ray_loss(params, ctx[std::size_t(ei)].stack, ctx[std::size_t(ei)].background, cgen, cr, ck,
                                cg, wts, cfg.render, double(cfg.batch_rays), g.data(), &chunk_dgen[ci], reg,
                                double(std::min(cfg.regularized_rays, cfg.batch_rays)));
    });

    std::fill(grad.begin(), grad.end(), T(0));
    double loss = 0;
    MatX<T> dgen = MatX<T>::Zero(kGeneralEmbeddingDim, per_image ? cfg.batch_rays : 1);
    for (int ci = 0; ci < nchunks; ++ci) {
      const auto& g = chunk_grad[std::size_t(ci)];
      for (std::size_t i = 0; i < P; ++i) grad[i] += g[i];
      loss += double(chunk_loss[std::size_t(ci)].total());
      const int r0 = ci * cfg.chunk_rays;
      if (per_image)
        dgen.middleCols(r0, chunk_dgen[std::size_t(ci)].cols()) = chunk_dgen[std::size_t(ci)];
      else
        dgen += chunk_dgen[std::size_t(ci)];
    }
    if (per_image) {
      for (int r = 0; r < cfg.batch_rays; ++r) {
        T* gc = grad.data() + model.codes_offset() +
                std::size_t(code_of_image[std::size_t(ray_image[std::size_t(r)])]) * kGeneralEmbeddingDim;
        for (int k = 0; k < kGeneralEmbeddingDim; ++k) gc[k] += dgen(k, r);
      }
    } else {
      model.encoder().backward(params.data(), enc_cache, VecX<T>(dgen.col(0)), grad.data());
    }

    const bool finite = std::isfinite(loss) &&
                        std::all_of(grad.begin(), grad.end(), [](T v) { return std::isfinite(double(v)); });
    if (!finite) {
      if (!failure_path.empty()) save_checkpoint(failure_path, make_checkpoint(last_good, step));
      std::ostringstream msg;
      msg << "non-finite loss or gradient at step " << step << " (map " << ds.manifest.envmaps[std::size_t(env_ids[std::size_t(ei)])].id
          << ", rays from images";
      for (int r = 0; r < std::min(cfg.batch_rays, 8); ++r) msg << " " << ray_image[std::size_t(r)];
      msg << " ...)";
      throw NumericError(msg.str());
    }
    last_good = params.values;
    const double lr = cfg.lr_at(step);
    adam.update(params.values, grad, lr);
    smoothed = std::isnan(smoothed) ? loss : 0.95 * smoothed + 0.05 * loss;

    const bool log_now = cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps);
    const bool eval_now = cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps);
    if (log_now || eval_now) {
      TrainLogEntry e{step, loss, lr};
      if (eval_now) e.eval_psnr = eval_psnr_subset(params, ds, cfg.render, cfg.eval_images);
      result.log.push_back(e);
      if (on_log) on_log(e);
    }
  }
  result.checkpoint = make_checkpoint(params.values, cfg.steps);
  return result;
}

// -- evaluation ----------------------------------------------------------------------

enum class ScaleMode { PerImage, Global };

struct EvalRow {
  std::string image_id;
  std::string env_id;
  double psnr = 0;
  double ssim = 0;
};

struct EvalResult {
  std::vector<EvalRow> rows;
  std::vector<int> image_indices;
  std::vector<Image> predictions;  ///< linear, unscaled
  std::vector<std::vector<double>> scales;
  double mean_psnr = 0, std_psnr = 0, mean_ssim = 0, std_ssim = 0;
};

/// Renders every image of `split` feed-forward under its map and scores it
/// after channel-wise scale alignment.
template <class T>
EvalResult evaluate(const FieldParams<T>& params, const Dataset& ds, const std::string& split, ScaleMode mode,
                    const RenderConfig& rcfg, int limit = -1) {
  std::vector<int> idx = ds.manifest.indices(split);
  if (limit >= 0 && int(idx.size()) > limit) idx.resize(std::size_t(limit));
  if (idx.empty()) throw ArgumentError("split '" + split + "' has no images");
  EvalResult res;
  res.image_indices = idx;
  std::map<int, RenderContext<T>> ctx;
  for (int i : idx) {
    const int e = ds.manifest.images[std::size_t(i)].env;
    if (!ctx.count(e)) ctx.emplace(e, make_render_context(params, ds.envs[std::size_t(e)]));
    res.predictions.push_back(render_image(params, ctx.at(e), ds.camera(i), rcfg, std::uint64_t(i)));
  }
  res.scales.resize(idx.size());
  if (mode == ScaleMode::PerImage) {
    for (std::size_t k = 0; k < idx.size(); ++k)
      res.scales[k] = channel_scale(res.predictions[k], ds.images[std::size_t(idx[k])]);
  } else {
    std::map<int, std::pair<std::vector<const Image*>, std::vector<const Image*>>> groups;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto& g = groups[ds.manifest.images[std::size_t(idx[k])].env];
      g.first.push_back(&res.predictions[k]);
      g.second.push_back(&ds.images[std::size_t(idx[k])]);
    }
    std::map<int, std::vector<double>> scale;
    for (const auto& [e, g] : groups) scale[e] = channel_scale(g.first, g.second);
    for (std::size_t k = 0; k < idx.size(); ++k) res.scales[k] = scale[ds.manifest.images[std::size_t(idx[k])].env];
  }
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& entry = ds.manifest.images[std::size_t(idx[k])];
    const ImageScore s = score_aligned(res.predictions[k], ds.images[std::size_t(idx[k])], res.scales[k]);
    res.rows.push_back({std::filesystem::path(entry.path).stem().string(), ds.manifest.envmaps[std::size_t(entry.env)].id,
                        s.psnr, s.ssim});
  }
  const double n = double(res.rows.size());
  for (const auto& r : res.rows) {
    res.mean_psnr += r.psnr / n;
    res.mean_ssim += r.ssim / n;
  }
  for (const auto& r : res.rows) {
    res.std_psnr += (r.psnr - res.mean_psnr) * (r.psnr - res.mean_psnr) / n;
    res.std_ssim += (r.ssim - res.mean_ssim) * (r.ssim - res.mean_ssim) / n;
  }
  res.std_psnr = std::sqrt(res.std_psnr);
  res.std_ssim = std::sqrt(res.std_ssim);
  return res;
}

template <class T>
double eval_psnr_subset(const FieldParams<T>& params, const Dataset& ds, const RenderConfig& rcfg, int count) {
  if (ds.manifest.indices("eval").empty()) return std::numeric_limits<double>::quiet_NaN();
  return evaluate(params, ds, "eval", ScaleMode::PerImage, rcfg, count).mean_psnr;
}

inline std::string eval_csv(const EvalResult& r) {
  std::ostringstream os;
  os << "image_id,env_id,psnr,ssim\n";
  os.setf(std::ios::fixed);
  os.precision(6);
  for (const auto& row : r.rows) os << row.image_id << "," << row.env_id << "," << row.psnr << "," << row.ssim << "\n";
  return os.str();
}

inline Json eval_summary(const EvalResult& r, const std::string& split, ScaleMode mode) {
  Json rows = Json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"image_id", row.image_id}, {"env_id", row.env_id}, {"psnr", row.psnr}, {"ssim", row.ssim}});
  return Json{{"split", split},
              {"scale", mode == ScaleMode::PerImage ? "per-image" : "global"},
              {"count", r.rows.size()},
              {"psnr_mean", r.mean_psnr},
              {"psnr_std", r.std_psnr},
              {"ssim_mean", r.mean_ssim},
              {"ssim_std", r.std_ssim},
              {"images", rows}};
}

}  // namespace relight
