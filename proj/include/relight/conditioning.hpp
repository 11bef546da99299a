#pragma once

#include "relight/core.hpp"
#include "relight/envmap.hpp"
#include "relight/nn.hpp"

#include <string>
#include <vector>

namespace relight {

inline constexpr int kGeneralEmbeddingDim = 128;

/// Illumination-wide conditioning vector (length kGeneralEmbeddingDim).
template <class T>
using GeneralEmbedding = VecX<T>;

// ---------------------------------------------------------------------------
// Specular conditioning

/// Mirror `view_dir` (camera toward surface) about `normal`. A degenerate
/// result falls back to the normal.
template <class S>
Vec3<S> reflect(const Vec3<S>& view_dir, const Vec3<S>& normal) {
  using std::sqrt;
  const Vec3<S> r = view_dir - S(2.0) * view_dir.dot(normal) * normal;
  const S len2 = r.squaredNorm();
  if (value_of(len2) < 1e-24) return normal;
  return r / sqrt(len2);
}

/// Point sample of the base map followed by one sample per blurred level.
template <class S>
std::vector<Vec3<S>> encode_specular(const PrefilterStack& stack, const Vec3<S>& omega_r) {
  std::vector<Vec3<S>> out;
  out.reserve(stack.level_count());
  for (std::size_t i = 0; i < stack.level_count(); ++i) out.push_back(sample<S>(stack.level(i), omega_r));
  return out;
}

// ---------------------------------------------------------------------------
// General conditioning: a small vision transformer over the map's LDR and
// log-HDR encodings, mean-pooled and projected to 128 values.

struct EncoderConfig {
  int input_size = 32;  ///< square input resolution after area resampling
  int patch = 8;
  int layers = 4;
  int heads = 4;
  int width = 64;
  int mlp_hidden = 128;

  int tokens() const { return (input_size / patch) * (input_size / patch); }
  int patch_dim() const { return 6 * patch * patch; }

  void validate() const {
    if (input_size <= 0 || patch <= 0 || input_size % patch != 0)
      throw ArgumentError("encoder input size must be a positive multiple of the patch size");
    if (layers < 0 || heads <= 0 || width % heads != 0)
      throw ArgumentError("encoder width must be divisible by the head count");
  }
};

/// 6-channel (LDR sRGB, normalized log-HDR) encoder input, already
/// patchified: one column per token, rows ordered (channel, row, col).
template <class T>
MatX<T> encoder_input(const EnvMap& env, const EncoderConfig& cfg) {
  const Image small = resize_area(env.to_image(), cfg.input_size, cfg.input_size);
  // same encodings as tonemap_ldr / tonemap_hdr_log, applied to the square raster
  std::vector<float> ldr(small.data.size()), hdr(small.data.size());
  double mn = std::numeric_limits<double>::infinity(), mx = -mn;
  for (std::size_t i = 0; i < small.data.size(); ++i) {
    ldr[i] = float(srgb_encode(std::clamp(double(small.data[i]), 0.0, 1.0)));
    const double y = std::log1p(double(small.data[i]));
    mn = std::min(mn, y);
    mx = std::max(mx, y);
  }
  for (std::size_t i = 0; i < small.data.size(); ++i)
    hdr[i] = mx > mn ? float((std::log1p(double(small.data[i])) - mn) / (mx - mn)) : 0.f;

  const int p = cfg.patch, per_row = cfg.input_size / p, s = cfg.input_size;
  MatX<T> out(cfg.patch_dim(), cfg.tokens());
  for (int t = 0; t < cfg.tokens(); ++t) {
    const int px0 = (t % per_row) * p, py0 = (t / per_row) * p;
    for (int c = 0; c < 6; ++c)
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x) {
          const std::size_t src = (std::size_t(py0 + y) * s + (px0 + x)) * 3 + std::size_t(c % 3);
          out((c * p + y) * p + x, t) = T(c < 3 ? ldr[src] : hdr[src]);
        }
  }
  return out;
}

namespace detail {

struct LayerNormSpec {
  std::size_t gamma = 0, beta = 0;
  int dim = 0;
};

template <class T>
struct LayerNormCache {
  MatX<T> xhat;
  VecX<T> rstd;
};

template <class T>
MatX<T> layer_norm(const LayerNormSpec& s, const T* p, const MatX<T>& x, LayerNormCache<T>& c) {
  const T eps = T(1e-5);
  const Eigen::Index n = x.cols();
  c.xhat.resize(x.rows(), n);
  c.rstd.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const T mu = x.col(j).mean();
    const T var = (x.col(j).array() - mu).square().mean();
    c.rstd(j) = T(1) / std::sqrt(var + eps);
    c.xhat.col(j) = (x.col(j).array() - mu) * c.rstd(j);
  }
  Eigen::Map<const VecX<T>> g(p + s.gamma, s.dim), b(p + s.beta, s.dim);
  MatX<T> y = (c.xhat.array().colwise() * g.array()).matrix();
  y.colwise() += b;
  return y;
}

template <class T>
MatX<T> layer_norm_backward(const LayerNormSpec& s, const T* p, const LayerNormCache<T>& c, const MatX<T>& dy,
                            T* grad) {
  Eigen::Map<const VecX<T>> g(p + s.gamma, s.dim);
  if (grad) {
    Eigen::Map<VecX<T>> gg(grad + s.gamma, s.dim), gb(grad + s.beta, s.dim);
    gg += (dy.array() * c.xhat.array()).rowwise().sum().matrix();
    gb += dy.rowwise().sum();
  }
  const MatX<T> dxhat = (dy.array().colwise() * g.array()).matrix();
  MatX<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index j = 0; j < dy.cols(); ++j) {
    const T m1 = dxhat.col(j).mean();
    const T m2 = (dxhat.col(j).array() * c.xhat.col(j).array()).mean();
    dx.col(j) = c.rstd(j) * (dxhat.col(j).array() - m1 - c.xhat.col(j).array() * m2);
  }
  return dx;
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * kPi<T>);
  return cdf + x * pdf;
}

struct EncoderBlock {
  LayerNormSpec ln1, ln2;
  nn::Dense qkv, proj, fc1, fc2;
};

}  // namespace detail

template <class T>
struct EncoderCache {
  struct Block {
    detail::LayerNormCache<T> ln1, ln2;
    MatX<T> h1, qkv, attn_out, h2, m1, g;
    std::vector<MatX<T>> probs;  // per head, tokens x tokens (query rows)
  };
  MatX<T> patches;
  std::vector<Block> blocks;
  detail::LayerNormCache<T> ln_final;
  VecX<T> pooled;
};

/// Parameter offsets of the general-conditioning encoder inside a layout.
class GeneralEncoder {
 public:
  GeneralEncoder() = default;

  GeneralEncoder(nn::ParamLayout& layout, const EncoderConfig& cfg, const std::string& prefix = "encoder")
      : cfg_(cfg) {
    cfg.validate();
    auto ln = [&](const std::string& name) {
      detail::LayerNormSpec s;
      s.dim = cfg.width;
      s.gamma = layout.add(prefix + "." + name + ".gamma", {cfg.width});
      s.beta = layout.add(prefix + "." + name + ".beta", {cfg.width});
      return s;
    };
    patch_embed_ = nn::make_dense(layout, prefix + ".patch_embed", cfg.patch_dim(), cfg.width);
    pos_ = layout.add(prefix + ".pos_embed", {cfg.width, cfg.tokens()});
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string b = "block" + std::to_string(l);
      detail::EncoderBlock blk;
      blk.ln1 = ln(b + ".ln1");
      blk.qkv = nn::make_dense(layout, prefix + "." + b + ".qkv", cfg.width, 3 * cfg.width);
      blk.proj = nn::make_dense(layout, prefix + "." + b + ".proj", cfg.width, cfg.width);
      blk.ln2 = ln(b + ".ln2");
      blk.fc1 = nn::make_dense(layout, prefix + "." + b + ".fc1", cfg.width, cfg.mlp_hidden);
      blk.fc2 = nn::make_dense(layout, prefix + "." + b + ".fc2", cfg.mlp_hidden, cfg.width);
      blocks_.push_back(blk);
    }
    ln_final_ = ln("ln_final");
    head_ = layout.add(prefix + ".head", {kGeneralEmbeddingDim, cfg.width});
    begin_ = patch_embed_.w;
    end_ = head_ + std::size_t(kGeneralEmbeddingDim) * cfg.width;
  }

  const EncoderConfig& config() const { return cfg_; }
  /// Offset of the output projection W (128 x width).
  std::size_t head_offset() const { return head_; }
  std::size_t param_begin() const { return begin_; }
  std::size_t param_end() const { return end_; }

  template <class T>
  void initialize(T* p, std::uint64_t seed) const {
    nn::init_dense(patch_embed_, p, seed);
    for (int i = 0; i < cfg_.width * cfg_.tokens(); ++i)
      p[pos_ + std::size_t(i)] = T(0.1 * (2.0 * uniform_from(hash_key(seed, pos_ + std::size_t(i))) - 1.0));
    auto ln_init = [&](const detail::LayerNormSpec& s) {
      for (int i = 0; i < s.dim; ++i) {
        p[s.gamma + std::size_t(i)] = T(1);
        p[s.beta + std::size_t(i)] = T(0);
      }
    };
    for (const auto& b : blocks_) {
      ln_init(b.ln1);
      ln_init(b.ln2);
      nn::init_dense(b.qkv, p, seed);
      nn::init_dense(b.proj, p, seed, 0.5);
      nn::init_dense(b.fc1, p, seed);
      nn::init_dense(b.fc2, p, seed, 0.5);
    }
    ln_init(ln_final_);
    const double limit = std::sqrt(6.0 / cfg_.width);
    for (std::size_t i = 0; i < std::size_t(kGeneralEmbeddingDim) * cfg_.width; ++i)
      p[head_ + i] = T((2.0 * uniform_from(hash_key(seed, head_ + i)) - 1.0) * limit);
  }

  template <class T>
  GeneralEmbedding<T> forward(const T* p, const MatX<T>& patches, EncoderCache<T>& c) const {
    for (std::size_t i = begin_; i < end_; ++i)
      if (!std::isfinite(double(p[i]))) throw NumericError("encoder parameter is not finite");
    const int w = cfg_.width, n = cfg_.tokens(), dh = w / cfg_.heads;
    const T scale = T(1.0 / std::sqrt(double(dh)));
    c.patches = patches;
    MatX<T> x;
    patch_embed_.forward(p, patches, x);
    x += Eigen::Map<const MatX<T>>(p + pos_, w, n);
    c.blocks.resize(blocks_.size());
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const auto& b = blocks_[l];
      auto& bc = c.blocks[l];
      bc.h1 = detail::layer_norm(b.ln1, p, x, bc.ln1);
      b.qkv.forward(p, bc.h1, bc.qkv);
      bc.attn_out.resize(w, n);
      bc.probs.resize(std::size_t(cfg_.heads));
      for (int h = 0; h < cfg_.heads; ++h) {
        const auto q = bc.qkv.block(h * dh, 0, dh, n);
        const auto k = bc.qkv.block(w + h * dh, 0, dh, n);
        const auto v = bc.qkv.block(2 * w + h * dh, 0, dh, n);
        MatX<T> s = (q.transpose() * k) * scale;
        for (Eigen::Index i = 0; i < n; ++i) {
          const T mx = s.row(i).maxCoeff();
          s.row(i) = (s.row(i).array() - mx).exp();
          s.row(i) /= s.row(i).sum();
        }
        bc.attn_out.block(h * dh, 0, dh, n).noalias() = v * s.transpose();
        bc.probs[std::size_t(h)] = std::move(s);
      }
      MatX<T> a;
      b.proj.forward(p, bc.attn_out, a);
      x += a;
      bc.h2 = detail::layer_norm(b.ln2, p, x, bc.ln2);
      b.fc1.forward(p, bc.h2, bc.m1);
      bc.g = bc.m1.unaryExpr([](T v) { return detail::gelu(v); });
      MatX<T> m2;
      b.fc2.forward(p, bc.g, m2);
      x += m2;
    }
    const MatX<T> z = detail::layer_norm(ln_final_, p, x, c.ln_final);
    c.pooled = z.rowwise().mean();
    return Eigen::Map<const MatX<T>>(p + head_, kGeneralEmbeddingDim, w) * c.pooled;
  }

  template <class T>
  GeneralEmbedding<T> forward(const T* p, const MatX<T>& patches) const {
    EncoderCache<T> c;
    return forward(p, patches, c);
  }

  /// Accumulates d(loss)/d(params) given d(loss)/d(embedding).
  template <class T>
  void backward(const T* p, const EncoderCache<T>& c, const GeneralEmbedding<T>& d_out, T* grad) const {
    const int w = cfg_.width, n = cfg_.tokens(), dh = w / cfg_.heads;
    const T scale = T(1.0 / std::sqrt(double(dh)));
    Eigen::Map<MatX<T>>(grad + head_, kGeneralEmbeddingDim, w).noalias() += d_out * c.pooled.transpose();
    const VecX<T> dpool = Eigen::Map<const MatX<T>>(p + head_, kGeneralEmbeddingDim, w).transpose() * d_out;
    MatX<T> dz = (dpool / T(n)).replicate(1, n);
    MatX<T> dx = detail::layer_norm_backward(ln_final_, p, c.ln_final, dz, grad);
    for (std::size_t l = blocks_.size(); l-- > 0;) {
      const auto& b = blocks_[l];
      const auto& bc = c.blocks[l];
      // MLP branch
      MatX<T> dg;
      b.fc2.backward(p, bc.g, dx, grad, &dg);
      const MatX<T> dm1 = dg.cwiseProduct(bc.m1.unaryExpr([](T v) { return detail::gelu_grad(v); }));
      MatX<T> dh2;
      b.fc1.backward(p, bc.h2, dm1, grad, &dh2);
      dx += detail::layer_norm_backward(b.ln2, p, bc.ln2, dh2, grad);
      // attention branch
      MatX<T> dattn;
      b.proj.backward(p, bc.attn_out, dx, grad, &dattn);
      MatX<T> dqkv = MatX<T>::Zero(3 * w, n);
      for (int h = 0; h < cfg_.heads; ++h) {
        const auto q = bc.qkv.block(h * dh, 0, dh, n);
        const auto k = bc.qkv.block(w + h * dh, 0, dh, n);
        const auto v = bc.qkv.block(2 * w + h * dh, 0, dh, n);
        const MatX<T>& prob = bc.probs[std::size_t(h)];
        const auto dout = dattn.block(h * dh, 0, dh, n);
        dqkv.block(2 * w + h * dh, 0, dh, n).noalias() = dout * prob;
        MatX<T> dprob = dout.transpose() * v;
        const VecX<T> rs = (dprob.array() * prob.array()).rowwise().sum();
        const MatX<T> ds = (prob.array() * (dprob.array().colwise() - rs.array())).matrix() * scale;
        dqkv.block(h * dh, 0, dh, n).noalias() = k * ds.transpose();
        dqkv.block(w + h * dh, 0, dh, n).noalias() = q * ds;
      }
      MatX<T> dh1;
      b.qkv.backward(p, bc.h1, dqkv, grad, &dh1);
      dx += detail::layer_norm_backward(b.ln1, p, bc.ln1, dh1, grad);
    }
    Eigen::Map<MatX<T>>(grad + pos_, w, n) += dx;
    patch_embed_.backward<T>(p, c.patches, dx, grad, nullptr);
  }

 private:
  EncoderConfig cfg_;
  nn::Dense patch_embed_;
  std::size_t pos_ = 0;
  std::vector<detail::EncoderBlock> blocks_;
  detail::LayerNormSpec ln_final_;
  std::size_t head_ = 0;
  std::size_t begin_ = 0, end_ = 0;
};

/// Standalone encoder parameters (the field embeds the same tensors).
template <class T>
struct EncoderParams {
  nn::ParamLayout layout;
  GeneralEncoder encoder;
  Buffer<T> values;

  explicit EncoderParams(const EncoderConfig& cfg = {}, std::uint64_t seed = 1)
      : encoder(layout, cfg) {
    values.assign(layout.size(), T(0));
    encoder.initialize(values.data(), seed);
  }
  std::size_t parameter_count() const { return layout.size(); }
};

template <class T>
GeneralEmbedding<T> encode_general(const EncoderParams<T>& params, const EnvMap& env) {
  return params.encoder.forward(params.values.data(), encoder_input<T>(env, params.encoder.config()));
}

}  // namespace relight
