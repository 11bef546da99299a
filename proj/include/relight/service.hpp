#pragma once

#include "relight/renderer.hpp"
#include "relight/training.hpp"

#include <charconv>
#include <list>
#include <map>
#include <memory>
#include <mutex>

namespace relight {

class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// One /render query: orbit camera around the origin plus an env rotation
/// about world up.
struct FrameRequest {
  double yaw = 30.0;
  double pitch = 25.0;
  double dist = 3.0;
  std::string env;
  double rot = 0.0;
  int size = 64;
};

inline constexpr double kRotationBucketDeg = 5.0;
inline constexpr int kMaxFrameSize = 512;

inline int rotation_bucket(double degrees) {
  const int n = int(std::lround(360.0 / kRotationBucketDeg));
  long b = std::lround(degrees / kRotationBucketDeg) % n;
  if (b < 0) b += n;
  return int(b);
}

namespace detail {

inline double parse_number(const std::string& key, const std::string& text) {
  double v = 0;
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end || !std::isfinite(v))
    throw ArgumentError("parameter '" + key + "' is not a number: '" + text + "'");
  return v;
}

}  // namespace detail

/// Validates query parameters; unknown keys are rejected.
inline FrameRequest parse_frame_request(const std::map<std::string, std::string>& query) {
  FrameRequest r;
  for (const auto& [k, v] : query) {
    if (k == "yaw") r.yaw = detail::parse_number(k, v);
    else if (k == "pitch") r.pitch = detail::parse_number(k, v);
    else if (k == "dist") r.dist = detail::parse_number(k, v);
    else if (k == "rot") r.rot = detail::parse_number(k, v);
    else if (k == "env") r.env = v;
    else if (k == "size") {
      const double s = detail::parse_number(k, v);
      if (s != std::floor(s)) throw ArgumentError("parameter 'size' must be an integer");
      if (s < 1 || s > kMaxFrameSize) throw ArgumentError("parameter 'size' must be in [1, 512]");
      r.size = int(s);
    } else {
      throw ArgumentError("unknown parameter '" + k + "'");
    }
  }
  if (!(r.pitch > -89.0 && r.pitch < 89.0)) throw ArgumentError("parameter 'pitch' must be in (-89, 89)");
  if (!(r.dist > 0.0 && r.dist <= 100.0)) throw ArgumentError("parameter 'dist' must be in (0, 100]");
  return r;
}

/// Feed-forward frame renderer over a fixed checkpoint and a directory of
/// maps. Prefiltered contexts are cached per (env id, rotation bucket).
class FrameService {
 public:
  static constexpr std::size_t kCacheCapacity = 32;

  FrameService(const Checkpoint& ck, std::vector<EnvMap> envs)
      : params_(ck.params.cast<float>()), render_(ck.render), envs_(std::move(envs)) {
    if (envs_.empty()) throw ArgumentError("no environment maps to serve");
    for (std::size_t i = 0; i < envs_.size(); ++i) {
      if (envs_[i].id().empty()) throw ArgumentError("environment map without id");
      if (!index_.emplace(envs_[i].id(), i).second) throw ArgumentError("duplicate map id '" + envs_[i].id() + "'");
    }
  }

  static std::vector<EnvMap> load_dir(const std::filesystem::path& dir) {
    std::vector<EnvMap> out;
    for (const auto& p : list_envmap_files(dir)) out.push_back(load_envmap(p));
    return out;
  }

  const std::vector<EnvMap>& envs() const { return envs_; }

  const EnvMap& env(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw NotFoundError("unknown environment map '" + id + "'");
    return envs_[it->second];
  }

  /// Linear-RGB frame.
  Image render(const FrameRequest& req) {
    const auto ctx = context(req.env.empty() ? envs_.front().id() : req.env, rotation_bucket(req.rot));
    const Camera cam = Camera::orbit(req.yaw, req.pitch, req.dist, req.size, req.size, 1.6 * req.size);
    return render_image(params_, *ctx, cam, render_);
  }

  std::string render_png(const FrameRequest& req) { return encode_png(to_ldr(render(req))); }

  std::string preview_png(const std::string& id) const { return encode_png(tonemap_ldr(env(id)).to_image()); }

  std::size_t cache_size() const {
    std::lock_guard lock(mutex_);
    return lru_.size();
  }
  std::size_t cache_misses() const {
    std::lock_guard lock(mutex_);
    return misses_;
  }

 private:
  using Key = std::pair<std::string, int>;
  using Context = RenderContext<float>;

  std::shared_ptr<const Context> context(const std::string& id, int bucket) {
    const EnvMap& base = env(id);
    std::lock_guard lock(mutex_);
    const Key key{id, bucket};
    if (auto it = cache_.find(key); it != cache_.end()) {
      lru_.splice(lru_.begin(), lru_, it->second.second);
      return it->second.first;
    }
    ++misses_;
    const EnvMap rotated =
        bucket == 0 ? base : rotate(base, rotation_z(bucket * kRotationBucketDeg * kPi<double> / 180.0));
    auto ctx = std::make_shared<const Context>(make_render_context(params_, rotated));
    lru_.push_front(key);
    cache_.emplace(key, std::make_pair(ctx, lru_.begin()));
    if (lru_.size() > kCacheCapacity) {
      cache_.erase(lru_.back());
      lru_.pop_back();
    }
    return ctx;
  }

  FieldParams<float> params_;
  RenderConfig render_;
  std::vector<EnvMap> envs_;
  std::map<std::string, std::size_t> index_;
  mutable std::mutex mutex_;
  std::list<Key> lru_;
  std::map<Key, std::pair<std::shared_ptr<const Context>, std::list<Key>::iterator>> cache_;
  std::size_t misses_ = 0;
};

}  // namespace relight
