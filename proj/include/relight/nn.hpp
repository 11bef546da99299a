#pragma once

#include "relight/core.hpp"

#include <map>
#include <string>
#include <vector>

namespace relight::nn {

/// Named tensor inside a flat parameter vector.
struct TensorSlot {
  std::string name;
  std::vector<int> dims;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Assigns every named tensor a contiguous range of one flat buffer, so that
/// parameters, gradients and optimizer moments share a single indexing.
class ParamLayout {
 public:
  std::size_t add(const std::string& name, std::vector<int> dims) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter tensor '" + name + "'");
    std::size_t n = 1;
    for (int d : dims) n *= std::size_t(d);
    index_[name] = slots_.size();
    slots_.push_back({name, std::move(dims), total_, n});
    total_ += n;
    return slots_.back().offset;
  }

  const std::vector<TensorSlot>& slots() const { return slots_; }
  std::size_t size() const { return total_; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const TensorSlot& find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter tensor '" + name + "'");
    return slots_[it->second];
  }

 private:
  std::vector<TensorSlot> slots_;
  std::map<std::string, std::size_t> index_;
  std::size_t total_ = 0;
};

/// Fully connected layer y = W x + b over column batches.
struct Dense {
  int in = 0;
  int out = 0;
  std::size_t w = 0;  ///< offset of W (out x in, column-major)
  std::size_t b = 0;  ///< offset of b (out)

  template <class T>
  Eigen::Map<const MatX<T>> weight(const T* p) const {
    return {p + w, out, in};
  }
  template <class T>
  Eigen::Map<const VecX<T>> bias(const T* p) const {
    return {p + b, out};
  }

  template <class T>
  void forward(const T* p, const MatX<T>& x, MatX<T>& y) const {
    y.noalias() = weight(p) * x;
    y.colwise() += bias(p);
  }

  /// Accumulates parameter gradients into `grad` (if non-null) and writes the
  /// input gradient into `dx` (if non-null).
  template <class T>
  void backward(const T* p, const MatX<T>& x, const MatX<T>& dy, T* grad, MatX<T>* dx) const {
    if (grad) {
      Eigen::Map<MatX<T>> gw(grad + w, out, in);
      Eigen::Map<VecX<T>> gb(grad + b, out);
      gw.noalias() += dy * x.transpose();
      gb.noalias() += dy * VecX<T>::Ones(dy.cols());
    }
    if (dx) dx->noalias() = weight(p).transpose() * dy;
  }
};

inline Dense make_dense(ParamLayout& layout, const std::string& name, int in, int out) {
  Dense d;
  d.in = in;
  d.out = out;
  d.w = layout.add(name + ".weight", {out, in});
  d.b = layout.add(name + ".bias", {out});
  return d;
}

template <class T>
struct MlpCache {
  std::vector<MatX<T>> inputs;  ///< input of each layer (post-ReLU for hidden ones)
  MatX<T> output;
};

/// ReLU MLP with a linear output layer.
struct Mlp {
  std::vector<Dense> layers;

  int in() const { return layers.front().in; }
  int out() const { return layers.back().out; }

  template <class T>
  void forward(const T* p, const MatX<T>& x, MlpCache<T>& cache) const {
    cache.inputs.resize(layers.size());
    cache.inputs[0] = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      MatX<T>& y = (l + 1 < layers.size()) ? cache.inputs[l + 1] : cache.output;
      layers[l].forward(p, cache.inputs[l], y);
      if (l + 1 < layers.size()) y = y.cwiseMax(T(0));
    }
  }

  template <class T>
  MatX<T> forward(const T* p, const MatX<T>& x) const {
    MlpCache<T> c;
    forward(p, x, c);
    return std::move(c.output);
  }

  template <class T>
  void backward(const T* p, const MlpCache<T>& cache, const MatX<T>& dy, T* grad, MatX<T>* dx) const {
    MatX<T> g = dy, gin;
    for (std::size_t l = layers.size(); l-- > 0;) {
      const bool need_in = l > 0 || dx != nullptr;
      layers[l].backward(p, cache.inputs[l], g, grad, need_in ? &gin : nullptr);
      if (l == 0) break;
      g = (cache.inputs[l].array() > T(0)).select(gin, T(0));
    }
    if (dx) *dx = std::move(gin);
  }
};

/// in -> hidden... -> out
inline Mlp make_mlp(ParamLayout& layout, const std::string& name, int in, const std::vector<int>& hidden,
                    int out) {
  Mlp m;
  int prev = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    m.layers.push_back(make_dense(layout, name + "." + std::to_string(i), prev, hidden[i]));
    prev = hidden[i];
  }
  m.layers.push_back(make_dense(layout, name + "." + std::to_string(hidden.size()), prev, out));
  return m;
}

/// He-uniform weights and zero biases, drawn from a counter RNG keyed by
/// (seed, parameter offset) so initialization ignores construction order.
template <class T>
void init_dense(const Dense& d, T* p, std::uint64_t seed, double gain = 1.0) {
  const double limit = gain * std::sqrt(6.0 / d.in);
  for (std::size_t i = 0; i < std::size_t(d.in) * d.out; ++i)
    p[d.w + i] = T((2.0 * uniform_from(hash_key(seed, d.w + i)) - 1.0) * limit);
  for (int i = 0; i < d.out; ++i) p[d.b + std::size_t(i)] = T(0);
}

template <class T>
void init_mlp(const Mlp& m, T* p, std::uint64_t seed, double output_gain = 1.0) {
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    init_dense(m.layers[l], p, seed, l + 1 == m.layers.size() ? output_gain : 1.0);
}

/// Adam with bias correction over a flat parameter vector.
template <class T>
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Buffer<T> m, v;
  long step = 0;

  void reset(std::size_t n) {
    m.assign(n, T(0));
    v.assign(n, T(0));
    step = 0;
  }

  void update(Buffer<T>& params, const Buffer<T>& grad, double lr) {
    if (m.size() != params.size()) reset(params.size());
    ++step;
    const T b1 = T(beta1), b2 = T(beta2);
    const T c1 = T(1.0 / (1.0 - std::pow(beta1, double(step))));
    const T c2 = T(1.0 / (1.0 - std::pow(beta2, double(step))));
    const T lr_t = T(lr), eps_t = T(eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const T g = grad[i];
      if (g == T(0) && m[i] == T(0) && v[i] == T(0)) continue;
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      params[i] -= lr_t * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps_t);
    }
  }
};

}  // namespace relight::nn
