#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

namespace relight {

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file; the message names the byte offset of the problem.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Small fixed-size math

template <class T>
using Vec3 = Eigen::Matrix<T, 3, 1>;
template <class T>
using Mat3 = Eigen::Matrix<T, 3, 3>;
template <class T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Flat storage that Eigen maps over. The fixed base alignment keeps the
/// vectorized reduction order independent of where the heap put the block.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

using Vec3f = Vec3<float>;
using Vec3d = Vec3<double>;
using Mat3d = Mat3<double>;

template <class T>
inline constexpr T kPi = std::numbers::pi_v<T>;

/// Plain value of a scalar that may be an Eigen::AutoDiffScalar.
template <class S>
inline auto value_of(const S& s) {
  if constexpr (std::is_arithmetic_v<S>) {
    return s;
  } else {
    return s.value();
  }
}

template <class T>
inline T softplus(T x) {
  // log(1 + e^x) without overflow
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
inline T sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// Rotation about +Z by `radians`.
inline Mat3d rotation_z(double radians) {
  Mat3d r;
  const double c = std::cos(radians), s = std::sin(radians);
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

inline bool is_rotation(const Mat3d& r, double tol = 1e-6) {
  return (r.transpose() * r - Mat3d::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(r.determinant() - 1.0) <= tol;
}

// ---------------------------------------------------------------------------
// Counter-based random numbers. Every random draw is a pure function of its
// key, so results do not depend on evaluation order or thread count.

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_key(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                              std::uint64_t d = 0) {
  std::uint64_t h = mix64(a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  h = mix64(h ^ d);
  return h;
}

/// Uniform double in [0, 1) from 53 high bits of a hashed key.
inline double uniform_from(std::uint64_t h) {
  return double(h >> 11) * (1.0 / 9007199254740992.0);
}

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}
  double uniform() { return uniform_from(hash_key(key_, counter_++)); }
  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Threading

/// Worker count: RELIGHT_THREADS if set and positive, else hardware concurrency.
inline int worker_count() {
  if (const char* env = std::getenv("RELIGHT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : int(hw);
}

/// Runs body(i) for i in [0, n). Work items must write disjoint outputs; the
/// result is then independent of the number of threads.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body,
                         int threads = 0) {
  if (threads <= 0) threads = worker_count();
  threads = int(std::min<std::size_t>(std::size_t(threads), n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(std::size_t(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = std::size_t(t); i < n; i += std::size_t(threads)) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace relight
