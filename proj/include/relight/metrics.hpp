#pragma once

#include "relight/core.hpp"
#include "relight/envmap.hpp"
#include "relight/image.hpp"

#include <vector>

namespace relight {

inline constexpr double kPsnrCap = 99.0;

inline void require_same_shape(const Image& a, const Image& b) {
  if (!a.same_shape(b))
    throw ShapeError("image shapes differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) + "x" +
                     std::to_string(a.channels) + " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) +
                     "x" + std::to_string(b.channels));
  if (a.data.empty()) throw ShapeError("empty image");
}

inline double mse(const Image& a, const Image& b) {
  require_same_shape(a, b);
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    s += d * d;
  }
  return s / double(a.data.size());
}

inline double psnr_from_mse(double m) {
  if (m <= 0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(m));
}

/// Peak 1.0.
inline double psnr(const Image& a, const Image& b) { return psnr_from_mse(mse(a, b)); }

/// PSNR over pixels whose mask value exceeds 0.5.
inline double masked_psnr(const Image& a, const Image& b, const Image& mask) {
  require_same_shape(a, b);
  if (mask.width != a.width || mask.height != a.height) throw ShapeError("mask size differs from image size");
  double s = 0;
  std::size_t n = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (mask.at(x, y, 0) <= 0.5f) continue;
      for (int c = 0; c < a.channels; ++c) {
        const double d = double(a.at(x, y, c)) - double(b.at(x, y, c));
        s += d * d;
        ++n;
      }
    }
  if (n == 0) throw ShapeError("mask selects no pixels");
  return psnr_from_mse(s / double(n));
}

/// Mean SSIM over channels: 11x11 Gaussian window (sigma 1.5), valid region,
/// C1 = 0.01^2, C2 = 0.03^2. Images smaller than the window use a window
/// cropped to the image.
inline double ssim(const Image& a, const Image& b) {
  require_same_shape(a, b);
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03, sigma = 1.5;
  const int wx = std::min(11, a.width % 2 ? a.width : a.width - 1);
  const int wy = std::min(11, a.height % 2 ? a.height : a.height - 1);
  auto kernel = [&](int n) {
    std::vector<double> k(static_cast<std::size_t>(n));
    double s = 0;
    for (int i = 0; i < n; ++i) {
      const double d = i - (n - 1) / 2.0;
      s += k[std::size_t(i)] = std::exp(-d * d / (2 * sigma * sigma));
    }
    for (auto& v : k) v /= s;
    return k;
  };
  const auto kx = kernel(wx), ky = kernel(wy);
  const int ox = a.width - wx + 1, oy = a.height - wy + 1;
  double total = 0;
  for (int c = 0; c < a.channels; ++c) {
    double sum = 0;
    for (int y = 0; y < oy; ++y)
      for (int x = 0; x < ox; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int j = 0; j < wy; ++j)
          for (int i = 0; i < wx; ++i) {
            const double w = ky[std::size_t(j)] * kx[std::size_t(i)];
            const double va = a.at(x + i, y + j, c), vb = b.at(x + i, y + j, c);
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        sum += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
    total += sum / (double(ox) * oy);
  }
  return total / a.channels;
}

/// Least-squares per-channel gain s_c = <p_c, g_c> / <p_c, p_c>, accumulated
/// over one or more image pairs.
inline std::vector<double> channel_scale(const std::vector<const Image*>& preds, const std::vector<const Image*>& gts) {
  if (preds.empty() || preds.size() != gts.size()) throw ShapeError("scale alignment needs matching image lists");
  const int ch = preds[0]->channels;
  std::vector<double> pg(std::size_t(ch), 0.0), pp(std::size_t(ch), 0.0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    require_same_shape(*preds[i], *gts[i]);
    if (preds[i]->channels != ch) throw ShapeError("channel count differs between images");
    const auto& p = preds[i]->data;
    const auto& g = gts[i]->data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      pg[k % std::size_t(ch)] += double(p[k]) * double(g[k]);
      pp[k % std::size_t(ch)] += double(p[k]) * double(p[k]);
    }
  }
  std::vector<double> s(static_cast<std::size_t>(ch));
  for (int c = 0; c < ch; ++c) s[std::size_t(c)] = pp[std::size_t(c)] > 0 ? pg[std::size_t(c)] / pp[std::size_t(c)] : 1.0;
  return s;
}

inline std::vector<double> channel_scale(const Image& pred, const Image& gt) { return channel_scale({&pred}, {&gt}); }

inline Image apply_scale(const Image& img, const std::vector<double>& s) {
  Image out = img;
  for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] = float(double(out.data[k]) * s[k % s.size()]);
  return out;
}

struct ImageScore {
  double psnr = 0;
  double ssim = 0;
};

/// Scale `pred` by `s`, tonemap both to LDR, then score.
inline ImageScore score_aligned(const Image& pred, const Image& gt, const std::vector<double>& s) {
  const Image p = to_ldr(apply_scale(pred, s));
  const Image g = to_ldr(gt);
  return {psnr(p, g), ssim(p, g)};
}

}  // namespace relight
