#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "iresnet/grid.hpp"

namespace iresnet {

/// Returned by psnr() for identical images; all finite values are capped here too.
inline constexpr double kPsnrCap = 200.0;

inline double mse(const ImageGrid& x, const ImageGrid& y) {
  if (!x.same_shape(y)) throw std::invalid_argument("mse: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x.values()[i] - y.values()[i];
    s += d * d;
  }
  return s / static_cast<double>(x.size());
}

inline double psnr(const ImageGrid& x, const ImageGrid& y, double peak = 1.0) {
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  const double m = mse(x, y);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / m));
}

struct SsimOptions {
  int window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 1.0;
};

/// Mean SSIM over every fully contained window (uniform weights, population
/// moments). Window sums come from summed-area tables.
inline double ssim(const ImageGrid& x, const ImageGrid& y, const SsimOptions& opt = {}) {
  if (!x.same_shape(y)) throw std::invalid_argument("ssim: shape mismatch");
  const int H = x.height(), W = x.width(), w = opt.window;
  if (H < w || W < w) throw std::invalid_argument("ssim: image smaller than window");
  const double c1 = (opt.k1 * opt.peak) * (opt.k1 * opt.peak);
  const double c2 = (opt.k2 * opt.peak) * (opt.k2 * opt.peak);

  const int SW = W + 1;
  auto table = [&](auto&& f) {
    std::vector<double> t(static_cast<std::size_t>(H + 1) * SW, 0.0);
    for (int r = 0; r < H; ++r) {
      double row = 0.0;
      for (int c = 0; c < W; ++c) {
        row += f(r, c);
        t[(r + 1) * SW + c + 1] = t[r * SW + c + 1] + row;
      }
    }
    return t;
  };
  const auto sx = table([&](int r, int c) { return x(r, c); });
  const auto sy = table([&](int r, int c) { return y(r, c); });
  const auto sxx = table([&](int r, int c) { return x(r, c) * x(r, c); });
  const auto syy = table([&](int r, int c) { return y(r, c) * y(r, c); });
  const auto sxy = table([&](int r, int c) { return x(r, c) * y(r, c); });
  auto box = [&](const std::vector<double>& t, int r, int c) {
    return t[(r + w) * SW + c + w] - t[r * SW + c + w] - t[(r + w) * SW + c] + t[r * SW + c];
  };

  const double n = static_cast<double>(w) * w;
  double total = 0.0;
  for (int r = 0; r + w <= H; ++r) {
    for (int c = 0; c + w <= W; ++c) {
      const double mx = box(sx, r, c) / n, my = box(sy, r, c) / n;
      const double vx = box(sxx, r, c) / n - mx * mx;
      const double vy = box(syy, r, c) / n - my * my;
      const double cxy = box(sxy, r, c) / n - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  }
  return total / static_cast<double>((H - w + 1) * (W - w + 1));
}

}  // namespace iresnet
