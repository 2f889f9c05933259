#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "iresnet/grid.hpp"

namespace iresnet {

struct EdgeMasks {
  ImageGrid weak;    // 1 on edge pixels at or below the high threshold
  ImageGrid strong;  // 1 on edge pixels above the high threshold

  bool is_edge(int r, int c) const { return weak(r, c) != 0.0 || strong(r, c) != 0.0; }
  ImageGrid edges() const { return weak + strong; }
};

struct CannyConfig {
  double sigma = 1.0;
  double low_fraction = 0.1;   // of the maximum gradient magnitude
  double high_fraction = 0.2;
};

namespace detail {

inline double clamped(const ImageGrid& g, int r, int c) {
  r = std::clamp(r, 0, g.height() - 1);
  c = std::clamp(c, 0, g.width() - 1);
  return g(r, c);
}

/// Separable Gaussian with replicated borders.
inline ImageGrid smooth_replicate(const ImageGrid& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int rad = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * rad + 1);
  double sum = 0.0;
  for (int i = -rad; i <= rad; ++i) sum += k[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  ImageGrid tmp(img.height(), img.width()), out(img.height(), img.width());
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c) {
      double s = 0.0;
      for (int i = -rad; i <= rad; ++i) s += k[i + rad] * clamped(img, r, c + i);
      tmp(r, c) = s;
    }
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c) {
      double s = 0.0;
      for (int i = -rad; i <= rad; ++i) s += k[i + rad] * clamped(tmp, r + i, c);
      out(r, c) = s;
    }
  return out;
}

}  // namespace detail

/// Canny: Gaussian smoothing, Sobel gradients, non-maximum suppression and
/// 8-connected hysteresis. On a plateau of equal magnitudes across the
/// gradient direction the pixel on the lower-index side is kept, so step
/// edges come out one pixel wide.
inline EdgeMasks canny_edges(const ImageGrid& image, const CannyConfig& cfg = {}) {
  const int H = image.height(), W = image.width();
  const ImageGrid s = detail::smooth_replicate(image, cfg.sigma);
  ImageGrid gx(H, W), gy(H, W), mag(H, W);
  double max_mag = 0.0;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      auto p = [&](int dr, int dc) { return detail::clamped(s, r + dr, c + dc); };
      gx(r, c) = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1));
      gy(r, c) = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1));
      mag(r, c) = std::hypot(gx(r, c), gy(r, c));
      max_mag = std::max(max_mag, mag(r, c));
    }
  EdgeMasks out{ImageGrid(H, W), ImageGrid(H, W)};
  if (max_mag <= 1e-12) return out;

  ImageGrid nms(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const double m = mag(r, c);
      if (m <= 0.0) continue;
      double angle = std::atan2(gy(r, c), gx(r, c)) * 180.0 / std::numbers::pi;
      if (angle < 0) angle += 180.0;
      int dr = 0, dc = 0;
      if (angle < 22.5 || angle >= 157.5) dc = 1;
      else if (angle < 67.5) dr = dc = 1;
      else if (angle < 112.5) dr = 1;
      else { dr = 1; dc = -1; }
      auto at = [&](int rr, int cc) {
        return rr < 0 || cc < 0 || rr >= H || cc >= W ? 0.0 : mag(rr, cc);
      };
      if (m > at(r - dr, c - dc) && m >= at(r + dr, c + dc)) nms(r, c) = m;
    }

  const double high = cfg.high_fraction * max_mag, low = cfg.low_fraction * max_mag;
  ImageGrid edge(H, W);
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      if (nms(r, c) > high) {
        edge(r, c) = 1.0;
        stack.emplace_back(r, c);
      }
  while (!stack.empty()) {
    const auto [r, c] = stack.back();
    stack.pop_back();
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        const int rr = r + dr, cc = c + dc;
        if (rr < 0 || cc < 0 || rr >= H || cc >= W || edge(rr, cc) != 0.0) continue;
        if (nms(rr, cc) > low) {
          edge(rr, cc) = 1.0;
          stack.emplace_back(rr, cc);
        }
      }
  }
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      if (edge(r, c) != 0.0) (nms(r, c) > high ? out.strong : out.weak)(r, c) = 1.0;
  return out;
}

/// Binary dilation by a (2 rad + 1)^2 square.
inline ImageGrid dilate(const ImageGrid& mask, int rad = 1) {
  ImageGrid out(mask.height(), mask.width());
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c) {
      if (mask(r, c) == 0.0) continue;
      for (int dr = -rad; dr <= rad; ++dr)
        for (int dc = -rad; dc <= rad; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr >= 0 && cc >= 0 && rr < mask.height() && cc < mask.width()) out(rr, cc) = 1.0;
        }
    }
  return out;
}

}  // namespace iresnet
