#pragma once

#include <stdexcept>
#include <utility>

#include "iresnet/grid.hpp"

namespace iresnet {

/// Forward differences with zero-Neumann closure: the last column of gx and
/// the last row of gy are zero.
inline std::pair<ImageGrid, ImageGrid> grad_neumann(const ImageGrid& u) {
  const int H = u.height(), W = u.width();
  ImageGrid gx(H, W), gy(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c + 1 < W; ++c) gx(r, c) = u(r, c + 1) - u(r, c);
  for (int r = 0; r + 1 < H; ++r)
    for (int c = 0; c < W; ++c) gy(r, c) = u(r + 1, c) - u(r, c);
  return {std::move(gx), std::move(gy)};
}

/// Negative adjoint of grad_neumann: <grad u, p> = -<u, div p>.
inline ImageGrid div_neumann(const ImageGrid& gx, const ImageGrid& gy) {
  if (!gx.same_shape(gy)) throw std::invalid_argument("div_neumann: shape mismatch");
  const int H = gx.height(), W = gx.width();
  ImageGrid d(H, W);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      double v = 0.0;
      if (c + 1 < W) v += gx(r, c);
      if (c > 0) v -= gx(r, c - 1);
      if (r + 1 < H) v += gy(r, c);
      if (r > 0) v -= gy(r - 1, c);
      d(r, c) = v;
    }
  }
  return d;
}

inline ImageGrid laplacian_neumann(const ImageGrid& u) {
  auto [gx, gy] = grad_neumann(u);
  return div_neumann(gx, gy);
}

}  // namespace iresnet
