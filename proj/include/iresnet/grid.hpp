#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace iresnet {

/// Dense single-channel image, row-major.
class ImageGrid {
 public:
  ImageGrid() = default;
  ImageGrid(int height, int width, double fill = 0.0)
      : height_(height), width_(width) {
    if (height <= 0 || width <= 0)
      throw std::invalid_argument("ImageGrid: height and width must be positive");
    values_.assign(static_cast<std::size_t>(height) * width, fill);
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator()(int r, int c) noexcept {
    return values_[static_cast<std::size_t>(r) * width_ + c];
  }
  double operator()(int r, int c) const noexcept {
    return values_[static_cast<std::size_t>(r) * width_ + c];
  }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  bool same_shape(const ImageGrid& o) const noexcept {
    return height_ == o.height_ && width_ == o.width_;
  }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  ImageGrid& operator+=(const ImageGrid& o) {
    check(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  ImageGrid& operator-=(const ImageGrid& o) {
    check(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  ImageGrid& operator*=(double s) noexcept {
    for (double& v : values_) v *= s;
    return *this;
  }

  friend ImageGrid operator+(ImageGrid a, const ImageGrid& b) { a += b; return a; }
  friend ImageGrid operator-(ImageGrid a, const ImageGrid& b) { a -= b; return a; }
  friend ImageGrid operator*(double s, ImageGrid a) { a *= s; return a; }
  friend ImageGrid operator*(ImageGrid a, double s) { a *= s; return a; }

  bool operator==(const ImageGrid&) const = default;

 private:
  void check(const ImageGrid& o) const {
    if (!same_shape(o)) throw std::invalid_argument("ImageGrid: shape mismatch");
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> values_;
};

/// C×H×W stack of equally shaped channels, stored channel-major.
class MultiChannelGrid {
 public:
  MultiChannelGrid() = default;
  MultiChannelGrid(int channels, int height, int width, double fill = 0.0)
      : channels_(channels), height_(height), width_(width) {
    if (channels <= 0 || height <= 0 || width <= 0)
      throw std::invalid_argument("MultiChannelGrid: dimensions must be positive");
    values_.assign(static_cast<std::size_t>(channels) * height * width, fill);
  }

  int channels() const noexcept { return channels_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int plane() const noexcept { return height_ * width_; }
  std::size_t size() const noexcept { return values_.size(); }

  double& operator()(int ch, int r, int c) noexcept {
    return values_[(static_cast<std::size_t>(ch) * height_ + r) * width_ + c];
  }
  double operator()(int ch, int r, int c) const noexcept {
    return values_[(static_cast<std::size_t>(ch) * height_ + r) * width_ + c];
  }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  std::span<double> channel_values(int ch) noexcept {
    return {values_.data() + static_cast<std::size_t>(ch) * plane(),
            static_cast<std::size_t>(plane())};
  }
  std::span<const double> channel_values(int ch) const noexcept {
    return {values_.data() + static_cast<std::size_t>(ch) * plane(),
            static_cast<std::size_t>(plane())};
  }

  ImageGrid channel(int ch) const {
    ImageGrid g(height_, width_);
    auto src = channel_values(ch);
    std::copy(src.begin(), src.end(), g.data());
    return g;
  }
  void set_channel(int ch, const ImageGrid& g) {
    if (g.height() != height_ || g.width() != width_)
      throw std::invalid_argument("MultiChannelGrid: channel shape mismatch");
    std::copy(g.values().begin(), g.values().end(), channel_values(ch).begin());
  }

  bool same_shape(const MultiChannelGrid& o) const noexcept {
    return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
  }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  MultiChannelGrid& operator+=(const MultiChannelGrid& o) {
    check(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  MultiChannelGrid& operator-=(const MultiChannelGrid& o) {
    check(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  MultiChannelGrid& operator*=(double s) noexcept {
    for (double& v : values_) v *= s;
    return *this;
  }

  friend MultiChannelGrid operator+(MultiChannelGrid a, const MultiChannelGrid& b) { a += b; return a; }
  friend MultiChannelGrid operator-(MultiChannelGrid a, const MultiChannelGrid& b) { a -= b; return a; }
  friend MultiChannelGrid operator*(double s, MultiChannelGrid a) { a *= s; return a; }
  friend MultiChannelGrid operator*(MultiChannelGrid a, double s) { a *= s; return a; }

  bool operator==(const MultiChannelGrid&) const = default;

 private:
  void check(const MultiChannelGrid& o) const {
    if (!same_shape(o)) throw std::invalid_argument("MultiChannelGrid: shape mismatch");
  }

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<double> values_;
};

/// Wraps a single image as a one-channel stack.
inline MultiChannelGrid as_multichannel(const ImageGrid& g) {
  MultiChannelGrid m(1, g.height(), g.width());
  m.set_channel(0, g);
  return m;
}

// Flat vector helpers shared by every module.

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}
inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }
inline double norm_inf(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}
inline double dot(const ImageGrid& a, const ImageGrid& b) { return dot(a.values(), b.values()); }
inline double dot(const MultiChannelGrid& a, const MultiChannelGrid& b) {
  return dot(a.values(), b.values());
}
inline double norm2(const ImageGrid& a) { return norm2(a.values()); }
inline double norm2(const MultiChannelGrid& a) { return norm2(a.values()); }
inline double distance(const MultiChannelGrid& a, const MultiChannelGrid& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("distance: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    s += d * d;
  }
  return std::sqrt(s);
}
inline double distance(const ImageGrid& a, const ImageGrid& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("distance: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

enum class PadMode { Zero, Replicate };

/// Convolution weights indexed [out][in][row][col]; odd, centered extents.
class ConvKernel {
 public:
  ConvKernel() = default;
  ConvKernel(int out_channels, int in_channels, int kernel_height, int kernel_width,
             double fill = 0.0)
      : out_(out_channels), in_(in_channels), kh_(kernel_height), kw_(kernel_width) {
    if (out_channels <= 0 || in_channels <= 0)
      throw std::invalid_argument("ConvKernel: channel counts must be positive");
    if (kernel_height <= 0 || kernel_width <= 0 || kernel_height % 2 == 0 ||
        kernel_width % 2 == 0)
      throw std::invalid_argument("ConvKernel: kernel extents must be odd and positive");
    weights_.assign(static_cast<std::size_t>(out_) * in_ * kh_ * kw_, fill);
  }

  int out_channels() const noexcept { return out_; }
  int in_channels() const noexcept { return in_; }
  int kernel_height() const noexcept { return kh_; }
  int kernel_width() const noexcept { return kw_; }
  int taps() const noexcept { return kh_ * kw_; }
  std::size_t size() const noexcept { return weights_.size(); }

  double& operator()(int o, int i, int r, int c) noexcept {
    return weights_[((static_cast<std::size_t>(o) * in_ + i) * kh_ + r) * kw_ + c];
  }
  double operator()(int o, int i, int r, int c) const noexcept {
    return weights_[((static_cast<std::size_t>(o) * in_ + i) * kh_ + r) * kw_ + c];
  }

  std::span<double> weights() noexcept { return weights_; }
  std::span<const double> weights() const noexcept { return weights_; }
  double* data() noexcept { return weights_.data(); }
  const double* data() const noexcept { return weights_.data(); }

  bool same_shape(const ConvKernel& o) const noexcept {
    return out_ == o.out_ && in_ == o.in_ && kh_ == o.kh_ && kw_ == o.kw_;
  }

  bool operator==(const ConvKernel&) const = default;

 private:
  int out_ = 0;
  int in_ = 0;
  int kh_ = 0;
  int kw_ = 0;
  std::vector<double> weights_;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

inline std::vector<double>& scratch_columns() {
  thread_local std::vector<double> buffer;
  return buffer;
}

// Row (i, a, b) of the column matrix holds input channel i sampled at
// (y - a + rh, x - b + rw), so a matrix product realizes true convolution.
inline void im2col(const MultiChannelGrid& in, int kh, int kw, PadMode pad,
                   std::vector<double>& cols) {
  const int C = in.channels(), H = in.height(), W = in.width();
  const int rh = kh / 2, rw = kw / 2;
  const std::size_t P = static_cast<std::size_t>(H) * W;
  cols.resize(static_cast<std::size_t>(C) * kh * kw * P);
  for (int i = 0; i < C; ++i) {
    const double* src = in.channel_values(i).data();
    for (int a = 0; a < kh; ++a) {
      for (int b = 0; b < kw; ++b) {
        double* dst = cols.data() + ((static_cast<std::size_t>(i) * kh + a) * kw + b) * P;
        const int dy = rh - a, dx = rw - b;
        for (int y = 0; y < H; ++y) {
          int sy = y + dy;
          double* row = dst + static_cast<std::size_t>(y) * W;
          if (sy < 0 || sy >= H) {
            if (pad == PadMode::Zero) {
              std::fill(row, row + W, 0.0);
              continue;
            }
            sy = std::clamp(sy, 0, H - 1);
          }
          const double* srow = src + static_cast<std::size_t>(sy) * W;
          const int x0 = std::min(W, std::max(0, -dx));
          const int x1 = std::max(x0, std::min(W, W - dx));
          for (int x = 0; x < x0; ++x) row[x] = pad == PadMode::Zero ? 0.0 : srow[0];
          for (int x = x0; x < x1; ++x) row[x] = srow[x + dx];
          for (int x = x1; x < W; ++x)
            row[x] = pad == PadMode::Zero ? 0.0 : srow[W - 1];
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, int C, int H, int W, int kh, int kw,
                       MultiChannelGrid& out) {
  const int rh = kh / 2, rw = kw / 2;
  const std::size_t P = static_cast<std::size_t>(H) * W;
  for (int i = 0; i < C; ++i) {
    double* dst = out.channel_values(i).data();
    for (int a = 0; a < kh; ++a) {
      for (int b = 0; b < kw; ++b) {
        const double* src = cols + ((static_cast<std::size_t>(i) * kh + a) * kw + b) * P;
        const int dy = rh - a, dx = rw - b;
        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int y = y0; y < y1; ++y) {
          const double* srow = src + static_cast<std::size_t>(y) * W;
          double* drow = dst + static_cast<std::size_t>(y + dy) * W;
          for (int x = x0; x < x1; ++x) drow[x + dx] += srow[x];
        }
      }
    }
  }
}

inline void check_conv(const MultiChannelGrid& input, const ConvKernel& kernel) {
  if (kernel.size() == 0) throw std::invalid_argument("conv2d: empty kernel");
  if (input.channels() != kernel.in_channels())
    throw std::invalid_argument("conv2d: input has " + std::to_string(input.channels()) +
                                " channels, kernel expects " +
                                std::to_string(kernel.in_channels()));
}

}  // namespace detail

/// "Same"-size centered convolution, out(o,p) = sum_{i,t} k(o,i,t) in(i, p - t).
inline MultiChannelGrid conv2d(const MultiChannelGrid& input, const ConvKernel& kernel,
                               PadMode pad = PadMode::Zero) {
  detail::check_conv(input, kernel);
  const int H = input.height(), W = input.width(), P = H * W;
  const int K = kernel.in_channels() * kernel.taps();
  MultiChannelGrid out(kernel.out_channels(), H, W);
  detail::ConstRowMap wmat(kernel.data(), kernel.out_channels(), K);
  detail::RowMap omat(out.data(), kernel.out_channels(), P);
  if (kernel.taps() == 1) {
    omat.noalias() = wmat * detail::ConstRowMap(input.data(), K, P);
    return out;
  }
  auto& cols = detail::scratch_columns();
  detail::im2col(input, kernel.kernel_height(), kernel.kernel_width(), pad, cols);
  omat.noalias() = wmat * detail::ConstRowMap(cols.data(), K, P);
  return out;
}

inline ImageGrid conv2d(const ImageGrid& input, const ConvKernel& kernel,
                        PadMode pad = PadMode::Zero) {
  return conv2d(as_multichannel(input), kernel, pad).channel(0);
}

/// Adjoint of the zero-padded conv2d with respect to its input.
inline MultiChannelGrid conv2d_transpose(const MultiChannelGrid& grad_out,
                                         const ConvKernel& kernel) {
  if (grad_out.channels() != kernel.out_channels())
    throw std::invalid_argument("conv2d_transpose: channel mismatch");
  const int H = grad_out.height(), W = grad_out.width(), P = H * W;
  const int K = kernel.in_channels() * kernel.taps();
  MultiChannelGrid out(kernel.in_channels(), H, W);
  detail::ConstRowMap wmat(kernel.data(), kernel.out_channels(), K);
  detail::ConstRowMap gmat(grad_out.data(), kernel.out_channels(), P);
  if (kernel.taps() == 1) {
    detail::RowMap(out.data(), K, P).noalias() = wmat.transpose() * gmat;
    return out;
  }
  auto& cols = detail::scratch_columns();
  cols.resize(static_cast<std::size_t>(K) * P);
  detail::RowMap cmat(cols.data(), K, P);
  cmat.noalias() = wmat.transpose() * gmat;
  detail::col2im_add(cols.data(), kernel.in_channels(), H, W, kernel.kernel_height(),
                     kernel.kernel_width(), out);
  return out;
}

/// Gradient of <grad_out, conv2d(input, K)> with respect to K (zero padding),
/// added into `accum`.
inline void conv2d_weight_grad_add(const MultiChannelGrid& input,
                                   const MultiChannelGrid& grad_out, ConvKernel& accum) {
  detail::check_conv(input, accum);
  if (grad_out.channels() != accum.out_channels() || grad_out.height() != input.height() ||
      grad_out.width() != input.width())
    throw std::invalid_argument("conv2d_weight_grad: shape mismatch");
  const int P = input.plane();
  const int K = accum.in_channels() * accum.taps();
  detail::RowMap gw(accum.data(), accum.out_channels(), K);
  detail::ConstRowMap gmat(grad_out.data(), accum.out_channels(), P);
  if (accum.taps() == 1) {
    gw.noalias() += gmat * detail::ConstRowMap(input.data(), K, P).transpose();
    return;
  }
  auto& cols = detail::scratch_columns();
  detail::im2col(input, accum.kernel_height(), accum.kernel_width(), PadMode::Zero, cols);
  gw.noalias() += gmat * detail::ConstRowMap(cols.data(), K, P).transpose();
}

}  // namespace iresnet
