#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iresnet/errors.hpp"
#include "iresnet/grid.hpp"

namespace iresnet {

/// Uniform split of a global Lipschitz parameter over n factors so that
/// prod(1 - L_i) = 1 - L.
inline std::vector<double> allocate_budget(double lip, int n) {
  if (!(lip >= 0.0 && lip < 1.0))
    throw std::invalid_argument("allocate_budget: L must lie in [0, 1)");
  if (n <= 0) throw std::invalid_argument("allocate_budget: N must be positive");
  const double li = -std::expm1(std::log1p(-lip) / n);
  return std::vector<double>(static_cast<std::size_t>(n), li);
}

/// 1 - prod(1 - L_i).
inline double lipschitz_parameter(std::span<const double> budgets) {
  double keep = 1.0;
  for (double b : budgets) keep *= 1.0 - b;
  return 1.0 - keep;
}

namespace detail {

inline void normalize_in_place(std::span<double> v) {
  const double n = norm2(v);
  if (n > 0.0)
    for (double& x : v) x /= n;
}

}  // namespace detail

/// Power iteration for the operator norm of a zero-padded convolution acting
/// on grids of `state`'s shape. `state` is the persistent unit direction and
/// is updated in place; the estimate is ||K v|| for the final direction.
inline double spectral_norm(const ConvKernel& kernel, int iters, MultiChannelGrid& state) {
  if (state.size() == 0) throw std::invalid_argument("spectral_norm: empty input shape");
  if (state.channels() != kernel.in_channels())
    throw std::invalid_argument("spectral_norm: state/kernel channel mismatch");
  for (int it = 0; it < iters; ++it) {
    MultiChannelGrid w = conv2d_transpose(conv2d(state, kernel), kernel);
    if (norm2(w) == 0.0) break;
    detail::normalize_in_place(w.values());
    state = std::move(w);
  }
  return norm2(conv2d(state, kernel)) / std::max(norm2(state), 1e-300);
}

/// Random unit direction of the given shape.
inline MultiChannelGrid random_direction(int channels, int height, int width, std::mt19937_64& rng) {
  if (channels <= 0 || height <= 0 || width <= 0)
    throw std::invalid_argument("random_direction: zero input shape");
  MultiChannelGrid v(channels, height, width);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (double& x : v.values()) x = nd(rng);
  detail::normalize_in_place(v.values());
  return v;
}

/// A convolution rescaled into the ball ||K|| <= target using the current
/// power-iteration direction.
struct FactorProjection {
  ConvKernel effective;
  double sigma = 0.0;   // ||K v|| with v the stored unit direction
  double target = 0.0;  // per-factor norm budget
  double scale = 1.0;   // min(1, target / sigma)
  MultiChannelGrid u;   // K v / sigma, the output-side direction
};

inline FactorProjection project_factor(const ConvKernel& raw, const MultiChannelGrid& v,
                                       double target) {
  FactorProjection p;
  MultiChannelGrid kv = conv2d(v, raw);
  p.sigma = norm2(kv);
  p.target = target;
  p.u = kv;
  if (p.sigma > 0.0) p.u *= 1.0 / p.sigma;
  if (p.sigma <= target) {
    p.scale = 1.0;
    p.effective = raw;
  } else {
    p.scale = target / p.sigma;
    p.effective = raw;
    for (double& w : p.effective.weights()) w *= p.scale;
  }
  return p;
}

/// sign(x) * max(|x| - tau, 0).
inline double soft_shrink(double x, double tau) noexcept {
  if (x > tau) return x - tau;
  if (x < -tau) return x + tau;
  return 0.0;
}

/// Channel-wise soft shrinkage with thresholds tau[c] >= 0.
inline MultiChannelGrid soft_shrink(const MultiChannelGrid& x, std::span<const double> tau) {
  if (tau.size() != static_cast<std::size_t>(x.channels()))
    throw std::invalid_argument("soft_shrink: one threshold per channel required");
  MultiChannelGrid y = x;
  for (int c = 0; c < x.channels(); ++c) {
    if (tau[c] < 0.0) throw std::invalid_argument("soft_shrink: negative threshold");
    for (double& v : y.channel_values(c)) v = soft_shrink(v, tau[c]);
  }
  return y;
}

struct FixedPointConfig {
  double tol = 1e-8;
  int max_iter = 200;
};

/// Id - f with f = conv_b . shrink . conv_a under a per-subnetwork Lipschitz
/// budget. Effective (projected) weights are cached and refreshed by
/// `refresh()` (pure) or `project_effective_weights()` (one power round).
class Subnetwork {
 public:
  ConvKernel conv_a;               // channels -> hidden
  std::vector<double> shrink_raw;  // threshold = |raw|
  ConvKernel conv_b;               // hidden -> channels, 1x1
  double budget = 0.0;
  MultiChannelGrid power_a;        // unit direction in conv_a's input space
  MultiChannelGrid power_b;        // unit direction in conv_b's input space

  Subnetwork() = default;
  Subnetwork(int channels, int hidden, int kernel, double budget_, int height, int width)
      : conv_a(hidden, channels, kernel, kernel),
        shrink_raw(static_cast<std::size_t>(hidden), 0.0),
        conv_b(channels, hidden, 1, 1),
        budget(budget_),
        power_a(channels, height, width),
        power_b(hidden, height, width) {
    if (!(budget_ >= 0.0 && budget_ < 1.0))
      throw std::invalid_argument("Subnetwork: budget must lie in [0, 1)");
  }

  int channels() const noexcept { return conv_a.in_channels(); }
  int hidden() const noexcept { return conv_a.out_channels(); }
  int height() const noexcept { return power_a.height(); }
  int width() const noexcept { return power_a.width(); }
  double factor_target() const noexcept { return std::sqrt(budget); }

  std::vector<double> thresholds() const {
    std::vector<double> t(shrink_raw.size());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::abs(shrink_raw[i]);
    return t;
  }

  /// Recomputes the projected weights from raw weights and stored directions.
  void refresh() {
    proj_a_ = project_factor(conv_a, power_a, factor_target());
    proj_b_ = project_factor(conv_b, power_b, factor_target());
    tau_ = thresholds();
  }

  const FactorProjection& projection_a() const noexcept { return proj_a_; }
  const FactorProjection& projection_b() const noexcept { return proj_b_; }
  const ConvKernel& effective_a() const noexcept { return proj_a_.effective; }
  const ConvKernel& effective_b() const noexcept { return proj_b_.effective; }
  std::span<const double> tau() const noexcept { return tau_; }

  /// Upper bound on Lip(f) implied by the current estimates.
  double residual_bound() const noexcept {
    return std::min(proj_a_.sigma, proj_a_.target) * std::min(proj_b_.sigma, proj_b_.target);
  }

 private:
  FactorProjection proj_a_;
  FactorProjection proj_b_;
  std::vector<double> tau_;
};

/// One power round per factor (state persisted), then recompute the
/// effective weights.
inline std::pair<const ConvKernel&, const ConvKernel&> project_effective_weights(
    Subnetwork& sub, int power_iters = 1) {
  spectral_norm(sub.conv_a, power_iters, sub.power_a);
  spectral_norm(sub.conv_b, power_iters, sub.power_b);
  sub.refresh();
  return {sub.effective_a(), sub.effective_b()};
}

namespace detail {
inline void check_channels(const Subnetwork& sub, const MultiChannelGrid& x) {
  if (x.channels() != sub.channels())
    throw std::invalid_argument("subnetwork expects " + std::to_string(sub.channels()) +
                                " channels, got " + std::to_string(x.channels()));
}
}  // namespace detail

/// f(x) = conv_b(shrink(conv_a(x))) with the projected weights.
inline MultiChannelGrid residual_apply(const Subnetwork& sub, const MultiChannelGrid& x) {
  detail::check_channels(sub, x);
  return conv2d(soft_shrink(conv2d(x, sub.effective_a()), sub.tau()), sub.effective_b());
}

/// x - f(x).
inline MultiChannelGrid subnet_forward(const Subnetwork& sub, const MultiChannelGrid& x) {
  return x - residual_apply(sub, x);
}

struct FixedPointStats {
  int iterations = 0;
  double last_increment = 0.0;
};

/// Banach iteration x <- z + f(x) from x = z. Stops once the increment
/// certifies ||x - x*|| <= tol via the contraction a-posteriori bound.
inline MultiChannelGrid subnet_invert(const Subnetwork& sub, const MultiChannelGrid& z,
                                      const FixedPointConfig& cfg = {},
                                      FixedPointStats* stats = nullptr) {
  detail::check_channels(sub, z);
  if (!(cfg.tol > 0.0) || cfg.max_iter < 1)
    throw std::invalid_argument("subnet_invert: tol > 0 and max_iter >= 1 required");
  const double threshold = cfg.tol * (1.0 - sub.budget) / std::max(sub.budget, 1e-12);
  MultiChannelGrid x = z;
  double inc = 0.0;
  for (int k = 1; k <= cfg.max_iter; ++k) {
    MultiChannelGrid next = z + residual_apply(sub, x);
    inc = distance(next, x);
    x = std::move(next);
    if (!std::isfinite(inc)) throw NumericalError("subnet_invert: non-finite iterate");
    if (inc <= threshold) {
      if (stats) *stats = {k, inc};
      return x;
    }
  }
  throw ConvergenceError("subnet_invert: fixed-point iteration did not converge", inc,
                         cfg.max_iter);
}

struct ArchitectureConfig {
  int subnets = 6;
  int channels = 8;
  int hidden = 16;
  int kernel = 5;
  double lip = 0.999;
  int height = 32;
  int width = 32;
  /// Initial per-factor norm as a fraction of its budget sqrt(L_i). Values
  /// above 1 start every factor on the constraint boundary.
  double init_fraction = 0.1;
  double init_threshold = 1e-3;
  int power_warmup = 100;
  std::uint64_t seed = 0;
};

/// Concatenation of subnetworks; index 0 is applied to the input first.
class IResNet {
 public:
  std::vector<Subnetwork> subnets;

  IResNet() = default;
  IResNet(std::vector<Subnetwork> s) : subnets(std::move(s)) { validate(); }

  int size() const noexcept { return static_cast<int>(subnets.size()); }
  int channels() const noexcept { return subnets.empty() ? 0 : subnets.front().channels(); }
  int hidden() const noexcept { return subnets.empty() ? 0 : subnets.front().hidden(); }
  int kernel() const noexcept {
    return subnets.empty() ? 0 : subnets.front().conv_a.kernel_height();
  }
  int height() const noexcept { return subnets.empty() ? 0 : subnets.front().height(); }
  int width() const noexcept { return subnets.empty() ? 0 : subnets.front().width(); }

  std::vector<double> budgets() const {
    std::vector<double> b;
    for (const auto& s : subnets) b.push_back(s.budget);
    return b;
  }
  double lip_param() const { return lipschitz_parameter(budgets()); }

  /// prod(1 + L_i), the forward Lipschitz bound.
  double forward_bound() const {
    double p = 1.0;
    for (const auto& s : subnets) p *= 1.0 + s.budget;
    return p;
  }

  void refresh() {
    for (auto& s : subnets) s.refresh();
  }
  void project(int power_iters = 1) {
    for (auto& s : subnets) project_effective_weights(s, power_iters);
  }

  void validate() const {
    if (subnets.empty()) throw std::invalid_argument("IResNet: no subnetworks");
    for (const auto& s : subnets) {
      if (s.channels() != channels() || s.height() != height() || s.width() != width())
        throw std::invalid_argument("IResNet: subnetworks disagree on shape");
    }
  }

  void check_input(const MultiChannelGrid& x) const {
    if (x.channels() != channels())
      throw std::invalid_argument("IResNet: expected " + std::to_string(channels()) +
                                  " channels, got " + std::to_string(x.channels()));
    if (x.height() != height() || x.width() != width())
      throw std::invalid_argument(
          "IResNet: input is " + std::to_string(x.height()) + "x" + std::to_string(x.width()) +
          " but the model was built for " + std::to_string(height()) + "x" +
          std::to_string(width()));
  }
};

/// Random initialization with the projection directions warmed up.
inline IResNet make_iresnet(const ArchitectureConfig& cfg) {
  if (cfg.subnets <= 0 || cfg.channels <= 0 || cfg.hidden <= 0)
    throw std::invalid_argument("make_iresnet: counts must be positive");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const auto budgets = allocate_budget(cfg.lip, cfg.subnets);
  std::vector<Subnetwork> subs;
  for (int n = 0; n < cfg.subnets; ++n) {
    Subnetwork s(cfg.channels, cfg.hidden, cfg.kernel, budgets[n], cfg.height, cfg.width);
    for (double& w : s.conv_a.weights()) w = nd(rng);
    for (double& w : s.conv_b.weights()) w = nd(rng);
    for (double& t : s.shrink_raw) t = cfg.init_threshold;
    s.power_a = random_direction(cfg.channels, cfg.height, cfg.width, rng);
    s.power_b = random_direction(cfg.hidden, cfg.height, cfg.width, rng);
    const double target = cfg.init_fraction * s.factor_target();
    const double sa = spectral_norm(s.conv_a, cfg.power_warmup, s.power_a);
    const double sb = spectral_norm(s.conv_b, cfg.power_warmup, s.power_b);
    for (double& w : s.conv_a.weights()) w *= target / sa;
    for (double& w : s.conv_b.weights()) w *= target / sb;
    s.refresh();
    subs.push_back(std::move(s));
  }
  return IResNet(std::move(subs));
}

/// A model whose residuals vanish: forward and inverse are the identity.
inline IResNet make_identity_iresnet(int subnets, int channels, int hidden, int height, int width,
                                     double lip = 0.999, int kernel = 5) {
  const auto budgets = allocate_budget(lip, subnets);
  std::vector<Subnetwork> subs;
  std::mt19937_64 rng(0);
  for (int n = 0; n < subnets; ++n) {
    Subnetwork s(channels, hidden, kernel, budgets[n], height, width);
    s.power_a = random_direction(channels, height, width, rng);
    s.power_b = random_direction(hidden, height, width, rng);
    s.refresh();
    subs.push_back(std::move(s));
  }
  return IResNet(std::move(subs));
}

inline MultiChannelGrid net_forward(const IResNet& model, const MultiChannelGrid& x) {
  model.check_input(x);
  MultiChannelGrid y = x;
  for (const auto& s : model.subnets) y = subnet_forward(s, y);
  return y;
}

/// Inverts subnetworks in reverse order of application.
inline MultiChannelGrid net_invert(const IResNet& model, const MultiChannelGrid& z,
                                   const FixedPointConfig& cfg = {}) {
  model.check_input(z);
  MultiChannelGrid x = z;
  for (auto it = model.subnets.rbegin(); it != model.subnets.rend(); ++it)
    x = subnet_invert(*it, x, cfg);
  return x;
}

/// Replicates a single-channel image into m identical channels.
inline MultiChannelGrid lift(const ImageGrid& x, int m) {
  if (m <= 0) throw std::invalid_argument("lift: channel count must be positive");
  MultiChannelGrid y(m, x.height(), x.width());
  for (int c = 0; c < m; ++c) y.set_channel(c, x);
  return y;
}

/// Channel mean, accumulated as offsets from channel 0 so identical channels
/// reproduce their value exactly.
inline ImageGrid unlift(const MultiChannelGrid& y) {
  ImageGrid x = y.channel(0);
  ImageGrid offset(y.height(), y.width());
  for (int c = 1; c < y.channels(); ++c) {
    auto src = y.channel_values(c);
    for (std::size_t i = 0; i < x.size(); ++i) offset.values()[i] += src[i] - x.values()[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) x.values()[i] += offset.values()[i] / y.channels();
  return x;
}

/// unlift . phi . lift and its inverse, the maps on single images.
inline ImageGrid image_forward(const IResNet& model, const ImageGrid& x) {
  return unlift(net_forward(model, lift(x, model.channels())));
}
inline ImageGrid image_invert(const IResNet& model, const ImageGrid& z,
                              const FixedPointConfig& cfg = {}) {
  return unlift(net_invert(model, lift(z, model.channels()), cfg));
}

}  // namespace iresnet
