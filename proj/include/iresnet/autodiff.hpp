#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iresnet/detail/parallel.hpp"
#include "iresnet/errors.hpp"
#include "iresnet/lipnet.hpp"

namespace iresnet {

/// Gradients with the same layout as a Subnetwork's trainable parameters.
struct SubnetGrads {
  ConvKernel conv_a;
  std::vector<double> shrink_raw;
  ConvKernel conv_b;

  static SubnetGrads zeros_like(const Subnetwork& s) {
    return {ConvKernel(s.conv_a.out_channels(), s.conv_a.in_channels(), s.conv_a.kernel_height(),
                       s.conv_a.kernel_width()),
            std::vector<double>(s.shrink_raw.size(), 0.0),
            ConvKernel(s.conv_b.out_channels(), s.conv_b.in_channels(), s.conv_b.kernel_height(),
                       s.conv_b.kernel_width())};
  }

  SubnetGrads& operator+=(const SubnetGrads& o) {
    auto add = [](std::span<double> a, std::span<const double> b) {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    add(conv_a.weights(), o.conv_a.weights());
    add(shrink_raw, o.shrink_raw);
    add(conv_b.weights(), o.conv_b.weights());
    return *this;
  }
  SubnetGrads& operator*=(double s) {
    for (double& v : conv_a.weights()) v *= s;
    for (double& v : shrink_raw) v *= s;
    for (double& v : conv_b.weights()) v *= s;
    return *this;
  }
};

struct TapeGradients {
  std::vector<SubnetGrads> subnets;
  std::vector<MultiChannelGrid> inputs;  // one cotangent per batch sample

  static TapeGradients zeros_like(const IResNet& model) {
    TapeGradients g;
    for (const auto& s : model.subnets) g.subnets.push_back(SubnetGrads::zeros_like(s));
    return g;
  }

  bool all_finite() const {
    auto ok = [](std::span<const double> v) {
      for (double x : v)
        if (!std::isfinite(x)) return false;
      return true;
    };
    for (const auto& s : subnets)
      if (!ok(s.conv_a.weights()) || !ok(s.shrink_raw) || !ok(s.conv_b.weights())) return false;
    return true;
  }
};

/// Trainable parameters of a model as flat spans, in a fixed order that
/// gradient_spans() mirrors.
inline std::vector<std::span<double>> parameter_spans(IResNet& model) {
  std::vector<std::span<double>> out;
  for (auto& s : model.subnets) {
    out.push_back(s.conv_a.weights());
    out.push_back(s.shrink_raw);
    out.push_back(s.conv_b.weights());
  }
  return out;
}

inline std::vector<std::span<double>> gradient_spans(TapeGradients& g) {
  std::vector<std::span<double>> out;
  for (auto& s : g.subnets) {
    out.push_back(s.conv_a.weights());
    out.push_back(s.shrink_raw);
    out.push_back(s.conv_b.weights());
  }
  return out;
}

inline std::size_t parameter_count(const IResNet& model) {
  std::size_t n = 0;
  for (const auto& s : model.subnets)
    n += s.conv_a.size() + s.shrink_raw.size() + s.conv_b.size();
  return n;
}

namespace detail {

/// Chains a gradient on projected weights back to the raw weights. The scale
/// min(1, t / sigma) depends on sigma = <u, K v> with both directions fixed.
inline ConvKernel chain_projection(const FactorProjection& p, const ConvKernel& raw,
                                   const MultiChannelGrid& v, const ConvKernel& g_eff) {
  if (p.scale == 1.0) return g_eff;
  ConvKernel g = g_eff;
  for (double& w : g.weights()) w *= p.scale;
  const double coupling = dot(g_eff.weights(), raw.weights()) * p.target / (p.sigma * p.sigma);
  ConvKernel dsigma(raw.out_channels(), raw.in_channels(), raw.kernel_height(),
                    raw.kernel_width());
  conv2d_weight_grad_add(v, p.u, dsigma);
  for (std::size_t i = 0; i < g.size(); ++i) g.weights()[i] -= coupling * dsigma.weights()[i];
  return g;
}

inline double sign(double x) noexcept { return (x > 0.0) - (x < 0.0); }

}  // namespace detail

/// The residual f linearized at a point: stores pre-activations so repeated
/// Jacobian products (adjoint fixed point, direction probes) skip the
/// nonlinear pass.
class ResidualLinearization {
 public:
  ResidualLinearization(const Subnetwork& sub, MultiChannelGrid x)
      : sub_(&sub), x_(std::move(x)) {
    if (x_.channels() != sub.channels())
      throw std::invalid_argument("residual linearization: channel mismatch");
    pre_ = conv2d(x_, sub.effective_a());
    const auto tau = sub.tau();
    active_.assign(pre_.size(), 0);
    for (int c = 0; c < pre_.channels(); ++c) {
      auto a = pre_.channel_values(c);
      const std::size_t off = static_cast<std::size_t>(c) * pre_.plane();
      // the kink |a| = tau counts as inactive
      for (std::size_t i = 0; i < a.size(); ++i) active_[off + i] = std::abs(a[i]) > tau[c];
    }
  }

  const MultiChannelGrid& point() const noexcept { return x_; }

  /// J_f t.
  MultiChannelGrid jvp(const MultiChannelGrid& t) const {
    MultiChannelGrid a = conv2d(t, sub_->effective_a());
    mask(a);
    return conv2d(a, sub_->effective_b());
  }

  /// J_f^T c.
  MultiChannelGrid vjp_input(const MultiChannelGrid& c) const {
    MultiChannelGrid gs = conv2d_transpose(c, sub_->effective_b());
    mask(gs);
    return conv2d_transpose(gs, sub_->effective_a());
  }

  /// (d_theta f)^T c with respect to the raw parameters.
  SubnetGrads param_grads(const MultiChannelGrid& c) const {
    const Subnetwork& s = *sub_;
    SubnetGrads g = SubnetGrads::zeros_like(s);
    MultiChannelGrid act = soft_shrink(pre_, s.tau());
    ConvKernel geff_b = g.conv_b;
    conv2d_weight_grad_add(act, c, geff_b);
    MultiChannelGrid gs = conv2d_transpose(c, s.effective_b());
    for (int ch = 0; ch < gs.channels(); ++ch) {
      auto gv = gs.channel_values(ch);
      auto av = pre_.channel_values(ch);
      const std::size_t off = static_cast<std::size_t>(ch) * gs.plane();
      double gtau = 0.0;
      for (std::size_t i = 0; i < gv.size(); ++i) {
        if (active_[off + i]) gtau -= gv[i] * detail::sign(av[i]);
        else gv[i] = 0.0;
      }
      g.shrink_raw[ch] = gtau * detail::sign(s.shrink_raw[ch]);
    }
    ConvKernel geff_a = g.conv_a;
    conv2d_weight_grad_add(x_, gs, geff_a);
    g.conv_a = detail::chain_projection(s.projection_a(), s.conv_a, s.power_a, geff_a);
    g.conv_b = detail::chain_projection(s.projection_b(), s.conv_b, s.power_b, geff_b);
    return g;
  }

 private:
  void mask(MultiChannelGrid& a) const {
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!active_[i]) a.values()[i] = 0.0;
  }

  const Subnetwork* sub_;
  MultiChannelGrid x_;
  MultiChannelGrid pre_;
  std::vector<unsigned char> active_;
};

struct ResidualVjp {
  MultiChannelGrid input;
  SubnetGrads params;
};

/// Reverse mode of residual_apply at x, including the projection scale.
inline ResidualVjp vjp_residual(const Subnetwork& sub, const MultiChannelGrid& x,
                                const MultiChannelGrid& cotangent) {
  ResidualLinearization lin(sub, x);
  if (cotangent.channels() != sub.channels() || cotangent.height() != x.height() ||
      cotangent.width() != x.width())
    throw std::invalid_argument("vjp_residual: cotangent shape mismatch");
  return {lin.vjp_input(cotangent), lin.param_grads(cotangent)};
}

/// Forward mode of residual_apply at x.
inline MultiChannelGrid jvp_residual(const Subnetwork& sub, const MultiChannelGrid& x,
                                     const MultiChannelGrid& tangent) {
  if (!tangent.same_shape(x)) throw std::invalid_argument("jvp_residual: tangent shape mismatch");
  return ResidualLinearization(sub, x).jvp(tangent);
}

/// Implicit-function gradient of x* = phi^{-1}(z) where x* - f(x*) = z:
/// solves u = v + J_f(x*)^T u by iteration, then returns (u, (d_theta f)^T u).
/// The stopping rule matches subnet_invert, relative to ||v||.
inline ResidualVjp invert_backward(const Subnetwork& sub, const MultiChannelGrid& x_star,
                                   const MultiChannelGrid& v, const FixedPointConfig& cfg = {}) {
  ResidualLinearization lin(sub, x_star);
  if (!v.same_shape(x_star)) throw std::invalid_argument("invert_backward: shape mismatch");
  const double vnorm = norm2(v);
  if (vnorm == 0.0) return {v, SubnetGrads::zeros_like(sub)};
  const double threshold =
      cfg.tol * vnorm * (1.0 - sub.budget) / std::max(sub.budget, 1e-12);
  MultiChannelGrid u = v;
  double inc = 0.0;
  for (int k = 1; k <= cfg.max_iter; ++k) {
    MultiChannelGrid next = v + lin.vjp_input(u);
    inc = distance(next, u);
    u = std::move(next);
    if (!std::isfinite(inc)) throw NumericalError("invert_backward: non-finite adjoint");
    if (inc <= threshold) return {u, lin.param_grads(u)};
  }
  throw ConvergenceError("invert_backward: adjoint fixed point did not converge", inc,
                         cfg.max_iter);
}

/// A clean image and its observation.
struct SamplePair {
  ImageGrid x;
  ImageGrid z;
};

struct LossAndGrads {
  double loss = 0.0;
  TapeGradients grads;
};

namespace detail {

struct SampleResult {
  double loss = 0.0;
  std::vector<SubnetGrads> grads;
  MultiChannelGrid input;
};

inline TapeGradients reduce_in_order(const IResNet& model, std::vector<SampleResult>& parts,
                                     double& loss) {
  TapeGradients g = TapeGradients::zeros_like(model);
  loss = 0.0;
  for (auto& p : parts) {
    loss += p.loss;
    for (std::size_t i = 0; i < g.subnets.size(); ++i) g.subnets[i] += p.grads[i];
    g.inputs.push_back(std::move(p.input));
  }
  return g;
}

inline double sq_error_and_cotangent(const ImageGrid& out, const ImageGrid& target, double weight,
                                     ImageGrid& cot) {
  if (!out.same_shape(target)) throw std::invalid_argument("loss: shape mismatch");
  cot = ImageGrid(out.height(), out.width());
  double s = 0.0;
  const double scale = weight / static_cast<double>(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = out.values()[i] - target.values()[i];
    s += d * d;
    cot.values()[i] = 2.0 * scale * d;
  }
  return s * scale;
}

/// Transpose of unlift: every channel receives c / M.
inline MultiChannelGrid unlift_transpose(const ImageGrid& c, int m) {
  MultiChannelGrid y = lift(c, m);
  y *= 1.0 / m;
  return y;
}

}  // namespace detail

/// Mean squared reconstruction error of unlift(phi^{-1}(lift(z))) against x
/// over the batch, with implicit gradients through every inversion.
inline LossAndGrads recon_loss_and_grads(const IResNet& model, std::span<const SamplePair> batch,
                                         const FixedPointConfig& cfg = {}) {
  if (batch.empty()) throw std::invalid_argument("recon_loss_and_grads: empty batch");
  const int N = model.size(), M = model.channels();
  const double weight = 1.0 / static_cast<double>(batch.size());
  std::vector<detail::SampleResult> parts(batch.size());
  detail::parallel_for(batch.size(), [&](std::size_t b) {
    try {
      std::vector<MultiChannelGrid> xs(N + 1);
      xs[N] = lift(batch[b].z, M);
      model.check_input(xs[N]);
      for (int i = N - 1; i >= 0; --i) xs[i] = subnet_invert(model.subnets[i], xs[i + 1], cfg);
      ImageGrid cot;
      parts[b].loss = detail::sq_error_and_cotangent(unlift(xs[0]), batch[b].x, weight, cot);
      MultiChannelGrid c = detail::unlift_transpose(cot, M);
      parts[b].grads.resize(N);
      for (int i = 0; i < N; ++i) {
        ResidualVjp r = invert_backward(model.subnets[i], xs[i], c, cfg);
        parts[b].grads[i] = std::move(r.params);
        c = std::move(r.input);
      }
      parts[b].input = std::move(c);
    } catch (const ConvergenceError& e) {
      throw ConvergenceError("sample " + std::to_string(b) + ": " + e.what(), e.last_increment(),
                             e.iterations());
    } catch (const NumericalError& e) {
      throw NumericalError("sample " + std::to_string(b) + ": " + e.what());
    }
  });
  LossAndGrads out;
  out.grads = detail::reduce_in_order(model, parts, out.loss);
  return out;
}

/// Mean squared error of unlift(phi(lift(x))) against z over the batch.
inline LossAndGrads approx_loss_and_grads(const IResNet& model, std::span<const SamplePair> batch) {
  if (batch.empty()) throw std::invalid_argument("approx_loss_and_grads: empty batch");
  const int N = model.size(), M = model.channels();
  const double weight = 1.0 / static_cast<double>(batch.size());
  std::vector<detail::SampleResult> parts(batch.size());
  detail::parallel_for(batch.size(), [&](std::size_t b) {
    std::vector<MultiChannelGrid> xs(N + 1);
    xs[0] = lift(batch[b].x, M);
    model.check_input(xs[0]);
    for (int i = 0; i < N; ++i) xs[i + 1] = subnet_forward(model.subnets[i], xs[i]);
    ImageGrid cot;
    parts[b].loss = detail::sq_error_and_cotangent(unlift(xs[N]), batch[b].z, weight, cot);
    MultiChannelGrid c = detail::unlift_transpose(cot, M);
    parts[b].grads.resize(N);
    for (int i = N - 1; i >= 0; --i) {
      ResidualVjp r = vjp_residual(model.subnets[i], xs[i], c);
      r.params *= -1.0;  // phi = Id - f
      parts[b].grads[i] = std::move(r.params);
      c -= r.input;
    }
    parts[b].input = std::move(c);
  });
  LossAndGrads out;
  out.grads = detail::reduce_in_order(model, parts, out.loss);
  return out;
}

/// Directional derivative of the lifted network at X along T, chained
/// through every subnetwork.
inline MultiChannelGrid net_jvp(const IResNet& model, const MultiChannelGrid& x,
                                const MultiChannelGrid& t) {
  model.check_input(x);
  if (!t.same_shape(x)) throw std::invalid_argument("net_jvp: shape mismatch");
  MultiChannelGrid point = x, dir = t;
  for (const auto& s : model.subnets) {
    ResidualLinearization lin(s, point);
    dir -= lin.jvp(dir);
    point = subnet_forward(s, point);
  }
  return dir;
}

/// Transposed Jacobian of the lifted network at X applied to C.
inline MultiChannelGrid net_vjp(const IResNet& model, const MultiChannelGrid& x,
                                const MultiChannelGrid& c) {
  model.check_input(x);
  if (!c.same_shape(x)) throw std::invalid_argument("net_vjp: shape mismatch");
  std::vector<MultiChannelGrid> xs{x};
  for (const auto& s : model.subnets) xs.push_back(subnet_forward(s, xs.back()));
  MultiChannelGrid cot = c;
  for (int i = model.size() - 1; i >= 0; --i) {
    ResidualLinearization lin(model.subnets[i], xs[i]);
    cot -= lin.vjp_input(cot);
  }
  return cot;
}

}  // namespace iresnet
