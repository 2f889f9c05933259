#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "iresnet/diffops.hpp"
#include "iresnet/errors.hpp"
#include "iresnet/grid.hpp"

namespace iresnet {

/// Normalized 2-D Gaussian on centered integer offsets, as a 1→1 kernel.
inline ConvKernel gaussian_kernel(int size, double sigma) {
  if (size <= 0 || size % 2 == 0)
    throw std::invalid_argument("gaussian_kernel: size must be odd and positive");
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  ConvKernel k(1, 1, size, size);
  const int r = size / 2;
  double total = 0.0;
  for (int a = 0; a < size; ++a) {
    for (int b = 0; b < size; ++b) {
      const double dy = a - r, dx = b - r;
      k(0, 0, a, b) = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      total += k(0, 0, a, b);
    }
  }
  for (double& w : k.weights()) w /= total;
  return k;
}

struct GaussianBlurOp {
  int kernel_size = 11;
  double sigma = 5.0 / 3.0;
  ConvKernel kernel = gaussian_kernel(11, 5.0 / 3.0);

  GaussianBlurOp() = default;
  GaussianBlurOp(int size, double s) : kernel_size(size), sigma(s), kernel(gaussian_kernel(size, s)) {}
};

/// Zero-padded convolution with the blur kernel.
inline ImageGrid blur_apply(const GaussianBlurOp& op, const ImageGrid& u) {
  return conv2d(u, op.kernel, PadMode::Zero);
}

struct PeronaMalikOp {
  double lambda = 0.1;
  double step_size = 0.15;
  int steps = 5;
};

/// Diffusivity 1 / (1 + s^2 / lambda^2).
inline double pm_g(double s, double lambda) {
  if (s < 0.0) throw std::invalid_argument("pm_g: s must be nonnegative");
  return 1.0 / (1.0 + (s * s) / (lambda * lambda));
}

/// div(g(|grad u|) grad u) with the Neumann difference pair.
inline ImageGrid pm_rhs(const ImageGrid& u, double lambda) {
  auto [gx, gy] = grad_neumann(u);
  const double inv_l2 = 1.0 / (lambda * lambda);
  for (std::size_t i = 0; i < gx.size(); ++i) {
    const double px = gx.values()[i], py = gy.values()[i];
    const double g = 1.0 / (1.0 + (px * px + py * py) * inv_l2);
    gx.values()[i] = g * px;
    gy.values()[i] = g * py;
  }
  return div_neumann(gx, gy);
}

/// Reverse-mode of pm_rhs at u: returns (d pm_rhs(u))^T c.
inline ImageGrid pm_rhs_vjp(const ImageGrid& u, double lambda, const ImageGrid& c) {
  if (!u.same_shape(c)) throw std::invalid_argument("pm_rhs_vjp: shape mismatch");
  auto [gx, gy] = grad_neumann(u);
  // div^T = -grad
  auto [cx, cy] = grad_neumann(c);
  const double inv_l2 = 1.0 / (lambda * lambda);
  ImageGrid bx(u.height(), u.width()), by(u.height(), u.width());
  for (std::size_t i = 0; i < gx.size(); ++i) {
    const double px = gx.values()[i], py = gy.values()[i];
    const double g = 1.0 / (1.0 + (px * px + py * py) * inv_l2);
    const double dg = -2.0 * g * g * inv_l2;  // d g / d(s^2) times 2
    const double jxx = g + dg * px * px, jyy = g + dg * py * py, jxy = dg * px * py;
    const double ux = -cx.values()[i], uy = -cy.values()[i];
    bx.values()[i] = jxx * ux + jxy * uy;
    by.values()[i] = jxy * ux + jyy * uy;
  }
  // grad^T = -div
  return div_neumann(bx, by) * -1.0;
}

namespace detail {
inline void require_finite(const ImageGrid& u, int step) {
  if (!u.all_finite())
    throw NumericalError("heun_diffuse: non-finite values at step " + std::to_string(step) +
                         "; the step size is unstable");
}
}  // namespace detail

/// Explicit Heun integration of the Perona-Malik flow.
inline ImageGrid heun_diffuse(const PeronaMalikOp& op, const ImageGrid& u0) {
  if (op.steps < 1 || !(op.step_size > 0.0))
    throw std::invalid_argument("heun_diffuse: steps >= 1 and step_size > 0 required");
  const double h = op.step_size;
  ImageGrid u = u0;
  for (int s = 0; s < op.steps; ++s) {
    const ImageGrid k1 = pm_rhs(u, op.lambda);
    const ImageGrid k2 = pm_rhs(u + h * k1, op.lambda);
    for (std::size_t i = 0; i < u.size(); ++i)
      u.values()[i] += 0.5 * h * (k1.values()[i] + k2.values()[i]);
    detail::require_finite(u, s);
  }
  return u;
}

/// Reverse-mode through all Heun steps at u0.
inline ImageGrid heun_vjp(const PeronaMalikOp& op, const ImageGrid& u0, const ImageGrid& c) {
  const double h = op.step_size;
  std::vector<ImageGrid> states{u0};
  std::vector<ImageGrid> stages;
  states.reserve(op.steps + 1);
  stages.reserve(op.steps);
  for (int s = 0; s < op.steps; ++s) {
    const ImageGrid& u = states.back();
    const ImageGrid k1 = pm_rhs(u, op.lambda);
    ImageGrid u1 = u + h * k1;
    const ImageGrid k2 = pm_rhs(u1, op.lambda);
    ImageGrid next = u;
    for (std::size_t i = 0; i < u.size(); ++i)
      next.values()[i] += 0.5 * h * (k1.values()[i] + k2.values()[i]);
    detail::require_finite(next, s);
    stages.push_back(std::move(u1));
    states.push_back(std::move(next));
  }
  ImageGrid cot = c;
  for (int s = op.steps - 1; s >= 0; --s) {
    const ImageGrid c_u1 = pm_rhs_vjp(stages[s], op.lambda, 0.5 * h * cot);
    ImageGrid c_k1 = 0.5 * h * cot + h * c_u1;
    ImageGrid next = cot + c_u1;
    next += pm_rhs_vjp(states[s], op.lambda, c_k1);
    cot = std::move(next);
  }
  return cot;
}

/// One implicit Euler step of the linear heat equation, (I - h Lap) v = u.
struct ImplicitHeatStep {
  double h = 0.15;
  double solver_tol = 1e-10;
  int solver_max_iter = 5000;
};

/// Conjugate-gradient solve of (I - h Lap_neumann) v = u.
inline ImageGrid implicit_heat_step(const ImplicitHeatStep& op, const ImageGrid& u) {
  if (!(op.h > 0.0) || !(op.solver_tol > 0.0))
    throw std::invalid_argument("implicit_heat_step: h and solver_tol must be positive");
  auto system = [&](const ImageGrid& v) { return v - op.h * laplacian_neumann(v); };
  const double unorm = norm2(u);
  ImageGrid v(u.height(), u.width());
  if (unorm == 0.0) return v;
  v = u;
  ImageGrid r = u - system(v);
  ImageGrid p = r;
  double rr = dot(r, r);
  const double target = op.solver_tol * unorm;
  for (int it = 0; it < op.solver_max_iter; ++it) {
    if (std::sqrt(rr) <= target) return v;
    const ImageGrid ap = system(p);
    const double alpha = rr / dot(p, ap);
    for (std::size_t i = 0; i < v.size(); ++i) {
      v.values()[i] += alpha * p.values()[i];
      r.values()[i] -= alpha * ap.values()[i];
    }
    const double rr_new = dot(r, r);
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t i = 0; i < p.size(); ++i)
      p.values()[i] = r.values()[i] + beta * p.values()[i];
  }
  if (std::sqrt(rr) <= target) return v;
  throw ConvergenceError("implicit_heat_step: conjugate gradient did not converge",
                         std::sqrt(rr), op.solver_max_iter);
}

struct IdentityOp {};

using ForwardOperator = std::variant<IdentityOp, GaussianBlurOp, PeronaMalikOp, ImplicitHeatStep>;

inline ImageGrid apply_operator(const ForwardOperator& op, const ImageGrid& u) {
  return std::visit(
      [&](const auto& o) -> ImageGrid {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, IdentityOp>) return u;
        else if constexpr (std::is_same_v<T, GaussianBlurOp>) return blur_apply(o, u);
        else if constexpr (std::is_same_v<T, PeronaMalikOp>) return heun_diffuse(o, u);
        else return implicit_heat_step(o, u);
      },
      op);
}

/// Transposed Jacobian of the operator at u0 applied to c.
inline ImageGrid operator_vjp(const ForwardOperator& op, const ImageGrid& u0, const ImageGrid& c) {
  return std::visit(
      [&](const auto& o) -> ImageGrid {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, IdentityOp>) return c;
        else if constexpr (std::is_same_v<T, GaussianBlurOp>)
          return conv2d_transpose(as_multichannel(c), o.kernel).channel(0);
        else if constexpr (std::is_same_v<T, PeronaMalikOp>) return heun_vjp(o, u0, c);
        else return implicit_heat_step(o, c);  // self-adjoint
      },
      op);
}

inline bool is_linear(const ForwardOperator& op) {
  return !std::holds_alternative<PeronaMalikOp>(op);
}

inline std::string operator_name(const ForwardOperator& op) {
  static const char* names[] = {"identity", "blur", "pm", "heat"};
  return names[op.index()];
}

}  // namespace iresnet
