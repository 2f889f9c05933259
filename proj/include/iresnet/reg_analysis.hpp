#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iresnet/autodiff.hpp"
#include "iresnet/forward_ops.hpp"
#include "iresnet/io.hpp"
#include "iresnet/metrics.hpp"

namespace iresnet {

/// A trained model tagged with the noise level it was trained for.
struct PairingEntry {
  double delta = 0.0;
  double lip = 0.0;
  const IResNet* model = nullptr;
  std::string source;  // checkpoint path, for reporting
};

/// (delta, L) pairs with L strictly increasing as delta decreases.
class ConvergencePairing {
 public:
  ConvergencePairing() = default;
  explicit ConvergencePairing(std::vector<PairingEntry> entries) : entries_(std::move(entries)) {
    for (const auto& e : entries_) {
      if (!e.model) throw std::invalid_argument("ConvergencePairing: entry without a model");
      if (!(e.delta >= 0.0)) throw std::invalid_argument("ConvergencePairing: delta must be >= 0");
    }
    std::sort(entries_.begin(), entries_.end(),
              [](const auto& a, const auto& b) { return a.lip < b.lip; });
    for (std::size_t i = 1; i < entries_.size(); ++i)
      if (!(entries_[i].lip > entries_[i - 1].lip && entries_[i].delta < entries_[i - 1].delta))
        throw std::invalid_argument(
            "ConvergencePairing: L must increase strictly as delta decreases");
  }

  const std::vector<PairingEntry>& entries() const noexcept { return entries_; }

 private:
  std::vector<PairingEntry> entries_;
};

struct InversionErrorRow {
  double delta = 0.0;
  double lip = 0.0;
  double mean_error = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
};

inline std::pair<double, double> mean_and_std(std::span<const double> v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0};
}

/// ||phi^-1(F(x)) - x|| per test image (noiseless data).
inline std::vector<double> inversion_errors(const IResNet& model, const ForwardOperator& op,
                                            std::span<const ImageGrid> testset,
                                            const FixedPointConfig& cfg = {}) {
  std::vector<double> err(testset.size());
  detail::parallel_for(testset.size(), [&](std::size_t i) {
    err[i] = distance(image_invert(model, apply_operator(op, testset[i]), cfg), testset[i]);
  });
  return err;
}

/// Mean inversion error per pairing entry; rows sorted by L.
inline std::vector<InversionErrorRow> inversion_error_study(const ConvergencePairing& pairing,
                                                            const ForwardOperator& op,
                                                            std::span<const ImageGrid> testset,
                                                            const FixedPointConfig& cfg = {}) {
  std::vector<InversionErrorRow> rows;
  for (const auto& e : pairing.entries()) {
    const auto err = inversion_errors(*e.model, op, testset, cfg);
    const auto [mean, sd] = mean_and_std(err);
    rows.push_back({e.delta, e.lip, mean, sd, err.size()});
  }
  return rows;
}

struct LocalApproxRow {
  std::size_t index = 0;
  double error = 0.0;  // ||F(x) - phi(x)||
  double ratio = 0.0;  // error / (1 - L)
};

inline std::vector<LocalApproxRow> local_approx_check(const IResNet& model,
                                                      const ForwardOperator& op,
                                                      std::span<const ImageGrid> testset) {
  const double gap = 1.0 - model.lip_param();
  std::vector<LocalApproxRow> rows(testset.size());
  detail::parallel_for(testset.size(), [&](std::size_t i) {
    const double err = distance(apply_operator(op, testset[i]), image_forward(model, testset[i]));
    rows[i] = {i, err, err / gap};
  });
  return rows;
}

struct ApproxQuality {
  double psnr = 0.0;
  double ssim = 0.0;
};

/// Mean PSNR/SSIM between phi(x) and F(x).
inline ApproxQuality approx_quality(const IResNet& model, const ForwardOperator& op,
                                    std::span<const ImageGrid> testset) {
  if (testset.empty()) throw std::invalid_argument("approx_quality: empty test set");
  std::vector<double> p(testset.size()), s(testset.size());
  detail::parallel_for(testset.size(), [&](std::size_t i) {
    const ImageGrid fx = apply_operator(op, testset[i]);
    const ImageGrid y = image_forward(model, testset[i]);
    p[i] = psnr(y, fx);
    s[i] = ssim(y, fx);
  });
  return {mean_and_std(p).first, mean_and_std(s).first};
}

/// ||d_h phi(x0)|| measured in the lifted space: |J (lift h)| / sqrt(M).
inline double directional_norm_phi(const IResNet& model, const ImageGrid& x0, const ImageGrid& h) {
  const int m = model.channels();
  return norm2(net_jvp(model, lift(x0, m), lift(h, m))) / std::sqrt(static_cast<double>(m));
}

/// Central difference (F(x0 + eps h) - F(x0 - eps h)) / (2 eps).
inline ImageGrid directional_derivative_F(const ForwardOperator& op, const ImageGrid& x0,
                                          const ImageGrid& h, double eps = 1e-3) {
  ImageGrid d = apply_operator(op, x0 + eps * h) - apply_operator(op, x0 - eps * h);
  d *= 1.0 / (2.0 * eps);
  return d;
}

struct DirectionProbeConfig {
  int steps = 200;
  double rate = 0.1;
  std::optional<ImageGrid> mask;  // nonzero entries mark the admissible region
  std::uint64_t seed = 0;
  double fd_eps = 1e-3;
  int max_halvings = 30;

  void validate(const ImageGrid& x0) const {
    if (steps < 0) throw std::invalid_argument("DirectionProbeConfig: steps must be >= 0");
    if (!(rate > 0.0)) throw std::invalid_argument("DirectionProbeConfig: rate must be positive");
    if (!(fd_eps > 0.0)) throw std::invalid_argument("DirectionProbeConfig: fd_eps must be positive");
    if (mask) {
      if (!mask->same_shape(x0))
        throw std::invalid_argument("DirectionProbeConfig: mask shape differs from image");
      for (double v : mask->values())
        if (v != 0.0 && v != 1.0)
          throw std::invalid_argument("DirectionProbeConfig: mask must be binary");
      if (std::all_of(mask->values().begin(), mask->values().end(),
                      [](double v) { return v == 0.0; }))
        throw std::invalid_argument("DirectionProbeConfig: mask is all zero");
    }
  }
};

struct DirectionTraceRow {
  int step = 0;
  double objective = 0.0;  // ||d_h phi||^2 - ||d_h F||^2
  double norm_phi = 0.0;
  double norm_F = 0.0;
};

struct DirectionProbeResult {
  ImageGrid h;
  double norm_phi = 0.0;
  double norm_F = 0.0;
  std::vector<DirectionTraceRow> trace;  // accepted iterates only
};

namespace detail {

inline void mask_and_normalize(ImageGrid& h, const std::optional<ImageGrid>& mask) {
  if (mask)
    for (std::size_t i = 0; i < h.size(); ++i) h.values()[i] *= mask->values()[i];
  const double n = norm2(h);
  if (!(n > 0.0) || !std::isfinite(n))
    throw NumericalError("direction_ascent: direction vanished under the mask");
  h *= 1.0 / n;
}

struct ProbeEval {
  double objective, norm_phi, norm_F;
  ImageGrid grad;
};

inline ProbeEval probe_eval(const IResNet& model, const ForwardOperator& op, const ImageGrid& x0,
                            const ImageGrid& h, double eps) {
  const int m = model.channels();
  const MultiChannelGrid X = lift(x0, m);
  const MultiChannelGrid jh = net_jvp(model, X, lift(h, m));
  const double scale = 1.0 / static_cast<double>(m);
  const double phi2 = dot(jh, jh) * scale;
  const ImageGrid df = directional_derivative_F(op, x0, h, eps);
  const double f2 = dot(df, df);
  // gradient of phi2 - f2 w.r.t. h: 2/M lift^T J^T J lift h - 2 J_F^T J_F h
  const MultiChannelGrid jtj = net_vjp(model, X, jh);
  ImageGrid grad(h.height(), h.width());
  for (int c = 0; c < m; ++c)
    for (std::size_t i = 0; i < grad.size(); ++i)
      grad.values()[i] += 2.0 * scale * jtj.channel_values(c)[i];
  grad -= 2.0 * operator_vjp(op, x0, df);
  const double objective = phi2 - f2;
  if (!std::isfinite(objective)) throw NumericalError("direction_ascent: non-finite objective");
  return {objective, std::sqrt(phi2), std::sqrt(f2), std::move(grad)};
}

}  // namespace detail

/// Projected gradient ascent of ||d_h phi(x0)||^2 - ||d_h F(x0)||^2 over unit
/// h (restricted to the mask). A step that lowers the objective is retried
/// with half the rate; the trace lists accepted iterates only.
inline DirectionProbeResult direction_ascent(const IResNet& model, const ForwardOperator& op,
                                             const ImageGrid& x0, const DirectionProbeConfig& cfg) {
  cfg.validate(x0);
  if (!std::isfinite(norm2(x0))) throw std::invalid_argument("direction_ascent: non-finite x0");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  ImageGrid h(x0.height(), x0.width());
  for (double& v : h.values()) v = nd(rng);
  detail::mask_and_normalize(h, cfg.mask);

  auto cur = detail::probe_eval(model, op, x0, h, cfg.fd_eps);
  DirectionProbeResult out;
  out.trace.push_back({0, cur.objective, cur.norm_phi, cur.norm_F});
  double rate = cfg.rate;
  for (int step = 1; step <= cfg.steps; ++step) {
    bool accepted = false;
    for (int k = 0; k <= cfg.max_halvings; ++k) {
      ImageGrid cand = h + rate * cur.grad;
      detail::mask_and_normalize(cand, cfg.mask);
      auto ev = detail::probe_eval(model, op, x0, cand, cfg.fd_eps);
      if (ev.objective >= cur.objective) {
        h = std::move(cand);
        cur = std::move(ev);
        accepted = true;
        break;
      }
      rate *= 0.5;
    }
    if (!accepted) break;
    out.trace.push_back({step, cur.objective, cur.norm_phi, cur.norm_F});
  }
  out.h = std::move(h);
  out.norm_phi = cur.norm_phi;
  out.norm_F = cur.norm_F;
  return out;
}

/// Number of pairs (i < j) that violate the requested ordering. Ties count
/// as violations for strict orderings.
inline std::size_t order_violations(std::span<const double> v, bool increasing, bool strict) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = i + 1; j < v.size(); ++j) {
      const double d = increasing ? v[j] - v[i] : v[i] - v[j];
      if (strict ? !(d > 0.0) : d < 0.0) ++count;
    }
  return count;
}

inline void write_inversion_error_csv(const std::filesystem::path& path,
                                      std::span<const InversionErrorRow> rows) {
  CsvWriter w(path, {"delta", "L", "mean_error", "std_error", "n"});
  for (const auto& r : rows) w.row(r.delta, r.lip, r.mean_error, r.std_error, r.n);
}

inline void write_local_approx_csv(const std::filesystem::path& path, double lip,
                                   std::span<const LocalApproxRow> rows) {
  CsvWriter w(path, {"index", "L", "error", "ratio"});
  for (const auto& r : rows) w.row(r.index, lip, r.error, r.ratio);
}

inline void write_approx_quality_csv(const std::filesystem::path& path, double delta, double lip,
                                     const ApproxQuality& q, std::size_t n) {
  CsvWriter w(path, {"delta", "L", "psnr", "ssim", "n"});
  w.row(delta, lip, q.psnr, q.ssim, n);
}

inline void write_direction_trace_csv(const std::filesystem::path& path,
                                      std::span<const DirectionTraceRow> rows) {
  CsvWriter w(path, {"step", "objective", "norm_phi", "norm_F"});
  for (const auto& r : rows) w.row(r.step, r.objective, r.norm_phi, r.norm_F);
}

}  // namespace iresnet
