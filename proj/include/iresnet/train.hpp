#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iresnet/autodiff.hpp"
#include "iresnet/forward_ops.hpp"
#include "iresnet/metrics.hpp"

namespace iresnet {

enum class Objective { Reconstruction, Approximation };

inline std::string objective_name(Objective o) {
  return o == Objective::Reconstruction ? "reconstruction" : "approximation";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "reconstruction") return Objective::Reconstruction;
  if (s == "approximation") return Objective::Approximation;
  throw std::invalid_argument("unknown objective '" + s + "'");
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState for_model(IResNet& model, double lr) {
    AdamState s;
    s.lr = lr;
    for (auto p : parameter_spans(model)) {
      s.m.emplace_back(p.size(), 0.0);
      s.v.emplace_back(p.size(), 0.0);
    }
    return s;
  }
};

/// Bias-corrected Adam update of params in place.
inline void adam_step(const std::vector<std::span<double>>& params,
                      const std::vector<std::span<double>>& grads, AdamState& st) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw std::invalid_argument("adam_step: parameter/gradient/state group count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k)
    if (params[k].size() != grads[k].size() || params[k].size() != st.m[k].size())
      throw std::invalid_argument("adam_step: shape mismatch in group " + std::to_string(k));
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const double g = grads[k][i];
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      params[k][i] -= st.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + st.eps);
    }
  }
}

struct TrainConfig {
  Objective objective = Objective::Reconstruction;
  int epochs = 10;
  int batch_size = 16;
  double lr = 1e-3;
  FixedPointConfig fixed_point{1e-6, 200};
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 disables
  int power_iters = 1;       // power rounds per projection after each step

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
    if (batch_size <= 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (checkpoint_every < 0) throw std::invalid_argument("TrainConfig: checkpoint_every < 0");
    if (power_iters < 1) throw std::invalid_argument("TrainConfig: power_iters must be >= 1");
    if (!(fixed_point.tol > 0.0) || fixed_point.max_iter < 1)
      throw std::invalid_argument("TrainConfig: invalid fixed-point config");
  }
};

/// Seed for a derived stream; stable across runs and platforms.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Adds i.i.d. N(0, delta^2) noise from a stream derived from (seed, stream, index).
inline ImageGrid add_noise(const ImageGrid& clean, double delta, std::uint64_t seed,
                           std::uint64_t stream, std::uint64_t index) {
  if (delta < 0.0) throw std::invalid_argument("add_noise: delta must be >= 0");
  ImageGrid z = clean;
  if (delta == 0.0) return z;
  std::mt19937_64 rng(derive_seed(seed, stream, index));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (double& v : z.values()) v += delta * nd(rng);
  return z;
}

/// Clean training images with their noiseless forward images; noise is
/// redrawn every epoch.
struct TrainingSet {
  std::vector<ImageGrid> clean;
  std::vector<ImageGrid> forward;
  double delta = 0.0;
  std::uint64_t noise_seed = 0;

  std::size_t size() const noexcept { return clean.size(); }

  SamplePair pair(std::size_t i, int epoch) const {
    return {clean[i], add_noise(forward[i], delta, noise_seed,
                                static_cast<std::uint64_t>(epoch) + 1, i)};
  }
};

inline TrainingSet make_training_set(const std::vector<ImageGrid>& clean,
                                     const ForwardOperator& op, double delta,
                                     std::uint64_t noise_seed) {
  TrainingSet t;
  t.clean = clean;
  t.forward.resize(clean.size());
  detail::parallel_for(clean.size(), [&](std::size_t i) { t.forward[i] = apply_operator(op, clean[i]); });
  t.delta = delta;
  t.noise_seed = noise_seed;
  return t;
}

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_psnr = 0.0;
  double val_ssim = 0.0;
};

/// Mean PSNR/SSIM on validation pairs: reconstructions against x for the
/// reconstruction objective, network outputs against z for approximation.
inline std::pair<double, double> validation_metrics(const IResNet& model,
                                                    std::span<const SamplePair> val,
                                                    Objective objective,
                                                    const FixedPointConfig& cfg) {
  if (val.empty()) return {std::nan(""), std::nan("")};
  std::vector<double> p(val.size()), s(val.size());
  detail::parallel_for(val.size(), [&](std::size_t i) {
    if (objective == Objective::Reconstruction) {
      const ImageGrid r = image_invert(model, val[i].z, cfg);
      p[i] = psnr(r, val[i].x);
      s[i] = ssim(r, val[i].x);
    } else {
      const ImageGrid y = image_forward(model, val[i].x);
      p[i] = psnr(y, val[i].z);
      s[i] = ssim(y, val[i].z);
    }
  });
  const double n = static_cast<double>(val.size());
  return {std::accumulate(p.begin(), p.end(), 0.0) / n, std::accumulate(s.begin(), s.end(), 0.0) / n};
}

inline LossAndGrads loss_and_grads(const IResNet& model, std::span<const SamplePair> batch,
                                   const TrainConfig& cfg) {
  return cfg.objective == Objective::Reconstruction
             ? recon_loss_and_grads(model, batch, cfg.fixed_point)
             : approx_loss_and_grads(model, batch);
}

struct TrainResult {
  std::vector<EpochMetrics> log;
  AdamState adam;
};

using CheckpointHook = std::function<void(const IResNet&, const AdamState&, int epoch)>;
using EpochHook = std::function<void(const EpochMetrics&)>;

/// Mini-batch Adam with a projection round after every step. Shuffling for
/// epoch e uses a stream derived from (seed, e); training noise is redrawn
/// per epoch by the training set.
inline TrainResult train(IResNet& model, const TrainingSet& data,
                         std::span<const SamplePair> validation, const TrainConfig& cfg,
                         const CheckpointHook& on_checkpoint = {},
                         const EpochHook& on_epoch = {}, AdamState* resume = nullptr) {
  cfg.validate();
  if (cfg.epochs > 0 && data.size() == 0)
    throw std::invalid_argument("train: empty training set");
  TrainResult out;
  out.adam = resume ? *resume : AdamState::for_model(model, cfg.lr);
  out.adam.lr = cfg.lr;
  std::vector<std::size_t> order(data.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 0x5348u, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<SamplePair> batch(stop - start);
      detail::parallel_for(batch.size(),
                           [&](std::size_t i) { batch[i] = data.pair(order[start + i], epoch); });
      LossAndGrads lg = loss_and_grads(model, batch, cfg);
      if (!std::isfinite(lg.loss) || !lg.grads.all_finite())
        throw NumericalError("train: non-finite loss or gradient in epoch " +
                             std::to_string(epoch));
      adam_step(parameter_spans(model), gradient_spans(lg.grads), out.adam);
      model.project(cfg.power_iters);
      loss_sum += lg.loss * static_cast<double>(batch.size());
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    std::tie(m.val_psnr, m.val_ssim) =
        validation_metrics(model, validation, cfg.objective, cfg.fixed_point);
    out.log.push_back(m);
    if (on_epoch) on_epoch(m);
    if (on_checkpoint && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)
      on_checkpoint(model, out.adam, epoch);
  }
  return out;
}

}  // namespace iresnet
