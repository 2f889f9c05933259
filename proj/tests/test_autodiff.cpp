#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "iresnet/autodiff.hpp"
#include "iresnet/metrics.hpp"
#include "test_util.hpp"

using namespace iresnet;
using iresnet::testing::random_grid;
using iresnet::testing::random_image;

namespace {

ArchitectureConfig tiny(std::uint64_t seed, double init_fraction) {
  ArchitectureConfig cfg;
  cfg.subnets = 2;
  cfg.channels = 2;
  cfg.hidden = 4;
  cfg.kernel = 3;
  cfg.height = 6;
  cfg.width = 6;
  cfg.init_fraction = init_fraction;
  cfg.init_threshold = 0.02;
  cfg.seed = seed;
  return cfg;
}

/// Random direction in parameter space, same layout as gradient_spans.
std::vector<std::vector<double>> random_param_direction(IResNet& model, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::vector<double>> d;
  for (auto s : parameter_spans(model)) {
    d.emplace_back(s.size());
    for (double& v : d.back()) v = nd(rng);
  }
  return d;
}

IResNet perturbed(const IResNet& model, const std::vector<std::vector<double>>& dir, double eps) {
  IResNet m = model;
  auto spans = parameter_spans(m);
  for (std::size_t k = 0; k < spans.size(); ++k)
    for (std::size_t i = 0; i < spans[k].size(); ++i) spans[k][i] += eps * dir[k][i];
  m.refresh();
  return m;
}

double contract(TapeGradients& g, const std::vector<std::vector<double>>& dir) {
  auto spans = gradient_spans(g);
  double s = 0.0;
  for (std::size_t k = 0; k < spans.size(); ++k)
    for (std::size_t i = 0; i < spans[k].size(); ++i) s += spans[k][i] * dir[k][i];
  return s;
}

TapeGradients single(const IResNet& model, int n, const SubnetGrads& g) {
  TapeGradients t = TapeGradients::zeros_like(model);
  t.subnets[n] = g;
  return t;
}

void expect_close(double analytic, double fd, double rel) {
  EXPECT_NEAR(analytic, fd, rel * std::max(1.0, std::abs(fd))) << "analytic " << analytic
                                                                << " fd " << fd;
}

}  // namespace

class ResidualGradients : public ::testing::TestWithParam<double> {};

TEST_P(ResidualGradients, InputVjpMatchesFiniteDifferences) {
  auto model = make_iresnet(tiny(1, GetParam()));
  std::mt19937_64 rng(2);
  const auto& sub = model.subnets[0];
  for (int t = 0; t < 5; ++t) {
    auto x = random_grid(2, 6, 6, rng), c = random_grid(2, 6, 6, rng),
         d = random_grid(2, 6, 6, rng);
    const double h = 1e-5;
    const double fd =
        (dot(residual_apply(sub, x + h * d), c) - dot(residual_apply(sub, x - h * d), c)) / (2 * h);
    expect_close(dot(vjp_residual(sub, x, c).input, d), fd, 1e-4);
  }
}

TEST_P(ResidualGradients, ParamVjpMatchesFiniteDifferences) {
  auto model = make_iresnet(tiny(3, GetParam()));
  std::mt19937_64 rng(4);
  for (int t = 0; t < 5; ++t) {
    auto x = random_grid(2, 6, 6, rng), c = random_grid(2, 6, 6, rng);
    const auto dir = random_param_direction(model, rng);
    const double h = 1e-5;
    auto value = [&](double eps) {
      return dot(residual_apply(perturbed(model, dir, eps).subnets[1], x), c);
    };
    const double fd = (value(h) - value(-h)) / (2 * h);
    auto g = single(model, 1, vjp_residual(model.subnets[1], x, c).params);
    expect_close(contract(g, dir), fd, 1e-4);
  }
}

TEST_P(ResidualGradients, JvpVjpAdjoint) {
  auto model = make_iresnet(tiny(5, GetParam()));
  std::mt19937_64 rng(6);
  for (const auto& sub : model.subnets) {
    auto x = random_grid(2, 6, 6, rng), t = random_grid(2, 6, 6, rng),
         c = random_grid(2, 6, 6, rng);
    EXPECT_NEAR(dot(jvp_residual(sub, x, t), c), dot(t, vjp_residual(sub, x, c).input), 1e-10);
  }
}

INSTANTIATE_TEST_SUITE_P(InitScale, ResidualGradients, ::testing::Values(0.5, 5.0));

TEST(InvertBackward, ScalarContraction) {
  Subnetwork s(1, 1, 1, 0.6, 3, 3);
  s.conv_a(0, 0, 0, 0) = 0.7;
  s.conv_b(0, 0, 0, 0) = 0.5 / 0.7;
  s.power_a = MultiChannelGrid(1, 3, 3, 1.0 / 3.0);
  s.power_b = MultiChannelGrid(1, 3, 3, 1.0 / 3.0);
  s.refresh();
  MultiChannelGrid z(1, 3, 3, 0.3), v(1, 3, 3, 1.0);
  auto x = subnet_invert(s, z, {1e-12, 500});
  auto r = invert_backward(s, x, v, {1e-12, 500});
  // x* = 2 z, so the input cotangent is 2 v
  for (double u : r.input.values()) EXPECT_NEAR(u, 2.0, 1e-10);
}

TEST(InvertBackward, MatchesFiniteDifferences) {
  auto model = make_iresnet(tiny(7, 5.0));
  std::mt19937_64 rng(8);
  const FixedPointConfig cfg{1e-13, 2000};
  const auto& sub = model.subnets[0];
  auto z = random_grid(2, 6, 6, rng), v = random_grid(2, 6, 6, rng),
       dz = random_grid(2, 6, 6, rng);
  const auto x = subnet_invert(sub, z, cfg);
  const auto r = invert_backward(sub, x, v, cfg);
  const double h = 1e-5;
  const double fd_z =
      (dot(subnet_invert(sub, z + h * dz, cfg), v) - dot(subnet_invert(sub, z - h * dz, cfg), v)) /
      (2 * h);
  expect_close(dot(r.input, dz), fd_z, 1e-4);

  const auto dir = random_param_direction(model, rng);
  auto value = [&](double eps) {
    return dot(subnet_invert(perturbed(model, dir, eps).subnets[0], z, cfg), v);
  };
  const double fd_p = (value(h) - value(-h)) / (2 * h);
  auto g = single(model, 0, r.params);
  expect_close(contract(g, dir), fd_p, 1e-4);
}

TEST(InvertBackward, ImplicitMatchesUnrolled) {
  auto model = make_iresnet(tiny(9, 5.0));
  std::mt19937_64 rng(10);
  const auto& sub = model.subnets[1];
  auto z = random_grid(2, 6, 6, rng), v = random_grid(2, 6, 6, rng);
  // Unrolled: x_{k+1} = z + f(x_k) for K steps, reverse mode through every step.
  const int K = 400;
  std::vector<MultiChannelGrid> xs{z};
  for (int k = 0; k < K; ++k) xs.push_back(z + residual_apply(sub, xs.back()));
  MultiChannelGrid c = v, cz(2, 6, 6);
  SubnetGrads gp = SubnetGrads::zeros_like(sub);
  for (int k = K - 1; k >= 0; --k) {
    auto r = vjp_residual(sub, xs[k], c);
    cz += c;
    gp += r.params;
    c = r.input;
  }
  cz += c;  // x_0 = z
  const auto implicit = invert_backward(sub, xs.back(), v, {1e-13, 2000});
  EXPECT_LE(distance(implicit.input, cz), 1e-8 * norm2(cz));
  for (std::size_t i = 0; i < gp.conv_a.size(); ++i)
    EXPECT_NEAR(implicit.params.conv_a.weights()[i], gp.conv_a.weights()[i], 1e-8);
  for (std::size_t i = 0; i < gp.shrink_raw.size(); ++i)
    EXPECT_NEAR(implicit.params.shrink_raw[i], gp.shrink_raw[i], 1e-8);
}

TEST(InvertBackward, ZeroCotangent) {
  auto model = make_iresnet(tiny(11, 0.5));
  MultiChannelGrid x(2, 6, 6), v(2, 6, 6);
  auto r = invert_backward(model.subnets[0], x, v);
  EXPECT_EQ(norm2(r.input), 0.0);
}

namespace {

std::vector<SamplePair> make_batch(int n, std::mt19937_64& rng) {
  std::vector<SamplePair> b;
  for (int i = 0; i < n; ++i) b.push_back({random_image(6, 6, rng), random_image(6, 6, rng)});
  return b;
}

}  // namespace

TEST(Losses, ReconstructionGradientMatchesFiniteDifferences) {
  auto model = make_iresnet(tiny(12, 5.0));
  std::mt19937_64 rng(13);
  const auto batch = make_batch(3, rng);
  const FixedPointConfig cfg{1e-13, 3000};
  auto lg = recon_loss_and_grads(model, batch, cfg);
  double direct = 0.0;
  for (const auto& p : batch) {
    const auto r = image_invert(model, p.z, cfg);
    direct += iresnet::mse(r, p.x) / batch.size();
  }
  EXPECT_NEAR(lg.loss, direct, 1e-12);
  EXPECT_EQ(lg.grads.inputs.size(), batch.size());
  for (int t = 0; t < 3; ++t) {
    const auto dir = random_param_direction(model, rng);
    const double h = 1e-5;
    auto value = [&](double eps) { return recon_loss_and_grads(perturbed(model, dir, eps), batch, cfg).loss; };
    expect_close(contract(lg.grads, dir), (value(h) - value(-h)) / (2 * h), 1e-4);
  }
}

TEST(Losses, ApproximationGradientMatchesFiniteDifferences) {
  auto model = make_iresnet(tiny(14, 5.0));
  std::mt19937_64 rng(15);
  const auto batch = make_batch(3, rng);
  auto lg = approx_loss_and_grads(model, batch);
  for (int t = 0; t < 3; ++t) {
    const auto dir = random_param_direction(model, rng);
    const double h = 1e-5;
    auto value = [&](double eps) { return approx_loss_and_grads(perturbed(model, dir, eps), batch).loss; };
    expect_close(contract(lg.grads, dir), (value(h) - value(-h)) / (2 * h), 1e-4);
  }
}

TEST(Losses, InputCotangentMatchesFiniteDifferences) {
  auto model = make_iresnet(tiny(16, 5.0));
  std::mt19937_64 rng(17);
  auto batch = make_batch(1, rng);
  const FixedPointConfig cfg{1e-13, 3000};
  auto lg = recon_loss_and_grads(model, batch, cfg);
  auto dz = random_image(6, 6, rng);
  const double h = 1e-5;
  auto value = [&](double eps) {
    std::vector<SamplePair> b{{batch[0].x, batch[0].z + eps * dz}};
    return recon_loss_and_grads(model, b, cfg).loss;
  };
  // d loss / d z = lift^T of the lifted input cotangent
  const double analytic = dot(lg.grads.inputs[0], lift(dz, model.channels()));
  expect_close(analytic, (value(h) - value(-h)) / (2 * h), 1e-4);
}

TEST(Losses, IdentityModelGradientOfShrinkIsZero) {
  auto model = make_identity_iresnet(2, 2, 3, 6, 6, 0.9, 3);
  std::mt19937_64 rng(18);
  const auto batch = make_batch(2, rng);
  auto lg = recon_loss_and_grads(model, batch);
  EXPECT_TRUE(lg.grads.all_finite());
  for (const auto& g : lg.grads.subnets)
    for (double v : g.shrink_raw) EXPECT_EQ(v, 0.0);
}

TEST(Losses, ErrorsCarrySampleIndex) {
  auto model = make_iresnet(tiny(19, 5.0));
  std::mt19937_64 rng(20);
  auto batch = make_batch(2, rng);
  try {
    recon_loss_and_grads(model, batch, {1e-15, 1});
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("sample 0"), std::string::npos);
  }
  EXPECT_THROW(recon_loss_and_grads(model, std::span<const SamplePair>{}), std::invalid_argument);
}

TEST(NetworkDerivatives, JvpVjpAdjointAndFiniteDifferences) {
  auto model = make_iresnet(tiny(21, 5.0));
  std::mt19937_64 rng(22);
  auto x = random_grid(2, 6, 6, rng), t = random_grid(2, 6, 6, rng), c = random_grid(2, 6, 6, rng);
  EXPECT_NEAR(dot(net_jvp(model, x, t), c), dot(t, net_vjp(model, x, c)), 1e-10);
  const double h = 1e-5;
  const auto fd = (net_forward(model, x + h * t) - net_forward(model, x - h * t)) * (0.5 / h);
  EXPECT_LE(distance(net_jvp(model, x, t), fd), 1e-4 * norm2(fd));
}
