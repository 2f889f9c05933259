#pragma once

#include <functional>
#include <random>

#include <Eigen/Dense>

#include "iresnet/grid.hpp"

namespace iresnet::testing {

inline ImageGrid random_image(int h, int w, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  ImageGrid g(h, w);
  for (double& v : g.values()) v = u(rng);
  return g;
}

inline MultiChannelGrid random_grid(int c, int h, int w, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  MultiChannelGrid g(c, h, w);
  for (double& v : g.values()) v = u(rng);
  return g;
}

inline ConvKernel random_kernel(int o, int i, int k, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  ConvKernel K(o, i, k, k);
  for (double& v : K.weights()) v = nd(rng);
  return K;
}

/// Columns are the images of the unit vectors under a linear map.
inline Eigen::MatrixXd materialize(int in_size, int out_size,
                                   const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f) {
  Eigen::MatrixXd A(out_size, in_size);
  for (int j = 0; j < in_size; ++j) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(in_size);
    e(j) = 1.0;
    A.col(j) = f(e);
  }
  return A;
}

inline Eigen::VectorXd to_vec(std::span<const double> s) {
  return Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
}

inline double largest_singular_value(const Eigen::MatrixXd& A) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
  return svd.singularValues()(0);
}

}  // namespace iresnet::testing
