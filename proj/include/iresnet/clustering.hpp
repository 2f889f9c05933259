#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "iresnet/errors.hpp"

namespace iresnet {

/// Rows are observations.
using DataMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct KMeansResult {
  std::vector<int> labels;
  DataMatrix centers;
  double inertia = 0.0;  // sum of squared distances to assigned centers
};

namespace detail {

inline KMeansResult kmeans_once(const DataMatrix& X, int k, std::mt19937_64& rng, int max_iter) {
  const Eigen::Index n = X.rows();
  DataMatrix centers(k, X.cols());
  // k-means++ seeding
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  centers.row(0) = X.row(pick(rng));
  Eigen::VectorXd d2 = (X.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index chosen = pick(rng);
    if (total > 0.0) {
      double t = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (Eigen::Index i = 0; i < n; ++i) {
        t -= d2[i];
        if (t <= 0.0) {
          chosen = i;
          break;
        }
      }
    }
    centers.row(c) = X.row(chosen);
    d2 = d2.cwiseMin((X.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }

  KMeansResult res;
  res.labels.assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (X.row(i) - centers.row(c)).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (res.labels[i] != best) {
        res.labels[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    DataMatrix sums = DataMatrix::Zero(k, X.cols());
    std::vector<Eigen::Index> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(res.labels[i]) += X.row(i);
      ++counts[res.labels[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        centers.row(c) = sums.row(c) / static_cast<double>(counts[c]);
      } else {
        // re-seed an empty cluster at the point farthest from its center
        Eigen::Index far = 0;
        double fd = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d = (X.row(i) - centers.row(res.labels[i])).squaredNorm();
          if (d > fd) {
            fd = d;
            far = i;
          }
        }
        centers.row(c) = X.row(far);
        changed = true;
      }
    }
  }
  res.inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    res.inertia += (X.row(i) - centers.row(res.labels[i])).squaredNorm();
  res.centers = std::move(centers);
  return res;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by
/// inertia is returned.
inline KMeansResult kmeans(const DataMatrix& X, int k, std::uint64_t seed, int restarts = 10,
                           int max_iter = 300) {
  if (k < 1 || k > X.rows())
    throw std::invalid_argument("kmeans: k must lie in [1, number of points]");
  if (restarts < 1) throw std::invalid_argument("kmeans: restarts must be >= 1");
  std::mt19937_64 rng(seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    auto res = detail::kmeans_once(X, k, rng, max_iter);
    if (res.inertia < best.inertia) best = std::move(res);
  }
  return best;
}

inline double median_pairwise_distance(const DataMatrix& X) {
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(X.rows() * (X.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index j = i + 1; j < X.rows(); ++j) d.push_back((X.row(i) - X.row(j)).norm());
  if (d.empty()) return 0.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid;
}

/// Normalized spectral clustering: RBF affinity with the median pairwise
/// distance as bandwidth, the k eigenvectors of the symmetric normalized
/// Laplacian with smallest eigenvalues, row normalization, then k-means.
inline std::vector<int> spectral_cluster(const DataMatrix& X, int k, std::uint64_t seed,
                                         int restarts = 10) {
  const Eigen::Index n = X.rows();
  if (k < 1 || k > n) throw std::invalid_argument("spectral_cluster: k must lie in [1, count]");
  if (k == 1) return std::vector<int>(static_cast<std::size_t>(n), 0);
  const double sigma = median_pairwise_distance(X);
  Eigen::MatrixXd A(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    A(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double d2 = (X.row(i) - X.row(j)).squaredNorm();
      A(i, j) = A(j, i) = sigma > 0.0 ? std::exp(-d2 / (2.0 * sigma * sigma)) : 1.0;
    }
  }
  Eigen::VectorXd dinv = A.rowwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) dinv[i] = dinv[i] > 0.0 ? 1.0 / std::sqrt(dinv[i]) : 0.0;
  // smallest eigenvalues of I - D^-1/2 A D^-1/2 = largest of D^-1/2 A D^-1/2
  Eigen::MatrixXd S = dinv.asDiagonal() * A * dinv.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  if (es.info() != Eigen::Success) throw NumericalError("spectral_cluster: eigensolver failed");
  DataMatrix U = es.eigenvectors().rightCols(k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double nr = U.row(i).norm();
    if (nr > 0.0) U.row(i) /= nr;
  }
  return kmeans(U, k, seed, restarts).labels;
}

struct ChooseKConfig {
  int kmax = 8;
  int references = 10;  // B
  int restarts = 10;
  std::uint64_t seed = 0;
};

struct ChooseKResult {
  std::vector<double> dispersion;      // W_k, k = 1..kmax (elbow curve)
  std::vector<double> gap;             // mean_B log W_k^ref - log W_k
  std::vector<double> gap_sd;          // s_k = sd_k * sqrt(1 + 1/B)
  std::vector<double> gap_star;        // mean_B W_k^ref - W_k
  int recommended = 1;
};

/// Pooled within-cluster sum of squares of a k-means clustering.
inline double within_dispersion(const DataMatrix& X, int k, std::uint64_t seed, int restarts) {
  return kmeans(X, std::min<int>(k, static_cast<int>(X.rows())), seed, restarts).inertia;
}

/// Elbow, gap and unlogged gap* curves with uniform reference sets drawn
/// over the data's bounding box. Recommends the smallest k with
/// Gap(k) >= Gap(k+1) - s_{k+1}.
inline ChooseKResult choose_k(const DataMatrix& X, const ChooseKConfig& cfg = {}) {
  if (cfg.kmax < 2) throw std::invalid_argument("choose_k: kmax must be >= 2");
  if (cfg.references < 1) throw std::invalid_argument("choose_k: need at least one reference set");
  if (X.rows() < 1) throw std::invalid_argument("choose_k: no data");
  const int kmax = std::min<int>(cfg.kmax, static_cast<int>(X.rows()));
  ChooseKResult out;
  const Eigen::RowVectorXd lo = X.colwise().minCoeff(), hi = X.colwise().maxCoeff();
  if ((hi - lo).maxCoeff() <= 0.0) {
    out.dispersion.assign(kmax, 0.0);
    out.gap.assign(kmax, 0.0);
    out.gap_sd.assign(kmax, 0.0);
    out.gap_star.assign(kmax, 0.0);
    return out;
  }
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<DataMatrix> refs(cfg.references, DataMatrix(X.rows(), X.cols()));
  for (auto& R : refs)
    for (Eigen::Index i = 0; i < R.rows(); ++i)
      for (Eigen::Index j = 0; j < R.cols(); ++j) R(i, j) = lo[j] + (hi[j] - lo[j]) * u(rng);

  const double B = static_cast<double>(cfg.references);
  for (int k = 1; k <= kmax; ++k) {
    const std::uint64_t s = cfg.seed * 1000003u + static_cast<std::uint64_t>(k);
    const double w = within_dispersion(X, k, s, cfg.restarts);
    std::vector<double> logs, raws;
    for (std::size_t b = 0; b < refs.size(); ++b) {
      const double wr = within_dispersion(refs[b], k, s + 7919u * (b + 1), cfg.restarts);
      raws.push_back(wr);
      logs.push_back(std::log(std::max(wr, 1e-300)));
    }
    double mlog = 0.0, mraw = 0.0;
    for (std::size_t b = 0; b < logs.size(); ++b) {
      mlog += logs[b] / B;
      mraw += raws[b] / B;
    }
    double var = 0.0;
    for (double l : logs) var += (l - mlog) * (l - mlog) / B;
    out.dispersion.push_back(w);
    out.gap.push_back(mlog - std::log(std::max(w, 1e-300)));
    out.gap_sd.push_back(std::sqrt(var) * std::sqrt(1.0 + 1.0 / B));
    out.gap_star.push_back(mraw - w);
  }
  out.recommended = kmax;
  for (int k = 1; k < kmax; ++k) {
    if (out.gap[k - 1] >= out.gap[k] - out.gap_sd[k]) {
      out.recommended = k;
      break;
    }
  }
  return out;
}

}  // namespace iresnet
