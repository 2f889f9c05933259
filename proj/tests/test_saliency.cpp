#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <map>
#include <set>

#include "iresnet/saliency.hpp"
#include "test_util.hpp"

using namespace iresnet;
using iresnet::testing::random_image;

namespace {

DataMatrix blobs(const std::vector<Eigen::RowVectorXd>& centers, int per_blob, double noise,
                 std::uint64_t seed, std::vector<int>* truth = nullptr) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, noise);
  const auto dim = centers.front().size();
  DataMatrix X(static_cast<Eigen::Index>(centers.size()) * per_blob, dim);
  for (std::size_t b = 0; b < centers.size(); ++b)
    for (int i = 0; i < per_blob; ++i) {
      const auto row = static_cast<Eigen::Index>(b) * per_blob + i;
      for (Eigen::Index j = 0; j < dim; ++j) X(row, j) = centers[b][j] + nd(rng);
      if (truth) truth->push_back(static_cast<int>(b));
    }
  return X;
}

std::vector<Eigen::RowVectorXd> two_centers(int dim, double separation) {
  Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(dim), b = a;
  b[0] = separation;
  return {a, b};
}

/// Same partition up to a relabeling.
bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return false;
  std::map<int, int> fwd, bwd;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (fwd.count(a[i]) && fwd[a[i]] != b[i]) return false;
    if (bwd.count(b[i]) && bwd[b[i]] != a[i]) return false;
    fwd[a[i]] = b[i];
    bwd[b[i]] = a[i];
  }
  return true;
}

ArchitectureConfig tiny(std::uint64_t seed) {
  ArchitectureConfig cfg;
  cfg.subnets = 2;
  cfg.channels = 2;
  cfg.hidden = 4;
  cfg.kernel = 3;
  cfg.height = 14;
  cfg.width = 14;
  cfg.init_fraction = 5.0;
  cfg.init_threshold = 0.02;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(JacobianPatch, BlurIsCentralKernel) {
  std::mt19937_64 rng(1);
  const GaussianBlurOp blur;
  const ForwardOperator op = blur;
  const Pixel p{12, 15};
  const auto a = jacobian_patch(op, random_image(32, 32, rng), p);
  const auto b = jacobian_patch(op, random_image(32, 32, rng), p);
  EXPECT_EQ(a.source, PatchSource::Operator);
  EXPECT_EQ(a.pixel, p);
  for (int r = 0; r < 9; ++r)
    for (int c = 0; c < 9; ++c) {
      EXPECT_NEAR(a.patch(r, c), blur.kernel(0, 0, r + 1, c + 1), 1e-10);
      EXPECT_NEAR(a.patch(r, c), b.patch(r, c), 1e-10);
    }
  double mass = 0.0;
  for (double v : a.patch.values()) mass += v;
  EXPECT_GE(mass, 0.95);
  EXPECT_LE(mass, 1.0);
}

TEST(JacobianPatch, IdentityNetworkIsDelta) {
  auto model = make_identity_iresnet(3, 4, 5, 16, 16, 0.99, 3);
  std::mt19937_64 rng(2);
  const auto p = jacobian_patch(model, random_image(16, 16, rng), {7, 8});
  EXPECT_EQ(p.source, PatchSource::Network);
  for (int r = 0; r < 9; ++r)
    for (int c = 0; c < 9; ++c) EXPECT_NEAR(p.patch(r, c), r == 4 && c == 4 ? 1.0 : 0.0, 1e-15);
}

TEST(JacobianPatch, PeronaMalikMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const ForwardOperator op = PeronaMalikOp{};
  auto x0 = random_image(24, 24, rng);
  for (const Pixel p : {Pixel{4, 4}, Pixel{11, 13}, Pixel{19, 19}}) {
    const auto patch = jacobian_patch(op, x0, p);
    const double eps = 1e-4;
    for (int r = 0; r < 9; ++r)
      for (int c = 0; c < 9; ++c) {
        ImageGrid xp = x0, xm = x0;
        xp(p.row - 4 + r, p.col - 4 + c) += eps;
        xm(p.row - 4 + r, p.col - 4 + c) -= eps;
        const double fd =
            (apply_operator(op, xp)(p.row, p.col) - apply_operator(op, xm)(p.row, p.col)) / (2 * eps);
        EXPECT_NEAR(patch.patch(r, c), fd, 1e-5) << r << "," << c;
      }
  }
}

TEST(JacobianPatch, NetworkMatchesFiniteDifferences) {
  auto model = make_iresnet(tiny(4));
  std::mt19937_64 rng(5);
  auto x0 = random_image(14, 14, rng);
  const Pixel p{6, 7};
  const auto patch = jacobian_patch(model, x0, p);
  const double eps = 1e-6;
  for (int r = 0; r < 9; ++r)
    for (int c = 0; c < 9; ++c) {
      ImageGrid xp = x0, xm = x0;
      xp(p.row - 4 + r, p.col - 4 + c) += eps;
      xm(p.row - 4 + r, p.col - 4 + c) -= eps;
      const double fd =
          (image_forward(model, xp)(p.row, p.col) - image_forward(model, xm)(p.row, p.col)) /
          (2 * eps);
      EXPECT_NEAR(patch.patch(r, c), fd, 1e-6);
    }
  const auto batch = jacobian_patches(model, x0, {p, {5, 5}});
  EXPECT_TRUE(batch[0].patch == patch.patch);
}

TEST(JacobianPatch, RejectsBorderPixels) {
  std::mt19937_64 rng(6);
  auto x0 = random_image(16, 16, rng);
  const ForwardOperator op = GaussianBlurOp();
  EXPECT_THROW(jacobian_patch(op, x0, {3, 8}), std::invalid_argument);
  EXPECT_THROW(jacobian_patch(op, x0, {8, 12}), std::invalid_argument);
  EXPECT_NO_THROW(jacobian_patch(op, x0, {4, 11}));
}

TEST(Normalize, SignedScaling) {
  SaliencyPatch p;
  p.patch = ImageGrid(9, 9, 2.0);
  auto n = normalize_signed(p);
  for (double v : n.patch.values()) EXPECT_EQ(v, 1.0);
  EXPECT_TRUE(n.normalized);
  p.patch = ImageGrid(9, 9, 0.0);
  p.patch(0, 0) = -4.0;
  p.patch(1, 1) = 2.0;
  n = normalize_signed(p);
  EXPECT_EQ(n.patch(0, 0), -1.0);
  EXPECT_EQ(n.patch(1, 1), 0.5);
  EXPECT_TRUE(normalize_signed(n).patch == n.patch);
  SaliencyPatch z;
  auto nz = normalize_signed(z);
  EXPECT_TRUE(nz.normalized);
  EXPECT_TRUE(nz.patch == z.patch);
}

TEST(SamplePixels, InteriorDeterministicAndComplete) {
  const auto all = sample_pixels(16, 20, 8 * 12, 1);
  EXPECT_EQ(all, interior_pixels(16, 20));
  EXPECT_THROW(sample_pixels(16, 20, 8 * 12 + 1, 1), std::invalid_argument);
  const auto a = sample_pixels(32, 32, 100, 7), b = sample_pixels(32, 32, 100, 7);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, sample_pixels(32, 32, 100, 8));
  std::set<Pixel> uniq(a.begin(), a.end());
  EXPECT_EQ(uniq.size(), a.size());
  for (const auto& p : a) EXPECT_TRUE(in_patch_interior(32, 32, p));
}

TEST(Spectral, SingleClusterAndRangeChecks) {
  auto X = blobs(two_centers(4, 10.0), 10, 0.1, 1);
  auto labels = spectral_cluster(X, 1, 0);
  EXPECT_TRUE(std::all_of(labels.begin(), labels.end(), [](int l) { return l == 0; }));
  EXPECT_THROW(spectral_cluster(X, 0, 0), std::invalid_argument);
  EXPECT_THROW(spectral_cluster(X, 21, 0), std::invalid_argument);
}

TEST(Spectral, SeparatesTwoBlobsMatchingNearestCenter) {
  const auto centers = two_centers(81, 10.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::vector<int> truth;
    auto X = blobs(centers, 40, 0.1, seed, &truth);
    std::vector<int> oracle;
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      oracle.push_back((X.row(i) - centers[0]).norm() < (X.row(i) - centers[1]).norm() ? 0 : 1);
    EXPECT_EQ(oracle, truth);
    const auto labels = spectral_cluster(X, 2, seed);
    EXPECT_TRUE(same_partition(labels, oracle));
    DataMatrix scaled = 3.5 * X;
    EXPECT_EQ(spectral_cluster(scaled, 2, seed), labels);
    EXPECT_EQ(spectral_cluster(X, 2, seed), labels);
  }
}

TEST(ChooseK, BlobCountsAcrossSeeds) {
  ChooseKConfig cfg;
  cfg.kmax = 5;
  cfg.restarts = 3;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    cfg.seed = seed;
    auto one = blobs({Eigen::RowVectorXd::Zero(81)}, 60, 0.1, 100 + seed);
    auto two = blobs(two_centers(81, 10.0), 30, 0.1, 200 + seed);
    EXPECT_EQ(choose_k(one, cfg).recommended, 1) << "seed " << seed;
    const auto res = choose_k(two, cfg);
    EXPECT_EQ(res.recommended, 2) << "seed " << seed;
    for (std::size_t k = 1; k < res.dispersion.size(); ++k)
      EXPECT_LE(res.dispersion[k], res.dispersion[k - 1] * (1 + 1e-12));
    EXPECT_EQ(res.gap_star.size(), 5u);
  }
}

TEST(ChooseK, DegenerateDataRecommendsOne) {
  DataMatrix X = DataMatrix::Constant(12, 81, 0.3);
  auto res = choose_k(X);
  EXPECT_EQ(res.recommended, 1);
  EXPECT_THROW(choose_k(X, {1, 10, 10, 0}), std::invalid_argument);
}

TEST(Canny, ConstantImageHasNoEdges) {
  auto m = canny_edges(ImageGrid(20, 20, 0.4));
  const auto e = m.edges();
  for (double v : e.values()) EXPECT_EQ(v, 0.0);
}

TEST(Canny, VerticalStepGivesOnePixelLine) {
  ImageGrid img(24, 24);
  for (int r = 0; r < 24; ++r)
    for (int c = 12; c < 24; ++c) img(r, c) = 1.0;
  auto m = canny_edges(img);
  for (int r = 0; r < 24; ++r)
    for (int c = 0; c < 24; ++c) {
      EXPECT_EQ(m.strong(r, c), c == 11 ? 1.0 : 0.0) << r << "," << c;
      EXPECT_EQ(m.weak(r, c), 0.0);
    }
}

TEST(Canny, StrongAndWeakDisjoint) {
  std::mt19937_64 rng(7);
  auto img = random_image(32, 32, rng);
  auto m = canny_edges(img);
  std::size_t strong = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    EXPECT_FALSE(m.strong.values()[i] != 0.0 && m.weak.values()[i] != 0.0);
    strong += m.strong.values()[i] != 0.0;
  }
  EXPECT_GT(strong, 0u);
}

TEST(Manual, DilationIsThreeByThree) {
  ImageGrid m(9, 9);
  m(4, 4) = 1.0;
  auto d = dilate(m);
  for (int r = 0; r < 9; ++r)
    for (int c = 0; c < 9; ++c)
      EXPECT_EQ(d(r, c), std::abs(r - 4) <= 1 && std::abs(c - 4) <= 1 ? 1.0 : 0.0);
}

TEST(Manual, ConstantImageFails) {
  EXPECT_THROW(manual_clusters(ImageGrid(64, 64, 0.5), 10), std::invalid_argument);
}

TEST(Manual, SetsDisjointBorderFreeAndAwayFromEdges) {
  ImageGrid img(64, 64, 0.2);
  for (int r = 16; r < 48; ++r)
    for (int c = 10; c < 54; ++c) img(r, c) = 0.9;
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c)
      if (std::hypot(r - 32.0, c - 32.0) < 9) img(r, c) = 0.5;
  auto mc = manual_clusters(img, 40);
  ASSERT_EQ(mc.edge.size(), 40u);
  ASSERT_EQ(mc.smooth.size(), 40u);
  std::set<Pixel> e(mc.edge.begin(), mc.edge.end());
  for (const auto& p : mc.smooth) {
    EXPECT_FALSE(e.count(p));
    EXPECT_TRUE(in_patch_interior(64, 64, p));
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) EXPECT_FALSE(mc.masks.is_edge(p.row + dr, p.col + dc));
  }
  for (const auto& p : mc.edge) {
    EXPECT_TRUE(in_patch_interior(64, 64, p));
    EXPECT_TRUE(mc.masks.is_edge(p.row, p.col));
  }
  EXPECT_TRUE(std::is_sorted(mc.edge.begin(), mc.edge.end()));
}

TEST(Summary, MeansAndEdgePercentages) {
  EdgeMasks masks{ImageGrid(16, 16), ImageGrid(16, 16)};
  for (int r = 0; r < 16; ++r) masks.strong(r, 8) = 1.0;
  masks.weak(5, 5) = 1.0;
  std::mt19937_64 rng(8);
  std::vector<SaliencyPatch> patches;
  std::vector<int> labels;
  for (int r = 4; r < 12; ++r) {
    for (int c : {5, 6, 8}) {
      SaliencyPatch p;
      p.pixel = {r, c};
      p.patch = random_image(9, 9, rng, -1, 1);
      patches.push_back(p);
      labels.push_back(c == 6 ? 0 : 1);
    }
  }
  auto rep = cluster_summary(patches, labels, 2, masks);
  ASSERT_EQ(rep.clusters.size(), 2u);
  EXPECT_EQ(rep.clusters[0].edge_percent, 0.0);
  // brute-force count
  std::size_t on = 0, n1 = 0;
  for (std::size_t i = 0; i < patches.size(); ++i)
    if (labels[i] == 1) {
      ++n1;
      on += masks.is_edge(patches[i].pixel.row, patches[i].pixel.col);
    }
  EXPECT_EQ(rep.clusters[1].edge_count, on);
  EXPECT_DOUBLE_EQ(rep.clusters[1].edge_percent, 100.0 * on / n1);
  EXPECT_EQ(rep.highlighted, 1);

  std::vector<SaliencyPatch> same(5, normalize_signed(patches[0]));
  auto r2 = cluster_summary(same, std::vector<int>(5, 0), 1, masks);
  for (std::size_t i = 0; i < 81; ++i)
    EXPECT_NEAR(r2.clusters[0].mean_patch.values()[i], same[0].patch.values()[i], 1e-15);
  EXPECT_THROW(cluster_summary(same, std::vector<int>(5, 0), 2, masks), std::invalid_argument);
}

TEST(Summary, ExactEdgeSplit) {
  EdgeMasks masks{ImageGrid(16, 16), ImageGrid(16, 16)};
  for (int r = 0; r < 16; ++r) masks.strong(r, 8) = 1.0;
  std::vector<SaliencyPatch> patches;
  std::vector<int> labels;
  for (int r = 4; r < 12; ++r)
    for (int c : {6, 8}) {
      SaliencyPatch p;
      p.pixel = {r, c};
      p.patch(4, 4) = 1.0;
      patches.push_back(p);
      labels.push_back(c == 8 ? 0 : 1);
    }
  auto rep = cluster_summary(patches, labels, 2, masks, ClusterMethod::Manual);
  EXPECT_EQ(rep.clusters[0].edge_percent, 100.0);
  EXPECT_EQ(rep.clusters[1].edge_percent, 0.0);
  EXPECT_EQ(rep.highlighted, 0);
  EXPECT_EQ(rep.method, ClusterMethod::Manual);
}
