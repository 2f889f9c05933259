#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "iresnet/autodiff.hpp"
#include "iresnet/clustering.hpp"
#include "iresnet/edges.hpp"
#include "iresnet/forward_ops.hpp"
#include "iresnet/io.hpp"

namespace iresnet {

inline constexpr int kPatchSize = 9;
inline constexpr int kPatchRadius = kPatchSize / 2;

struct Pixel {
  int row = 0;
  int col = 0;
  bool operator==(const Pixel&) const = default;
  auto operator<=>(const Pixel&) const = default;
};

enum class PatchSource { Network, Operator };

struct SaliencyPatch {
  Pixel pixel;
  ImageGrid patch{kPatchSize, kPatchSize};
  PatchSource source = PatchSource::Network;
  bool normalized = false;
};

inline bool in_patch_interior(int height, int width, Pixel p) {
  return p.row >= kPatchRadius && p.col >= kPatchRadius && p.row < height - kPatchRadius &&
         p.col < width - kPatchRadius;
}

namespace detail {

inline void require_interior(const ImageGrid& x0, Pixel p) {
  if (!in_patch_interior(x0.height(), x0.width(), p))
    throw std::invalid_argument("jacobian_patch: pixel (" + std::to_string(p.row) + ", " +
                                std::to_string(p.col) + ") is within " +
                                std::to_string(kPatchRadius) + " px of the border");
}

inline ImageGrid crop(const ImageGrid& row, Pixel p) {
  ImageGrid out(kPatchSize, kPatchSize);
  for (int r = 0; r < kPatchSize; ++r)
    for (int c = 0; c < kPatchSize; ++c)
      out(r, c) = row(p.row - kPatchRadius + r, p.col - kPatchRadius + c);
  return out;
}

}  // namespace detail

/// The image map unlift . phi . lift linearized at x0; rows of its Jacobian
/// are evaluated by reverse mode through the stored linearizations.
class NetworkJacobian {
 public:
  NetworkJacobian(const IResNet& model, const ImageGrid& x0)
      : channels_(model.channels()), height_(x0.height()), width_(x0.width()) {
    MultiChannelGrid x = lift(x0, channels_);
    model.check_input(x);
    for (const auto& s : model.subnets) {
      lins_.emplace_back(s, x);
      x = subnet_forward(s, x);
    }
  }

  /// d out(p) / d in, as an image.
  ImageGrid row(Pixel p) const {
    MultiChannelGrid cot(channels_, height_, width_);
    for (int c = 0; c < channels_; ++c) cot(c, p.row, p.col) = 1.0 / channels_;
    for (auto it = lins_.rbegin(); it != lins_.rend(); ++it) cot -= it->vjp_input(cot);
    ImageGrid out(height_, width_);
    for (int c = 0; c < channels_; ++c) {
      auto v = cot.channel_values(c);
      for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += v[i];
    }
    return out;
  }

 private:
  int channels_, height_, width_;
  std::vector<ResidualLinearization> lins_;
};

inline SaliencyPatch jacobian_patch(const NetworkJacobian& jac, const ImageGrid& x0, Pixel p) {
  detail::require_interior(x0, p);
  return {p, detail::crop(jac.row(p), p), PatchSource::Network, false};
}

inline SaliencyPatch jacobian_patch(const IResNet& model, const ImageGrid& x0, Pixel p) {
  detail::require_interior(x0, p);
  return jacobian_patch(NetworkJacobian(model, x0), x0, p);
}

inline SaliencyPatch jacobian_patch(const ForwardOperator& op, const ImageGrid& x0, Pixel p) {
  detail::require_interior(x0, p);
  ImageGrid e(x0.height(), x0.width());
  e(p.row, p.col) = 1.0;
  return {p, detail::crop(operator_vjp(op, x0, e), p), PatchSource::Operator, false};
}

inline std::vector<SaliencyPatch> jacobian_patches(const IResNet& model, const ImageGrid& x0,
                                                   const std::vector<Pixel>& pixels) {
  for (const auto& p : pixels) detail::require_interior(x0, p);
  const NetworkJacobian jac(model, x0);
  std::vector<SaliencyPatch> out(pixels.size());
  detail::parallel_for(pixels.size(), [&](std::size_t i) { out[i] = jacobian_patch(jac, x0, pixels[i]); });
  return out;
}

inline std::vector<SaliencyPatch> jacobian_patches(const ForwardOperator& op, const ImageGrid& x0,
                                                   const std::vector<Pixel>& pixels) {
  std::vector<SaliencyPatch> out(pixels.size());
  detail::parallel_for(pixels.size(), [&](std::size_t i) { out[i] = jacobian_patch(op, x0, pixels[i]); });
  return out;
}

/// Divides by the largest magnitude, keeping signs; all-zero patches are
/// only flagged.
inline SaliencyPatch normalize_signed(SaliencyPatch p) {
  const double m = norm_inf(p.patch.values());
  if (m > 0.0) p.patch *= 1.0 / m;
  p.normalized = true;
  return p;
}

/// Pixels at least kPatchRadius from every border, in scanline order.
inline std::vector<Pixel> interior_pixels(int height, int width) {
  std::vector<Pixel> out;
  for (int r = kPatchRadius; r < height - kPatchRadius; ++r)
    for (int c = kPatchRadius; c < width - kPatchRadius; ++c) out.push_back({r, c});
  return out;
}

/// Seeded uniform sample without replacement from the interior, returned in
/// scanline order.
inline std::vector<Pixel> sample_pixels(int height, int width, std::size_t count,
                                        std::uint64_t seed) {
  const auto eligible = interior_pixels(height, width);
  if (count > eligible.size())
    throw std::invalid_argument("sample_pixels: requested " + std::to_string(count) +
                                " pixels but only " + std::to_string(eligible.size()) +
                                " are eligible");
  std::vector<std::size_t> idx(eligible.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates with an explicit draw so results do not depend on
  // the standard library's shuffle
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  std::vector<Pixel> out;
  for (auto i : idx) out.push_back(eligible[i]);
  return out;
}

inline DataMatrix patch_matrix(const std::vector<SaliencyPatch>& patches) {
  DataMatrix X(static_cast<Eigen::Index>(patches.size()), kPatchSize * kPatchSize);
  for (std::size_t i = 0; i < patches.size(); ++i)
    for (int j = 0; j < kPatchSize * kPatchSize; ++j)
      X(static_cast<Eigen::Index>(i), j) = patches[i].patch.values()[j];
  return X;
}

struct ManualClusters {
  std::vector<Pixel> smooth;
  std::vector<Pixel> edge;
  EdgeMasks masks;
};

/// Evenly strided pick of `count` items.
template <class T>
std::vector<T> equidistant_sample(const std::vector<T>& items, std::size_t count) {
  if (count > items.size())
    throw std::invalid_argument("equidistant_sample: need " + std::to_string(count) +
                                " items, have " + std::to_string(items.size()));
  std::vector<T> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(items[i * items.size() / count]);
  return out;
}

/// Edge pixels are Canny edges; smooth pixels lie outside the 3x3-dilated
/// edge mask. Both exclude the patch border band and are sampled
/// equidistantly in scanline order.
inline ManualClusters manual_clusters(const ImageGrid& image, std::size_t count = 250,
                                      const CannyConfig& canny = {}) {
  ManualClusters mc;
  mc.masks = canny_edges(image, canny);
  const ImageGrid edges = mc.masks.edges();
  const ImageGrid near_edge = dilate(edges, 1);
  std::vector<Pixel> edge, smooth;
  for (const auto& p : interior_pixels(image.height(), image.width())) {
    if (edges(p.row, p.col) != 0.0) edge.push_back(p);
    else if (near_edge(p.row, p.col) == 0.0) smooth.push_back(p);
  }
  if (edge.size() < count || smooth.size() < count)
    throw std::invalid_argument("manual_clusters: need " + std::to_string(count) +
                                " pixels per set, found " + std::to_string(edge.size()) +
                                " edge and " + std::to_string(smooth.size()) + " smooth");
  mc.edge = equidistant_sample(edge, count);
  mc.smooth = equidistant_sample(smooth, count);
  return mc;
}

enum class ClusterMethod { Spectral, Manual };

struct ClusterStats {
  int id = 0;
  std::size_t size = 0;
  std::size_t edge_count = 0;
  double edge_percent = 0.0;
  ImageGrid mean_patch{kPatchSize, kPatchSize};
};

struct ClusterReport {
  ClusterMethod method = ClusterMethod::Spectral;
  int k = 0;
  std::vector<Pixel> pixels;
  std::vector<int> assignments;
  std::vector<ClusterStats> clusters;
  int highlighted = 0;  // cluster with the most edge pixels
};

/// Per-cluster mean of the normalized patches and share of members on
/// (weak or strong) edges.
inline ClusterReport cluster_summary(const std::vector<SaliencyPatch>& patches,
                                     const std::vector<int>& assignments, int k,
                                     const EdgeMasks& masks,
                                     ClusterMethod method = ClusterMethod::Spectral) {
  if (patches.size() != assignments.size())
    throw std::invalid_argument("cluster_summary: patch and assignment counts differ");
  ClusterReport rep;
  rep.method = method;
  rep.k = k;
  rep.assignments = assignments;
  rep.clusters.resize(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) rep.clusters[c].id = c;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const int a = assignments[i];
    if (a < 0 || a >= k) throw std::invalid_argument("cluster_summary: assignment out of range");
    auto& cs = rep.clusters[a];
    const SaliencyPatch n = patches[i].normalized ? patches[i] : normalize_signed(patches[i]);
    cs.mean_patch += n.patch;
    ++cs.size;
    if (masks.is_edge(patches[i].pixel.row, patches[i].pixel.col)) ++cs.edge_count;
    rep.pixels.push_back(patches[i].pixel);
  }
  for (auto& cs : rep.clusters) {
    if (cs.size == 0)
      throw std::invalid_argument("cluster_summary: cluster " + std::to_string(cs.id) + " is empty");
    cs.mean_patch *= 1.0 / static_cast<double>(cs.size);
    cs.edge_percent = 100.0 * static_cast<double>(cs.edge_count) / static_cast<double>(cs.size);
  }
  for (const auto& cs : rep.clusters) {
    const auto& best = rep.clusters[rep.highlighted];
    if (cs.edge_count > best.edge_count ||
        (cs.edge_count == best.edge_count && cs.edge_percent > best.edge_percent))
      rep.highlighted = cs.id;
  }
  return rep;
}

inline void write_assignments_csv(const std::filesystem::path& path, const ClusterReport& rep) {
  CsvWriter w(path, {"row", "col", "cluster"});
  for (std::size_t i = 0; i < rep.pixels.size(); ++i)
    w.row(rep.pixels[i].row, rep.pixels[i].col, rep.assignments[i]);
}

inline void write_cluster_summary_csv(const std::filesystem::path& path, const ClusterReport& rep) {
  CsvWriter w(path, {"cluster", "size", "edge_pixels", "edge_percent", "highlighted"});
  for (const auto& cs : rep.clusters)
    w.row(cs.id, cs.size, cs.edge_count, cs.edge_percent, cs.id == rep.highlighted ? 1 : 0);
}

/// A 9x9 patch as a CSV block with columns c0..c8.
inline void write_patch_csv(const std::filesystem::path& path, const ImageGrid& patch) {
  std::vector<std::string> header;
  for (int c = 0; c < patch.width(); ++c) header.push_back("c" + std::to_string(c));
  CsvWriter w(path, header);
  for (int r = 0; r < patch.height(); ++r) {
    std::vector<std::string> row;
    for (int c = 0; c < patch.width(); ++c) row.push_back(format_double(patch(r, c)));
    w.write_row(row);
  }
}

inline void write_choose_k_csv(const std::filesystem::path& path, const ChooseKResult& res) {
  CsvWriter w(path, {"k", "dispersion", "gap", "gap_sd", "gap_star", "recommended"});
  for (std::size_t i = 0; i < res.dispersion.size(); ++i) {
    const int k = static_cast<int>(i) + 1;
    w.row(k, res.dispersion[i], res.gap[i], res.gap_sd[i], res.gap_star[i],
          k == res.recommended ? 1 : 0);
  }
}

}  // namespace iresnet
