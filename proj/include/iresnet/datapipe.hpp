#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "iresnet/io.hpp"
#include "iresnet/train.hpp"

namespace iresnet {

enum class Provenance { Imported, Synthetic };

inline std::string provenance_name(Provenance p) {
  return p == Provenance::Imported ? "imported" : "synthetic";
}

inline Provenance parse_provenance(const std::string& s) {
  if (s == "imported") return Provenance::Imported;
  if (s == "synthetic") return Provenance::Synthetic;
  throw FormatError("unknown provenance '" + s + "'");
}

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;

  std::size_t total() const noexcept { return train + val + test; }
};

/// Default splits in the 512/32/64 proportion; rounding slack goes to train.
inline SplitCounts default_splits(std::size_t n) {
  SplitCounts s;
  s.val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * 32.0 / 608.0));
  s.test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * 64.0 / 608.0));
  if (s.val + s.test > n) s.val = s.test = 0;
  s.train = n - s.val - s.test;
  return s;
}

/// Clean images partitioned into contiguous train/val/test ranges.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<ImageGrid> images, SplitCounts splits, Provenance provenance)
      : images_(std::move(images)), splits_(splits), provenance_(provenance) {
    if (splits_.total() != images_.size())
      throw std::invalid_argument("Dataset: split counts sum to " +
                                  std::to_string(splits_.total()) + " but there are " +
                                  std::to_string(images_.size()) + " images");
    for (const auto& img : images_)
      if (!img.same_shape(images_.front()))
        throw std::invalid_argument("Dataset: images differ in shape");
  }

  std::size_t size() const noexcept { return images_.size(); }
  int height() const noexcept { return images_.empty() ? 0 : images_.front().height(); }
  int width() const noexcept { return images_.empty() ? 0 : images_.front().width(); }
  const SplitCounts& splits() const noexcept { return splits_; }
  Provenance provenance() const noexcept { return provenance_; }
  const std::vector<ImageGrid>& images() const noexcept { return images_; }

  std::span<const ImageGrid> train() const noexcept { return {images_.data(), splits_.train}; }
  std::span<const ImageGrid> val() const noexcept {
    return {images_.data() + splits_.train, splits_.val};
  }
  std::span<const ImageGrid> test() const noexcept {
    return {images_.data() + splits_.train + splits_.val, splits_.test};
  }

  bool operator==(const Dataset& o) const {
    return images_ == o.images_ && splits_.train == o.splits_.train &&
           splits_.val == o.splits_.val && splits_.test == o.splits_.test &&
           provenance_ == o.provenance_;
  }

 private:
  std::vector<ImageGrid> images_;
  SplitCounts splits_;
  Provenance provenance_ = Provenance::Synthetic;
};

inline constexpr double kLumaR = 0.2989;
inline constexpr double kLumaG = 0.5870;
inline constexpr double kLumaB = 0.1140;
inline constexpr double kLumaSum = kLumaR + kLumaG + kLumaB;

enum class RawLayout { ChannelMajorColumnMajor };

/// Decodes 8-bit records where byte (c, row, col) of a record sits at
/// c*W*H + col*H + row. Three-channel records are reduced to luminance with
/// the weights rescaled to sum to one, so white maps to exactly 1.
inline Dataset import_raw(const std::filesystem::path& path, int width, int height, int channels,
                          RawLayout = RawLayout::ChannelMajorColumnMajor,
                          std::optional<SplitCounts> splits = std::nullopt) {
  if (width <= 0 || height <= 0) throw std::invalid_argument("import_raw: bad image size");
  if (channels != 1 && channels != 3)
    throw std::invalid_argument("import_raw: channels must be 1 or 3");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("import_raw: cannot open '" + path.string() + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  const std::size_t record = plane * channels;
  if (bytes.empty() || bytes.size() % record != 0)
    throw FormatError("import_raw: " + path.string() + " holds " + std::to_string(bytes.size()) +
                      " bytes, not a positive multiple of the record size " +
                      std::to_string(record));
  const std::size_t n = bytes.size() / record;
  std::vector<ImageGrid> images(n, ImageGrid(height, width));
  auto byte = [&](std::size_t k, int ch, int r, int c) {
    return static_cast<double>(static_cast<unsigned char>(
               bytes[k * record + ch * plane + static_cast<std::size_t>(c) * height + r])) /
           255.0;
  };
  for (std::size_t k = 0; k < n; ++k)
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        images[k](r, c) = channels == 1 ? byte(k, 0, r, c)
                                        : std::min(1.0, (kLumaR * byte(k, 0, r, c) +
                                                         kLumaG * byte(k, 1, r, c) +
                                                         kLumaB * byte(k, 2, r, c)) /
                                                            kLumaSum);
  return Dataset(std::move(images), splits.value_or(default_splits(n)), Provenance::Imported);
}

/// One synthetic image: a linear ramp background with 2-6 rectangles or
/// disks painted over it, clipped to [0, 1].
inline ImageGrid synth_image(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageGrid img(size, size);
  const double base = 0.2 + 0.6 * u(rng);
  const double gr = 0.4 * (u(rng) - 0.5), gc = 0.4 * (u(rng) - 0.5);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c)
      img(r, c) = base + gr * (r / (size - 1.0) - 0.5) + gc * (c / (size - 1.0) - 0.5);
  const int shapes = std::uniform_int_distribution<int>(2, 6)(rng);
  for (int s = 0; s < shapes; ++s) {
    const double value = u(rng);
    const double cr = size * u(rng), cc = size * u(rng);
    const double extent = size * (0.1 + 0.25 * u(rng));
    if (u(rng) < 0.5) {
      const double hr = extent, hc = size * (0.1 + 0.25 * u(rng));
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c)
          if (std::abs(r + 0.5 - cr) <= hr / 2 && std::abs(c + 0.5 - cc) <= hc / 2)
            img(r, c) = value;
    } else {
      const double rad = extent / 2;
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c)
          if (std::hypot(r + 0.5 - cr, c + 0.5 - cc) <= rad) img(r, c) = value;
    }
  }
  for (double& v : img.values()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

/// n seeded synthetic images of size x size; image i depends only on (seed, i).
inline Dataset synth_dataset(std::size_t n, int size, std::uint64_t seed,
                             std::optional<SplitCounts> splits = std::nullopt) {
  if (size < 16) throw std::invalid_argument("synth_dataset: size must be at least 16");
  std::vector<ImageGrid> images(n);
  detail::parallel_for(n, [&](std::size_t i) {
    std::mt19937_64 rng(derive_seed(seed, 0x53594eu, i));
    images[i] = synth_image(size, rng);
  });
  return Dataset(std::move(images), splits.value_or(default_splits(n)), Provenance::Synthetic);
}

struct PairedBatch {
  std::vector<SamplePair> pairs;
  double delta = 0.0;
};

/// z_i = F(x_i) + delta * g_i with g_i drawn from a stream derived from (seed, i).
inline PairedBatch make_pairs(const ForwardOperator& op, std::span<const ImageGrid> images,
                              double delta, std::uint64_t seed) {
  if (delta < 0.0) throw std::invalid_argument("make_pairs: delta must be >= 0");
  PairedBatch b;
  b.delta = delta;
  b.pairs.resize(images.size());
  detail::parallel_for(images.size(), [&](std::size_t i) {
    b.pairs[i] = {images[i], add_noise(apply_operator(op, images[i]), delta, seed, 0, i)};
  });
  return b;
}

// Tensor container shared by checkpoints and dataset files:
// magic[8] | u32 version | u32 n_header | (str key, str value)* |
// u32 n_tensors | (str name, u32 rank, u64 dims[rank], f64 data[prod dims])*
// All integers and floats little-endian; strings are u32-length-prefixed.

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> data;
};

struct TensorFile {
  std::uint32_t version = 1;
  KeyValues header;
  std::vector<TensorRecord> tensors;

  const TensorRecord& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw FormatError("missing tensor '" + name + "'");
  }
  const std::string& value(const std::string& key) const {
    auto it = header.find(key);
    if (it == header.end()) throw FormatError("missing header key '" + key + "'");
    return it->second;
  }
};

inline void write_tensor_file(const std::filesystem::path& path, const std::string& magic,
                              const TensorFile& f) {
  if (magic.size() != 8) throw std::invalid_argument("magic must be 8 bytes");
  auto out = open_for_write(path, true);
  out.write(magic.data(), 8);
  detail::put_u32(out, f.version);
  detail::put_u32(out, static_cast<std::uint32_t>(f.header.size()));
  for (const auto& [k, v] : f.header) {
    detail::put_string(out, k);
    detail::put_string(out, v);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(f.tensors.size()));
  for (const auto& t : f.tensors) {
    std::uint64_t count = 1;
    for (auto d : t.dims) count *= d;
    if (count != t.data.size())
      throw std::invalid_argument("tensor '" + t.name + "': dims do not match payload");
    detail::put_string(out, t.name);
    detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_u64(out, d);
    for (double v : t.data) detail::put_f64(out, v);
  }
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline TensorFile read_tensor_file(const std::filesystem::path& path, const std::string& magic,
                                   std::uint32_t version) {
  auto rd = detail::ByteReader::from_file(path);
  if (rd.take(8) != magic)
    throw FormatError(path.string() + ": bad magic (expected " + magic + ")");
  TensorFile f;
  f.version = rd.u32();
  if (f.version != version)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(f.version) +
                      " (expected " + std::to_string(version) + ")");
  const std::uint32_t nh = rd.u32();
  for (std::uint32_t i = 0; i < nh; ++i) {
    std::string k = rd.str();
    f.header[k] = rd.str();
  }
  const std::uint32_t nt = rd.u32();
  for (std::uint32_t i = 0; i < nt; ++i) {
    TensorRecord t;
    t.name = rd.str();
    const std::uint32_t rank = rd.u32();
    if (rank > 8) throw FormatError(path.string() + ": tensor '" + t.name + "' has rank " +
                                    std::to_string(rank));
    std::uint64_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.dims.push_back(rd.u64());
      if (t.dims.back() > (std::uint64_t{1} << 32))
        throw FormatError(path.string() + ": tensor '" + t.name + "' dimension too large");
      count *= t.dims.back();
    }
    if (count > (std::uint64_t{1} << 32))
      throw FormatError(path.string() + ": tensor '" + t.name + "' too large");
    t.data.resize(count);
    for (auto& v : t.data) v = rd.f64();
    f.tensors.push_back(std::move(t));
  }
  if (!rd.done()) throw FormatError(path.string() + ": trailing bytes after last tensor");
  return f;
}

inline constexpr const char* kCheckpointMagic = "IRESNET1";
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kDatasetMagic = "IRDATA01";
inline constexpr std::uint32_t kDatasetVersion = 1;

/// Model plus optional optimizer state and free-form run metadata
/// (operator, delta, objective, seeds, epoch).
struct Checkpoint {
  IResNet model;
  std::optional<AdamState> adam;
  KeyValues meta;
};

namespace detail {

inline TensorRecord kernel_record(const std::string& name, const ConvKernel& k) {
  return {name,
          {static_cast<std::uint64_t>(k.out_channels()), static_cast<std::uint64_t>(k.in_channels()),
           static_cast<std::uint64_t>(k.kernel_height()), static_cast<std::uint64_t>(k.kernel_width())},
          {k.weights().begin(), k.weights().end()}};
}

inline TensorRecord grid_record(const std::string& name, const MultiChannelGrid& g) {
  return {name,
          {static_cast<std::uint64_t>(g.channels()), static_cast<std::uint64_t>(g.height()),
           static_cast<std::uint64_t>(g.width())},
          {g.values().begin(), g.values().end()}};
}

inline void expect_dims(const TensorRecord& t, std::vector<std::uint64_t> dims) {
  if (t.dims != dims) {
    auto fmt = [](const std::vector<std::uint64_t>& d) {
      std::string s = "[";
      for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "," : "") + std::to_string(d[i]);
      return s + "]";
    };
    throw FormatError("tensor '" + t.name + "' has shape " + fmt(t.dims) +
                      " but the header implies " + fmt(dims));
  }
}

inline int header_int(const TensorFile& f, const std::string& key) {
  try {
    return static_cast<int>(parse_int(f.value(key)));
  } catch (const std::invalid_argument&) {
    throw FormatError("header key '" + key + "' is not an integer");
  }
}

inline double header_double(const TensorFile& f, const std::string& key) {
  try {
    return parse_double(f.value(key));
  } catch (const std::invalid_argument&) {
    throw FormatError("header key '" + key + "' is not a number");
  }
}

}  // namespace detail

inline TensorFile checkpoint_contents(const IResNet& model, const AdamState* adam,
                                      const KeyValues& meta) {
  TensorFile f;
  f.version = kCheckpointVersion;
  for (const auto& [k, v] : meta) f.header["meta." + k] = v;
  f.header["arch.subnets"] = std::to_string(model.size());
  f.header["arch.channels"] = std::to_string(model.channels());
  f.header["arch.hidden"] = std::to_string(model.hidden());
  f.header["arch.kernel"] = std::to_string(model.kernel());
  f.header["arch.height"] = std::to_string(model.height());
  f.header["arch.width"] = std::to_string(model.width());
  f.header["arch.lip"] = format_double(model.lip_param());
  for (int n = 0; n < model.size(); ++n) {
    const auto& s = model.subnets[n];
    const std::string p = "subnet." + std::to_string(n) + ".";
    f.header[p + "budget"] = format_double(s.budget);
    f.tensors.push_back(detail::kernel_record(p + "conv_a", s.conv_a));
    f.tensors.push_back({p + "shrink", {s.shrink_raw.size()}, s.shrink_raw});
    f.tensors.push_back(detail::kernel_record(p + "conv_b", s.conv_b));
    f.tensors.push_back(detail::grid_record(p + "power_a", s.power_a));
    f.tensors.push_back(detail::grid_record(p + "power_b", s.power_b));
  }
  if (adam) {
    f.header["adam.step"] = std::to_string(adam->step);
    f.header["adam.lr"] = format_double(adam->lr);
    f.header["adam.beta1"] = format_double(adam->beta1);
    f.header["adam.beta2"] = format_double(adam->beta2);
    f.header["adam.eps"] = format_double(adam->eps);
    f.header["adam.groups"] = std::to_string(adam->m.size());
    for (std::size_t k = 0; k < adam->m.size(); ++k) {
      f.tensors.push_back({"adam.m." + std::to_string(k), {adam->m[k].size()}, adam->m[k]});
      f.tensors.push_back({"adam.v." + std::to_string(k), {adam->v[k].size()}, adam->v[k]});
    }
  }
  return f;
}

inline void save_checkpoint(const std::filesystem::path& path, const IResNet& model,
                            const AdamState* adam = nullptr, const KeyValues& meta = {}) {
  write_tensor_file(path, kCheckpointMagic, checkpoint_contents(model, adam, meta));
}

/// Loads and validates a checkpoint; the effective weights are rebuilt from
/// the stored raw weights and power directions, so outputs match bitwise.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorFile f = read_tensor_file(path, kCheckpointMagic, kCheckpointVersion);
  const std::string where = path.string() + ": ";
  try {
    const int n = detail::header_int(f, "arch.subnets");
    const int ch = detail::header_int(f, "arch.channels");
    const int hid = detail::header_int(f, "arch.hidden");
    const int k = detail::header_int(f, "arch.kernel");
    const int h = detail::header_int(f, "arch.height");
    const int w = detail::header_int(f, "arch.width");
    if (n <= 0 || ch <= 0 || hid <= 0 || k <= 0 || h <= 0 || w <= 0)
      throw FormatError("non-positive architecture field");
    std::size_t subnet_tensors = 0;
    for (const auto& t : f.tensors)
      if (t.name.rfind("subnet.", 0) == 0) ++subnet_tensors;
    if (subnet_tensors != static_cast<std::size_t>(5 * n))
      throw FormatError("header declares N=" + std::to_string(n) + " subnetworks but the file holds " +
                        std::to_string(subnet_tensors) + " subnetwork tensors (expected " +
                        std::to_string(5 * n) + ")");
    const auto u = [](int v) { return static_cast<std::uint64_t>(v); };
    Checkpoint cp;
    for (int i = 0; i < n; ++i) {
      const std::string p = "subnet." + std::to_string(i) + ".";
      const double budget = detail::header_double(f, p + "budget");
      if (!(budget >= 0.0 && budget < 1.0))
        throw FormatError(p + "budget outside [0, 1)");
      Subnetwork s(ch, hid, k, budget, h, w);
      const auto& a = f.tensor(p + "conv_a");
      detail::expect_dims(a, {u(hid), u(ch), u(k), u(k)});
      std::copy(a.data.begin(), a.data.end(), s.conv_a.weights().begin());
      const auto& sh = f.tensor(p + "shrink");
      detail::expect_dims(sh, {u(hid)});
      s.shrink_raw = sh.data;
      const auto& b = f.tensor(p + "conv_b");
      detail::expect_dims(b, {u(ch), u(hid), 1, 1});
      std::copy(b.data.begin(), b.data.end(), s.conv_b.weights().begin());
      const auto& pa = f.tensor(p + "power_a");
      detail::expect_dims(pa, {u(ch), u(h), u(w)});
      std::copy(pa.data.begin(), pa.data.end(), s.power_a.values().begin());
      const auto& pb = f.tensor(p + "power_b");
      detail::expect_dims(pb, {u(hid), u(h), u(w)});
      std::copy(pb.data.begin(), pb.data.end(), s.power_b.values().begin());
      s.refresh();
      cp.model.subnets.push_back(std::move(s));
    }
    cp.model.validate();
    if (f.header.count("adam.step")) {
      AdamState st;
      st.step = detail::header_int(f, "adam.step");
      st.lr = detail::header_double(f, "adam.lr");
      st.beta1 = detail::header_double(f, "adam.beta1");
      st.beta2 = detail::header_double(f, "adam.beta2");
      st.eps = detail::header_double(f, "adam.eps");
      const int groups = detail::header_int(f, "adam.groups");
      auto params = parameter_spans(cp.model);
      if (groups != static_cast<int>(params.size()))
        throw FormatError("optimizer state has " + std::to_string(groups) +
                          " groups, model has " + std::to_string(params.size()));
      for (int g = 0; g < groups; ++g) {
        const auto& m = f.tensor("adam.m." + std::to_string(g));
        const auto& v = f.tensor("adam.v." + std::to_string(g));
        detail::expect_dims(m, {params[g].size()});
        detail::expect_dims(v, {params[g].size()});
        st.m.push_back(m.data);
        st.v.push_back(v.data);
      }
      cp.adam = std::move(st);
    }
    for (const auto& [key, value] : f.header)
      if (key.rfind("meta.", 0) == 0) cp.meta[key.substr(5)] = value;
    return cp;
  } catch (const FormatError& e) {
    throw FormatError(where + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(where + e.what());
  }
}

/// Loads a checkpoint and checks it against an expected architecture.
inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const ArchitectureConfig& expect) {
  Checkpoint cp = load_checkpoint(path);
  const auto& m = cp.model;
  auto check = [&](const char* what, int got, int want) {
    if (got != want)
      throw FormatError(path.string() + ": checkpoint has " + what + "=" + std::to_string(got) +
                        ", expected " + std::to_string(want));
  };
  check("N", m.size(), expect.subnets);
  check("M", m.channels(), expect.channels);
  check("hidden", m.hidden(), expect.hidden);
  check("kernel", m.kernel(), expect.kernel);
  check("height", m.height(), expect.height);
  check("width", m.width(), expect.width);
  return cp;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds,
                         const KeyValues& meta = {}) {
  TensorFile f;
  f.version = kDatasetVersion;
  for (const auto& [k, v] : meta) f.header["meta." + k] = v;
  f.header["count"] = std::to_string(ds.size());
  f.header["height"] = std::to_string(ds.height());
  f.header["width"] = std::to_string(ds.width());
  f.header["split.train"] = std::to_string(ds.splits().train);
  f.header["split.val"] = std::to_string(ds.splits().val);
  f.header["split.test"] = std::to_string(ds.splits().test);
  f.header["provenance"] = provenance_name(ds.provenance());
  TensorRecord t{"images",
                 {ds.size(), static_cast<std::uint64_t>(ds.height()),
                  static_cast<std::uint64_t>(ds.width())},
                 {}};
  t.data.reserve(ds.size() * static_cast<std::size_t>(ds.height()) * ds.width());
  for (const auto& img : ds.images()) t.data.insert(t.data.end(), img.values().begin(), img.values().end());
  f.tensors.push_back(std::move(t));
  write_tensor_file(path, kDatasetMagic, f);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  const TensorFile f = read_tensor_file(path, kDatasetMagic, kDatasetVersion);
  try {
    const int n = detail::header_int(f, "count");
    const int h = detail::header_int(f, "height");
    const int w = detail::header_int(f, "width");
    if (n <= 0 || h <= 0 || w <= 0) throw FormatError("non-positive dataset dimensions");
    const auto& t = f.tensor("images");
    detail::expect_dims(t, {static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(h),
                            static_cast<std::uint64_t>(w)});
    std::vector<ImageGrid> images(static_cast<std::size_t>(n), ImageGrid(h, w));
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < images.size(); ++i)
      std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(i * plane), plane,
                  images[i].values().begin());
    SplitCounts s{static_cast<std::size_t>(detail::header_int(f, "split.train")),
                  static_cast<std::size_t>(detail::header_int(f, "split.val")),
                  static_cast<std::size_t>(detail::header_int(f, "split.test"))};
    return Dataset(std::move(images), s, parse_provenance(f.value("provenance")));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace iresnet
