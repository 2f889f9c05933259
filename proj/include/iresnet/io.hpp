#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "iresnet/errors.hpp"
#include "iresnet/grid.hpp"

namespace iresnet {

/// Shortest decimal string that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

inline long long parse_int(const std::string& s) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::invalid_argument("not an integer: '" + s + "'");
  return v;
}

inline void ensure_parent_dir(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

inline std::ofstream open_for_write(const std::filesystem::path& p, bool binary = false) {
  ensure_parent_dir(p);
  std::ofstream out(p, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + p.string() + "' for writing");
  return out;
}

/// RFC-4180 CSV with a header row.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
      : path_(path), out_(open_for_write(path)), columns_(header.size()) {
    write_row(header);
  }

  static std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + '"';
  }
  static std::string field(const std::string& s) { return s; }
  static std::string field(double v) { return format_double(v); }
  static std::string field(long long v) { return std::to_string(v); }
  static std::string field(int v) { return std::to_string(v); }
  static std::string field(std::size_t v) { return std::to_string(v); }
  static std::string field(const char* s) { return field(std::string(s)); }

  template <class... Ts>
  void row(const Ts&... values) {
    write_row({field(values)...});
  }

  void write_row(const std::vector<std::string>& fields) {
    if (fields.size() != columns_)
      throw std::invalid_argument("CsvWriter: row has " + std::to_string(fields.size()) +
                                  " fields, header has " + std::to_string(columns_));
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << quote(fields[i]);
    }
    out_ << "\r\n";
    if (!out_) throw std::runtime_error("write failed: " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t columns_;
};

/// Parses RFC-4180 text into rows of fields.
inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cur;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(cur));
      cur.clear();
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(cur));
      cur.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      cur += c;
      any = true;
    }
  }
  if (quoted) throw FormatError("read_csv: unterminated quote in " + path.string());
  if (any || !cur.empty()) {
    row.push_back(std::move(cur));
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Plain PGM (P2, maxval 255); values are clamped to [0, 1] and rounded.
inline void write_pgm(const std::filesystem::path& path, const ImageGrid& img) {
  auto out = open_for_write(path);
  out << "P2\n" << img.width() << ' ' << img.height() << "\n255\n";
  for (int r = 0; r < img.height(); ++r) {
    for (int c = 0; c < img.width(); ++c) {
      const double v = std::clamp(img(r, c), 0.0, 1.0);
      out << (c ? " " : "") << static_cast<int>(std::lround(v * 255.0));
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline ImageGrid read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string t;
    while (ls >> t) tokens.push_back(t);
  }
  if (tokens.size() < 4 || tokens[0] != "P2") throw FormatError("read_pgm: not a plain P2 file");
  const long long w = parse_int(tokens[1]), h = parse_int(tokens[2]), maxval = parse_int(tokens[3]);
  if (w <= 0 || h <= 0 || maxval <= 0) throw FormatError("read_pgm: invalid header");
  if (tokens.size() != static_cast<std::size_t>(4 + w * h))
    throw FormatError("read_pgm: expected " + std::to_string(w * h) + " samples");
  ImageGrid img(static_cast<int>(h), static_cast<int>(w));
  for (std::size_t i = 0; i < img.size(); ++i) {
    const long long v = parse_int(tokens[4 + i]);
    if (v < 0 || v > maxval) throw FormatError("read_pgm: sample out of range");
    img.values()[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return img;
}

using KeyValues = std::map<std::string, std::string>;

/// `key=value` lines; blank lines and lines starting with '#' are skipped.
inline KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  KeyValues kv;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline void write_key_values(const std::filesystem::path& path, const KeyValues& kv) {
  auto out = open_for_write(path);
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

/// Bounds-checked little-endian reader over an in-memory file.
class ByteReader {
 public:
  ByteReader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

  static ByteReader from_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ByteReader(ss.str(), path.string());
  }

  std::string take(std::size_t n) {
    if (n > bytes_.size() - pos_)
      throw FormatError(what_ + ": truncated (needed " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ")");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    const std::string b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const std::string b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() { return take(u32()); }
  bool done() const noexcept { return pos_ == bytes_.size(); }
  const std::string& what() const noexcept { return what_; }

 private:
  std::string bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

}  // namespace iresnet
