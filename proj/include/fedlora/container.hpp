#pragma once

// Versioned binary container shared by checkpoints and dataset exports.
//
// Layout, all integers little-endian:
//
//   magic        8 bytes  "FEDLORA\0"
//   version      u32      kContainerVersion
//   kind         u32 length + UTF-8 bytes   ("checkpoint", "dataset", ...)
//   n_meta       u32
//     key        u32 length + bytes
//     value      u32 length + bytes
//   n_tensors    u32
//     name       u32 length + bytes
//     rows       u64
//     cols       u64
//     payload    rows*cols IEEE-754 binary64, little-endian, row-major
//
// Metadata and tensors are kept in name order, so writing the same content
// always produces the same bytes.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "fedlora/linalg.hpp"

namespace fedlora {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[8] = {'F', 'E', 'D', 'L', 'O', 'R', 'A', '\0'};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Container {
  std::string kind;
  std::map<std::string, std::string> meta;
  std::map<std::string, Matrix> tensors;

  const Matrix& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("container: missing tensor '" + name + "'");
    return it->second;
  }

  const std::string& get(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("container: missing metadata '" + key + "'");
    return it->second;
  }

  friend bool operator==(const Container&, const Container&) = default;
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_string(std::string& out, const std::string& s) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  std::string str() {
    const auto n = le<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("container: truncated");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Container& c) {
  std::string out(kContainerMagic, sizeof(kContainerMagic));
  detail::put_le<std::uint32_t>(out, kContainerVersion);
  detail::put_string(out, c.kind);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    detail::put_string(out, k);
    detail::put_string(out, v);
  }
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, m] : c.tensors) {
    detail::put_string(out, name);
    detail::put_le<std::uint64_t>(out, m.rows());
    detail::put_le<std::uint64_t>(out, m.cols());
    for (double v : m.values()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Container deserialize(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.raw(sizeof(kContainerMagic)) != std::string(kContainerMagic, sizeof(kContainerMagic))) {
    throw FormatError("container: bad magic");
  }
  const auto version = r.le<std::uint32_t>();
  if (version != kContainerVersion) throw FormatError("container: unsupported version " + std::to_string(version));
  Container c;
  c.kind = r.str();
  const auto n_meta = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.str();
    c.meta[k] = r.str();
  }
  const auto n_tensors = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto name = r.str();
    const auto rows = r.le<std::uint64_t>();
    const auto cols = r.le<std::uint64_t>();
    if (cols != 0 && rows > r.remaining() / 8 / cols) throw FormatError("container: tensor '" + name + "' truncated");
    std::vector<double> data(rows * cols);
    for (double& v : data) v = std::bit_cast<double>(r.le<std::uint64_t>());
    c.tensors.emplace(std::move(name), Matrix(rows, cols, std::move(data)));
  }
  if (!r.done()) throw FormatError("container: trailing bytes");
  return c;
}

inline void write_container(const std::string& path, const Container& c) {
  // Written to a sibling temporary, then renamed into place.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    const std::string bytes = serialize(c);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("rename failed: " + path);
}

inline Container read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Vectors travel as 1 x n tensors.
inline Matrix as_row(const Vector& v) { return Matrix(1, v.size(), v); }

inline Vector row_vector(const Matrix& m) {
  if (m.rows() != 1 && !m.empty()) throw FormatError("container: expected a 1 x n tensor");
  return {m.values().begin(), m.values().end()};
}

}  // namespace fedlora
