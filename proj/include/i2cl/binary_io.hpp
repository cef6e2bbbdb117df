#pragma once

// Little-endian container primitives shared by the weight, context-vector
// and coefficient files: a 6-byte magic, u32 header fields, f64 arrays.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "i2cl/error.hpp"
#include "i2cl/tensor.hpp"

namespace i2cl::binary {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) {
      throw Error("cannot open '" + path.string() + "' for writing");
    }
  }

  void magic(std::string_view m) { raw(m.data(), m.size()); }

  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) {
      b[i] = static_cast<unsigned char>(v >> (8 * i));
    }
    raw(b, 4);
  }

  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) {
      b[i] = static_cast<unsigned char>(bits >> (8 * i));
    }
    raw(b, 8);
  }

  /// Row-major values of `m`.
  void array(const Matrix& m) {
    if constexpr (std::endian::native == std::endian::little) {
      raw(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    } else {
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        f64(m.data()[i]);
      }
    }
  }

  void finish() {
    out_.flush();
    if (!out_) {
      throw Error("write failed for '" + path_.string() + "'");
    }
  }

 private:
  void raw(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  }

  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      throw Error("cannot open '" + path.string() + "' for reading");
    }
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  void expect_magic(std::string_view m) {
    need(m.size(), "magic");
    if (std::string_view(bytes_.data() + pos_, m.size()) != m) {
      throw FormatError("'" + path_.string() + "': bad magic (expected " + std::string(m) + ")");
    }
    pos_ += m.size();
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  double f64(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }

  Matrix array(Eigen::Index rows, Eigen::Index cols, const std::string& what) {
    Matrix m(rows, cols);
    const auto n = static_cast<std::size_t>(m.size());
    need(n * sizeof(double), what.c_str());
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(m.data(), bytes_.data() + pos_, n * sizeof(double));
      pos_ += n * sizeof(double);
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        m.data()[i] = f64(what.c_str());
      }
    }
    return m;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_end() const {
    if (remaining() != 0) {
      throw FormatError("'" + path_.string() + "': " + std::to_string(remaining()) +
                        " trailing bytes");
    }
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("'" + path_.string() + "': truncated while reading " + what);
    }
  }

  std::filesystem::path path_;
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace i2cl::binary
