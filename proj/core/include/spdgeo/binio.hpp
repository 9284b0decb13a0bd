#pragma once

// Little-endian binary encoding shared by the data and model file formats.

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spdgeo/spd.hpp"

namespace spdgeo::io {

class ByteWriter {
 public:
  void put_u32(std::uint32_t v);
  void put_f64(double v);
  void put_bytes(std::string_view b) { buf_.append(b); }
  /// rows u32, cols u32, rows*cols f64 row-major.
  void put_matrix(const Mat& m);

  const std::string& bytes() const noexcept { return buf_; }
  /// Writes to a sibling temporary and renames over `path`.
  void write_file(const std::filesystem::path& path) const;

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}
  static ByteReader from_file(const std::filesystem::path& path);

  std::uint32_t u32();
  double f64();
  std::string bytes(std::size_t n);
  Mat matrix();
  /// Reads rows*cols f64 row-major.
  Mat dense(std::uint32_t rows, std::uint32_t cols);
  void expect_magic(std::string_view magic);

  std::uint64_t offset() const noexcept { return pos_; }
  std::uint64_t remaining() const noexcept { return data_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }

  /// Record index attached to subsequent errors.
  void set_record(std::optional<std::uint64_t> r) noexcept { record_ = r; }
  [[noreturn]] void fail(const std::string& what) const;
  [[noreturn]] void fail_at(const std::string& what, std::uint64_t offset) const;

 private:
  void need(std::size_t n) const;

  std::string data_;
  std::size_t pos_ = 0;
  std::optional<std::uint64_t> record_;
};

/// u32 count followed by `put_matrix` blocks.
void put_blocks(ByteWriter& w, std::span<const Mat> blocks);
std::vector<Mat> read_blocks(ByteReader& r);

/// 1 x n row holding `values`.
Mat row(std::initializer_list<double> values);

}  // namespace spdgeo::io
