#include "spdgeo/binio.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace spdgeo::io {

namespace {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

}  // namespace

void ByteWriter::put_u32(std::uint32_t v) {
  v = to_little(v);
  buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void ByteWriter::put_f64(double v) {
  std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
  buf_.append(reinterpret_cast<const char*>(&bits), sizeof bits);
}

void ByteWriter::put_matrix(const Mat& m) {
  put_u32(static_cast<std::uint32_t>(m.rows()));
  put_u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(m(i, j));
}

void ByteWriter::write_file(const std::filesystem::path& path) const {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ByteReader ByteReader::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return ByteReader(std::move(data));
}

void ByteReader::fail(const std::string& what) const { throw FormatError(what, pos_, record_); }

void ByteReader::fail_at(const std::string& what, std::uint64_t offset) const {
  throw FormatError(what, offset, record_);
}

void ByteReader::need(std::size_t n) const {
  if (data_.size() - pos_ < n) {
    fail("truncated input: need " + std::to_string(n) + " bytes, " + std::to_string(data_.size() - pos_) +
         " left");
  }
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v;
  std::memcpy(&v, data_.data() + pos_, 4);
  pos_ += 4;
  return to_little(v);
}

double ByteReader::f64() {
  need(8);
  std::uint64_t bits;
  std::memcpy(&bits, data_.data() + pos_, 8);
  pos_ += 8;
  return std::bit_cast<double>(to_little(bits));
}

std::string ByteReader::bytes(std::size_t n) {
  need(n);
  std::string out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

Mat ByteReader::dense(std::uint32_t rows, std::uint32_t cols) {
  need(std::size_t{rows} * cols * 8);
  Mat m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i)
    for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = f64();
  return m;
}

Mat ByteReader::matrix() {
  const std::uint32_t rows = u32();
  const std::uint32_t cols = u32();
  return dense(rows, cols);
}

void ByteReader::expect_magic(std::string_view magic) {
  const auto at = pos_;
  if (remaining() < magic.size() || bytes(magic.size()) != magic) {
    fail_at("bad magic, expected \"" + std::string(magic) + "\"", at);
  }
}

void put_blocks(ByteWriter& w, std::span<const Mat> blocks) {
  w.put_u32(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) w.put_matrix(b);
}

std::vector<Mat> read_blocks(ByteReader& r) {
  const std::uint32_t n = r.u32();
  std::vector<Mat> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    r.set_record(i);
    out.push_back(r.matrix());
  }
  r.set_record(std::nullopt);
  return out;
}

Mat row(std::initializer_list<double> values) {
  Mat m(1, static_cast<Eigen::Index>(values.size()));
  Eigen::Index j = 0;
  for (double v : values) m(0, j++) = v;
  return m;
}

}  // namespace spdgeo::io
