#pragma once

// `CNPY` binary container: magic, u32 format version, then a sequence of
// sections. Each section is a u32 name length, the name bytes, a u64 payload
// length and the payload. All integers are little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace canopy {

inline constexpr std::uint32_t kContainerVersion = 1;

class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v);
  void str(std::string_view s);
  void f64s(const double* data, std::size_t n);
  void matrix(const Eigen::MatrixXd& m);  // rows, cols, row-major values

  const std::string& bytes() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64();
  std::string str();
  std::string raw(std::uint64_t n);
  std::vector<double> f64s(std::size_t n);
  Eigen::MatrixXd matrix();

  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view take(std::size_t n);

  std::string_view data_;
  std::size_t pos_ = 0;
};

struct Section {
  std::string name;
  std::string payload;
};

std::string encode_container(const std::vector<Section>& sections);
std::vector<Section> decode_container(std::string_view bytes);

void write_container(const std::filesystem::path& path,
                     const std::vector<Section>& sections);
std::vector<Section> read_container(const std::filesystem::path& path);

const Section& find_section(const std::vector<Section>& sections,
                            std::string_view name);

std::string read_file_bytes(const std::filesystem::path& path);

}  // namespace canopy
