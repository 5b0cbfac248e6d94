#include "canopy/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "canopy/common.hpp"

namespace canopy {

namespace {

constexpr std::string_view kMagic = "CNPY";

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(std::string_view bytes) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<T>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  return v;
}

}  // namespace

void ByteWriter::u32(std::uint32_t v) { put_le(buf_, v); }
void ByteWriter::u64(std::uint64_t v) { put_le(buf_, v); }
void ByteWriter::f64(double v) { put_le(buf_, std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.append(s);
}

void ByteWriter::f64s(const double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) f64(data[i]);
}

void ByteWriter::matrix(const Eigen::MatrixXd& m) {
  u64(static_cast<std::uint64_t>(m.rows()));
  u64(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
}

std::string_view ByteReader::take(std::size_t n) {
  if (n > data_.size() - pos_) throw ValidationError("truncated container");
  auto out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint32_t ByteReader::u32() { return get_le<std::uint32_t>(take(4)); }
std::uint64_t ByteReader::u64() { return get_le<std::uint64_t>(take(8)); }
double ByteReader::f64() { return std::bit_cast<double>(get_le<std::uint64_t>(take(8))); }

std::string ByteReader::raw(std::uint64_t n) {
  if (n > data_.size() - pos_) throw ValidationError("truncated container");
  return std::string(take(static_cast<std::size_t>(n)));
}

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  return std::string(take(n));
}

std::vector<double> ByteReader::f64s(std::size_t n) {
  if (n > (data_.size() - pos_) / 8) throw ValidationError("truncated container");
  std::vector<double> out(n);
  for (double& v : out) v = f64();
  return out;
}

Eigen::MatrixXd ByteReader::matrix() {
  const std::uint64_t rows = u64();
  const std::uint64_t cols = u64();
  if (cols != 0 && rows > (data_.size() - pos_) / 8 / cols)
    throw ValidationError("truncated container");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = f64();
  return m;
}

std::string encode_container(const std::vector<Section>& sections) {
  ByteWriter w;
  std::string out(kMagic);
  w.u32(kContainerVersion);
  for (const Section& s : sections) {
    w.str(s.name);
    w.u64(s.payload.size());
    out.append(w.take());
    out.append(s.payload);
  }
  out.append(w.take());
  return out;
}

std::vector<Section> decode_container(std::string_view bytes) {
  if (bytes.substr(0, kMagic.size()) != kMagic)
    throw ValidationError("not a CNPY container (bad magic)");
  ByteReader r(bytes.substr(kMagic.size()));
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion)
    throw ValidationError("unsupported container version " + std::to_string(version));
  std::vector<Section> sections;
  while (!r.done()) {
    Section s;
    s.name = r.str();
    const std::uint64_t len = r.u64();
    s.payload = r.raw(len);
    sections.push_back(std::move(s));
  }
  return sections;
}

void write_container(const std::filesystem::path& path,
                     const std::vector<Section>& sections) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write '" + path.string() + "'");
  const std::string bytes = encode_container(sections);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeError("write failed for '" + path.string() + "'");
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<Section> read_container(const std::filesystem::path& path) {
  return decode_container(read_file_bytes(path));
}

const Section& find_section(const std::vector<Section>& sections,
                            std::string_view name) {
  for (const Section& s : sections)
    if (s.name == name) return s;
  throw ValidationError("container has no '" + std::string(name) + "' section");
}

}  // namespace canopy
