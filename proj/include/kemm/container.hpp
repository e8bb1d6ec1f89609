#pragma once

// Self-describing little-endian binary container shared by patient feature
// files, the gene embedding table and parameter checkpoints.
//
//   "KEMM" | u32 version | u32 kind | payload
//
// Integers are little-endian u32, reals are IEEE-754 binary32 stored
// little-endian, strings are u32 byte length followed by UTF-8 bytes.
// A tensor archive payload is u32 count, then per tensor:
//   string name | u32 rank | u32 dims[rank] | f32 data[prod(dims)] (row-major)

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

namespace kemm::io {

inline constexpr std::array<char, 4> kMagic{'K', 'E', 'M', 'M'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class ContainerKind : std::uint32_t { patient = 1, tensor_archive = 2 };

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    u32(static_cast<std::uint32_t>(bits & 0xffffffffu));
    u32(static_cast<std::uint32_t>(bits >> 32));
  }
  void str(const std::string& s) {
    u32(checked_size(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* data, std::size_t n) { bytes_.insert(bytes_.end(), data, data + n); }
  void header(ContainerKind kind) {
    raw(kMagic.data(), kMagic.size());
    u32(kContainerVersion);
    u32(static_cast<std::uint32_t>(kind));
  }

  const std::vector<char>& bytes() const { return bytes_; }

  static std::uint32_t checked_size(std::size_t n) {
    if (n > UINT32_MAX) throw FormatError("container: length exceeds u32");
    return static_cast<std::uint32_t>(n);
  }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes, std::string origin = "<memory>")
      : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return std::bit_cast<double>(lo | (hi << 32));
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void header(ContainerKind expected) {
    need(4);
    if (std::memcmp(bytes_.data(), kMagic.data(), 4) != 0) fail("bad magic bytes");
    pos_ = 4;
    const std::uint32_t version = u32();
    if (version != kContainerVersion) fail("unsupported container version " + std::to_string(version));
    const std::uint32_t kind = u32();
    if (kind != static_cast<std::uint32_t>(expected))
      fail("unexpected container kind " + std::to_string(kind));
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  void expect_end() {
    if (!at_end()) fail("trailing bytes");
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(origin_ + ": " + what);
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("truncated container");
  }

  std::vector<char> bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

inline std::vector<char> encode_tensor_archive(const std::vector<NamedTensor>& tensors) {
  ByteWriter w;
  w.header(ContainerKind::tensor_archive);
  w.u32(ByteWriter::checked_size(tensors.size()));
  for (const auto& t : tensors) {
    if (t.data.size() != t.numel()) throw FormatError("tensor " + t.name + ": data/dims mismatch");
    w.str(t.name);
    w.u32(ByteWriter::checked_size(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    for (float v : t.data) w.f32(v);
  }
  return w.bytes();
}

inline std::vector<NamedTensor> decode_tensor_archive(std::vector<char> bytes,
                                                      const std::string& origin = "<memory>") {
  ByteReader r(std::move(bytes), origin);
  r.header(ContainerKind::tensor_archive);
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("tensor " + t.name + ": implausible rank");
    for (std::uint32_t k = 0; k < rank; ++k) t.dims.push_back(r.u32());
    const std::size_t n = t.numel();
    t.data.resize(n);
    for (std::size_t k = 0; k < n; ++k) t.data[k] = r.f32();
    out.push_back(std::move(t));
  }
  r.expect_end();
  return out;
}

inline void save_tensor_archive(const std::filesystem::path& path,
                                const std::vector<NamedTensor>& tensors) {
  write_file(path, encode_tensor_archive(tensors));
}

inline std::vector<NamedTensor> load_tensor_archive(const std::filesystem::path& path) {
  return decode_tensor_archive(read_file(path), path.string());
}

}  // namespace kemm::io
