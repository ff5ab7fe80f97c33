#pragma once

// DFT1 tensor container and the multi-section archive built on it.
//
// DFT1 layout: "DFT1", u8 dtype (0 = f32, 1 = f64), u8 ndim,
// ndim x u32 LE extents, then the payload as LE scalars.
//
// Archive layout: "DFTS", u32 LE section count, then per section a u16 LE
// name length, the name bytes, and one DFT1 blob. Saving an archive also
// writes a "<path>.manifest" text file listing `name dtype shape` per line.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "dmoco/error.hpp"
#include "dmoco/tensor.hpp"

namespace dmoco {

namespace io_detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put_le(std::string& out, U v) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                  std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                      std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
  auto bits = std::bit_cast<Bits>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(std::string_view in, std::size_t& pos, const char* what) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                  std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                      std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
  if (in.size() - pos < sizeof(U) || pos > in.size()) throw FormatError(std::string("truncated ") + what, pos);
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    bits |= static_cast<Bits>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return std::bit_cast<U>(bits);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace io_detail

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

template <typename T>
void encode_dft(const Tensor<T>& t, std::string& out) {
  out.append("DFT1");
  out.push_back(static_cast<char>(dtype_of<T>()));
  if (t.rank() > 255) throw ShapeError("DFT1 supports at most 255 axes");
  out.push_back(static_cast<char>(t.rank()));
  for (auto e : t.shape()) {
    if (e > 0xFFFFFFFFull) throw ShapeError("DFT1 extent exceeds u32");
    io_detail::put_le(out, static_cast<std::uint32_t>(e));
  }
  for (T v : t.data()) io_detail::put_le(out, v);
}

template <typename T>
std::string encode_dft(const Tensor<T>& t) {
  std::string out;
  encode_dft(t, out);
  return out;
}

/// Decodes one DFT1 blob at `pos`, converting the payload to T when the stored
/// dtype differs. On failure nothing is returned and `pos` is unspecified.
template <typename T>
Tensor<T> decode_dft(std::string_view in, std::size_t& pos, DType* stored = nullptr) {
  if (pos > in.size() || in.size() - pos < 4) throw FormatError("truncated DFT1 magic", pos);
  if (in.substr(pos, 4) != "DFT1") throw FormatError("bad DFT1 magic", pos);
  pos += 4;
  const auto code = io_detail::get_le<std::uint8_t>(in, pos, "DFT1 dtype");
  if (code > 1) throw FormatError("unknown DFT1 dtype code " + std::to_string(code), pos - 1);
  const auto dtype = static_cast<DType>(code);
  const auto ndim = io_detail::get_le<std::uint8_t>(in, pos, "DFT1 rank");
  if (ndim == 0) throw FormatError("DFT1 rank must be positive", pos - 1);
  Shape shape(ndim);
  for (auto& e : shape) {
    e = io_detail::get_le<std::uint32_t>(in, pos, "DFT1 extent");
    if (e == 0) throw FormatError("DFT1 extent must be positive", pos - 4);
  }
  const std::size_t n = numel(shape);
  const std::size_t width = dtype == DType::f32 ? 4 : 8;
  if ((in.size() - pos) / width < n)
    throw FormatError("truncated DFT1 payload: need " + std::to_string(n * width) + " bytes, have " +
                          std::to_string(in.size() - pos),
                      in.size());
  std::vector<T> data(n);
  for (auto& v : data)
    v = dtype == DType::f32 ? static_cast<T>(io_detail::get_le<float>(in, pos, "DFT1 payload"))
                            : static_cast<T>(io_detail::get_le<double>(in, pos, "DFT1 payload"));
  if (stored) *stored = dtype;
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_dft(const std::filesystem::path& path, const Tensor<T>& t) {
  io_detail::write_file(path, encode_dft(t));
}

/// Loads a single-tensor DFT1 file. Trailing bytes are a format error.
template <typename T>
Tensor<T> load_dft(const std::filesystem::path& path) {
  const std::string bytes = io_detail::read_file(path);
  std::size_t pos = 0;
  auto t = decode_dft<T>(bytes, pos);
  if (pos != bytes.size()) throw FormatError("trailing bytes after DFT1 tensor", pos);
  return t;
}

/// Ordered collection of named DFT1 sections (checkpoints, datasets).
class Archive {
 public:
  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    if (name.empty() || name.size() > 0xFFFF) throw ParameterError("archive section name length out of range");
    std::string blob;
    encode_dft(t, blob);
    Section s{name, dtype_of<T>(), t.shape(), std::move(blob)};
    for (auto& existing : sections_)
      if (existing.name == name) {
        existing = std::move(s);
        return;
      }
    sections_.push_back(std::move(s));
  }

  void put_scalar(const std::string& name, double v) { put(name, Tensor<double>::scalar(v)); }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    const Section* s = find(name);
    if (!s) throw FormatError("archive has no section '" + name + "'", 0);
    std::size_t pos = 0;
    return decode_dft<T>(s->blob, pos);
  }

  double get_scalar(const std::string& name) const { return get<double>(name).item(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& s : sections_) out.push_back(s.name);
    return out;
  }

  /// Names of sections starting with `prefix`, with the prefix removed.
  std::vector<std::string> names_under(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& s : sections_)
      if (s.name.compare(0, prefix.size(), prefix) == 0) out.push_back(s.name.substr(prefix.size()));
    return out;
  }

  std::string encode() const {
    std::string out = "DFTS";
    io_detail::put_le(out, static_cast<std::uint32_t>(sections_.size()));
    for (const auto& s : sections_) {
      io_detail::put_le(out, static_cast<std::uint16_t>(s.name.size()));
      out.append(s.name);
      out.append(s.blob);
    }
    return out;
  }

  std::string manifest() const {
    std::string out;
    for (const auto& s : sections_) out += s.name + " " + dtype_name(s.dtype) + " " + to_string(s.shape) + "\n";
    return out;
  }

  static Archive decode(std::string_view in) {
    std::size_t pos = 0;
    if (in.size() < 4 || in.substr(0, 4) != "DFTS") throw FormatError("bad archive magic", 0);
    pos = 4;
    const auto count = io_detail::get_le<std::uint32_t>(in, pos, "archive section count");
    Archive a;
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = io_detail::get_le<std::uint16_t>(in, pos, "section name length");
      if (in.size() - pos < len) throw FormatError("truncated section name", pos);
      std::string name(in.substr(pos, len));
      pos += len;
      const std::size_t start = pos;
      DType dtype{};
      // Decode as double only to validate and measure the blob.
      auto t = decode_dft<double>(in, pos, &dtype);
      a.sections_.push_back(Section{std::move(name), dtype, t.shape(), std::string(in.substr(start, pos - start))});
    }
    if (pos != in.size()) throw FormatError("trailing bytes after archive", pos);
    return a;
  }

  /// Writes the archive and its manifest. `extra` lines are appended to the
  /// manifest after a blank line (used for run configuration).
  void save(const std::filesystem::path& path, const std::string& extra = {}) const {
    io_detail::write_file(path, encode());
    std::string m = manifest();
    if (!extra.empty()) m += "\n" + extra;
    io_detail::write_file(path.string() + ".manifest", m);
  }

  static Archive load(const std::filesystem::path& path) { return decode(io_detail::read_file(path)); }

 private:
  struct Section {
    std::string name;
    DType dtype;
    Shape shape;
    std::string blob;
  };

  const Section* find(const std::string& name) const {
    for (const auto& s : sections_)
      if (s.name == name) return &s;
    return nullptr;
  }

  std::vector<Section> sections_;
};

/// Stores every tensor of a parameter set under `prefix`.
template <typename Map>
void put_params(Archive& a, const std::string& prefix, const Map& params) {
  for (const auto& [name, t] : params) a.put(prefix + name, t);
}

template <typename T>
std::map<std::string, Tensor<T>> get_params(const Archive& a, const std::string& prefix) {
  std::map<std::string, Tensor<T>> out;
  for (const auto& name : a.names_under(prefix)) out.emplace(name, a.get<T>(prefix + name));
  return out;
}

}  // namespace dmoco
