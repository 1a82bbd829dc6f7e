#pragma once

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pbs/errors.hpp"
#include "pbs/matrix.hpp"

namespace pbs {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts are unsupported");

/// Binary tensor file layout ("PBST"):
///   magic   4 bytes  "PBST"
///   version u32      1
///   dtype   u32      0 = float32, 1 = float64
///   ndim    u32      2 (rows, cols) or 3 (heads, rows, cols)
///   shape   ndim x u64
///   payload row-major little-endian values
enum class Dtype : std::uint32_t { f32 = 0, f64 = 1 };

inline constexpr std::uint32_t kTensorFileVersion = 1;
inline constexpr std::array<char, 4> kTensorFileMagic = {'P', 'B', 'S', 'T'};

template <std::floating_point T>
constexpr Dtype dtype_of() {
  return std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
}

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

struct LoadedTensor {
  Dtype dtype = Dtype::f64;
  bool is_stack = false;  // true when the file held a 3-D heads stack
  std::variant<std::vector<Matrix<float>>, std::vector<Matrix<double>>> data;

  std::size_t head_count() const {
    return std::visit([](const auto& v) { return v.size(); }, data);
  }

  template <std::floating_point T>
  const std::vector<Matrix<T>>& as() const {
    if (dtype_of<T>() != dtype)
      throw ConfigError(std::string("tensor holds ") + dtype_name(dtype) +
                        " data but " + dtype_name(dtype_of<T>()) + " was requested");
    return std::get<std::vector<Matrix<T>>>(data);
  }
};

namespace detail {

inline void append_bytes(std::vector<std::byte>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::byte*>(p);
  out.insert(out.end(), b, b + n);
}

template <typename U>
U read_raw(std::span<const std::byte> bytes, std::size_t offset) {
  U v;
  std::memcpy(&v, bytes.data() + offset, sizeof(U));
  return v;
}

template <std::floating_point T>
std::vector<Matrix<T>> parse_payload(std::span<const std::byte> bytes, std::size_t offset,
                                     std::size_t heads, std::size_t rows, std::size_t cols) {
  std::vector<Matrix<T>> out;
  out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Matrix<T> m(rows, cols);
    const std::size_t nbytes = rows * cols * sizeof(T);
    std::memcpy(m.data(), bytes.data() + offset, nbytes);
    if (auto bad = m.first_nonfinite())
      throw FormatError("non-finite element in tensor payload", offset + *bad * sizeof(T));
    offset += nbytes;
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace detail

inline LoadedTensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  const auto file_size = in.tellg();
  in.seekg(0);
  std::vector<std::byte> bytes(static_cast<std::size_t>(file_size));
  in.read(reinterpret_cast<char*>(bytes.data()), file_size);
  if (!in) throw IoError("failed reading '" + path.string() + "'");
  const std::span<const std::byte> b{bytes};

  if (bytes.size() < 4 || std::memcmp(bytes.data(), kTensorFileMagic.data(), 4) != 0)
    throw FormatError("bad magic, expected \"PBST\"", 0);
  if (bytes.size() < 8) throw FormatError("truncated before version field", bytes.size());
  const auto version = detail::read_raw<std::uint32_t>(b, 4);
  if (version != kTensorFileVersion)
    throw FormatError("unsupported version " + std::to_string(version), 4);
  if (bytes.size() < 12) throw FormatError("truncated before dtype field", bytes.size());
  const auto dtype_code = detail::read_raw<std::uint32_t>(b, 8);
  if (dtype_code > 1) throw FormatError("unknown dtype code " + std::to_string(dtype_code), 8);
  if (bytes.size() < 16) throw FormatError("truncated before ndim field", bytes.size());
  const auto ndim = detail::read_raw<std::uint32_t>(b, 12);
  if (ndim != 2 && ndim != 3)
    throw FormatError("ndim must be 2 or 3, got " + std::to_string(ndim), 12);

  const std::size_t header_size = 16 + std::size_t(ndim) * 8;
  if (bytes.size() < header_size) throw FormatError("truncated shape header", bytes.size());

  std::uint64_t dims[3] = {1, 0, 0};
  for (std::uint32_t i = 0; i < ndim; ++i)
    dims[i + (3 - ndim)] = detail::read_raw<std::uint64_t>(b, 16 + std::size_t(i) * 8);
  const std::uint64_t heads = ndim == 3 ? dims[0] : 1;
  const std::uint64_t rows = dims[1], cols = dims[2];

  const std::size_t elem_size = dtype_code == 0 ? 4 : 8;
  std::uint64_t elems = heads;
  for (std::uint64_t dim : {rows, cols}) {
    if (dim != 0 && elems > UINT64_MAX / dim) throw FormatError("shape product overflows", 16);
    elems *= dim;
  }
  if (elems > (std::uint64_t(1) << 40))
    throw FormatError("shape product exceeds supported tensor size", 16);
  const std::size_t payload = std::size_t(elems) * elem_size;
  if (bytes.size() < header_size + payload)
    throw FormatError("payload truncated, expected " + std::to_string(payload) + " bytes",
                      bytes.size());
  if (bytes.size() > header_size + payload)
    throw FormatError("trailing bytes after payload", header_size + payload);

  LoadedTensor t;
  t.dtype = static_cast<Dtype>(dtype_code);
  t.is_stack = ndim == 3;
  if (t.dtype == Dtype::f32)
    t.data = detail::parse_payload<float>(b, header_size, heads, rows, cols);
  else
    t.data = detail::parse_payload<double>(b, header_size, heads, rows, cols);
  return t;
}

template <std::floating_point T>
void write_tensor(const std::filesystem::path& path, std::span<const Matrix<T>> heads,
                  bool as_stack) {
  if (heads.empty()) throw ShapeError("write_tensor: empty head list");
  for (const auto& m : heads)
    if (m.rows() != heads[0].rows() || m.cols() != heads[0].cols())
      throw ShapeError("write_tensor: heads have differing shapes");
  if (!as_stack && heads.size() != 1)
    throw ShapeError("write_tensor: multiple heads require a 3-D stack");

  std::vector<std::byte> bytes;
  detail::append_bytes(bytes, kTensorFileMagic.data(), 4);
  const std::uint32_t version = kTensorFileVersion;
  const std::uint32_t dtype_code = static_cast<std::uint32_t>(dtype_of<T>());
  const std::uint32_t ndim = as_stack ? 3 : 2;
  detail::append_bytes(bytes, &version, 4);
  detail::append_bytes(bytes, &dtype_code, 4);
  detail::append_bytes(bytes, &ndim, 4);
  if (as_stack) {
    const std::uint64_t h = heads.size();
    detail::append_bytes(bytes, &h, 8);
  }
  const std::uint64_t rows = heads[0].rows(), cols = heads[0].cols();
  detail::append_bytes(bytes, &rows, 8);
  detail::append_bytes(bytes, &cols, 8);
  for (const auto& m : heads) detail::append_bytes(bytes, m.data(), m.size() * sizeof(T));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

template <std::floating_point T>
void write_tensor(const std::filesystem::path& path, const Matrix<T>& m) {
  write_tensor<T>(path, std::span<const Matrix<T>>(&m, 1), /*as_stack=*/false);
}

template <std::floating_point T>
void write_tensor_stack(const std::filesystem::path& path, const std::vector<Matrix<T>>& heads) {
  write_tensor<T>(path, std::span<const Matrix<T>>(heads.data(), heads.size()),
                  /*as_stack=*/true);
}

}  // namespace pbs
