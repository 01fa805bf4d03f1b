#pragma once

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace wmlab {

enum class DType : std::uint32_t { kU8 = 0, kF32 = 1, kF64 = 2 };

std::size_t dtype_size(DType t);
std::string to_string(DType t);

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::kU8; }
template <>
constexpr DType dtype_of<float>() { return DType::kF32; }
template <>
constexpr DType dtype_of<double>() { return DType::kF64; }

/// A dense row-major array with a runtime element type.
///
/// On disk: "WMTN", u32 version, u32 dtype, u32 rank, u64 dims[rank], then the
/// raw little-endian elements.
struct PackedTensor {
  DType dtype = DType::kF32;
  std::vector<std::uint64_t> dims;
  std::vector<std::byte> bytes;

  std::size_t numel() const;

  template <typename T>
  static PackedTensor from(std::span<const T> values, std::vector<std::uint64_t> dims) {
    PackedTensor t;
    t.dtype = dtype_of<T>();
    t.dims = std::move(dims);
    t.bytes.resize(values.size_bytes());
    std::memcpy(t.bytes.data(), values.data(), values.size_bytes());
    return t;
  }

  /// Copies the elements out; T must match dtype exactly.
  template <typename T>
  std::vector<T> values() const {
    check_dtype(dtype_of<T>());
    std::vector<T> out(numel());
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
  }

 private:
  void check_dtype(DType want) const;
};

void write_packed(const std::filesystem::path& path, const PackedTensor& tensor);
PackedTensor read_packed(const std::filesystem::path& path);

/// Single-file archive of named tensors plus a JSON metadata header.
///
/// On disk: "WMCK", u32 version, u64 header length, JSON header, tensor blob.
/// The header's "tensors" array lists name, dtype, dims, offset and size.
struct Archive {
  nlohmann::json metadata;
  std::vector<std::pair<std::string, PackedTensor>> tensors;

  const PackedTensor& at(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

/// Lowercase hex SHA-256 of a byte string / file.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

/// Writes `text` to `path` atomically (temp file + rename), creating parents.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace wmlab
