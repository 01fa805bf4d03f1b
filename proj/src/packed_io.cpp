#include "wmlab/packed_io.hpp"

#include "wmlab/errors.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <iterator>
#include <memory>
#include <numeric>
#include <sstream>

namespace wmlab {
namespace {

constexpr std::array<char, 4> kTensorMagic{'W', 'M', 'T', 'N'};
constexpr std::array<char, 4> kArchiveMagic{'W', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) throw FormatError("truncated file: " + path.string());
  return value;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("cannot open " + path.string());
  return is;
}

void write_tensor_body(std::ostream& os, const PackedTensor& t) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.dtype));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
}

DType checked_dtype(std::uint32_t raw, const std::filesystem::path& path) {
  if (raw > static_cast<std::uint32_t>(DType::kF64)) throw FormatError("unknown dtype in " + path.string());
  return static_cast<DType>(raw);
}

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::kU8: return 1;
    case DType::kF32: return 4;
    case DType::kF64: return 8;
  }
  return 0;
}

std::string to_string(DType t) {
  switch (t) {
    case DType::kU8: return "u8";
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
  }
  return "?";
}

std::size_t PackedTensor::numel() const {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, [](std::size_t a, std::uint64_t d) { return a * d; });
}

void PackedTensor::check_dtype(DType want) const {
  if (want != dtype) throw FormatError("tensor holds " + to_string(dtype) + ", requested " + to_string(want));
  if (bytes.size() != numel() * dtype_size(dtype)) throw FormatError("tensor byte count does not match its dims");
}

void write_packed(const std::filesystem::path& path, const PackedTensor& tensor) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw MissingArtifact("cannot write " + path.string());
    os.write(kTensorMagic.data(), 4);
    put<std::uint32_t>(os, kVersion);
    write_tensor_body(os, tensor);
  }
  std::filesystem::rename(tmp, path);
}

PackedTensor read_packed(const std::filesystem::path& path) {
  auto is = open_in(path);
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (magic != kTensorMagic) throw FormatError("not a packed tensor file: " + path.string());
  if (get<std::uint32_t>(is, path) != kVersion) throw FormatError("unsupported tensor version: " + path.string());
  PackedTensor t;
  t.dtype = checked_dtype(get<std::uint32_t>(is, path), path);
  const auto rank = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < rank; ++i) t.dims.push_back(get<std::uint64_t>(is, path));
  t.bytes.resize(t.numel() * dtype_size(t.dtype));
  if (!is.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size())))
    throw FormatError("truncated tensor data: " + path.string());
  return t;
}

const PackedTensor& Archive::at(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("archive has no tensor named " + name);
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json header;
  header["metadata"] = archive.metadata;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    header["tensors"].push_back({{"name", name}, {"dtype", to_string(t.dtype)}, {"dims", t.dims}, {"offset", offset},
                                 {"bytes", t.bytes.size()}});
    offset += t.bytes.size();
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw MissingArtifact("cannot write " + path.string());
    os.write(kArchiveMagic.data(), 4);
    put<std::uint32_t>(os, kVersion);
    put<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : archive.tensors)
      os.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  auto is = open_in(path);
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (magic != kArchiveMagic) throw FormatError("not a checkpoint archive: " + path.string());
  if (get<std::uint32_t>(is, path) != kVersion) throw FormatError("unsupported archive version: " + path.string());
  const auto len = get<std::uint64_t>(is, path);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated archive header");
  const auto header = nlohmann::json::parse(text);

  Archive archive;
  archive.metadata = header.at("metadata");
  const auto blob_start = is.tellg();
  for (const auto& entry : header.at("tensors")) {
    PackedTensor t;
    const auto dtype = entry.at("dtype").get<std::string>();
    t.dtype = dtype == "u8" ? DType::kU8 : dtype == "f64" ? DType::kF64 : DType::kF32;
    t.dims = entry.at("dims").get<std::vector<std::uint64_t>>();
    t.bytes.resize(entry.at("bytes").get<std::size_t>());
    if (t.bytes.size() != t.numel() * dtype_size(t.dtype)) throw FormatError("archive tensor size mismatch");
    is.seekg(blob_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    if (!is.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size())))
      throw FormatError("truncated archive data: " + path.string());
    archive.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return archive;
}

std::string sha256_hex(std::span<const std::byte> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx.get(), digest.data(), &len);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::as_bytes(std::span(text.data(), text.size())));
}

std::string sha256_file(const std::filesystem::path& path) {
  return sha256_hex(read_text_file(path));
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw MissingArtifact("cannot write " + path.string());
    os << text;
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text_file(const std::filesystem::path& path) {
  auto is = open_in(path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace wmlab
