#include "modalfuse/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "modalfuse/errors.hpp"

namespace modalfuse {

namespace {

constexpr char kMagic[8] = {'M', 'F', 'A', 'R', 'C', 'H', '0', '1'};

template <typename T>
void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw FormatError("truncated archive " + path.string());
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

std::string get_string(std::istream& is, std::uint32_t len, const std::filesystem::path& path) {
  std::string s(len, '\0');
  if (len > 0 && !is.read(s.data(), len)) throw FormatError("truncated archive " + path.string());
  return s;
}

}  // namespace

const ArchiveEntry* Archive::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(archive.metadata.size()));
  os.write(archive.metadata.data(), static_cast<std::streamsize>(archive.metadata.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(archive.entries.size()));
  for (const auto& e : archive.entries) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(e.dtype));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    for (double v : e.tensor.values()) {
      if (e.dtype == DType::F32) {
        put<float>(os, static_cast<float>(v));
      } else {
        put<double>(os, v);
      }
    }
  }
  if (!os) throw FormatError("failed writing " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open archive " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path.string() + " is not a parameter archive (bad magic)");
  }
  Archive archive;
  archive.metadata = get_string(is, get<std::uint32_t>(is, path), path);
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    ArchiveEntry e;
    e.name = get_string(is, get<std::uint32_t>(is, path), path);
    const auto dtype = get<std::uint8_t>(is, path);
    if (dtype > 1) throw FormatError("unknown dtype tag in " + path.string() + " entry " + e.name);
    e.dtype = static_cast<DType>(dtype);
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(get<std::uint64_t>(is, path));
    Tensor t(shape);
    for (auto& v : t.values()) {
      v = e.dtype == DType::F32 ? static_cast<double>(get<float>(is, path)) : get<double>(is, path);
    }
    e.tensor = std::move(t);
    archive.entries.push_back(std::move(e));
  }
  return archive;
}

}  // namespace modalfuse
