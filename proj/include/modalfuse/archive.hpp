#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "modalfuse/tensor.hpp"

namespace modalfuse {

/// On-disk element type of an archive entry. Values are always held as
/// doubles in memory; f32 entries round on write.
enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct ArchiveEntry {
  std::string name;
  DType dtype = DType::F32;
  Tensor tensor;
};

/// Flat named-tensor archive. Byte layout (all integers little-endian):
///
///   char[8]  magic "MFARCH01"
///   u32      metadata length, then that many bytes of UTF-8 text
///   u32      entry count
///   per entry:
///     u32 name length, name bytes
///     u8  dtype (0 = f32, 1 = f64)
///     u32 rank, then rank x u64 dims
///     numel x (f32 | f64) little-endian values, row-major
///
/// Used for the frozen-weight hook (f32) and for checkpoints (f64 so that
/// reloaded parameters are exact).
struct Archive {
  std::string metadata;
  std::vector<ArchiveEntry> entries;

  const ArchiveEntry* find(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

}  // namespace modalfuse
