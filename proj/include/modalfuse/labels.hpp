#pragma once

#include <cstdint>
#include <vector>

namespace modalfuse {

/// Integer class ids on [B, H, W], row-major.
struct LabelMap {
  std::int64_t batch = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::int32_t> ids;

  LabelMap() = default;
  LabelMap(std::int64_t b, std::int64_t h, std::int64_t w, std::int32_t fill = 0)
      : batch(b), height(h), width(w), ids(static_cast<std::size_t>(b * h * w), fill) {}

  std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
  std::int32_t& at(std::int64_t b, std::int64_t i, std::int64_t j) {
    return ids[static_cast<std::size_t>((b * height + i) * width + j)];
  }
  std::int32_t at(std::int64_t b, std::int64_t i, std::int64_t j) const {
    return ids[static_cast<std::size_t>((b * height + i) * width + j)];
  }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

}  // namespace modalfuse
