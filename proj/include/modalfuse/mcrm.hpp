#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "modalfuse/rng.hpp"
#include "modalfuse/tensor.hpp"

namespace modalfuse {

enum class MaskAssignment { Full, MaskRgb, MaskAux };

/// Pixel rectangle [top, top + height) x [left, left + width).
struct Rect {
  std::int64_t top = 0;
  std::int64_t left = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  friend bool operator==(const Rect&, const Rect&) = default;
};

struct MaskGeometry {
  std::int64_t regions = 3;
  double area_min = 0.02;
  double area_max = 0.15;
  double aspect_min = 0.5;
  double aspect_max = 2.0;

  /// 0 < area_min <= area_max < 1, 0 < aspect_min <= 1 <= aspect_max, regions >= 1.
  void validate() const;
  /// Throws ConfigError when no rectangle of at least one pixel can satisfy
  /// the area range on an image_h x image_w raster.
  void check_feasible(std::int64_t image_h, std::int64_t image_w) const;
};

struct MaskPlan {
  std::vector<MaskAssignment> assignments;
  /// One list per sample; empty for Full samples.
  std::vector<std::vector<Rect>> regions;
  std::int64_t image_h = 0;
  std::int64_t image_w = 0;

  std::int64_t batch_size() const { return static_cast<std::int64_t>(assignments.size()); }
  std::int64_t count(MaskAssignment a) const;
};

/// N = floor(ratio * batch_size).
std::int64_t masked_sample_count(std::int64_t batch_size, double ratio);

/// Area uniform in [area_min, area_max] of the image, aspect h/w log-uniform in
/// [aspect_min, aspect_max]; up to ten resamples when the rounded rectangle
/// does not fit, then clamped to the image. Placement is uniform over valid
/// positions.
Rect sample_region(std::int64_t image_h, std::int64_t image_w, const MaskGeometry& geometry,
                   Rng& rng);

/// Selects N samples by a seeded shuffle; the first floor(N/2) have RGB
/// masked, the rest of the N have the auxiliary modality masked.
MaskPlan plan_masking(std::int64_t batch_size, double ratio, const MaskGeometry& geometry,
                      std::int64_t image_h, std::int64_t image_w, Rng& rng);

/// Writes 0.0 inside each planned rectangle of the selected modality.
/// Inputs are normalised [B, C, H, W] batches.
std::pair<Tensor, Tensor> apply_masking(const Tensor& rgb, const Tensor& aux,
                                        const MaskPlan& plan);

}  // namespace modalfuse
