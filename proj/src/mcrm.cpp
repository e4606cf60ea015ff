#include "modalfuse/mcrm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "modalfuse/errors.hpp"

namespace modalfuse {

namespace {

constexpr int kRegionRetries = 10;

void zero_rect(Tensor& t, std::int64_t sample, const Rect& r) {
  const std::int64_t C = t.dim(1), H = t.dim(2), W = t.dim(3);
  for (std::int64_t c = 0; c < C; ++c) {
    double* plane = t.ptr() + (sample * C + c) * H * W;
    for (std::int64_t i = r.top; i < r.top + r.height; ++i) {
      std::fill_n(plane + i * W + r.left, r.width, 0.0);
    }
  }
}

}  // namespace

void MaskGeometry::validate() const {
  if (regions < 1) throw ConfigError("mcrm.regions must be at least 1");
  if (!(area_min > 0.0 && area_min <= area_max && area_max < 1.0)) {
    throw ConfigError("mcrm.area_min/area_max must satisfy 0 < area_min <= area_max < 1");
  }
  if (!(aspect_min > 0.0 && aspect_min <= 1.0 && aspect_max >= 1.0)) {
    throw ConfigError("mcrm.aspect_min/aspect_max must satisfy 0 < aspect_min <= 1 <= aspect_max");
  }
}

void MaskGeometry::check_feasible(std::int64_t image_h, std::int64_t image_w) const {
  validate();
  if (image_h < 1 || image_w < 1) throw ConfigError("masking needs a positive image size");
  const double max_pixels = area_max * static_cast<double>(image_h * image_w);
  if (max_pixels < 1.0 - 1e-9) {
    throw ConfigError("mcrm.area_max allows " + std::to_string(max_pixels) +
                      " pixels on a " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                      " crop; at least one pixel is required");
  }
}

std::int64_t MaskPlan::count(MaskAssignment a) const {
  return std::count(assignments.begin(), assignments.end(), a);
}

std::int64_t masked_sample_count(std::int64_t batch_size, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mcrm.ratio must lie in [0, 1]");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  return static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(batch_size)));
}

Rect sample_region(std::int64_t image_h, std::int64_t image_w, const MaskGeometry& geometry,
                   Rng& rng) {
  const double area_px = static_cast<double>(image_h * image_w);
  const double log_lo = std::log(geometry.aspect_min);
  const double log_hi = std::log(geometry.aspect_max);
  std::int64_t h = 1, w = 1;
  for (int attempt = 0; attempt < kRegionRetries; ++attempt) {
    const double area = rng.uniform(geometry.area_min, geometry.area_max) * area_px;
    const double aspect = std::exp(log_lo == log_hi ? log_lo : rng.uniform(log_lo, log_hi));
    h = std::llround(std::sqrt(area * aspect));
    w = std::llround(std::sqrt(area / aspect));
    if (h >= 1 && h <= image_h && w >= 1 && w <= image_w) break;
  }
  h = std::clamp<std::int64_t>(h, 1, image_h);
  w = std::clamp<std::int64_t>(w, 1, image_w);
  Rect r;
  r.height = h;
  r.width = w;
  r.top = rng.integer(0, image_h - h);
  r.left = rng.integer(0, image_w - w);
  return r;
}

MaskPlan plan_masking(std::int64_t batch_size, double ratio, const MaskGeometry& geometry,
                      std::int64_t image_h, std::int64_t image_w, Rng& rng) {
  const std::int64_t n = masked_sample_count(batch_size, ratio);
  geometry.check_feasible(image_h, image_w);

  MaskPlan plan;
  plan.image_h = image_h;
  plan.image_w = image_w;
  plan.assignments.assign(static_cast<std::size_t>(batch_size), MaskAssignment::Full);
  plan.regions.resize(static_cast<std::size_t>(batch_size));

  std::vector<std::int64_t> order(static_cast<std::size_t>(batch_size));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());

  const std::int64_t n_rgb = n / 2;
  for (std::int64_t k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(order[static_cast<std::size_t>(k)]);
    plan.assignments[i] = k < n_rgb ? MaskAssignment::MaskRgb : MaskAssignment::MaskAux;
  }
  // Rectangles are drawn in sample order so a plan depends only on the rng.
  for (std::size_t i = 0; i < plan.assignments.size(); ++i) {
    if (plan.assignments[i] == MaskAssignment::Full) continue;
    for (std::int64_t k = 0; k < geometry.regions; ++k) {
      plan.regions[i].push_back(sample_region(image_h, image_w, geometry, rng));
    }
  }
  return plan;
}

std::pair<Tensor, Tensor> apply_masking(const Tensor& rgb, const Tensor& aux,
                                        const MaskPlan& plan) {
  if (rgb.rank() != 4 || aux.rank() != 4) {
    throw ShapeError("apply_masking: batches must be [B, C, H, W]");
  }
  if (rgb.dim(0) != plan.batch_size() || aux.dim(0) != plan.batch_size()) {
    throw ShapeError("apply_masking: plan covers " + std::to_string(plan.batch_size()) +
                     " samples but the batch has " + std::to_string(rgb.dim(0)));
  }
  if (rgb.dim(2) != plan.image_h || rgb.dim(3) != plan.image_w || aux.dim(2) != plan.image_h ||
      aux.dim(3) != plan.image_w) {
    throw ShapeError("apply_masking: plan was made for " + std::to_string(plan.image_h) + "x" +
                     std::to_string(plan.image_w) + " images");
  }
  std::pair<Tensor, Tensor> out{rgb, aux};
  for (std::int64_t i = 0; i < plan.batch_size(); ++i) {
    const auto a = plan.assignments[static_cast<std::size_t>(i)];
    if (a == MaskAssignment::Full) continue;
    Tensor& target = a == MaskAssignment::MaskRgb ? out.first : out.second;
    for (const Rect& r : plan.regions[static_cast<std::size_t>(i)]) {
      if (r.top < 0 || r.left < 0 || r.height < 1 || r.width < 1 ||
          r.top + r.height > plan.image_h || r.left + r.width > plan.image_w) {
        throw ShapeError("apply_masking: rectangle outside the image");
      }
      zero_rect(target, i, r);
    }
  }
  return out;
}

}  // namespace modalfuse
