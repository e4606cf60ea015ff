#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "modalfuse/autograd.hpp"
#include "modalfuse/labels.hpp"

namespace modalfuse {

struct LossOptions {
  double lambda_aux = 0.4;
  std::int32_t ignore_index = 255;
};

struct LossBreakdown {
  double main = 0.0;
  double aux_rgb = 0.0;
  double aux_aux = 0.0;
  double total = 0.0;
  double hard_pixel_fraction = 0.0;
  std::int64_t valid_pixels = 0;
};

/// Boolean raster on [B, H, W]; 1 marks a hard pixel.
using HardPixelMask = std::vector<std::uint8_t>;

/// Mean cross-entropy over non-ignored pixels; 0 when none are valid.
Var main_loss(const Var& logits, const LabelMap& labels, std::int32_t ignore_index);

/// Pixels whose argmax (lowest index on ties) differs from a valid label.
/// Reads logit values only, so no gradient can pass through the mask.
HardPixelMask hard_pixel_set(const Tensor& logits, const LabelMap& labels,
                             std::int32_t ignore_index);

/// Cross-entropy of each auxiliary prediction averaged over the hard pixels
/// only; both terms are 0 for an empty set.
std::pair<Var, Var> aux_loss(const Var& logits_rgb, const Var& logits_aux, const LabelMap& labels,
                             const HardPixelMask& omega, std::int32_t ignore_index);

struct LossTerms {
  Var total;
  LossBreakdown breakdown;
};

/// main + lambda * (aux_rgb + aux_aux). The auxiliary logits may be undefined,
/// in which case only the main term is used.
LossTerms total_loss(const Var& logits, const Var& logits_rgb, const Var& logits_aux,
                     const LabelMap& labels, const LossOptions& options);

}  // namespace modalfuse
