#pragma once

#include <cstdint>
#include <map>

#include "modalfuse/config.hpp"
#include "modalfuse/nn.hpp"

namespace testutil {

/// Parameter counts per group written out from the layer shapes.
inline std::map<modalfuse::ParamGroup, std::int64_t> closed_form_params(const modalfuse::RunConfig& c) {
  using modalfuse::ParamGroup;
  const std::int64_t L = c.encoder.depth, C = c.encoder.embed_dim, p = c.encoder.patch_size;
  const std::int64_t m = c.encoder.mlp_ratio * C, S = c.encoder.stage_count();
  const std::int64_t g = c.data.crop / p, K = c.num_classes, D = c.decoder.channels;
  std::map<ParamGroup, std::int64_t> n;
  n[ParamGroup::RgbPatchEmbed] = 3 * p * p * C + C;
  n[ParamGroup::PositionalEncoding] = g * g * C;
  const std::int64_t block = 2 * 2 * C + (3 * C * C + 3 * C) + (C * C + C) + (m * C + m) + (C * m + C);
  n[ParamGroup::BackboneBlocks] = L * block;
  n[ParamGroup::AuxPatchEmbed] = c.encoder.aux_channels * p * p * C + C;
  n[ParamGroup::Cpia] = 0;
  if (c.cpia.enabled) {
    const auto cp = static_cast<std::int64_t>(c.cpia.prompt_ratio * static_cast<double>(C));
    const auto d = static_cast<std::int64_t>(c.cpia.bottleneck_ratio * static_cast<double>(C));
    const std::int64_t cpg = 2 * C * cp + (2 * cp * cp + cp) + (cp * C + C);
    const std::int64_t adapter = (d * C + d) + d * C + (C * d + C);
    n[ParamGroup::Cpia] = S * (cpg + 4 * C + 2 * adapter);
  }
  n[ParamGroup::Dgfm] = 0;
  if (c.dgfm.enabled) {
    const std::int64_t r = C / c.dgfm.reduction;
    n[ParamGroup::Dgfm] = S * (2 * (r * C + r) + (3 * r * r + r) + 2 * r + (C * r + C));
  }
  n[ParamGroup::Decoder] = S * (C * D + D) +
                           static_cast<std::int64_t>(c.decoder.ppm_bins.size()) * (D * D + D) +
                           (9 * D * D + D) + (K * D + K);
  n[ParamGroup::AuxHeads] = c.mcrm.enabled ? 2 * (K * C + K) : 0;
  return n;
}

}  // namespace testutil
