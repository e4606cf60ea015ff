#pragma once

#include <cstdint>
#include <vector>

#include "modalfuse/backbone.hpp"
#include "modalfuse/dgfm.hpp"

namespace modalfuse {

struct DecoderOptions {
  std::int64_t channels = 64;
  std::vector<std::int64_t> ppm_bins{1, 2, 4};
};

struct PpmBranch {
  std::int64_t bin = 1;
  Dense proj;  // [C_dec, C_dec]
};

/// Reduced pyramid decoder: per-stage lateral 1x1 maps, pyramid pooling on the
/// deepest stage, top-down accumulation, a 3x3 merge over the summed levels,
/// a 1x1 classifier and bilinear upsampling to the input size.
struct DecoderWeights {
  std::vector<Dense> laterals;  // [C_dec, C_s] per stage
  std::vector<PpmBranch> ppm;
  Conv3x3 merge;                // [C_dec, C_dec, 3, 3]
  Dense classifier;             // [K, C_dec]

  static DecoderWeights create(const std::vector<std::int64_t>& stage_channels,
                               std::int64_t num_classes, const DecoderOptions& options, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
  std::int64_t stage_count() const { return static_cast<std::int64_t>(laterals.size()); }
};

Var decode_fused(const std::vector<StageBundle>& stages, const DecoderWeights& w,
                 std::int64_t out_h, std::int64_t out_w);

/// One 1x1 classifier per modality over the last-stage unimodal features.
struct AuxHeadWeights {
  Dense rgb;  // [K, C_S]
  Dense aux;  // [K, C_S]

  static AuxHeadWeights create(std::int64_t channels, std::int64_t num_classes, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Auxiliary prediction for one modality. Only defined while training; any
/// other use throws ContractError.
Var decode_aux(const Var& last_stage_map, Modality modality, const AuxHeadWeights& w,
               std::int64_t out_h, std::int64_t out_w, bool training);

}  // namespace modalfuse
