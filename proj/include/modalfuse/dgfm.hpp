#pragma once

#include "modalfuse/backbone.hpp"

namespace modalfuse {

struct DgfmOptions {
  bool enabled = true;
  std::int64_t reduction = 4;
  std::int64_t groups = 8;
};

/// C' = max(1, C / reduction).
std::int64_t dgfm_reduced_channels(std::int64_t channels, std::int64_t reduction);
/// min(requested, C'), falling back to 1 when that does not divide C'.
std::int64_t dgfm_group_count(std::int64_t reduced, std::int64_t requested);

struct DgfmWeights {
  Dense reduce_x;   // [C', C]
  Dense reduce_y;   // [C', C]
  Dense gate_in;    // [C', 3C']
  Norm gate_norm;   // group norm affine over C'
  std::int64_t groups = 1;
  Dense gate_out;   // [C, C']

  static DgfmWeights create(std::int64_t channels, const DgfmOptions& options, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Per-stage fusion result.
struct StageBundle {
  Var x_feat;  // [B, C, H, W]
  Var y_feat;  // [B, C, H, W]
  Var fused;   // [B, H*W, C]
  Var gate;    // [B, C, H, W]; undefined when fusion is a plain average
  std::int64_t grid_h = 0;
  std::int64_t grid_w = 0;

  /// Fused features back on the [B, C, H, W] grid.
  Var fused_map() const;
};

/// [B, H, W, C] tokens -> [B, C, H, W] map.
Var tokens_to_map(const TokenGrid& tokens);
/// [B, C, H, W] map -> [B, H*W, C] tokens; inverse of tokens_to_map up to the
/// flattening of the grid.
Var map_to_tokens(const Var& map);

enum class Stream { X, Y };

Var reduce_channels(const Var& feat, Stream which, const DgfmWeights& w);
/// |rx - ry| elementwise.
Var discrepancy(const Var& rx, const Var& ry);
/// sigmoid(conv(GELU(GN(conv([rx; ry; d]))))), restored to C channels.
Var gate(const Var& rx, const Var& ry, const Var& d, const DgfmWeights& w);
/// G weights the RGB stream: G * x + (1 - G) * y.
StageBundle fuse_stage(const TokenGrid& x, const TokenGrid& y, const DgfmWeights& w);
/// Parameter-free fallback used when the gated fusion is ablated: (x + y) / 2.
StageBundle average_stage(const TokenGrid& x, const TokenGrid& y);

}  // namespace modalfuse
