#pragma once

#include <utility>

#include "modalfuse/backbone.hpp"

namespace modalfuse {

struct CpiaOptions {
  bool enabled = true;
  double prompt_ratio = 0.25;      // r_p
  double bottleneck_ratio = 0.25;  // r_a
  double dropout = 0.1;
};

/// floor(ratio * channels); throws ConfigError when the result is below 1.
std::int64_t reduced_width(std::int64_t channels, double ratio, const char* key);

/// Cross-modal prompt generator: per-modality down projections (no bias), a
/// fusing map over the concatenation and an up projection back to C.
struct CpgWeights {
  Dense rgb_down;  // [C_p, C]
  Dense aux_down;  // [C_p, C]
  Dense fuse;      // [C_p, 2*C_p]
  Dense up;        // [C, C_p]
};

/// Channel-wise affine modulation per modality; zero means identity.
struct TftParams {
  Var gamma_rgb, beta_rgb;
  Var gamma_aux, beta_aux;
};

/// Bottleneck adapter with an injected prompt term:
///   out = x + up(dropout(relu(down(x) + prompt_proj(p)))).
struct PromptAdapterWeights {
  Dense down;    // [d, C] with bias
  Dense prompt;  // [d, C] without bias
  Dense up;      // [C, d] with bias, zero-initialised
  double dropout = 0.0;
};

Var generate_shared_base(const TokenGrid& x, const TokenGrid& y, const CpgWeights& w);

/// P = Z + (Z * gamma + beta) with the modality's parameters.
Var apply_tft(const Var& shared_base, Modality modality, const TftParams& t);

/// Dropout on the bottleneck activation only when training; training requires
/// a dropout stream.
TokenGrid prompt_adapter(const TokenGrid& tokens, const Var& prompt,
                         const PromptAdapterWeights& w, bool training, Rng* dropout_rng);

/// One adapter stage inserted before an encoder stage. Prompt generator and
/// TFT are per stage; each stream has its own adapter.
class CpiaStage {
 public:
  static CpiaStage create(std::int64_t channels, const CpiaOptions& options, Rng& rng);

  std::pair<TokenGrid, TokenGrid> forward(const TokenGrid& x, const TokenGrid& y, bool training,
                                          Rng* dropout_rng) const;

  void collect(ParamList& out, const std::string& prefix) const;

  CpgWeights cpg;
  TftParams tft;
  PromptAdapterWeights rgb_adapter;
  PromptAdapterWeights aux_adapter;
};

}  // namespace modalfuse
