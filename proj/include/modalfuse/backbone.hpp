#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "modalfuse/nn.hpp"

namespace modalfuse {

enum class Modality { Rgb, Aux };

/// A batch of token embeddings on a 2-D patch grid, stored [B, H', W', C].
struct TokenGrid {
  Var data;
  Modality modality = Modality::Rgb;

  std::int64_t batch() const { return data.shape()[0]; }
  std::int64_t grid_h() const { return data.shape()[1]; }
  std::int64_t grid_w() const { return data.shape()[2]; }
  std::int64_t channels() const { return data.shape()[3]; }
};

struct EncoderSpec {
  std::int64_t depth = 8;
  std::int64_t embed_dim = 64;
  std::int64_t num_heads = 4;
  std::int64_t patch_size = 8;
  std::int64_t mlp_ratio = 4;
  std::int64_t aux_channels = 1;
  /// Tap indices are 1-based block numbers; the last must equal depth.
  std::vector<std::int64_t> taps{2, 4, 6, 8};
  /// Grid at which the positional table is stored.
  std::int64_t native_grid_h = 8;
  std::int64_t native_grid_w = 8;
  double ln_eps = 1e-6;

  void validate() const;
  std::int64_t stage_count() const { return static_cast<std::int64_t>(taps.size()); }
};

/// Inclusive, 1-based block range [first, last].
struct BlockRange {
  std::int64_t first = 0;
  std::int64_t last = 0;
  friend bool operator==(const BlockRange&, const BlockRange&) = default;
};

/// Stage s covers blocks taps[s-1]+1 .. taps[s], with an implicit tap 0.
std::vector<BlockRange> partition_stages(const EncoderSpec& spec);

struct BlockWeights {
  Norm ln1;
  Dense qkv;
  Dense proj;
  Norm ln2;
  Dense fc1;
  Dense fc2;
};

/// Everything shared by both streams and never updated.
struct FrozenWeightSet {
  Dense rgb_embed;  // [C, 3*p*p]
  Var pos_embed;    // [H'0, W'0, C]
  std::vector<BlockWeights> blocks;
};

struct AuxPatchEmbed {
  Dense proj;  // [C, C_a*p*p], trainable
};

/// Frozen dual-stream ViT encoder. The same block weights serve the RGB and
/// auxiliary streams; only the auxiliary patch embedding trains.
class Backbone {
 public:
  /// Frozen weights come from frozen_seed; the auxiliary embedding from rng.
  Backbone(EncoderSpec spec, std::uint64_t frozen_seed, Rng& rng);

  const EncoderSpec& spec() const { return spec_; }
  const std::vector<BlockRange>& stages() const { return stages_; }

  TokenGrid embed_rgb(const Tensor& image) const;
  TokenGrid embed_aux(const Tensor& image) const;
  /// Adds the positional table, bicubically resampled to the token grid.
  TokenGrid add_positional(const TokenGrid& tokens) const;
  /// Pre-LN block: x += SA(LN(x)); x += MLP(LN(x)). block_index is 1-based.
  TokenGrid run_block(const TokenGrid& tokens, std::int64_t block_index) const;
  /// Runs both streams through the blocks of stage `stage` (0-based).
  std::pair<TokenGrid, TokenGrid> run_stage(std::int64_t stage, const TokenGrid& x,
                                            const TokenGrid& y) const;

  FrozenWeightSet& frozen() { return frozen_; }
  const FrozenWeightSet& frozen() const { return frozen_; }
  AuxPatchEmbed& aux_embed() { return aux_embed_; }
  const AuxPatchEmbed& aux_embed() const { return aux_embed_; }

  void collect(ParamList& out) const;

  /// Replaces the frozen set from a weight archive using the canonical names
  /// reported by collect(). Every frozen tensor must be present with a
  /// matching shape.
  void load_frozen(const std::filesystem::path& path);
  void save_frozen(const std::filesystem::path& path) const;

 private:
  TokenGrid embed(const Tensor& image, const Dense& proj, std::int64_t channels,
                  Modality modality) const;

  EncoderSpec spec_;
  std::vector<BlockRange> stages_;
  FrozenWeightSet frozen_;
  AuxPatchEmbed aux_embed_;
};

}  // namespace modalfuse
