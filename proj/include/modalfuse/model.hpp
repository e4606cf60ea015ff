#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "modalfuse/backbone.hpp"
#include "modalfuse/cpia.hpp"
#include "modalfuse/decoder.hpp"
#include "modalfuse/dgfm.hpp"

namespace modalfuse {

struct ModelConfig {
  EncoderSpec encoder;
  std::int64_t num_classes = 6;
  CpiaOptions cpia;
  DgfmOptions dgfm;
  DecoderOptions decoder;
  /// Auxiliary heads exist only for masked-modality training.
  bool aux_heads = true;
  /// Seed of the frozen backbone weights; independent of the run seed.
  std::uint64_t backbone_seed = 42;
  /// Optional external weight file replacing the seeded frozen weights.
  std::filesystem::path backbone_weights;
};

struct ForwardOptions {
  /// Training-mode graph: adapters may use dropout and auxiliary heads may run.
  bool training = false;
  /// Dropout stream; without one the training-mode graph is deterministic.
  Rng* dropout_rng = nullptr;
  /// Also produce the per-modality auxiliary logits (training only).
  bool with_aux = false;
};

struct ForwardResult {
  Var logits;      // [B, K, H, W]
  Var logits_rgb;  // undefined unless requested
  Var logits_aux;
  std::vector<StageBundle> stages;
};

/// Dual-stream segmentation network: frozen encoder, per-stage adapters and
/// fusion, fused decoder and optional auxiliary heads.
class Model {
 public:
  /// Trainable weights are drawn from child streams of rng split in a fixed
  /// order, so disabling a component leaves the others' initial values alone.
  Model(ModelConfig config, Rng& rng);

  const ModelConfig& config() const { return config_; }
  const Backbone& backbone() const { return backbone_; }
  Backbone& backbone() { return backbone_; }
  const std::vector<CpiaStage>& cpia() const { return cpia_; }
  std::vector<CpiaStage>& cpia() { return cpia_; }
  const std::vector<DgfmWeights>& dgfm() const { return dgfm_; }
  std::vector<DgfmWeights>& dgfm() { return dgfm_; }
  const DecoderWeights& decoder() const { return decoder_; }
  DecoderWeights& decoder() { return decoder_; }
  const std::optional<AuxHeadWeights>& aux_heads() const { return aux_heads_; }

  ForwardResult forward(const Tensor& rgb, const Tensor& aux, const ForwardOptions& options) const;

  /// Inference logits of the fused branch.
  Tensor predict(const Tensor& rgb, const Tensor& aux) const;

  /// Every parameter, frozen and trainable, with canonical names.
  ParamList parameters() const;

 private:
  ModelConfig config_;
  Backbone backbone_;
  std::vector<CpiaStage> cpia_;
  std::vector<DgfmWeights> dgfm_;
  DecoderWeights decoder_;
  std::optional<AuxHeadWeights> aux_heads_;
};

}  // namespace modalfuse
