#include "modalfuse/model.hpp"

#include <tuple>

#include "modalfuse/errors.hpp"

namespace modalfuse {

namespace {

Backbone make_backbone(const ModelConfig& config, Rng& rng) {
  Rng aux_rng = rng.split();
  Backbone b(config.encoder, config.backbone_seed, aux_rng);
  if (!config.backbone_weights.empty()) b.load_frozen(config.backbone_weights);
  return b;
}

}  // namespace

Model::Model(ModelConfig config, Rng& rng)
    : config_(std::move(config)), backbone_(make_backbone(config_, rng)) {
  const std::int64_t C = config_.encoder.embed_dim;
  const std::int64_t S = config_.encoder.stage_count();
  Rng cpia_rng = rng.split();
  Rng dgfm_rng = rng.split();
  Rng decoder_rng = rng.split();
  Rng heads_rng = rng.split();

  if (config_.cpia.enabled) {
    for (std::int64_t s = 0; s < S; ++s) cpia_.push_back(CpiaStage::create(C, config_.cpia, cpia_rng));
  }
  if (config_.dgfm.enabled) {
    for (std::int64_t s = 0; s < S; ++s) dgfm_.push_back(DgfmWeights::create(C, config_.dgfm, dgfm_rng));
  }
  decoder_ = DecoderWeights::create(std::vector<std::int64_t>(static_cast<std::size_t>(S), C),
                                    config_.num_classes, config_.decoder, decoder_rng);
  if (config_.aux_heads) aux_heads_ = AuxHeadWeights::create(C, config_.num_classes, heads_rng);
}

ForwardResult Model::forward(const Tensor& rgb, const Tensor& aux,
                             const ForwardOptions& options) const {
  if (options.with_aux && !options.training) {
    throw ContractError("auxiliary predictions are only available in training mode");
  }
  if (options.with_aux && !aux_heads_) {
    throw ContractError("this model was built without auxiliary heads");
  }
  if (rgb.rank() != 4 || aux.rank() != 4 || rgb.dim(0) != aux.dim(0) ||
      rgb.dim(2) != aux.dim(2) || rgb.dim(3) != aux.dim(3)) {
    throw ShapeError("rgb " + shape_str(rgb.shape()) + " and aux " + shape_str(aux.shape()) +
                     " must share batch and spatial size");
  }
  const std::int64_t H = rgb.dim(2), W = rgb.dim(3);
  const bool use_dropout = options.training && options.dropout_rng != nullptr;

  ForwardResult out;
  TokenGrid x = backbone_.embed_rgb(rgb);
  TokenGrid y = backbone_.embed_aux(aux);
  const std::int64_t S = config_.encoder.stage_count();
  for (std::int64_t s = 0; s < S; ++s) {
    if (!cpia_.empty()) {
      std::tie(x, y) = cpia_[static_cast<std::size_t>(s)].forward(x, y, use_dropout,
                                                                 options.dropout_rng);
    }
    std::tie(x, y) = backbone_.run_stage(s, x, y);
    out.stages.push_back(dgfm_.empty() ? average_stage(x, y)
                                       : fuse_stage(x, y, dgfm_[static_cast<std::size_t>(s)]));
  }
  out.logits = decode_fused(out.stages, decoder_, H, W);
  if (options.with_aux) {
    const StageBundle& last = out.stages.back();
    out.logits_rgb = decode_aux(last.x_feat, Modality::Rgb, *aux_heads_, H, W, true);
    out.logits_aux = decode_aux(last.y_feat, Modality::Aux, *aux_heads_, H, W, true);
  }
  return out;
}

Tensor Model::predict(const Tensor& rgb, const Tensor& aux) const {
  return forward(rgb, aux, ForwardOptions{}).logits.value();
}

ParamList Model::parameters() const {
  ParamList out;
  backbone_.collect(out);
  for (std::size_t s = 0; s < cpia_.size(); ++s) cpia_[s].collect(out, "cpia." + std::to_string(s));
  for (std::size_t s = 0; s < dgfm_.size(); ++s) dgfm_[s].collect(out, "dgfm." + std::to_string(s));
  decoder_.collect(out, "decoder");
  if (aux_heads_) aux_heads_->collect(out, "aux_heads");
  return out;
}

}  // namespace modalfuse
