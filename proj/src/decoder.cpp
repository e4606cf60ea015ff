#include "modalfuse/decoder.hpp"

#include "modalfuse/errors.hpp"

namespace modalfuse {

DecoderWeights DecoderWeights::create(const std::vector<std::int64_t>& stage_channels,
                                      std::int64_t num_classes, const DecoderOptions& options,
                                      Rng& rng) {
  if (stage_channels.empty()) throw ConfigError("decoder needs at least one stage");
  if (options.channels < 1) throw ConfigError("decoder.channels must be positive");
  if (num_classes < 2) throw ConfigError("model.num_classes must be at least 2");
  const std::int64_t cd = options.channels;
  DecoderWeights w;
  for (auto c : stage_channels) w.laterals.push_back(Dense::fan_in(c, cd, true, true, rng));
  for (auto bin : options.ppm_bins) {
    if (bin < 1) throw ConfigError("decoder.ppm_bins entries must be positive");
    w.ppm.push_back({bin, Dense::fan_in(cd, cd, true, true, rng)});
  }
  w.merge = Conv3x3::fan_in(cd, cd, true, rng);
  w.classifier = Dense::fan_in(cd, num_classes, true, true, rng);
  return w;
}

void DecoderWeights::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t s = 0; s < laterals.size(); ++s) {
    laterals[s].collect(out, prefix + ".lateral." + std::to_string(s), ParamGroup::Decoder);
  }
  for (const auto& b : ppm) {
    b.proj.collect(out, prefix + ".ppm." + std::to_string(b.bin), ParamGroup::Decoder);
  }
  merge.collect(out, prefix + ".merge", ParamGroup::Decoder);
  classifier.collect(out, prefix + ".classifier", ParamGroup::Decoder);
}

Var decode_fused(const std::vector<StageBundle>& stages, const DecoderWeights& w,
                 std::int64_t out_h, std::int64_t out_w) {
  if (static_cast<std::int64_t>(stages.size()) != w.stage_count()) {
    throw ConfigError("decoder expects " + std::to_string(w.stage_count()) + " stages, got " +
                      std::to_string(stages.size()));
  }
  const std::size_t S = stages.size();
  std::vector<Var> levels(S);
  for (std::size_t s = 0; s < S; ++s) levels[s] = w.laterals[s].map(stages[s].fused_map());

  Var& top = levels[S - 1];
  const std::int64_t th = top.shape()[2], tw = top.shape()[3];
  Var pooled = top;
  for (const auto& b : w.ppm) {
    Var p = ops::relu(b.proj.map(ops::adaptive_avg_pool(top, b.bin, b.bin)));
    pooled = ops::add(pooled, ops::resize_bilinear(p, th, tw));
  }
  top = pooled;

  for (std::size_t s = S - 1; s-- > 0;) {
    const std::int64_t h = levels[s].shape()[2], wd = levels[s].shape()[3];
    levels[s] = ops::add(levels[s], ops::resize_bilinear(levels[s + 1], h, wd));
  }
  const std::int64_t h0 = levels[0].shape()[2], w0 = levels[0].shape()[3];
  Var merged = levels[0];
  for (std::size_t s = 1; s < S; ++s) {
    merged = ops::add(merged, ops::resize_bilinear(levels[s], h0, w0));
  }
  Var logits = w.classifier.map(ops::relu(w.merge(merged)));
  return ops::resize_bilinear(logits, out_h, out_w);
}

AuxHeadWeights AuxHeadWeights::create(std::int64_t channels, std::int64_t num_classes, Rng& rng) {
  AuxHeadWeights w;
  w.rgb = Dense::fan_in(channels, num_classes, true, true, rng);
  w.aux = Dense::fan_in(channels, num_classes, true, true, rng);
  return w;
}

void AuxHeadWeights::collect(ParamList& out, const std::string& prefix) const {
  rgb.collect(out, prefix + ".rgb", ParamGroup::AuxHeads);
  aux.collect(out, prefix + ".aux", ParamGroup::AuxHeads);
}

Var decode_aux(const Var& last_stage_map, Modality modality, const AuxHeadWeights& w,
               std::int64_t out_h, std::int64_t out_w, bool training) {
  if (!training) {
    throw ContractError("auxiliary heads are training-only; inference uses the fused branch");
  }
  const Dense& head = modality == Modality::Rgb ? w.rgb : w.aux;
  return ops::resize_bilinear(head.map(last_stage_map), out_h, out_w);
}

}  // namespace modalfuse
