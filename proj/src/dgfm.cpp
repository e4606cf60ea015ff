#include "modalfuse/dgfm.hpp"

#include <algorithm>

#include "modalfuse/errors.hpp"

namespace modalfuse {

namespace {

constexpr double kGroupNormEps = 1e-5;

}  // namespace

std::int64_t dgfm_reduced_channels(std::int64_t channels, std::int64_t reduction) {
  if (reduction < 2) throw ConfigError("dgfm.reduction must be at least 2");
  return std::max<std::int64_t>(1, channels / reduction);
}

std::int64_t dgfm_group_count(std::int64_t reduced, std::int64_t requested) {
  if (requested < 1) throw ConfigError("dgfm.groups must be positive");
  const std::int64_t g = std::min(requested, reduced);
  return reduced % g == 0 ? g : 1;
}

DgfmWeights DgfmWeights::create(std::int64_t channels, const DgfmOptions& options, Rng& rng) {
  const std::int64_t reduced = dgfm_reduced_channels(channels, options.reduction);
  if (reduced >= channels) {
    throw ConfigError("gated fusion needs fewer reduced channels than stage channels (" +
                      std::to_string(channels) + ")");
  }
  DgfmWeights w;
  w.reduce_x = Dense::fan_in(channels, reduced, true, true, rng);
  w.reduce_y = Dense::fan_in(channels, reduced, true, true, rng);
  w.gate_in = Dense::fan_in(3 * reduced, reduced, true, true, rng);
  w.gate_norm = Norm::identity(reduced, true);
  w.groups = dgfm_group_count(reduced, options.groups);
  w.gate_out = Dense::fan_in(reduced, channels, true, true, rng);
  return w;
}

void DgfmWeights::collect(ParamList& out, const std::string& prefix) const {
  reduce_x.collect(out, prefix + ".reduce_x", ParamGroup::Dgfm);
  reduce_y.collect(out, prefix + ".reduce_y", ParamGroup::Dgfm);
  gate_in.collect(out, prefix + ".gate.conv_in", ParamGroup::Dgfm);
  gate_norm.collect(out, prefix + ".gate.norm", ParamGroup::Dgfm);
  gate_out.collect(out, prefix + ".gate.conv_out", ParamGroup::Dgfm);
}

Var StageBundle::fused_map() const {
  const std::int64_t B = fused.shape()[0], C = fused.shape()[2];
  return ops::channels_first(ops::reshape(fused, {B, grid_h, grid_w, C}));
}

Var tokens_to_map(const TokenGrid& tokens) { return ops::channels_first(tokens.data); }

Var map_to_tokens(const Var& map) {
  if (map.value().rank() != 4) throw ShapeError("map_to_tokens: expected [B, C, H, W]");
  const Shape& s = map.shape();
  return ops::reshape(ops::channels_last(map), {s[0], s[2] * s[3], s[1]});
}

Var reduce_channels(const Var& feat, Stream which, const DgfmWeights& w) {
  const Dense& proj = which == Stream::X ? w.reduce_x : w.reduce_y;
  if (feat.value().rank() != 4 || feat.shape()[1] != proj.in_features()) {
    throw ShapeError("reduce_channels: feature " + shape_str(feat.shape()) + " does not have " +
                     std::to_string(proj.in_features()) + " channels");
  }
  return proj.map(feat);
}

Var discrepancy(const Var& rx, const Var& ry) {
  if (rx.shape() != ry.shape()) {
    throw ShapeError("discrepancy: " + shape_str(rx.shape()) + " vs " + shape_str(ry.shape()));
  }
  return ops::abs(ops::sub(rx, ry));
}

Var gate(const Var& rx, const Var& ry, const Var& d, const DgfmWeights& w) {
  Var h = w.gate_in.map(ops::concat({rx, ry, d}, 1));
  h = ops::group_norm(h, w.groups, w.gate_norm.gamma, w.gate_norm.beta, kGroupNormEps);
  return ops::sigmoid(w.gate_out.map(ops::gelu(h)));
}

StageBundle fuse_stage(const TokenGrid& x, const TokenGrid& y, const DgfmWeights& w) {
  if (x.data.shape() != y.data.shape()) {
    throw ShapeError("fuse_stage: " + shape_str(x.data.shape()) + " vs " +
                     shape_str(y.data.shape()));
  }
  StageBundle b;
  b.grid_h = x.grid_h();
  b.grid_w = x.grid_w();
  b.x_feat = tokens_to_map(x);
  b.y_feat = tokens_to_map(y);
  Var rx = reduce_channels(b.x_feat, Stream::X, w);
  Var ry = reduce_channels(b.y_feat, Stream::Y, w);
  b.gate = gate(rx, ry, discrepancy(rx, ry), w);
  b.fused = map_to_tokens(ops::gated_mix(b.gate, b.x_feat, b.y_feat));
  return b;
}

StageBundle average_stage(const TokenGrid& x, const TokenGrid& y) {
  if (x.data.shape() != y.data.shape()) {
    throw ShapeError("average_stage: " + shape_str(x.data.shape()) + " vs " +
                     shape_str(y.data.shape()));
  }
  StageBundle b;
  b.grid_h = x.grid_h();
  b.grid_w = x.grid_w();
  b.x_feat = tokens_to_map(x);
  b.y_feat = tokens_to_map(y);
  b.fused = map_to_tokens(ops::scale(ops::add(b.x_feat, b.y_feat), 0.5));
  return b;
}

}  // namespace modalfuse
