#include "modalfuse/nn.hpp"

#include <cmath>

namespace modalfuse {

bool is_frozen_group(ParamGroup group) {
  switch (group) {
    case ParamGroup::BackboneBlocks:
    case ParamGroup::RgbPatchEmbed:
    case ParamGroup::PositionalEncoding:
      return true;
    default:
      return false;
  }
}

std::string_view group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::BackboneBlocks: return "backbone_blocks";
    case ParamGroup::RgbPatchEmbed: return "rgb_patch_embed";
    case ParamGroup::PositionalEncoding: return "positional_encoding";
    case ParamGroup::AuxPatchEmbed: return "aux_patch_embed";
    case ParamGroup::Cpia: return "cpia";
    case ParamGroup::Dgfm: return "dgfm";
    case ParamGroup::Decoder: return "decoder";
    case ParamGroup::AuxHeads: return "aux_heads";
  }
  return "unknown";
}

Tensor init_normal(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor init_fan_in_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

Dense Dense::fan_in(std::int64_t in, std::int64_t out, bool with_bias, bool trainable, Rng& rng) {
  Dense d;
  d.weight = Var::leaf(init_fan_in_uniform({out, in}, in, rng), trainable);
  if (with_bias) d.bias = Var::leaf(init_fan_in_uniform({out}, in, rng), trainable);
  return d;
}

Dense Dense::normal(std::int64_t in, std::int64_t out, double stddev, bool with_bias,
                    bool trainable, Rng& rng) {
  Dense d;
  d.weight = Var::leaf(init_normal({out, in}, stddev, rng), trainable);
  if (with_bias) d.bias = Var::leaf(Tensor::zeros({out}), trainable);
  return d;
}

Dense Dense::zeros(std::int64_t in, std::int64_t out, bool with_bias, bool trainable) {
  Dense d;
  d.weight = Var::leaf(Tensor::zeros({out, in}), trainable);
  if (with_bias) d.bias = Var::leaf(Tensor::zeros({out}), trainable);
  return d;
}

void Dense::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".weight", group, weight});
  if (bias.defined()) out.push_back({prefix + ".bias", group, bias});
}

Conv3x3 Conv3x3::fan_in(std::int64_t in, std::int64_t out, bool trainable, Rng& rng) {
  Conv3x3 c;
  c.weight = Var::leaf(init_fan_in_uniform({out, in, 3, 3}, in * 9, rng), trainable);
  c.bias = Var::leaf(init_fan_in_uniform({out}, in * 9, rng), trainable);
  return c;
}

void Conv3x3::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".weight", group, weight});
  out.push_back({prefix + ".bias", group, bias});
}

Norm Norm::identity(std::int64_t channels, bool trainable) {
  Norm n;
  n.gamma = Var::leaf(Tensor({channels}, 1.0), trainable);
  n.beta = Var::leaf(Tensor::zeros({channels}), trainable);
  return n;
}

void Norm::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".weight", group, gamma});
  out.push_back({prefix + ".bias", group, beta});
}

}  // namespace modalfuse
