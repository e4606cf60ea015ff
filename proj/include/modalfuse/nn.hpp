#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "modalfuse/autograd.hpp"
#include "modalfuse/ops.hpp"
#include "modalfuse/rng.hpp"

namespace modalfuse {

/// Ownership groups. The frozen/trainable split is fixed per group.
enum class ParamGroup {
  BackboneBlocks,
  RgbPatchEmbed,
  PositionalEncoding,
  AuxPatchEmbed,
  Cpia,
  Dgfm,
  Decoder,
  AuxHeads,
};

inline constexpr ParamGroup kAllGroups[] = {
    ParamGroup::BackboneBlocks, ParamGroup::RgbPatchEmbed, ParamGroup::PositionalEncoding,
    ParamGroup::AuxPatchEmbed,  ParamGroup::Cpia,          ParamGroup::Dgfm,
    ParamGroup::Decoder,        ParamGroup::AuxHeads,
};

bool is_frozen_group(ParamGroup group);
std::string_view group_name(ParamGroup group);

struct NamedParam {
  std::string name;
  ParamGroup group;
  Var var;
};
using ParamList = std::vector<NamedParam>;

// Initializers.
Tensor init_normal(Shape shape, double stddev, Rng& rng);
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for dense layers.
Tensor init_fan_in_uniform(Shape shape, std::int64_t fan_in, Rng& rng);

/// Dense map with weight [out, in]. Applied to channel-last tokens through
/// tokens() or to channel-first maps as a 1x1 convolution through map().
struct Dense {
  Var weight;
  Var bias;  // may be undefined

  static Dense fan_in(std::int64_t in, std::int64_t out, bool with_bias, bool trainable, Rng& rng);
  static Dense normal(std::int64_t in, std::int64_t out, double stddev, bool with_bias,
                      bool trainable, Rng& rng);
  static Dense zeros(std::int64_t in, std::int64_t out, bool with_bias, bool trainable);

  std::int64_t in_features() const { return weight.shape()[1]; }
  std::int64_t out_features() const { return weight.shape()[0]; }

  Var tokens(const Var& x) const { return ops::linear(x, weight, bias); }
  Var map(const Var& x) const { return ops::conv1x1(x, weight, bias); }

  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

struct Conv3x3 {
  Var weight;  // [out, in, 3, 3]
  Var bias;

  static Conv3x3 fan_in(std::int64_t in, std::int64_t out, bool trainable, Rng& rng);
  Var operator()(const Var& x) const { return ops::conv3x3(x, weight, bias); }
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

struct Norm {
  Var gamma;
  Var beta;

  static Norm identity(std::int64_t channels, bool trainable);
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

}  // namespace modalfuse
