#include "modalfuse/backbone.hpp"

#include "modalfuse/archive.hpp"
#include "modalfuse/errors.hpp"

namespace modalfuse {

namespace {

constexpr double kFrozenInitStd = 0.02;

}  // namespace

void EncoderSpec::validate() const {
  if (depth <= 0 || embed_dim <= 0 || num_heads <= 0 || patch_size <= 0 || mlp_ratio <= 0 ||
      aux_channels <= 0) {
    throw ConfigError("encoder dimensions must be positive");
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("backbone.embed_dim " + std::to_string(embed_dim) +
                      " is not divisible by backbone.num_heads " + std::to_string(num_heads));
  }
  if (native_grid_h <= 0 || native_grid_w <= 0) {
    throw ConfigError("positional grid must be positive");
  }
  if (taps.empty()) throw ConfigError("backbone.taps must list at least one block");
  std::int64_t prev = 0;
  for (auto t : taps) {
    if (t <= prev) {
      throw ConfigError("backbone.taps must be strictly increasing positive block indices");
    }
    prev = t;
  }
  if (taps.back() != depth) {
    throw ConfigError("backbone.taps must end at the last block (" + std::to_string(depth) +
                      "), got " + std::to_string(taps.back()));
  }
}

std::vector<BlockRange> partition_stages(const EncoderSpec& spec) {
  spec.validate();
  std::vector<BlockRange> out;
  std::int64_t prev = 0;
  for (auto t : spec.taps) {
    out.push_back({prev + 1, t});
    prev = t;
  }
  return out;
}

Backbone::Backbone(EncoderSpec spec, std::uint64_t frozen_seed, Rng& rng)
    : spec_(std::move(spec)), stages_(partition_stages(spec_)) {
  const std::int64_t C = spec_.embed_dim;
  const std::int64_t p2 = spec_.patch_size * spec_.patch_size;
  const std::int64_t hidden = C * spec_.mlp_ratio;

  Rng frozen_rng(frozen_seed);
  frozen_.rgb_embed = Dense::normal(3 * p2, C, kFrozenInitStd, true, false, frozen_rng);
  frozen_.pos_embed = Var::leaf(
      init_normal({spec_.native_grid_h, spec_.native_grid_w, C}, kFrozenInitStd, frozen_rng), false);
  frozen_.blocks.reserve(static_cast<std::size_t>(spec_.depth));
  for (std::int64_t l = 0; l < spec_.depth; ++l) {
    BlockWeights b;
    b.ln1 = Norm::identity(C, false);
    b.qkv = Dense::normal(C, 3 * C, kFrozenInitStd, true, false, frozen_rng);
    b.proj = Dense::normal(C, C, kFrozenInitStd, true, false, frozen_rng);
    b.ln2 = Norm::identity(C, false);
    b.fc1 = Dense::normal(C, hidden, kFrozenInitStd, true, false, frozen_rng);
    b.fc2 = Dense::normal(hidden, C, kFrozenInitStd, true, false, frozen_rng);
    frozen_.blocks.push_back(std::move(b));
  }
  aux_embed_.proj = Dense::fan_in(spec_.aux_channels * p2, C, true, true, rng);
}

TokenGrid Backbone::embed(const Tensor& image, const Dense& proj, std::int64_t channels,
                          Modality modality) const {
  const char* which = modality == Modality::Rgb ? "rgb" : "aux";
  if (image.rank() != 4) {
    throw ShapeError(std::string(which) + " image must be [B, C, H, W], got " +
                     shape_str(image.shape()));
  }
  if (image.dim(1) != channels) {
    throw ShapeError(std::string(which) + " image has " + std::to_string(image.dim(1)) +
                     " channels, expected " + std::to_string(channels));
  }
  const std::int64_t p = spec_.patch_size;
  if (image.dim(2) % p != 0) {
    throw ShapeError(std::string(which) + " image height " + std::to_string(image.dim(2)) +
                     " is not divisible by patch size " + std::to_string(p));
  }
  if (image.dim(3) % p != 0) {
    throw ShapeError(std::string(which) + " image width " + std::to_string(image.dim(3)) +
                     " is not divisible by patch size " + std::to_string(p));
  }
  Var patches = ops::patchify(Var::constant(image), p);
  return add_positional({proj.tokens(patches), modality});
}

TokenGrid Backbone::embed_rgb(const Tensor& image) const {
  return embed(image, frozen_.rgb_embed, 3, Modality::Rgb);
}

TokenGrid Backbone::embed_aux(const Tensor& image) const {
  return embed(image, aux_embed_.proj, spec_.aux_channels, Modality::Aux);
}

TokenGrid Backbone::add_positional(const TokenGrid& tokens) const {
  const Tensor& table = frozen_.pos_embed.value();
  Var pos = frozen_.pos_embed;
  if (table.dim(0) != tokens.grid_h() || table.dim(1) != tokens.grid_w()) {
    pos = Var::constant(ops::resize_bicubic(table, tokens.grid_h(), tokens.grid_w()));
  }
  return {ops::add_broadcast(tokens.data, pos), tokens.modality};
}

TokenGrid Backbone::run_block(const TokenGrid& tokens, std::int64_t block_index) const {
  if (block_index < 1 || block_index > spec_.depth) {
    throw std::out_of_range("block index " + std::to_string(block_index) + " outside [1, " +
                            std::to_string(spec_.depth) + "]");
  }
  const BlockWeights& w = frozen_.blocks[static_cast<std::size_t>(block_index - 1)];
  const double eps = spec_.ln_eps;
  Var x = tokens.data;
  Var h = ops::layer_norm(x, w.ln1.gamma, w.ln1.beta, eps);
  Var attn = w.proj.tokens(ops::self_attention(w.qkv.tokens(h), spec_.num_heads));
  x = ops::add(x, attn);
  h = ops::layer_norm(x, w.ln2.gamma, w.ln2.beta, eps);
  Var mlp = w.fc2.tokens(ops::gelu(w.fc1.tokens(h)));
  x = ops::add(x, mlp);
  return {x, tokens.modality};
}

std::pair<TokenGrid, TokenGrid> Backbone::run_stage(std::int64_t stage, const TokenGrid& x,
                                                    const TokenGrid& y) const {
  if (stage < 0 || stage >= static_cast<std::int64_t>(stages_.size())) {
    throw std::out_of_range("stage " + std::to_string(stage) + " out of range");
  }
  const BlockRange r = stages_[static_cast<std::size_t>(stage)];
  TokenGrid a = x, b = y;
  for (std::int64_t l = r.first; l <= r.last; ++l) {
    a = run_block(a, l);
    b = run_block(b, l);
  }
  return {a, b};
}

void Backbone::collect(ParamList& out) const {
  frozen_.rgb_embed.collect(out, "backbone.rgb_embed", ParamGroup::RgbPatchEmbed);
  out.push_back({"backbone.pos_embed", ParamGroup::PositionalEncoding, frozen_.pos_embed});
  for (std::size_t l = 0; l < frozen_.blocks.size(); ++l) {
    const auto& b = frozen_.blocks[l];
    const std::string p = "backbone.blocks." + std::to_string(l);
    b.ln1.collect(out, p + ".ln1", ParamGroup::BackboneBlocks);
    b.qkv.collect(out, p + ".attn.qkv", ParamGroup::BackboneBlocks);
    b.proj.collect(out, p + ".attn.proj", ParamGroup::BackboneBlocks);
    b.ln2.collect(out, p + ".ln2", ParamGroup::BackboneBlocks);
    b.fc1.collect(out, p + ".mlp.fc1", ParamGroup::BackboneBlocks);
    b.fc2.collect(out, p + ".mlp.fc2", ParamGroup::BackboneBlocks);
  }
  aux_embed_.proj.collect(out, "backbone.aux_embed", ParamGroup::AuxPatchEmbed);
}

void Backbone::load_frozen(const std::filesystem::path& path) {
  const Archive archive = read_archive(path);
  ParamList params;
  collect(params);
  for (auto& p : params) {
    if (!is_frozen_group(p.group)) continue;
    const ArchiveEntry* e = archive.find(p.name);
    if (e == nullptr) throw FormatError("weight file " + path.string() + " lacks " + p.name);
    if (e->tensor.shape() != p.var.shape()) {
      throw FormatError("weight file entry " + p.name + " has shape " +
                        shape_str(e->tensor.shape()) + ", expected " + shape_str(p.var.shape()));
    }
    p.var.mutable_value() = e->tensor;
  }
}

void Backbone::save_frozen(const std::filesystem::path& path) const {
  ParamList params;
  collect(params);
  Archive archive;
  archive.metadata = "frozen backbone weights";
  for (const auto& p : params) {
    if (is_frozen_group(p.group)) archive.entries.push_back({p.name, DType::F32, p.var.value()});
  }
  write_archive(path, archive);
}

}  // namespace modalfuse
