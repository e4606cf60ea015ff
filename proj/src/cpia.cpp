#include "modalfuse/cpia.hpp"

#include <cmath>

#include "modalfuse/errors.hpp"

namespace modalfuse {

namespace {

constexpr double kAdapterInitStd = 0.02;

}  // namespace

std::int64_t reduced_width(std::int64_t channels, double ratio, const char* key) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw ConfigError(std::string(key) + " must lie in (0, 1]");
  }
  const auto width = static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(channels)));
  if (width < 1) {
    throw ConfigError(std::string(key) + " = " + std::to_string(ratio) + " gives zero width for " +
                      std::to_string(channels) + " channels");
  }
  return width;
}

Var generate_shared_base(const TokenGrid& x, const TokenGrid& y, const CpgWeights& w) {
  if (x.data.shape() != y.data.shape()) {
    throw ShapeError("prompt generator: rgb tokens " + shape_str(x.data.shape()) +
                     " vs aux tokens " + shape_str(y.data.shape()));
  }
  Var xd = w.rgb_down.tokens(x.data);
  Var yd = w.aux_down.tokens(y.data);
  const std::size_t last = x.data.shape().size() - 1;
  return w.up.tokens(w.fuse.tokens(ops::concat({xd, yd}, last)));
}

Var apply_tft(const Var& shared_base, Modality modality, const TftParams& t) {
  const Var& gamma = modality == Modality::Rgb ? t.gamma_rgb : t.gamma_aux;
  const Var& beta = modality == Modality::Rgb ? t.beta_rgb : t.beta_aux;
  return ops::add(shared_base, ops::add_lastdim(ops::mul_lastdim(shared_base, gamma), beta));
}

TokenGrid prompt_adapter(const TokenGrid& tokens, const Var& prompt,
                         const PromptAdapterWeights& w, bool training, Rng* dropout_rng) {
  if (tokens.data.shape() != prompt.shape()) {
    throw ShapeError("prompt adapter: tokens " + shape_str(tokens.data.shape()) + " vs prompt " +
                     shape_str(prompt.shape()));
  }
  if (training && w.dropout > 0.0 && dropout_rng == nullptr) {
    throw ContractError("prompt adapter: training mode needs a dropout random stream");
  }
  Var hidden = ops::relu(ops::add(w.down.tokens(tokens.data), w.prompt.tokens(prompt)));
  if (training) hidden = ops::dropout(hidden, w.dropout, dropout_rng);
  return {ops::add(tokens.data, w.up.tokens(hidden)), tokens.modality};
}

CpiaStage CpiaStage::create(std::int64_t channels, const CpiaOptions& options, Rng& rng) {
  const std::int64_t cp = reduced_width(channels, options.prompt_ratio, "cpia.r_p");
  const std::int64_t d = reduced_width(channels, options.bottleneck_ratio, "cpia.r_a");
  if (options.dropout < 0.0 || options.dropout >= 1.0) {
    throw ConfigError("cpia.dropout must lie in [0, 1)");
  }
  CpiaStage s;
  s.cpg.rgb_down = Dense::fan_in(channels, cp, false, true, rng);
  s.cpg.aux_down = Dense::fan_in(channels, cp, false, true, rng);
  s.cpg.fuse = Dense::fan_in(2 * cp, cp, true, true, rng);
  s.cpg.fuse.bias.mutable_value().fill(0.0);
  s.cpg.up = Dense::fan_in(cp, channels, true, true, rng);
  s.cpg.up.bias.mutable_value().fill(0.0);
  auto zeros = [&] { return Var::leaf(Tensor::zeros({channels}), true); };
  s.tft = {zeros(), zeros(), zeros(), zeros()};
  for (PromptAdapterWeights* a : {&s.rgb_adapter, &s.aux_adapter}) {
    a->down = Dense::normal(channels, d, kAdapterInitStd, true, true, rng);
    a->prompt = Dense::normal(channels, d, kAdapterInitStd, false, true, rng);
    a->up = Dense::zeros(d, channels, true, true);
    a->dropout = options.dropout;
  }
  return s;
}

std::pair<TokenGrid, TokenGrid> CpiaStage::forward(const TokenGrid& x, const TokenGrid& y,
                                                   bool training, Rng* dropout_rng) const {
  Var z = generate_shared_base(x, y, cpg);
  Var p_rgb = apply_tft(z, Modality::Rgb, tft);
  Var p_aux = apply_tft(z, Modality::Aux, tft);
  return {prompt_adapter(x, p_rgb, rgb_adapter, training, dropout_rng),
          prompt_adapter(y, p_aux, aux_adapter, training, dropout_rng)};
}

void CpiaStage::collect(ParamList& out, const std::string& prefix) const {
  cpg.rgb_down.collect(out, prefix + ".cpg.rgb_down", ParamGroup::Cpia);
  cpg.aux_down.collect(out, prefix + ".cpg.aux_down", ParamGroup::Cpia);
  cpg.fuse.collect(out, prefix + ".cpg.fuse", ParamGroup::Cpia);
  cpg.up.collect(out, prefix + ".cpg.up", ParamGroup::Cpia);
  out.push_back({prefix + ".tft.gamma_rgb", ParamGroup::Cpia, tft.gamma_rgb});
  out.push_back({prefix + ".tft.beta_rgb", ParamGroup::Cpia, tft.beta_rgb});
  out.push_back({prefix + ".tft.gamma_aux", ParamGroup::Cpia, tft.gamma_aux});
  out.push_back({prefix + ".tft.beta_aux", ParamGroup::Cpia, tft.beta_aux});
  for (auto [name, a] : {std::pair{"rgb", &rgb_adapter}, std::pair{"aux", &aux_adapter}}) {
    const std::string p = prefix + ".adapter_" + name;
    a->down.collect(out, p + ".down", ParamGroup::Cpia);
    a->prompt.collect(out, p + ".prompt", ParamGroup::Cpia);
    a->up.collect(out, p + ".up", ParamGroup::Cpia);
  }
}

}  // namespace modalfuse
