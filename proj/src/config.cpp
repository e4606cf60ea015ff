#include "modalfuse/config.hpp"

#include <algorithm>
#include <fstream>

#include "modalfuse/errors.hpp"

namespace modalfuse {

namespace {

bool same_kind(const Json& expected, const Json& given) {
  if (expected.is_boolean()) return given.is_boolean();
  if (expected.is_number_float()) return given.is_number();
  if (expected.is_number_integer()) return given.is_number_integer();
  if (expected.is_string()) return given.is_string();
  if (expected.is_array()) return given.is_array();
  if (expected.is_object()) return given.is_object();
  return false;
}

std::string kind_name(const Json& j) {
  if (j.is_boolean()) return "a boolean";
  if (j.is_number_float()) return "a number";
  if (j.is_number_integer()) return "an integer";
  if (j.is_string()) return "a string";
  if (j.is_array()) return "a list";
  if (j.is_object()) return "a section";
  return "a value";
}

void merge_checked(Json& base, const Json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    Json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_checked(slot, it.value(), key);
      continue;
    }
    if (!same_kind(slot, it.value())) {
      throw ConfigError("config key '" + key + "' must be " + kind_name(slot));
    }
    slot = it.value();
  }
}

template <typename T>
T get(const Json& doc, const char* section, const char* key) {
  try {
    return doc.at(section).at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + section + "." + key + "' has the wrong type");
  }
}

}  // namespace

void ScheduleSpec::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("schedule.base_lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("schedule.weight_decay must be non-negative");
  if (lr_min < 0.0 || lr_min > base_lr) throw ConfigError("schedule.lr_min must lie in [0, base_lr]");
  if (epochs < 1 || steps_per_epoch < 1) throw ConfigError("schedule.epochs and steps_per_epoch must be positive");
  if (warmup_epochs < 0 || warmup_epochs > epochs) {
    throw ConfigError("schedule.warmup_epochs must lie in [0, epochs]");
  }
  if (batch_size < 1) throw ConfigError("schedule.batch_size must be positive");
}

void RunConfig::validate() const {
  if (num_classes < 2) throw ConfigError("model.num_classes must be at least 2");
  encoder.validate();
  parse_family(family);
  parse_pixel_range(data.rgb_range);
  if (data.source != "synthetic" && data.source != "directory") {
    throw ConfigError("data.source must be 'synthetic' or 'directory'");
  }
  if (data.source == "directory" && data.root.empty()) {
    throw ConfigError("data.root is required when data.source is 'directory'");
  }
  if (data.crop < encoder.patch_size || data.crop % encoder.patch_size != 0) {
    throw ConfigError("data.crop " + std::to_string(data.crop) +
                      " must be a positive multiple of backbone.patch_size " +
                      std::to_string(encoder.patch_size));
  }
  if (data.source == "synthetic") {
    if (data.synthetic.tile_size < data.crop) {
      throw ConfigError("data.synthetic.tile_size must be at least data.crop");
    }
    if (data.train_tiles < 1 || data.test_tiles < 1) {
      throw ConfigError("data.train_tiles and data.test_tiles must be positive");
    }
  }
  if (eval.stride < 1 || eval.stride > data.crop) throw ConfigError("eval.stride must lie in [1, data.crop]");
  if (eval.background_id < 0 || eval.background_id >= num_classes) {
    throw ConfigError("eval.background_id must be a class id");
  }
  if (loss.ignore_index >= 0 && loss.ignore_index < num_classes) {
    throw ConfigError("loss.ignore_index must not be a class id");
  }
  if (loss.lambda_aux < 0.0) throw ConfigError("loss.lambda_aux must be non-negative");
  if (!(mcrm.ratio >= 0.0 && mcrm.ratio <= 1.0)) throw ConfigError("mcrm.ratio must lie in [0, 1]");
  mcrm.geometry.check_feasible(data.crop, data.crop);
  reduced_width(encoder.embed_dim, cpia.prompt_ratio, "cpia.r_p");
  reduced_width(encoder.embed_dim, cpia.bottleneck_ratio, "cpia.r_a");
  if (cpia.dropout < 0.0 || cpia.dropout >= 1.0) throw ConfigError("cpia.dropout must lie in [0, 1)");
  if (dgfm.enabled && dgfm_reduced_channels(encoder.embed_dim, dgfm.reduction) >= encoder.embed_dim) {
    throw ConfigError("dgfm.reduction leaves no channel reduction");
  }
  if (dgfm.groups < 1) throw ConfigError("dgfm.groups must be positive");
  if (decoder.channels < 1) throw ConfigError("decoder.channels must be positive");
  for (auto b : decoder.ppm_bins) {
    if (b < 1) throw ConfigError("decoder.ppm_bins entries must be positive");
  }
  schedule.validate();
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.encoder = encoder;
  // The positional table lives at the training crop's grid.
  m.encoder.native_grid_h = data.crop / encoder.patch_size;
  m.encoder.native_grid_w = data.crop / encoder.patch_size;
  m.num_classes = num_classes;
  m.cpia = cpia;
  m.dgfm = dgfm;
  m.decoder = decoder;
  m.aux_heads = mcrm.enabled;
  m.backbone_seed = backbone_seed;
  m.backbone_weights = backbone_weights;
  return m;
}

Json to_json(const RunConfig& c) {
  Json j;
  j["name"] = c.name;
  j["model"] = {{"num_classes", c.num_classes}};
  j["backbone"] = {{"depth", c.encoder.depth},
                   {"embed_dim", c.encoder.embed_dim},
                   {"num_heads", c.encoder.num_heads},
                   {"patch_size", c.encoder.patch_size},
                   {"mlp_ratio", c.encoder.mlp_ratio},
                   {"taps", c.encoder.taps},
                   {"aux_channels", c.encoder.aux_channels},
                   {"ln_eps", c.encoder.ln_eps},
                   {"family", c.family},
                   {"weights", c.backbone_weights},
                   {"init_seed", c.backbone_seed}};
  j["cpia"] = {{"enabled", c.cpia.enabled},
               {"r_p", c.cpia.prompt_ratio},
               {"r_a", c.cpia.bottleneck_ratio},
               {"dropout", c.cpia.dropout}};
  j["dgfm"] = {{"enabled", c.dgfm.enabled}, {"reduction", c.dgfm.reduction}, {"groups", c.dgfm.groups}};
  j["mcrm"] = {{"enabled", c.mcrm.enabled},
               {"ratio", c.mcrm.ratio},
               {"regions", c.mcrm.geometry.regions},
               {"area_min", c.mcrm.geometry.area_min},
               {"area_max", c.mcrm.geometry.area_max},
               {"aspect_min", c.mcrm.geometry.aspect_min},
               {"aspect_max", c.mcrm.geometry.aspect_max}};
  j["loss"] = {{"lambda_aux", c.loss.lambda_aux}, {"ignore_index", c.loss.ignore_index}};
  j["decoder"] = {{"channels", c.decoder.channels}, {"ppm_bins", c.decoder.ppm_bins}};
  const SynthSpec& s = c.data.synthetic;
  j["data"] = {{"source", c.data.source},
               {"root", c.data.root},
               {"crop", c.data.crop},
               {"rgb_range", c.data.rgb_range},
               {"train_tiles", c.data.train_tiles},
               {"test_tiles", c.data.test_tiles},
               {"synthetic",
                {{"seed", c.data.synthetic_seed},
                 {"mode", synth_mode_name(s.mode)},
                 {"tile_size", s.tile_size},
                 {"cell", s.cell},
                 {"height_bands", s.height_bands},
                 {"pixel_noise", s.pixel_noise},
                 {"height_noise", s.height_noise},
                 {"rgb_height_cue", s.rgb_height_cue},
                 {"cue_jitter", s.cue_jitter}}}};
  j["schedule"] = {{"base_lr", c.schedule.base_lr},
                   {"weight_decay", c.schedule.weight_decay},
                   {"lr_min", c.schedule.lr_min},
                   {"warmup_epochs", c.schedule.warmup_epochs},
                   {"epochs", c.schedule.epochs},
                   {"steps_per_epoch", c.schedule.steps_per_epoch},
                   {"batch_size", c.schedule.batch_size}};
  j["eval"] = {{"stride", c.eval.stride},
               {"per_epoch", c.eval.per_epoch},
               {"background_id", c.eval.background_id}};
  return j;
}

Json default_config_json() { return to_json(RunConfig{}); }

RunConfig config_from_json(const Json& doc) {
  Json merged = default_config_json();
  merge_checked(merged, doc, "");
  const Json& j = merged;
  RunConfig c;
  try {
    c.name = j.at("name").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key 'name' must be a string");
  }
  c.num_classes = get<std::int64_t>(j, "model", "num_classes");
  c.encoder.depth = get<std::int64_t>(j, "backbone", "depth");
  c.encoder.embed_dim = get<std::int64_t>(j, "backbone", "embed_dim");
  c.encoder.num_heads = get<std::int64_t>(j, "backbone", "num_heads");
  c.encoder.patch_size = get<std::int64_t>(j, "backbone", "patch_size");
  c.encoder.mlp_ratio = get<std::int64_t>(j, "backbone", "mlp_ratio");
  c.encoder.taps = get<std::vector<std::int64_t>>(j, "backbone", "taps");
  c.encoder.aux_channels = get<std::int64_t>(j, "backbone", "aux_channels");
  c.encoder.ln_eps = get<double>(j, "backbone", "ln_eps");
  c.family = get<std::string>(j, "backbone", "family");
  c.backbone_weights = get<std::string>(j, "backbone", "weights");
  c.backbone_seed = get<std::uint64_t>(j, "backbone", "init_seed");
  c.cpia.enabled = get<bool>(j, "cpia", "enabled");
  c.cpia.prompt_ratio = get<double>(j, "cpia", "r_p");
  c.cpia.bottleneck_ratio = get<double>(j, "cpia", "r_a");
  c.cpia.dropout = get<double>(j, "cpia", "dropout");
  c.dgfm.enabled = get<bool>(j, "dgfm", "enabled");
  c.dgfm.reduction = get<std::int64_t>(j, "dgfm", "reduction");
  c.dgfm.groups = get<std::int64_t>(j, "dgfm", "groups");
  c.mcrm.enabled = get<bool>(j, "mcrm", "enabled");
  c.mcrm.ratio = get<double>(j, "mcrm", "ratio");
  c.mcrm.geometry.regions = get<std::int64_t>(j, "mcrm", "regions");
  c.mcrm.geometry.area_min = get<double>(j, "mcrm", "area_min");
  c.mcrm.geometry.area_max = get<double>(j, "mcrm", "area_max");
  c.mcrm.geometry.aspect_min = get<double>(j, "mcrm", "aspect_min");
  c.mcrm.geometry.aspect_max = get<double>(j, "mcrm", "aspect_max");
  c.loss.lambda_aux = get<double>(j, "loss", "lambda_aux");
  c.loss.ignore_index = get<std::int32_t>(j, "loss", "ignore_index");
  c.decoder.channels = get<std::int64_t>(j, "decoder", "channels");
  c.decoder.ppm_bins = get<std::vector<std::int64_t>>(j, "decoder", "ppm_bins");
  c.data.source = get<std::string>(j, "data", "source");
  c.data.root = get<std::string>(j, "data", "root");
  c.data.crop = get<std::int64_t>(j, "data", "crop");
  c.data.rgb_range = get<std::string>(j, "data", "rgb_range");
  c.data.train_tiles = get<std::int64_t>(j, "data", "train_tiles");
  c.data.test_tiles = get<std::int64_t>(j, "data", "test_tiles");
  const Json& s = j.at("data").at("synthetic");
  c.data.synthetic_seed = get<std::uint64_t>(j.at("data"), "synthetic", "seed");
  c.data.synthetic.mode = parse_synth_mode(s.at("mode").get<std::string>());
  c.data.synthetic.tile_size = get<std::int64_t>(j.at("data"), "synthetic", "tile_size");
  c.data.synthetic.cell = get<std::int64_t>(j.at("data"), "synthetic", "cell");
  c.data.synthetic.height_bands = get<std::int64_t>(j.at("data"), "synthetic", "height_bands");
  c.data.synthetic.pixel_noise = get<double>(j.at("data"), "synthetic", "pixel_noise");
  c.data.synthetic.height_noise = get<double>(j.at("data"), "synthetic", "height_noise");
  c.data.synthetic.rgb_height_cue = get<double>(j.at("data"), "synthetic", "rgb_height_cue");
  c.data.synthetic.cue_jitter = get<double>(j.at("data"), "synthetic", "cue_jitter");
  c.data.synthetic.aux_channels = c.encoder.aux_channels;
  c.schedule.base_lr = get<double>(j, "schedule", "base_lr");
  c.schedule.weight_decay = get<double>(j, "schedule", "weight_decay");
  c.schedule.lr_min = get<double>(j, "schedule", "lr_min");
  c.schedule.warmup_epochs = get<std::int64_t>(j, "schedule", "warmup_epochs");
  c.schedule.epochs = get<std::int64_t>(j, "schedule", "epochs");
  c.schedule.steps_per_epoch = get<std::int64_t>(j, "schedule", "steps_per_epoch");
  c.schedule.batch_size = get<std::int64_t>(j, "schedule", "batch_size");
  c.eval.stride = get<std::int64_t>(j, "eval", "stride");
  c.eval.per_epoch = get<bool>(j, "eval", "per_epoch");
  c.eval.background_id = get<std::int64_t>(j, "eval", "background_id");
  if (c.eval.stride == 0) c.eval.stride = std::max<std::int64_t>(1, c.data.crop / 2);
  if (c.eval.background_id == -1) c.eval.background_id = c.num_classes - 1;
  return c;
}

std::pair<std::string, Json> parse_override(const std::string& text) {
  std::string body = text;
  if (body.rfind("--", 0) == 0) body = body.substr(2);
  const auto eq = body.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + text + "' must look like section.key=value");
  }
  const std::string key = body.substr(0, eq);
  const std::string raw = body.substr(eq + 1);
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  return {key, value};
}

void apply_override(Json& doc, const std::string& dotted_key, const Json& value) {
  // Build a nested patch and merge it against the defaults so that unknown
  // keys and type changes are caught by the same checks as file contents.
  Json patch = value;
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted_key.find('.', start);
    parts.push_back(dotted_key.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw ConfigError("malformed override key '" + dotted_key + "'");
    Json wrapped;
    wrapped[*it] = std::move(patch);
    patch = std::move(wrapped);
  }
  Json checked = default_config_json();
  merge_checked(checked, doc, "");
  // A string value aimed at a numeric or boolean key is a type error; leave
  // that to merge_checked, which names the key.
  merge_checked(checked, patch, "");
  doc = std::move(checked);
}

RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, Json>>& overrides) {
  Json doc = Json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    doc = Json::parse(in, nullptr, false, true);
    if (doc.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  }
  for (const auto& [key, value] : overrides) apply_override(doc, key, value);
  RunConfig c = config_from_json(doc);
  c.validate();
  return c;
}

}  // namespace modalfuse
