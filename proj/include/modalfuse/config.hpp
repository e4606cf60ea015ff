#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "modalfuse/data.hpp"
#include "modalfuse/losses.hpp"
#include "modalfuse/mcrm.hpp"
#include "modalfuse/model.hpp"

namespace modalfuse {

using Json = nlohmann::ordered_json;

struct McrmOptions {
  bool enabled = true;
  double ratio = 0.5;
  MaskGeometry geometry;
};

struct ScheduleSpec {
  double base_lr = 3e-4;
  double weight_decay = 0.01;
  double lr_min = 0.0;
  std::int64_t warmup_epochs = 5;
  std::int64_t epochs = 20;
  std::int64_t steps_per_epoch = 50;
  std::int64_t batch_size = 8;

  std::int64_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  std::int64_t total_steps() const { return epochs * steps_per_epoch; }
  void validate() const;
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | directory
  std::string root;
  std::int64_t crop = 64;
  std::string rgb_range = "byte";
  std::int64_t train_tiles = 24;
  std::int64_t test_tiles = 6;
  std::uint64_t synthetic_seed = 1234;
  SynthSpec synthetic;
};

struct EvalConfig {
  /// 0 resolves to half the crop when the configuration is read.
  std::int64_t stride = 0;
  bool per_epoch = false;
  /// -1 resolves to the last class id when the configuration is read.
  std::int64_t background_id = -1;
};

/// Every knob of a run. Obtained from a key-tree document in which every key
/// must already exist in the defaults; the snapshot written with a run holds
/// all values, including the defaults.
struct RunConfig {
  std::string name = "default";
  std::int64_t num_classes = 6;
  EncoderSpec encoder;
  std::string family = "sam";
  std::string backbone_weights;
  std::uint64_t backbone_seed = 42;
  CpiaOptions cpia;
  DgfmOptions dgfm;
  McrmOptions mcrm;
  LossOptions loss;
  DecoderOptions decoder;
  DataConfig data;
  ScheduleSpec schedule;
  EvalConfig eval;

  /// Throws ConfigError naming the offending key.
  void validate() const;
  ModelConfig model_config() const;
};

/// The default configuration as a key tree.
Json default_config_json();
Json to_json(const RunConfig& config);
/// Reads a complete or partial key tree on top of the defaults.
RunConfig config_from_json(const Json& doc);

/// Parses "section.key=value" (a leading "--" is allowed). The value is read
/// as JSON when possible and as a bare string otherwise.
std::pair<std::string, Json> parse_override(const std::string& text);
/// Applies a dotted override to a document, rejecting unknown keys and type
/// changes.
void apply_override(Json& doc, const std::string& dotted_key, const Json& value);

/// Defaults <- optional file <- overrides, then validation.
RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, Json>>& overrides);

}  // namespace modalfuse
