#include <doctest.h>

#include <fstream>

#include "modalfuse/config.hpp"
#include "modalfuse/errors.hpp"
#include "test_support.hpp"

using namespace modalfuse;

TEST_CASE("defaults resolve derived values") {
  RunConfig c = config_from_json(Json::object());
  CHECK(c.eval.stride == c.data.crop / 2);
  CHECK(c.eval.background_id == c.num_classes - 1);
  CHECK(c.schedule.base_lr == 3e-4);
  CHECK(c.schedule.weight_decay == 0.01);
  CHECK(c.schedule.warmup_epochs == 5);
  CHECK(c.loss.lambda_aux == 0.4);
  CHECK(c.mcrm.ratio == 0.5);
  ModelConfig m = c.model_config();
  CHECK(m.encoder.native_grid_h == c.data.crop / c.encoder.patch_size);
  CHECK(m.aux_heads == c.mcrm.enabled);
}

TEST_CASE("dotted overrides parse values as JSON where possible") {
  auto [k1, v1] = parse_override("--schedule.base_lr=0.002");
  CHECK(k1 == "schedule.base_lr");
  CHECK(v1.get<double>() == 0.002);
  auto [k2, v2] = parse_override("data.source=directory");
  CHECK(v2.get<std::string>() == "directory");
  auto [k3, v3] = parse_override("backbone.taps=[1,2]");
  CHECK(v3.size() == 2);
  auto [k4, v4] = parse_override("cpia.enabled=false");
  CHECK(v4.get<bool>() == false);
  CHECK_THROWS_AS(parse_override("novalue"), ConfigError);
}

TEST_CASE("unknown keys and type changes are rejected") {
  Json doc = default_config_json();
  CHECK_THROWS_AS(apply_override(doc, "cpia.not_a_key", 1), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "nosuchsection.x", 1), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "cpia.enabled", "maybe"), ConfigError);
  try {
    apply_override(doc, "cpia.not_a_key", 1);
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("not_a_key") != std::string::npos);
  }
  apply_override(doc, "dgfm.reduction", 8);
  CHECK(config_from_json(doc).dgfm.reduction == 8);
}

TEST_CASE("configuration survives a snapshot round trip") {
  RunConfig c;
  c.name = "roundtrip";
  c.cpia.prompt_ratio = 0.5;
  c.mcrm.geometry.regions = 5;
  c.data.synthetic.cue_jitter = 0.02;
  c.eval.stride = 16;
  c.eval.background_id = 5;
  const Json j = to_json(c);
  CHECK(to_json(config_from_json(j)) == j);
}

TEST_CASE("files and overrides layer on the defaults") {
  const auto dir = testutil::temp_dir("config");
  std::ofstream(dir / "c.json") << R"({"name": "from_file", "schedule": {"epochs": 6}})";
  RunConfig c = load_config(dir / "c.json", {parse_override("--schedule.epochs=7")});
  CHECK(c.name == "from_file");
  CHECK(c.schedule.epochs == 7);
  CHECK(c.schedule.steps_per_epoch == RunConfig{}.schedule.steps_per_epoch);
  std::ofstream(dir / "bad.json") << R"({"schedule": {"epochz": 3}})";
  CHECK_THROWS_AS(load_config(dir / "bad.json", {}), ConfigError);
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK_THROWS_AS(load_config(dir / "broken.json", {}), ConfigError);
}

TEST_CASE("validation names the offending key") {
  auto expect = [](const std::string& key, Json value) {
    Json doc = default_config_json();
    apply_override(doc, key, value);
    try {
      config_from_json(doc).validate();
      FAIL("accepted " << key);
    } catch (const ConfigError& e) {
      INFO(e.what());
      const std::string leaf = key.substr(key.rfind('.') + 1);
      CHECK(std::string(e.what()).find(leaf) != std::string::npos);
    }
  };
  expect("mcrm.ratio", 1.5);
  expect("schedule.batch_size", 0);
  expect("data.crop", 60);
  expect("backbone.taps", Json::array({2, 4, 6}));
  expect("cpia.r_p", 0.0);
  expect("data.source", "s3");
}
