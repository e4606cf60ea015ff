#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "modalfuse/errors.hpp"
#include "modalfuse/experiments.hpp"

namespace fs = std::filesystem;
using namespace modalfuse;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonArgs {
  std::string config;
  std::uint64_t seed = 42;
  std::string out = "runs";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "JSON configuration file");
  cmd->add_option("--seed", args.seed, "Run seed")->capture_default_str();
  cmd->add_option("--out", args.out, "Parent directory for run output")->capture_default_str();
  cmd->allow_extras();
}

RunConfig resolve(const CommonArgs& args, CLI::App* cmd) {
  std::vector<std::pair<std::string, Json>> overrides;
  for (const auto& extra : cmd->remaining()) {
    if (extra.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + extra + "'");
    overrides.push_back(parse_override(extra));
  }
  return load_config(args.config, overrides);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void progress(const std::string& msg) { std::cerr << msg << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-stream frozen-backbone segmentation: training, evaluation and experiments"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, ablate_args, robust_args, params_args;
  std::string checkpoint, eval_mode = "full";
  bool params_json = false;

  auto* train = app.add_subcommand("train", "Train a model and write a run directory");
  add_common(train, train_args);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--mode", eval_mode, "full, rgb_only, aux_only or all")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "Train Base, +CPIA, +CPIA+DGFM and Full variants");
  add_common(ablate, ablate_args);

  auto* robust = app.add_subcommand("robustness", "Modality-missing evaluation");
  add_common(robust, robust_args);
  robust->add_option("--checkpoint", checkpoint,
                     "Evaluate this checkpoint; without it, train masked/unmasked twins");

  auto* params = app.add_subcommand("params", "Report parameter counts per group");
  add_common(params, params_args);
  params->add_flag("--json", params_json, "Print JSON instead of a table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) {
      const RunConfig cfg = resolve(train_args, train);
      const fs::path dir = make_run_dir(train_args.out, cfg.name);
      const TrainArtifacts a = train_to_dir(cfg, train_args.seed, dir);
      std::cerr << "oa " << a.report.oa << "  mF1 " << a.report.mf1 << "  mIoU " << a.report.miou << '\n';
      std::cout << a.run_dir.string() << std::endl;
    } else if (*eval) {
      if (!eval->remaining().empty()) throw ConfigError("eval takes its configuration from the checkpoint");
      const Checkpoint ckpt = read_checkpoint(checkpoint);
      auto model = model_from_checkpoint(ckpt, true);
      auto [train_raw, test_raw] = load_dataset(ckpt.config);
      (void)train_raw;
      std::vector<TilePair> test;
      for (const auto& t : test_raw) {
        test.push_back(prepare_tile(t, parse_family(ckpt.config.family),
                                    parse_pixel_range(ckpt.config.data.rgb_range)));
      }
      std::vector<EvalMode> modes;
      if (eval_mode == "all") {
        modes = {EvalMode::Full, EvalMode::RgbOnly, EvalMode::AuxOnly};
      } else {
        modes = {parse_eval_mode(eval_mode)};
      }
      Json out;
      for (auto m : modes) {
        out[eval_mode_name(m)] = Json::parse(report_json(evaluate_model(*model, ckpt.config, test, m), -1));
      }
      std::cout << out.dump(2) << std::endl;
    } else if (*ablate) {
      const RunConfig cfg = resolve(ablate_args, ablate);
      const fs::path dir = make_run_dir(ablate_args.out, cfg.name + "-ablation");
      write_file(dir / "config.snapshot", to_json(cfg).dump(2) + "\n");
      const auto rows = run_ablation(cfg, ablate_args.seed, progress);
      const std::string table = ablation_tsv(rows);
      write_file(dir / "ablation.tsv", table);
      std::cerr << table;
      std::cout << dir.string() << std::endl;
    } else if (*robust) {
      std::vector<RobustnessRow> rows;
      RunConfig cfg;
      if (!checkpoint.empty()) {
        if (!robust->remaining().empty()) {
          throw ConfigError("with --checkpoint the configuration comes from the checkpoint");
        }
        const Checkpoint ckpt = read_checkpoint(checkpoint);
        cfg = ckpt.config;
        auto model = model_from_checkpoint(ckpt, true);
        auto [train_raw, test_raw] = load_dataset(cfg);
        (void)train_raw;
        std::vector<TilePair> test;
        for (const auto& t : test_raw) {
          test.push_back(prepare_tile(t, parse_family(cfg.family), parse_pixel_range(cfg.data.rgb_range)));
        }
        rows = robustness_rows("checkpoint", *model, cfg, test);
      } else {
        cfg = resolve(robust_args, robust);
        rows = run_paired_robustness(cfg, robust_args.seed, progress);
      }
      const fs::path dir = make_run_dir(robust_args.out, cfg.name + "-robustness");
      write_file(dir / "config.snapshot", to_json(cfg).dump(2) + "\n");
      const std::string table = robustness_tsv(rows);
      write_file(dir / "robustness.tsv", table);
      std::cerr << table;
      std::cout << dir.string() << std::endl;
    } else if (*params) {
      const RunConfig cfg = resolve(params_args, params);
      const ParamReport r = param_report(cfg);
      std::cout << (params_json ? param_report_json(r).dump(2) + "\n" : param_report_text(r));
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitRuntime;
  }
  return 0;
}
