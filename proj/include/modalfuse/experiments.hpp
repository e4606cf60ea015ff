#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "modalfuse/engine.hpp"

namespace modalfuse {

/// Creates <parent>/<YYYYmmdd-HHMMSS>-<name>, adding a numeric suffix if that
/// directory already exists.
std::filesystem::path make_run_dir(const std::filesystem::path& parent, const std::string& name);

struct TrainArtifacts {
  std::filesystem::path run_dir;
  MetricsReport report;
  std::int64_t trainable = 0;
  std::int64_t total = 0;
};

/// Trains per config and writes config.snapshot, log.ndjson, metrics.json and
/// checkpoint into run_dir.
TrainArtifacts train_to_dir(const RunConfig& config, std::uint64_t seed,
                            const std::filesystem::path& run_dir);

/// metrics.json content: seed, parameter counts and the final report. Contains
/// nothing time-dependent.
std::string metrics_document(const MetricsReport& report, std::uint64_t seed, std::int64_t trainable,
                             std::int64_t total);

struct ParamReport {
  std::map<ParamGroup, std::int64_t> per_group;
  std::int64_t total = 0;
  std::int64_t frozen = 0;
  std::int64_t trainable = 0;
};

/// Builds the model for config (no data needed) and counts its parameters.
ParamReport param_report(const RunConfig& config);
std::string param_report_text(const ParamReport& report);
Json param_report_json(const ParamReport& report);

/// Base, +CPIA, +CPIA+DGFM and Full variants of a configuration.
std::vector<std::pair<std::string, RunConfig>> ablation_variants(const RunConfig& config);

struct AblationRow {
  std::string variant;
  std::int64_t params = 0;  // trainable
  double oa = 0.0, mf1 = 0.0, miou = 0.0;
};

std::vector<AblationRow> run_ablation(const RunConfig& config, std::uint64_t seed,
                                      const std::function<void(const std::string&)>& progress = {});
std::string ablation_tsv(const std::vector<AblationRow>& rows);
std::vector<AblationRow> parse_ablation_tsv(const std::string& text);

struct RobustnessRow {
  std::string model;
  std::string mode;  // full, rgb_only, aux_only, drop_rgb_only, drop_aux_only
  double oa = 0.0, mf1 = 0.0, miou = 0.0;
};

/// Evaluates under the three modes and appends the drop rows (full - degraded).
std::vector<RobustnessRow> robustness_rows(const std::string& model_name, const Model& model,
                                           const RunConfig& config,
                                           const std::vector<TilePair>& prepared);
/// Trains MCRM-on and MCRM-off twins with the same seed and data.
std::vector<RobustnessRow> run_paired_robustness(const RunConfig& config, std::uint64_t seed,
                                                 const std::function<void(const std::string&)>& progress = {});
std::string robustness_tsv(const std::vector<RobustnessRow>& rows);
const RobustnessRow& find_row(const std::vector<RobustnessRow>& rows, const std::string& model,
                              const std::string& mode);

}  // namespace modalfuse
