#include "modalfuse/experiments.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "modalfuse/errors.hpp"

namespace modalfuse {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string fixed(double v) {
  std::ostringstream ss;
  ss << std::setprecision(6) << std::fixed << v;
  return ss.str();
}

}  // namespace

fs::path make_run_dir(const fs::path& parent, const std::string& name) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream stamp;
  stamp << std::put_time(&tm, "%Y%m%d-%H%M%S") << '-' << name;
  fs::create_directories(parent);
  fs::path dir = parent / stamp.str();
  for (int k = 1; fs::exists(dir); ++k) dir = parent / (stamp.str() + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

std::string metrics_document(const MetricsReport& report, std::uint64_t seed, std::int64_t trainable,
                             std::int64_t total) {
  Json j;
  j["seed"] = seed;
  j["params"] = {{"trainable", trainable}, {"total", total}};
  j["report"] = Json::parse(report_json(report, -1));
  return j.dump(2) + "\n";
}

TrainArtifacts train_to_dir(const RunConfig& config, std::uint64_t seed, const fs::path& run_dir) {
  fs::create_directories(run_dir);
  Json snapshot = to_json(config);
  write_text(run_dir / "config.snapshot", snapshot.dump(2) + "\n");

  Trainer trainer(config, seed);
  trainer.set_snapshot_dir(run_dir);
  std::ofstream log(run_dir / "log.ndjson", std::ios::binary);
  const std::int64_t trainable = count_params(trainer.partition().trainable);
  const std::int64_t total = trainable + count_params(trainer.partition().frozen);
  Json header;
  header["type"] = "run";
  header["seed"] = seed;
  header["params"] = {{"trainable", trainable}, {"total", total}};
  log << header.dump() << '\n';
  trainer.fit([&log](const Json& j) { log << j.dump() << '\n'; });

  TrainArtifacts out;
  out.run_dir = run_dir;
  out.report = trainer.evaluate(EvalMode::Full);
  out.trainable = trainable;
  out.total = total;
  Json final_rec;
  final_rec["type"] = "final";
  final_rec["oa"] = out.report.oa;
  final_rec["mf1"] = out.report.mf1;
  final_rec["miou"] = out.report.miou;
  log << final_rec.dump() << '\n';
  write_text(run_dir / "metrics.json", metrics_document(out.report, seed, trainable, total));
  trainer.save_checkpoint(run_dir / "checkpoint");
  return out;
}

ParamReport param_report(const RunConfig& config) {
  config.validate();
  Rng rng(0);
  Model model(config.model_config(), rng);
  const ParamPartition part = partition_parameters(model.parameters());
  ParamReport r;
  r.per_group = count_by_group(model.parameters());
  r.frozen = count_params(part.frozen);
  r.trainable = count_params(part.trainable);
  r.total = r.frozen + r.trainable;
  return r;
}

std::string param_report_text(const ParamReport& r) {
  std::ostringstream ss;
  ss << std::left << std::setw(22) << "group" << std::setw(10) << "state" << std::right
     << std::setw(12) << "params" << '\n';
  for (const auto& [g, n] : r.per_group) {
    ss << std::left << std::setw(22) << group_name(g) << std::setw(10)
       << (is_frozen_group(g) ? "frozen" : "trainable") << std::right << std::setw(12) << n << '\n';
  }
  ss << std::left << std::setw(32) << "frozen" << std::right << std::setw(12) << r.frozen << '\n';
  ss << std::left << std::setw(32) << "trainable" << std::right << std::setw(12) << r.trainable << '\n';
  ss << std::left << std::setw(32) << "total" << std::right << std::setw(12) << r.total << '\n';
  ss << "trainable (M): " << fixed(static_cast<double>(r.trainable) / 1e6) << '\n';
  ss << "trainable / total: "
     << fixed(r.total > 0 ? static_cast<double>(r.trainable) / static_cast<double>(r.total) : 0.0) << '\n';
  return ss.str();
}

Json param_report_json(const ParamReport& r) {
  Json j;
  Json groups = Json::object();
  for (const auto& [g, n] : r.per_group) groups[std::string(group_name(g))] = n;
  j["groups"] = groups;
  j["frozen"] = r.frozen;
  j["trainable"] = r.trainable;
  j["total"] = r.total;
  j["trainable_millions"] = static_cast<double>(r.trainable) / 1e6;
  j["trainable_ratio"] = r.total > 0 ? static_cast<double>(r.trainable) / static_cast<double>(r.total) : 0.0;
  return j;
}

std::vector<std::pair<std::string, RunConfig>> ablation_variants(const RunConfig& config) {
  auto with = [&](bool cpia, bool dgfm, bool mcrm, const std::string& suffix) {
    RunConfig c = config;
    c.cpia.enabled = cpia;
    c.dgfm.enabled = dgfm;
    c.mcrm.enabled = mcrm;
    c.name = config.name + "-" + suffix;
    return c;
  };
  return {{"Base", with(false, false, false, "base")},
          {"+CPIA", with(true, false, false, "cpia")},
          {"+CPIA+DGFM", with(true, true, false, "cpia-dgfm")},
          {"Full", with(true, true, true, "full")}};
}

std::vector<AblationRow> run_ablation(const RunConfig& config, std::uint64_t seed,
                                      const std::function<void(const std::string&)>& progress) {
  std::vector<AblationRow> rows;
  for (const auto& [label, variant] : ablation_variants(config)) {
    if (progress) progress("training " + label);
    Trainer t(variant, seed);
    t.fit();
    const MetricsReport r = t.evaluate(EvalMode::Full);
    rows.push_back({label, count_params(t.partition().trainable), r.oa, r.mf1, r.miou});
  }
  return rows;
}

std::string ablation_tsv(const std::vector<AblationRow>& rows) {
  std::ostringstream ss;
  ss << "variant\tparams\tparams_m\toa\tmf1\tmiou\n";
  for (const auto& r : rows) {
    ss << r.variant << '\t' << r.params << '\t' << fixed(static_cast<double>(r.params) / 1e6) << '\t'
       << fixed(r.oa) << '\t' << fixed(r.mf1) << '\t' << fixed(r.miou) << '\n';
  }
  return ss.str();
}

std::vector<AblationRow> parse_ablation_tsv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "variant\tparams\tparams_m\toa\tmf1\tmiou") {
    throw FormatError("ablation table: unexpected header");
  }
  std::vector<AblationRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    AblationRow r;
    std::string params, params_m, oa, mf1, miou;
    if (!std::getline(ls, r.variant, '\t') || !std::getline(ls, params, '\t') ||
        !std::getline(ls, params_m, '\t') || !std::getline(ls, oa, '\t') ||
        !std::getline(ls, mf1, '\t') || !std::getline(ls, miou)) {
      throw FormatError("ablation table: incomplete row '" + line + "'");
    }
    try {
      r.params = std::stoll(params);
      r.oa = std::stod(oa);
      r.mf1 = std::stod(mf1);
      r.miou = std::stod(miou);
    } catch (const std::exception&) {
      throw FormatError("ablation table: non-numeric field in '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

std::vector<RobustnessRow> robustness_rows(const std::string& model_name, const Model& model,
                                           const RunConfig& config,
                                           const std::vector<TilePair>& prepared) {
  std::vector<RobustnessRow> rows;
  std::map<EvalMode, MetricsReport> reports;
  for (auto mode : {EvalMode::Full, EvalMode::RgbOnly, EvalMode::AuxOnly}) {
    const MetricsReport r = evaluate_model(model, config, prepared, mode);
    reports[mode] = r;
    rows.push_back({model_name, eval_mode_name(mode), r.oa, r.mf1, r.miou});
  }
  const MetricsReport& full = reports[EvalMode::Full];
  for (auto mode : {EvalMode::RgbOnly, EvalMode::AuxOnly}) {
    const MetricsReport& d = reports[mode];
    rows.push_back({model_name, "drop_" + eval_mode_name(mode), full.oa - d.oa, full.mf1 - d.mf1,
                    full.miou - d.miou});
  }
  return rows;
}

std::vector<RobustnessRow> run_paired_robustness(const RunConfig& config, std::uint64_t seed,
                                                 const std::function<void(const std::string&)>& progress) {
  std::vector<RobustnessRow> rows;
  for (bool mcrm : {true, false}) {
    RunConfig c = config;
    c.mcrm.enabled = mcrm;
    const std::string name = mcrm ? "mcrm_on" : "mcrm_off";
    if (progress) progress("training " + name);
    Trainer t(c, seed);
    t.fit();
    auto r = robustness_rows(name, t.model(), c, t.test_tiles());
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

std::string robustness_tsv(const std::vector<RobustnessRow>& rows) {
  std::ostringstream ss;
  ss << "model\tmode\toa\tmf1\tmiou\n";
  for (const auto& r : rows) {
    ss << r.model << '\t' << r.mode << '\t' << fixed(r.oa) << '\t' << fixed(r.mf1) << '\t'
       << fixed(r.miou) << '\n';
  }
  return ss.str();
}

const RobustnessRow& find_row(const std::vector<RobustnessRow>& rows, const std::string& model,
                              const std::string& mode) {
  for (const auto& r : rows) {
    if (r.model == model && r.mode == mode) return r;
  }
  throw std::out_of_range("no robustness row for " + model + "/" + mode);
}

}  // namespace modalfuse
