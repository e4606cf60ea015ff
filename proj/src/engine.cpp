#include "modalfuse/engine.hpp"

#include <cmath>
#include <numbers>
#include <tuple>

#include "modalfuse/errors.hpp"
#include "modalfuse/mcrm.hpp"

namespace modalfuse {

namespace {

constexpr const char* kCheckpointFormat = "modalfuse-checkpoint-1";

std::vector<TilePair> prepare_all(const std::vector<TilePair>& raw, const RunConfig& config) {
  const BackboneFamily family = parse_family(config.family);
  const PixelRange range = parse_pixel_range(config.data.rgb_range);
  std::vector<TilePair> out;
  out.reserve(raw.size());
  for (const auto& t : raw) {
    t.validate(config.num_classes);
    if (t.dsm.dim(0) != config.encoder.aux_channels) {
      throw ShapeError("tile " + t.tile_id + " has " + std::to_string(t.dsm.dim(0)) +
                       " auxiliary channels, expected " + std::to_string(config.encoder.aux_channels));
    }
    out.push_back(prepare_tile(t, family, range));
  }
  return out;
}

std::vector<std::int64_t> foreground_ids(const RunConfig& config) {
  std::vector<std::int64_t> fg;
  for (std::int64_t c = 0; c < config.num_classes; ++c) {
    if (c != config.eval.background_id) fg.push_back(c);
  }
  return fg;
}

}  // namespace

ParamPartition partition_parameters(const ParamList& all, const FreezePolicy& policy) {
  ParamPartition p;
  for (const auto& np : all) {
    const bool frozen = policy.is_frozen(np.group);
    Var v = np.var;
    v.set_requires_grad(!frozen);
    (frozen ? p.frozen : p.trainable).push_back(np);
  }
  return p;
}

std::int64_t count_params(const ParamList& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.var.value().numel();
  return n;
}

std::map<ParamGroup, std::int64_t> count_by_group(const ParamList& params) {
  std::map<ParamGroup, std::int64_t> out;
  for (auto g : kAllGroups) out[g] = 0;
  for (const auto& p : params) out[p.group] += p.var.value().numel();
  return out;
}

double lr_at(std::int64_t step, const ScheduleSpec& spec) {
  const std::int64_t warm = spec.warmup_steps();
  const std::int64_t total = spec.total_steps();
  if (step <= 0) return warm > 0 ? 0.0 : spec.base_lr;
  if (step < warm) return spec.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (step >= total) return spec.lr_min;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return spec.lr_min +
         0.5 * (spec.base_lr - spec.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(ParamList params, Options options) : options_(options) {
  for (auto& p : params) {
    if (!p.var.requires_grad()) {
      throw ContractError("optimizer given non-trainable parameter " + p.name);
    }
    state_.push_back({p.var, Tensor::zeros_like(p.var.value()), Tensor::zeros_like(p.var.value())});
  }
}

bool AdamW::has_state(const Var& v) const {
  for (const auto& s : state_) {
    if (s.param.node_ptr() == v.node_ptr()) return true;
  }
  return false;
}

void AdamW::step(double lr) {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& s : state_) {
    if (!s.param.has_grad()) continue;
    Tensor& w = s.param.mutable_value();
    const Tensor& g = s.param.grad();
    for (std::int64_t i = 0; i < w.numel(); ++i) {
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = s.m[i] / c1;
      const double vhat = s.v[i] / c2;
      w[i] -= lr * options_.weight_decay * w[i];
      w[i] -= lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& s : state_) s.param.zero_grad();
}

EvalMode parse_eval_mode(const std::string& name) {
  if (name == "full") return EvalMode::Full;
  if (name == "rgb_only") return EvalMode::RgbOnly;
  if (name == "aux_only") return EvalMode::AuxOnly;
  throw ConfigError("evaluation mode must be full, rgb_only or aux_only, got '" + name + "'");
}

std::string eval_mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::Full: return "full";
    case EvalMode::RgbOnly: return "rgb_only";
    case EvalMode::AuxOnly: return "aux_only";
  }
  return "full";
}

TilePair apply_eval_mode(const TilePair& prepared, EvalMode mode) {
  TilePair t = prepared;
  if (mode == EvalMode::RgbOnly) t.dsm.fill(0.0);
  if (mode == EvalMode::AuxOnly) t.rgb.fill(0.0);
  return t;
}

Json step_record_json(const StepRecord& r) {
  Json j;
  j["type"] = "step";
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["loss"] = {{"main", r.loss.main},
               {"aux_rgb", r.loss.aux_rgb},
               {"aux_aux", r.loss.aux_aux},
               {"total", r.loss.total},
               {"hard_pixel_fraction", r.loss.hard_pixel_fraction}};
  j["gate_means"] = r.gate_means;
  j["masked"] = {{"rgb", r.masked_rgb}, {"aux", r.masked_aux}};
  return j;
}

std::pair<std::vector<TilePair>, std::vector<TilePair>> load_dataset(const RunConfig& config) {
  if (config.data.source == "directory") {
    if (config.data.root.empty()) {
      throw ConfigError("data.root is required when data.source is 'directory'");
    }
    return {load_split(config.data.root, "train", config.num_classes),
            load_split(config.data.root, "test", config.num_classes)};
  }
  const std::uint64_t s = config.data.synthetic_seed;
  return {synth_dataset(config.data.synthetic, config.num_classes, config.data.train_tiles, s, "train"),
          synth_dataset(config.data.synthetic, config.num_classes, config.data.test_tiles, s + 1, "test")};
}

Trainer::Trainer(RunConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
  config_.validate();
  auto [train, test] = load_dataset(config_);
  init(std::move(train), std::move(test));
}

Trainer::Trainer(RunConfig config, std::uint64_t seed, std::vector<TilePair> train,
                 std::vector<TilePair> test)
    : config_(std::move(config)), seed_(seed) {
  config_.validate();
  init(std::move(train), std::move(test));
}

void Trainer::init(std::vector<TilePair> train, std::vector<TilePair> test) {
  Rng root(seed_);
  init_rng_ = root.split();
  data_rng_ = root.split();
  mask_rng_ = root.split();
  dropout_rng_ = root.split();
  model_ = std::make_unique<Model>(config_.model_config(), init_rng_);
  partition_ = partition_parameters(model_->parameters());
  optimizer_ = std::make_unique<AdamW>(
      partition_.trainable, AdamW::Options{0.9, 0.999, 1e-8, config_.schedule.weight_decay});
  train_ = prepare_all(train, config_);
  test_ = prepare_all(test, config_);
  if (train_.empty()) throw ConfigError("training split is empty");
}

Batch Trainer::sample_batch() {
  std::vector<SamplePatch> patches;
  const auto n = static_cast<std::int64_t>(train_.size());
  for (std::int64_t b = 0; b < config_.schedule.batch_size; ++b) {
    const auto& tile = train_[static_cast<std::size_t>(data_rng_.integer(0, n - 1))];
    patches.push_back(random_crop_flip(tile, config_.data.crop, data_rng_));
  }
  return stack_patches(patches);
}

StepRecord Trainer::train_step() { return train_step(sample_batch()); }

StepRecord Trainer::train_step(const Batch& batch) {
  StepRecord rec;
  rec.step = step_;
  rec.lr = lr_at(step_, config_.schedule);

  Tensor rgb = batch.rgb, aux = batch.aux;
  if (config_.mcrm.enabled) {
    const MaskPlan plan = plan_masking(rgb.dim(0), config_.mcrm.ratio, config_.mcrm.geometry,
                                       rgb.dim(2), rgb.dim(3), mask_rng_);
    rec.masked_rgb = plan.count(MaskAssignment::MaskRgb);
    rec.masked_aux = plan.count(MaskAssignment::MaskAux);
    std::tie(rgb, aux) = apply_masking(rgb, aux, plan);
  }

  ForwardOptions fo;
  fo.training = true;
  fo.dropout_rng = &dropout_rng_;
  fo.with_aux = config_.mcrm.enabled;
  const ForwardResult out = model_->forward(rgb, aux, fo);
  const LossTerms loss = total_loss(out.logits, out.logits_rgb, out.logits_aux, batch.labels, config_.loss);
  rec.loss = loss.breakdown;
  for (const auto& s : out.stages) {
    if (s.gate.defined()) rec.gate_means.push_back(s.gate.value().sum() / static_cast<double>(s.gate.value().numel()));
  }

  if (!std::isfinite(rec.loss.total)) {
    std::string where;
    if (snapshot_dir_) {
      std::filesystem::create_directories(*snapshot_dir_);
      const auto path = *snapshot_dir_ / ("nan-step-" + std::to_string(step_) + ".ckpt");
      save_checkpoint(path);
      where = "; snapshot written to " + path.string();
    }
    throw NumericError("non-finite loss at step " + std::to_string(step_) + " (main " +
                       std::to_string(rec.loss.main) + ", aux_rgb " + std::to_string(rec.loss.aux_rgb) +
                       ", aux_aux " + std::to_string(rec.loss.aux_aux) + ")" + where);
  }

  backward(loss.total);
  optimizer_->step(rec.lr);
  optimizer_->zero_grad();
  ++step_;
  return rec;
}

MetricsReport evaluate_model(const Model& model, const RunConfig& config,
                             const std::vector<TilePair>& prepared, EvalMode mode) {
  ConfusionMatrix cm(config.num_classes, foreground_ids(config));
  const Predictor predictor = [&model](const Tensor& rgb, const Tensor& aux) {
    return model.predict(rgb, aux);
  };
  for (const auto& tile : prepared) {
    const TilePair t = apply_eval_mode(tile, mode);
    const Tensor logits = sliding_window_inference(predictor, t, config.data.crop, config.eval.stride,
                                                   config.num_classes);
    cm.accumulate(argmax_labels(logits), t.labels, config.loss.ignore_index);
  }
  return make_report(cm);
}

MetricsReport Trainer::evaluate(EvalMode mode) const { return evaluate(test_, mode); }

MetricsReport Trainer::evaluate(const std::vector<TilePair>& prepared, EvalMode mode) const {
  return evaluate_model(*model_, config_, prepared, mode);
}

void Trainer::fit(const std::function<void(const Json&)>& log) {
  const std::int64_t total = config_.schedule.total_steps();
  const std::int64_t per_epoch = config_.schedule.steps_per_epoch;
  while (step_ < total) {
    const StepRecord rec = train_step();
    if (log) log(step_record_json(rec));
    if (config_.eval.per_epoch && step_ % per_epoch == 0) {
      const MetricsReport r = evaluate(EvalMode::Full);
      Json j;
      j["type"] = "epoch";
      j["epoch"] = step_ / per_epoch;
      j["oa"] = r.oa;
      j["mf1"] = r.mf1;
      j["miou"] = r.miou;
      if (log) log(j);
    }
  }
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  Archive a;
  Json meta;
  meta["format"] = kCheckpointFormat;
  meta["seed"] = seed_;
  meta["step"] = step_;
  meta["config"] = to_json(config_);
  a.metadata = meta.dump();
  for (const auto& p : partition_.trainable) a.entries.push_back({p.name, DType::F64, p.var.value()});
  write_archive(path, a);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Checkpoint c;
  c.archive = read_archive(path);
  const Json meta = Json::parse(c.archive.metadata, nullptr, false);
  if (meta.is_discarded() || !meta.contains("format") || meta["format"] != kCheckpointFormat) {
    throw FormatError(path.string() + " is not a checkpoint");
  }
  c.seed = meta.at("seed").get<std::uint64_t>();
  c.config = config_from_json(meta.at("config"));
  c.config.validate();
  return c;
}

std::vector<std::string> load_trainable(Model& model, const Archive& archive) {
  const ParamPartition part = partition_parameters(model.parameters());
  std::set<std::string> used;
  for (const auto& p : part.trainable) {
    const ArchiveEntry* e = archive.find(p.name);
    if (e == nullptr) throw FormatError("checkpoint lacks parameter " + p.name);
    if (e->tensor.shape() != p.var.shape()) {
      throw FormatError("checkpoint parameter " + p.name + " has shape " + shape_str(e->tensor.shape()) +
                        ", expected " + shape_str(p.var.shape()));
    }
    Var v = p.var;
    v.mutable_value() = e->tensor;
    used.insert(p.name);
  }
  std::vector<std::string> skipped;
  for (const auto& e : archive.entries) {
    if (!used.count(e.name)) skipped.push_back(e.name);
  }
  return skipped;
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt, bool drop_aux_heads) {
  ModelConfig mc = ckpt.config.model_config();
  if (drop_aux_heads) mc.aux_heads = false;
  Rng root(ckpt.seed);
  Rng init = root.split();
  auto model = std::make_unique<Model>(mc, init);
  load_trainable(*model, ckpt.archive);
  return model;
}

}  // namespace modalfuse
