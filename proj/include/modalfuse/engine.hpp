#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "modalfuse/archive.hpp"
#include "modalfuse/config.hpp"
#include "modalfuse/data.hpp"
#include "modalfuse/metrics.hpp"
#include "modalfuse/model.hpp"

namespace modalfuse {

struct FreezePolicy {
  std::set<ParamGroup> frozen{ParamGroup::BackboneBlocks, ParamGroup::RgbPatchEmbed,
                              ParamGroup::PositionalEncoding};
  bool is_frozen(ParamGroup g) const { return frozen.count(g) > 0; }
};

struct ParamPartition {
  ParamList frozen;
  ParamList trainable;
};

/// Splits by group and sets requires_grad to match, so frozen tensors never
/// receive gradients.
ParamPartition partition_parameters(const ParamList& all, const FreezePolicy& policy = {});

std::int64_t count_params(const ParamList& params);
std::map<ParamGroup, std::int64_t> count_by_group(const ParamList& params);

/// Linear warmup 0 -> base_lr over the warmup steps, then cosine annealing to
/// lr_min at the final step; constant lr_min afterwards.
double lr_at(std::int64_t step, const ScheduleSpec& spec);

/// Decoupled weight decay Adam; state is allocated only for the parameters it
/// is given.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW(ParamList params, Options options);

  /// One update from the gradients currently held by the parameters. Parameters
  /// without a gradient are left untouched.
  void step(double lr);
  void zero_grad();

  std::size_t state_size() const { return state_.size(); }
  bool has_state(const Var& v) const;
  std::int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    Var param;
    Tensor m;
    Tensor v;
  };
  std::vector<Slot> state_;
  Options options_;
  std::int64_t t_ = 0;
};

enum class EvalMode { Full, RgbOnly, AuxOnly };
EvalMode parse_eval_mode(const std::string& name);
std::string eval_mode_name(EvalMode mode);

/// Zeroes the normalised auxiliary raster (RgbOnly) or RGB raster (AuxOnly).
TilePair apply_eval_mode(const TilePair& prepared, EvalMode mode);

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  LossBreakdown loss;
  std::vector<double> gate_means;  // per stage; empty without gated fusion
  std::int64_t masked_rgb = 0;
  std::int64_t masked_aux = 0;
};

Json step_record_json(const StepRecord& r);

/// Owns a model, its optimizer and the data of one run. All randomness comes
/// from streams derived from the run seed in a fixed order.
class Trainer {
 public:
  /// Loads or generates data as configured.
  Trainer(RunConfig config, std::uint64_t seed);
  /// Uses the given raw tiles instead of the configured source.
  Trainer(RunConfig config, std::uint64_t seed, std::vector<TilePair> train,
          std::vector<TilePair> test);

  const RunConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  Model& model() { return *model_; }
  const Model& model() const { return *model_; }
  const ParamPartition& partition() const { return partition_; }
  const AdamW& optimizer() const { return *optimizer_; }
  const std::vector<TilePair>& train_tiles() const { return train_; }
  const std::vector<TilePair>& test_tiles() const { return test_; }
  std::int64_t step_index() const { return step_; }

  /// Draws a batch of normalised crops from the training tiles.
  Batch sample_batch();
  /// Plan masking, corrupt, forward, loss, backward, optimizer step.
  /// Throws NumericError on a non-finite loss after writing a snapshot when a
  /// snapshot directory is set.
  StepRecord train_step();
  StepRecord train_step(const Batch& batch);

  /// Sliding-window evaluation on normalised tiles; never uses the auxiliary
  /// heads or masking.
  MetricsReport evaluate(EvalMode mode) const;
  MetricsReport evaluate(const std::vector<TilePair>& prepared, EvalMode mode) const;

  /// Runs the remaining schedule; each record and per-epoch evaluation is
  /// passed to log as one JSON object.
  void fit(const std::function<void(const Json&)>& log = {});

  void set_snapshot_dir(std::filesystem::path dir) { snapshot_dir_ = std::move(dir); }

  /// Trainable parameters (f64) plus the config snapshot and seed.
  void save_checkpoint(const std::filesystem::path& path) const;

 private:
  void init(std::vector<TilePair> train, std::vector<TilePair> test);

  RunConfig config_;
  std::uint64_t seed_;
  Rng init_rng_, data_rng_, mask_rng_, dropout_rng_;
  std::unique_ptr<Model> model_;
  ParamPartition partition_;
  std::unique_ptr<AdamW> optimizer_;
  std::vector<TilePair> train_;  // normalised
  std::vector<TilePair> test_;   // normalised
  std::int64_t step_ = 0;
  std::optional<std::filesystem::path> snapshot_dir_;
};

/// Raw train/test tiles for a configuration.
std::pair<std::vector<TilePair>, std::vector<TilePair>> load_dataset(const RunConfig& config);

struct Checkpoint {
  RunConfig config;
  std::uint64_t seed = 42;
  Archive archive;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint tensors into every trainable parameter of model. Every
/// trainable parameter must be present; entries the model does not have (for
/// example auxiliary heads) are returned by name and otherwise ignored.
std::vector<std::string> load_trainable(Model& model, const Archive& archive);

/// Builds the inference model of a checkpoint: frozen weights from the seed or
/// weight file, trainable weights from the archive. When drop_aux_heads is set
/// the model is built without auxiliary heads.
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt, bool drop_aux_heads);

/// Sliding-window evaluation of any model on normalised tiles.
MetricsReport evaluate_model(const Model& model, const RunConfig& config,
                             const std::vector<TilePair>& prepared, EvalMode mode);

}  // namespace modalfuse
