#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "synref/losses.hpp"
#include "synref/model.hpp"
#include "synref/rng.hpp"
#include "synref/sampler.hpp"
#include "synref/world.hpp"

namespace synref::experiment {

struct TrainConfig {
  std::vector<std::string> dataset_names;
  losses::LossConfig loss;
  model::ModelConfig model;
  sampler::BatchConfig batch;
  sampler::SamplingMode mode = sampler::SamplingMode::kInter;
  int epochs = 10;
  int steps_per_epoch = 120;  // desk-scale epochs are fixed step counts
  int batch_size = 1;         // anchors per optimization step
  double lr0 = 1e-2;
  double lr_decay = 0.1;       // multiplier applied once, late in training
  double lr_drop_frac = 0.3;   // drop after this fraction of the epochs
  int eval_every = 1;          // epochs between val/test evaluations
  std::uint64_t seed = 0;

  /// Learning rate in effect during `epoch` (0-based).
  double lr_at(int epoch) const;
  void validate() const;
};

// One metrics row per epoch. Accuracy and similarity columns hold NaN on
// epochs where evaluation was skipped.
struct MetricsRow {
  std::string run_id;
  int epoch = 0;
  double loss_det = 0.0;
  double loss_img = 0.0;
  double loss_ins = 0.0;
  double acc_val = 0.0;
  double acc_test = 0.0;
  double sim_mean = 0.0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  double wall_seconds = 0.0;  // not serialized; CSV stays reproducible

  /// Fixed column order; row order is append order.
  std::string to_csv() const;
  void save_csv(const std::string& path) const;
};

MetricsReport metrics_from_csv(const std::string& text);

// Everything needed to continue a run: parameters, finished-epoch count,
// and the sampling rng streams as of that point.
struct ResumeState {
  model::GroundingModel model;
  int epoch = 0;
  std::string rng_state;
};

struct TrainResult {
  model::GroundingModel model;
  MetricsReport metrics;
  std::string rng_state;  // streams at exit, for checkpointing
};

/// SGD over the summed enabled losses. One optimization step consumes
/// `batch_size` anchors; scenes are encoded once per step and shared by
/// every expression that names them. The mining index is rebuilt each
/// epoch. Aborts with a diagnostic naming the first non-finite tensor if
/// the loss or a parameter stops being finite. Deterministic in the
/// config. `resume` continues a run: epochs already covered are skipped,
/// and resuming at epochs == resume->epoch changes nothing.
TrainResult train(const std::vector<const world::Dataset*>& datasets,
                  const TrainConfig& config, const std::string& run_id,
                  std::optional<ResumeState> resume = std::nullopt);

struct EvalSample {
  std::size_t dataset = 0;
  int expression = -1;
  int predicted = -1;
  double iou = 0.0;
  bool correct = false;
};

struct EvalResult {
  double accuracy = 0.0;
  std::size_t total = 0;
  std::vector<EvalSample> samples;
};

// Test seam: per-proposal scores for one evaluation item. The model-backed
// scorer is the default; tests swap in oracles.
struct EvalItem {
  const world::Scene& scene;
  const world::Expression& expression;
  std::span<const model::Proposal> proposals;
  const world::BoundingBox& target_box;
};
using Scorer = std::function<std::vector<double>(const EvalItem&)>;

/// Fraction of split expressions whose top-scored proposal overlaps the
/// ground-truth box with IoU > 0.5. Proposals come from a per-expression
/// keyed rng, so results do not depend on evaluation order. Ties break to
/// the lowest proposal index.
EvalResult evaluate_scored(const std::vector<const world::Dataset*>& datasets,
                           world::Split split, std::uint64_t seed,
                           int proposal_count, double jitter,
                           const Scorer& scorer);

/// Model-backed evaluation. Refuses to run when the model vocabulary does
/// not match every dataset's vocabulary.
EvalResult evaluate(const model::GroundingModel& m,
                    const std::vector<const world::Dataset*>& datasets,
                    world::Split split, std::uint64_t seed);

struct SimilarityResult {
  double mean = 0.0;       // NaN when no scene yielded a pair
  std::size_t pairs = 0;
  std::size_t skipped = 0; // split scenes without two same-target sentences
};

/// Mean cosine similarity between the matched-proposal instance features
/// of one synonymous sentence pair per scene (same target object, same
/// split). Pair choice and proposals use keyed rngs.
SimilarityResult similarity_analysis(const model::GroundingModel& m,
                                     const std::vector<const world::Dataset*>& datasets,
                                     world::Split split, std::uint64_t seed);

inline constexpr int kCheckpointSchema = 1;

/// Binary checkpoint: magic, schema version, config hash, model config
/// (vocabulary included), epoch, rng state, then every named parameter
/// tensor. Save/load round trips are byte-identical.
void save_checkpoint(const std::string& path, const model::GroundingModel& m,
                     int epoch, const std::string& rng_state,
                     const std::string& config_hash);

struct LoadedCheckpoint {
  model::GroundingModel model;
  int epoch = 0;
  std::string rng_state;
  std::string config_hash;
};

/// Loads a checkpoint. When `expected_hash` is given (resume), a stored
/// hash that differs is an explicit SchemaError; omit it for transfer and
/// standalone evaluation.
LoadedCheckpoint load_checkpoint(const std::string& path,
                                 const std::optional<std::string>& expected_hash =
                                     std::nullopt);

// One ablation table line: the base config with some terms toggled.
struct AblationSpec {
  std::string name;
  bool use_img = false;
  bool use_ins_tri = false;
  bool use_ins_cl = false;
  bool mined = true;
  bool use_gcn = true;
};

/// The standard eight-row grid: detection-only baseline, each auxiliary
/// term alone, the pairings, and the full model minus mining or minus the
/// GCN.
std::vector<AblationSpec> ablation_grid();

struct MatrixCell {
  std::string name;
  std::uint64_t seed = 0;
  double acc_val = 0.0;
  double acc_test = 0.0;
  double sim_val = 0.0;
  double sim_test = 0.0;
};

struct MatrixReport {
  std::vector<MatrixCell> cells;   // per (row, seed), rows in grid order
  std::vector<MatrixCell> means;   // per row, seed column unused

  std::string to_csv() const;
  const MatrixCell& mean_of(const std::string& name) const;
};

/// Trains every ablation row with every seed (identical configs except the
/// toggled flags) and reports val/test accuracy and synonym similarity.
MatrixReport run_ablation(const std::vector<const world::Dataset*>& datasets,
                          const TrainConfig& base,
                          std::span<const std::uint64_t> seeds);

/// Pretrain-finetune grid over the contrastive objective: {neither,
/// ft_only, pre_only, both} plus a no-pretrain baseline and zero-shot
/// rows for both pretrained models. Pretraining runs on `pretrain`,
/// finetuning and evaluation on `transfer`.
MatrixReport run_transfer(const std::vector<const world::Dataset*>& pretrain,
                          const std::vector<const world::Dataset*>& transfer,
                          const TrainConfig& base,
                          std::span<const std::uint64_t> seeds);

}  // namespace synref::experiment
