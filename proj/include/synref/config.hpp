#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "synref/experiment.hpp"
#include "synref/world.hpp"

namespace synref::config {

// Checkpoint consumed by eval/analyze and the split they report on.
// Relative checkpoint paths are resolved against the working directory.
struct EvalConfig {
  std::string checkpoint = "checkpoint.bin";
  std::string split = "val";
};

// Seeds and dataset roles for the ablation and transfer matrices.
struct MatrixConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> pretrain{"base", "plus"};
  std::vector<std::string> transfer{"reason"};
};

// Full configuration of one invocation. The JSON form has sections
// data / model / loss / sampler / train / eval / matrix; model, loss, and
// sampler fill the corresponding parts of `train`. Every key is optional
// and falls back to the defaults below; unknown keys are rejected.
struct RunConfig {
  RunConfig() { train.dataset_names = {"base", "plus"}; }

  std::uint64_t data_seed = 1;  // JSON key: data.seed
  world::DataConfig data = world::DataConfig::defaults();
  experiment::TrainConfig train;
  EvalConfig eval;
  MatrixConfig matrix;

  void validate() const;
};

/// Defaults overlaid with a JSON tree. Unknown keys anywhere throw
/// UsageError naming the dotted path; wrong value types throw SchemaError.
RunConfig config_from_json_text(const std::string& text);

/// config_from_json_text over a file. IoError when unreadable.
RunConfig load_config_file(const std::string& path);

/// Full resolution pipeline: defaults, then the file (when nonempty), then
/// `key.path=value` overrides in order. Override values parse as JSON
/// scalars and fall back to strings, so `train.lr0=0.5`, `model.use_gcn=false`,
/// and `eval.split=test` all work. Malformed overrides throw UsageError.
RunConfig resolve_config(const std::string& config_path,
                         const std::vector<std::string>& overrides);

/// Every field serialized under its section, 2-space indent, sorted keys,
/// trailing newline. Parsing this text reproduces the config exactly.
std::string resolved_json(const RunConfig& config);

/// FNV-1a over the compact canonical serialization.
std::uint64_t config_hash(const RunConfig& config);

/// config_hash as 16 lowercase hex digits; stored in checkpoints.
std::string config_hash_hex(const RunConfig& config);

}  // namespace synref::config
