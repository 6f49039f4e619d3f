#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "synref/rng.hpp"
#include "synref/tensor.hpp"
#include "synref/world.hpp"

namespace synref::model {

struct ModelConfig {
  int visual_dim = 32;     // v: per-cell visual feature width
  int embed_dim = 16;      // word embedding width; word features are 2x this
  int pos_buckets = 12;    // positional table rows; position t uses min(t, buckets-1)
  int attn_dim = 16;       // shared space for word/proposal attention projections
  int gcn_hidden = 32;
  int instance_dim = 32;   // per-proposal feature width after the GCN
  int head_hidden = 32;
  int proj_hidden = 16;
  int proj_dim = 16;       // contrastive projection output width
  int proposal_count = 20;
  double jitter = 0.1;     // proposal corner jitter, fraction of box side
  bool use_gcn = true;     // false: identity adjacency (no message passing)

  int lang_dim() const { return 2 * embed_dim; }
  void validate() const;
};

enum class ProposalSource { kJitteredGroundTruth, kDistractor };

struct Proposal {
  world::BoundingBox box;
  ProposalSource source = ProposalSource::kDistractor;
};

/// One jittered copy of every ground-truth box (corner jitter uniform in
/// +-jitter * side, clamped to the grid), then random distractor boxes up
/// to k. Every returned box covers at least one cell center. Deterministic
/// given the rng state. Requires k >= object count.
std::vector<Proposal> propose(const world::Scene& scene, Rng& rng, int k,
                              double jitter);

/// Index of the max-IoU proposal; ties break to the lowest index.
int select_matching_proposal(std::span<const Proposal> proposals,
                             const world::BoundingBox& gt);

/// Lowest-index argmax over a [1, K] score row.
int predict(const Tensor& scores);

/// Scene channels as a constant [H, W, C] tensor.
Tensor scene_channels_tensor(const world::Scene& scene);

struct LanguageEncoding {
  Tensor words;     // [T, 2*embed_dim]: embedding gated by position
  Tensor sentence;  // [1, 2*embed_dim]
};

struct ForwardResult {
  Tensor visual;    // [H, W, v]
  Tensor response;  // [H, W], values in (0, 1)
  Tensor fused;     // [H, W, v]: response * visual per cell
  Tensor pooled;    // [K, v]: RoI-pooled rows of the fused volume
  Tensor attn;      // [K, 1]: per-proposal word attention
  Tensor instance;  // [K, instance_dim]: GCN output
  Tensor scores;    // [1, K]: detection logits
  LanguageEncoding language;
};

// All trainable parameters of the pipeline (encoders, attention, GCN,
// detection head, contrastive projection head) in one named registry, so
// checkpoints and the optimizer see a single stable list.
class GroundingModel {
 public:
  GroundingModel(const ModelConfig& config, std::vector<std::string> vocabulary,
                 std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const std::vector<std::string>& vocabulary() const { return vocabulary_; }

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;

  /// Per-cell two-layer perceptron over the cell's channels concatenated
  /// with their 4-neighborhood mean. [H, W, C] -> [H, W, v].
  Tensor encode_visual(const Tensor& channels) const;
  Tensor encode_visual(const world::Scene& scene) const;

  /// Word features gated by a positional table, mean-pooled and passed
  /// through a two-layer perceptron. The gating (second half of each word
  /// feature is embedding * positional row) keeps the pooled sentence
  /// vector order-sensitive.
  LanguageEncoding encode_language(const std::vector<std::string>& tokens) const;

  /// Dynamic filter attention: a (v+1)-dim filter generated from the
  /// sentence feature, applied per cell, sigmoid-squashed. [H, W] response.
  Tensor image_attention(const Tensor& sentence, const Tensor& visual) const;

  /// Element-wise response * visual volume.
  static Tensor fuse(const Tensor& response, const Tensor& visual);

  /// Mean of the volume over cells whose centers fall inside the box.
  /// Throws DomainError when the box covers no cell center.
  static Tensor roi_pool(const Tensor& volume, const world::BoundingBox& box);

  /// All proposals pooled at once: [K, v].
  static Tensor roi_pool_rows(const Tensor& volume,
                              std::span<const Proposal> proposals);

  /// Mean inner product between projected word features and the projected
  /// proposal feature, sigmoid-squashed to (0, 1). Scalar.
  Tensor word_attention(const Tensor& words, const Tensor& pooled_row) const;

  /// Constant [1, 5] row: [x_tl/W, y_tl/H, x_br/W, y_br/H, wh/WH].
  static Tensor location_feature(const world::BoundingBox& box, int grid_w,
                                 int grid_h);
  static Tensor location_rows(std::span<const Proposal> proposals, int grid_w,
                              int grid_h);

  /// Row-normalized uniform adjacency with self-loops (identity when the
  /// GCN is disabled). Constant [K, K].
  Tensor adjacency(int k) const;

  /// Node inputs x_i = attn_i * concat(pooled_i, location_i); two layers
  /// of H = relu(A * H * W). [K, instance_dim].
  Tensor gcn_forward(const Tensor& pooled, const Tensor& attn,
                     const Tensor& locations) const;

  /// Per-proposal perceptron over concat(instance_i, pooled_i) -> [1, K].
  Tensor detection_scores(const Tensor& instance, const Tensor& pooled) const;

  /// Contrastive projection: two-layer perceptron + L2 normalization.
  /// rows [1, instance_dim] -> [1, proj_dim], unit norm.
  Tensor project(const Tensor& row) const;

  /// Full pipeline for one (scene, expression, proposals) triple.
  /// `cached_visual` (when given) must be encode_visual of the same scene;
  /// reusing it across expressions in one step shares the subgraph.
  ForwardResult forward(const world::Scene& scene,
                        const std::vector<std::string>& tokens,
                        std::span<const Proposal> proposals,
                        const Tensor* cached_visual = nullptr) const;

 private:
  Tensor make_param(const std::string& name, const Shape& shape, Rng& rng,
                    double scale);
  Tensor onehot_rows(const std::vector<std::string>& tokens) const;

  ModelConfig config_;
  std::vector<std::string> vocabulary_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
};

}  // namespace synref::model
