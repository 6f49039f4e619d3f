#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "synref/model.hpp"
#include "synref/rng.hpp"
#include "synref/world.hpp"

namespace synref::sampler {

// One train-split expression with the lookups batch construction needs.
struct CorpusEntry {
  std::size_t dataset = 0;     // index into Corpus::datasets()
  int expression = -1;         // index into that dataset's expressions
  int scene = -1;              // index into that dataset's scenes
  std::string scene_id;
  int target_object = -1;
  int target_category = -1;
  std::string group;           // synonym group id
};

/// Flat view over the train splits of the registered datasets, in
/// registration order. Entry indices are the corpus ids used by mining.
class Corpus {
 public:
  explicit Corpus(std::vector<const world::Dataset*> datasets);

  std::size_t size() const { return entries_.size(); }
  const CorpusEntry& entry(std::size_t i) const { return entries_.at(i); }
  const std::vector<const world::Dataset*>& datasets() const { return datasets_; }

  const world::Expression& expression(std::size_t i) const;
  const world::Scene& scene(std::size_t i) const;

  /// Same dataset and synonym group, anchor excluded.
  std::vector<std::size_t> group_members(std::size_t anchor) const;
  /// Same scene and target object across every registered dataset (the
  /// datasets share pools, so these are paraphrases of the anchor in any
  /// dialect), anchor excluded.
  std::vector<std::size_t> shared_object_members(std::size_t anchor) const;
  /// Same dataset and scene, different target object.
  std::vector<std::size_t> scene_negatives(std::size_t anchor) const;

 private:
  std::vector<const world::Dataset*> datasets_;
  std::vector<CorpusEntry> entries_;
  std::map<std::string, std::vector<std::size_t>> by_group_;          // dataset#group
  std::map<std::string, std::vector<std::size_t>> by_scene_object_;   // scene_id#object
  std::map<std::string, std::vector<std::size_t>> by_dataset_scene_;  // dataset#scene_id
};

// Within-image triplet, as corpus ids: positive is a paraphrase of the
// anchor, negative names a different object in the same scene.
struct TripletSample {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
};

/// Uniform anchor with bounded resampling until both a paraphrase and a
/// same-scene negative exist. StateError when the corpus cannot produce one.
TripletSample sample_triplet(const Corpus& corpus, Rng& rng);

// Per-epoch snapshot backing negative mining: frozen sentence features and
// the category lists. Rebuilt whenever the encoder moves.
struct MiningIndex {
  int epoch = -1;
  std::vector<std::vector<double>> language;  // per corpus entry, detached F_l
  std::vector<double> norms;
  std::map<int, std::vector<std::size_t>> by_category;
};

MiningIndex build_mining_index(const Corpus& corpus,
                               const model::GroundingModel& model, int epoch);

enum class SamplingMode { kIntra, kInter };
SamplingMode sampling_mode_from_name(const std::string& name);
const char* sampling_mode_name(SamplingMode mode);

/// Up to `count` expressions of the anchor's target category from other
/// scenes, uniform without replacement; all of them when few. kIntra
/// restricts candidates to the anchor's dataset.
std::vector<std::size_t> mine_negatives_category(const Corpus& corpus,
                                                 const MiningIndex& index,
                                                 std::size_t anchor,
                                                 std::size_t count,
                                                 SamplingMode mode, Rng& rng);

/// The `n` other-scene expressions most cosine-similar to the anchor's
/// frozen sentence feature; ties break to the lowest corpus id.
std::vector<std::size_t> mine_negatives_language(const Corpus& corpus,
                                                 const MiningIndex& index,
                                                 std::size_t anchor,
                                                 std::size_t n,
                                                 SamplingMode mode);

struct BatchConfig {
  int positives = 4;            // P
  int category_negatives = 8;   // topped up from language mining when short
  int language_negatives = 8;   // N
  bool mined = true;            // false: uniform other-scene negatives
  void validate() const;
};

// Contrastive sample as corpus ids. Negatives never share a scene with the
// anchor; positives share its target object.
struct ContrastiveBatch {
  std::size_t anchor = 0;
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
};

/// Assembles Q+ / Q- around an anchor. Positives are paraphrases (anchor's
/// group in kIntra mode, its shared-pool object in kInter); negatives are
/// category- and language-mined, deduplicated, language tops up category
/// shortfall. DomainError when the anchor has no paraphrase or the corpus
/// has no eligible negative.
ContrastiveBatch build_contrastive_batch(const Corpus& corpus,
                                         const MiningIndex& index,
                                         std::size_t anchor,
                                         const BatchConfig& config,
                                         SamplingMode mode, Rng& rng);

}  // namespace synref::sampler
