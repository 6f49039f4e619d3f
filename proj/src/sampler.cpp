#include "synref/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "synref/error.hpp"
#include "synref/tensor.hpp"

namespace synref::sampler {

namespace {

std::string group_key(std::size_t dataset, const std::string& group) {
  return std::to_string(dataset) + "#" + group;
}

std::string scene_object_key(const std::string& scene_id, int object) {
  return scene_id + "#" + std::to_string(object);
}

std::string dataset_scene_key(std::size_t dataset, const std::string& scene_id) {
  return std::to_string(dataset) + "#" + scene_id;
}

}  // namespace

Corpus::Corpus(std::vector<const world::Dataset*> datasets)
    : datasets_(std::move(datasets)) {
  if (datasets_.empty()) throw DomainError("corpus: no datasets registered");
  for (const auto* d : datasets_) {
    if (d == nullptr) throw DomainError("corpus: null dataset");
  }
  for (std::size_t di = 0; di < datasets_.size(); ++di) {
    const world::Dataset& d = *datasets_[di];
    for (int ei : d.expression_splits[static_cast<int>(world::Split::kTrain)]) {
      const world::Expression& expr = d.expressions.at(static_cast<std::size_t>(ei));
      const int si = d.expression_scene.at(static_cast<std::size_t>(ei));
      const world::Scene& scene = d.scenes.at(static_cast<std::size_t>(si));
      const world::ObjectInstance* obj = scene.find_object(expr.target_object_id);
      if (obj == nullptr) throw StateError("corpus: expression targets a missing object");

      CorpusEntry entry;
      entry.dataset = di;
      entry.expression = ei;
      entry.scene = si;
      entry.scene_id = expr.scene_id;
      entry.target_object = expr.target_object_id;
      entry.target_category = obj->category;
      entry.group = expr.synonym_group_id;

      const std::size_t id = entries_.size();
      by_group_[group_key(di, entry.group)].push_back(id);
      by_scene_object_[scene_object_key(entry.scene_id, entry.target_object)]
          .push_back(id);
      by_dataset_scene_[dataset_scene_key(di, entry.scene_id)].push_back(id);
      entries_.push_back(std::move(entry));
    }
  }
}

const world::Expression& Corpus::expression(std::size_t i) const {
  const CorpusEntry& e = entry(i);
  return datasets_[e.dataset]->expressions.at(static_cast<std::size_t>(e.expression));
}

const world::Scene& Corpus::scene(std::size_t i) const {
  const CorpusEntry& e = entry(i);
  return datasets_[e.dataset]->scenes.at(static_cast<std::size_t>(e.scene));
}

std::vector<std::size_t> Corpus::group_members(std::size_t anchor) const {
  const CorpusEntry& a = entry(anchor);
  std::vector<std::size_t> out;
  for (std::size_t id : by_group_.at(group_key(a.dataset, a.group))) {
    if (id != anchor) out.push_back(id);
  }
  return out;
}

std::vector<std::size_t> Corpus::shared_object_members(std::size_t anchor) const {
  const CorpusEntry& a = entry(anchor);
  std::vector<std::size_t> out;
  for (std::size_t id :
       by_scene_object_.at(scene_object_key(a.scene_id, a.target_object))) {
    if (id != anchor) out.push_back(id);
  }
  return out;
}

std::vector<std::size_t> Corpus::scene_negatives(std::size_t anchor) const {
  const CorpusEntry& a = entry(anchor);
  std::vector<std::size_t> out;
  for (std::size_t id : by_dataset_scene_.at(dataset_scene_key(a.dataset, a.scene_id))) {
    if (entries_[id].target_object != a.target_object) out.push_back(id);
  }
  return out;
}

TripletSample sample_triplet(const Corpus& corpus, Rng& rng) {
  if (corpus.size() == 0) throw StateError("sample_triplet: empty corpus");
  constexpr int kMaxAttempts = 10000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const std::size_t anchor = rng.index(corpus.size());
    const auto positives = corpus.group_members(anchor);
    if (positives.empty()) continue;
    const auto negatives = corpus.scene_negatives(anchor);
    if (negatives.empty()) continue;
    return {anchor, positives[rng.index(positives.size())],
            negatives[rng.index(negatives.size())]};
  }
  throw StateError("sample_triplet: no scene offers both a paraphrase and a negative");
}

MiningIndex build_mining_index(const Corpus& corpus,
                               const model::GroundingModel& model, int epoch) {
  MiningIndex index;
  index.epoch = epoch;
  index.language.reserve(corpus.size());
  index.norms.reserve(corpus.size());
  TapeSuspend frozen;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Tensor sentence = model.encode_language(corpus.expression(i).tokens).sentence;
    std::vector<double> row(sentence.values().begin(), sentence.values().end());
    double norm_sq = 0.0;
    for (double v : row) norm_sq += v * v;
    index.norms.push_back(std::sqrt(norm_sq));
    index.language.push_back(std::move(row));
    index.by_category[corpus.entry(i).target_category].push_back(i);
  }
  return index;
}

SamplingMode sampling_mode_from_name(const std::string& name) {
  if (name == "intra") return SamplingMode::kIntra;
  if (name == "inter") return SamplingMode::kInter;
  throw DomainError("unknown sampling mode: " + name);
}

const char* sampling_mode_name(SamplingMode mode) {
  return mode == SamplingMode::kIntra ? "intra" : "inter";
}

namespace {

bool eligible_negative(const Corpus& corpus, std::size_t anchor, std::size_t candidate,
                       SamplingMode mode) {
  const CorpusEntry& a = corpus.entry(anchor);
  const CorpusEntry& c = corpus.entry(candidate);
  if (c.scene_id == a.scene_id) return false;
  return mode == SamplingMode::kInter || c.dataset == a.dataset;
}

}  // namespace

std::vector<std::size_t> mine_negatives_category(const Corpus& corpus,
                                                 const MiningIndex& index,
                                                 std::size_t anchor,
                                                 std::size_t count,
                                                 SamplingMode mode, Rng& rng) {
  const CorpusEntry& a = corpus.entry(anchor);
  const auto it = index.by_category.find(a.target_category);
  if (it == index.by_category.end()) return {};
  std::vector<std::size_t> candidates;
  for (std::size_t id : it->second) {
    if (eligible_negative(corpus, anchor, id, mode)) candidates.push_back(id);
  }
  return rng.sample(candidates, count);
}

std::vector<std::size_t> mine_negatives_language(const Corpus& corpus,
                                                 const MiningIndex& index,
                                                 std::size_t anchor,
                                                 std::size_t n,
                                                 SamplingMode mode) {
  if (index.language.size() != corpus.size()) {
    throw StateError("language mining: index does not cover the corpus");
  }
  const std::vector<double>& af = index.language.at(anchor);
  const double an = index.norms.at(anchor);
  std::vector<std::pair<double, std::size_t>> ranked;  // (-similarity, id)
  for (std::size_t id = 0; id < corpus.size(); ++id) {
    if (id == anchor || !eligible_negative(corpus, anchor, id, mode)) continue;
    const std::vector<double>& row = index.language[id];
    double sim = 0.0;
    const double denom = an * index.norms[id];
    if (denom > 0.0) {
      double dot = 0.0;
      for (std::size_t j = 0; j < row.size(); ++j) dot += af[j] * row[j];
      sim = dot / denom;
    }
    ranked.emplace_back(-sim, id);
  }
  const std::size_t take = std::min(n, ranked.size());
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(take),
                    ranked.end());
  std::vector<std::size_t> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(ranked[i].second);
  return out;
}

void BatchConfig::validate() const {
  if (positives < 1) throw DomainError("batch config: need at least one positive");
  if (category_negatives < 0 || language_negatives < 0) {
    throw DomainError("batch config: negative counts must be nonnegative");
  }
  if (category_negatives + language_negatives < 1) {
    throw DomainError("batch config: need at least one negative");
  }
}

ContrastiveBatch build_contrastive_batch(const Corpus& corpus,
                                         const MiningIndex& index,
                                         std::size_t anchor,
                                         const BatchConfig& config,
                                         SamplingMode mode, Rng& rng) {
  config.validate();
  ContrastiveBatch batch;
  batch.anchor = anchor;

  const auto pool = mode == SamplingMode::kIntra
                        ? corpus.group_members(anchor)
                        : corpus.shared_object_members(anchor);
  if (pool.empty()) throw DomainError("contrastive batch: anchor has no paraphrase");
  batch.positives = rng.sample(pool, static_cast<std::size_t>(config.positives));

  const std::size_t want =
      static_cast<std::size_t>(config.category_negatives + config.language_negatives);
  if (config.mined) {
    batch.negatives = mine_negatives_category(
        corpus, index, anchor, static_cast<std::size_t>(config.category_negatives),
        mode, rng);
    const auto ranked =
        mine_negatives_language(corpus, index, anchor, want + batch.negatives.size(),
                                mode);
    for (std::size_t id : ranked) {
      if (batch.negatives.size() >= want) break;
      if (std::find(batch.negatives.begin(), batch.negatives.end(), id) ==
          batch.negatives.end()) {
        batch.negatives.push_back(id);
      }
    }
  } else {
    std::vector<std::size_t> candidates;
    for (std::size_t id = 0; id < corpus.size(); ++id) {
      if (eligible_negative(corpus, anchor, id, mode)) candidates.push_back(id);
    }
    batch.negatives = rng.sample(candidates, want);
  }
  if (batch.negatives.empty()) {
    throw DomainError("contrastive batch: no eligible negative in the corpus");
  }
  return batch;
}

}  // namespace synref::sampler
