#include "doctest.h"

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "synref/model.hpp"
#include "synref/rng.hpp"
#include "synref/sampler.hpp"
#include "synref/world.hpp"

using namespace synref;
using sampler::BatchConfig;
using sampler::Corpus;
using sampler::MiningIndex;
using sampler::SamplingMode;

namespace {

world::DataConfig paired_config(int scenes) {
  world::DataConfig cfg = world::DataConfig::defaults();
  cfg.datasets = {
      {"base_t", "base", "p", scenes},
      {"plus_t", "plus", "p", scenes},
  };
  return cfg;
}

struct Fixture {
  std::vector<world::Dataset> datasets;
  Corpus corpus;
  model::GroundingModel model;
  MiningIndex index;

  explicit Fixture(int scenes = 30, std::uint64_t seed = 5)
      : datasets(world::make_datasets(seed, paired_config(scenes), "testhash")),
        corpus({&datasets[0], &datasets[1]}),
        model(tiny_model_config(), world::Lexicon::instance().vocabulary(), 3),
        index(sampler::build_mining_index(corpus, model, 0)) {}

  static model::ModelConfig tiny_model_config() {
    model::ModelConfig mc;
    mc.visual_dim = 6;
    mc.embed_dim = 4;
    mc.pos_buckets = 3;
    mc.attn_dim = 4;
    mc.gcn_hidden = 5;
    mc.instance_dim = 6;
    mc.head_hidden = 5;
    mc.proj_hidden = 5;
    mc.proj_dim = 4;
    mc.proposal_count = 5;
    return mc;
  }
};

double cosine(const std::vector<double>& a, double an, const std::vector<double>& b,
              double bn) {
  if (an * bn <= 0.0) return 0.0;
  double dot = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) dot += a[j] * b[j];
  return dot / (an * bn);
}

}  // namespace

// ===========================================================================
// Corpus
// ===========================================================================

TEST_CASE("corpus flattens the train splits in registration order") {
  Fixture f;
  std::size_t expected = 0;
  for (const auto& d : f.datasets) {
    expected += d.expression_splits[0].size();
  }
  REQUIRE(f.corpus.size() == expected);
  REQUIRE(expected > 100);

  std::size_t last_dataset = 0;
  for (std::size_t i = 0; i < f.corpus.size(); ++i) {
    const auto& e = f.corpus.entry(i);
    CHECK(e.dataset >= last_dataset);  // registration order
    last_dataset = e.dataset;
    const auto& expr = f.corpus.expression(i);
    const auto& scene = f.corpus.scene(i);
    CHECK(expr.scene_id == e.scene_id);
    CHECK(scene.id == e.scene_id);
    CHECK(expr.target_object_id == e.target_object);
    CHECK(expr.synonym_group_id == e.group);
    const auto* obj = scene.find_object(e.target_object);
    REQUIRE(obj != nullptr);
    CHECK(obj->category == e.target_category);
  }
}

TEST_CASE("corpus candidate pools honor their definitions") {
  Fixture f;
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t anchor = rng.index(f.corpus.size());
    const auto& a = f.corpus.entry(anchor);

    for (std::size_t id : f.corpus.group_members(anchor)) {
      CHECK(id != anchor);
      CHECK(f.corpus.entry(id).dataset == a.dataset);
      CHECK(f.corpus.entry(id).group == a.group);
    }
    for (std::size_t id : f.corpus.shared_object_members(anchor)) {
      CHECK(id != anchor);
      CHECK(f.corpus.entry(id).scene_id == a.scene_id);
      CHECK(f.corpus.entry(id).target_object == a.target_object);
    }
    for (std::size_t id : f.corpus.scene_negatives(anchor)) {
      CHECK(f.corpus.entry(id).dataset == a.dataset);
      CHECK(f.corpus.entry(id).scene_id == a.scene_id);
      CHECK(f.corpus.entry(id).target_object != a.target_object);
    }
  }
  CHECK_THROWS_AS(Corpus({}), DomainError);
  CHECK_THROWS_AS(Corpus({nullptr}), DomainError);
}

TEST_CASE("paired dialects expose cross-dataset paraphrases") {
  Fixture f;
  bool saw_cross = false;
  for (std::size_t i = 0; i < f.corpus.size() && !saw_cross; ++i) {
    for (std::size_t id : f.corpus.shared_object_members(i)) {
      if (f.corpus.entry(id).dataset != f.corpus.entry(i).dataset) {
        saw_cross = true;
        break;
      }
    }
  }
  CHECK(saw_cross);
}

// ===========================================================================
// Triplet sampling
// ===========================================================================

TEST_CASE("sampled triplets satisfy every invariant over a long sweep") {
  Fixture f;
  Rng rng(17);
  for (int draw = 0; draw < 10000; ++draw) {
    const auto t = sampler::sample_triplet(f.corpus, rng);
    const auto& a = f.corpus.entry(t.anchor);
    const auto& p = f.corpus.entry(t.positive);
    const auto& n = f.corpus.entry(t.negative);
    REQUIRE(t.anchor != t.positive);
    REQUIRE(a.scene_id == p.scene_id);
    REQUIRE(a.scene_id == n.scene_id);
    REQUIRE(a.group == p.group);
    REQUIRE(a.target_object == p.target_object);
    REQUIRE(a.target_object != n.target_object);
    REQUIRE(f.corpus.expression(t.anchor).tokens !=
            f.corpus.expression(t.positive).tokens);
  }
}

TEST_CASE("triplet sampling is deterministic per seed") {
  Fixture f;
  Rng a(29);
  Rng b(29);
  for (int draw = 0; draw < 100; ++draw) {
    const auto ta = sampler::sample_triplet(f.corpus, a);
    const auto tb = sampler::sample_triplet(f.corpus, b);
    CHECK(ta.anchor == tb.anchor);
    CHECK(ta.positive == tb.positive);
    CHECK(ta.negative == tb.negative);
  }
}

TEST_CASE("triplet sampling fails cleanly when no paraphrases exist") {
  world::DataConfig cfg = paired_config(4);
  cfg.datasets = {{"solo", "base", "p", 4}};
  cfg.expressions_per_object = 1;  // every synonym group is a singleton
  auto sets = world::make_datasets(9, cfg, "testhash");
  Corpus corpus({&sets[0]});
  REQUIRE(corpus.size() > 0);
  Rng rng(1);
  CHECK_THROWS_AS(sampler::sample_triplet(corpus, rng), StateError);

  cfg.expressions_per_object = 2;
  cfg.split_fractions = {0.0, 0.5, 0.5};  // empty train split
  auto empty_sets = world::make_datasets(9, cfg, "testhash");
  Corpus empty({&empty_sets[0]});
  REQUIRE(empty.size() == 0);
  CHECK_THROWS_AS(sampler::sample_triplet(empty, rng), StateError);
}

// ===========================================================================
// Mining index
// ===========================================================================

TEST_CASE("the mining index freezes current sentence features by category") {
  Fixture f;
  CHECK(f.index.epoch == 0);
  REQUIRE(f.index.language.size() == f.corpus.size());

  std::size_t covered = 0;
  for (const auto& [category, ids] : f.index.by_category) {
    covered += ids.size();
    for (std::size_t id : ids) {
      CHECK(f.corpus.entry(id).target_category == category);
    }
  }
  CHECK(covered == f.corpus.size());

  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t i = rng.index(f.corpus.size());
    const Tensor direct =
        f.model.encode_language(f.corpus.expression(i).tokens).sentence;
    REQUIRE(f.index.language[i].size() == direct.numel());
    for (std::size_t j = 0; j < direct.numel(); ++j) {
      CHECK(f.index.language[i][j] == direct.value_at(j));
    }
  }
}

// ===========================================================================
// Category mining
// ===========================================================================

TEST_CASE("category mining returns same-category other-scene expressions") {
  Fixture f;
  Rng rng(37);
  for (int draw = 0; draw < 1000; ++draw) {
    const std::size_t anchor = rng.index(f.corpus.size());
    const auto mined = sampler::mine_negatives_category(f.corpus, f.index, anchor, 8,
                                                        SamplingMode::kInter, rng);
    const auto& a = f.corpus.entry(anchor);
    std::set<std::size_t> seen;
    for (std::size_t id : mined) {
      CHECK(seen.insert(id).second);
      CHECK(f.corpus.entry(id).target_category == a.target_category);
      CHECK(f.corpus.entry(id).scene_id != a.scene_id);
    }
  }
}

TEST_CASE("category mining respects the mode and the candidate pool size") {
  Fixture f;
  Rng rng(41);
  for (int draw = 0; draw < 200; ++draw) {
    const std::size_t anchor = rng.index(f.corpus.size());
    const auto& a = f.corpus.entry(anchor);

    std::size_t eligible = 0;
    for (std::size_t id = 0; id < f.corpus.size(); ++id) {
      const auto& c = f.corpus.entry(id);
      if (c.target_category == a.target_category && c.scene_id != a.scene_id &&
          c.dataset == a.dataset) {
        ++eligible;
      }
    }
    const auto mined = sampler::mine_negatives_category(
        f.corpus, f.index, anchor, 5000, SamplingMode::kIntra, rng);
    CHECK(mined.size() == eligible);
    for (std::size_t id : mined) {
      CHECK(f.corpus.entry(id).dataset == a.dataset);
    }
  }
}

// ===========================================================================
// Language mining
// ===========================================================================

TEST_CASE("language mining equals the brute-force top-N scan") {
  Fixture f;
  Rng rng(43);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t anchor = rng.index(f.corpus.size());
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 12));
    const SamplingMode mode =
        trial % 2 == 0 ? SamplingMode::kInter : SamplingMode::kIntra;
    const auto mined =
        sampler::mine_negatives_language(f.corpus, f.index, anchor, n, mode);

    const auto& a = f.corpus.entry(anchor);
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t id = 0; id < f.corpus.size(); ++id) {
      const auto& c = f.corpus.entry(id);
      if (id == anchor || c.scene_id == a.scene_id) continue;
      if (mode == SamplingMode::kIntra && c.dataset != a.dataset) continue;
      ranked.emplace_back(-cosine(f.index.language[anchor], f.index.norms[anchor],
                                  f.index.language[id], f.index.norms[id]),
                          id);
    }
    std::sort(ranked.begin(), ranked.end());
    REQUIRE(mined.size() == std::min(n, ranked.size()));
    for (std::size_t i = 0; i < mined.size(); ++i) {
      CHECK(mined[i] == ranked[i].second);
    }
  }
}

TEST_CASE("a verbatim duplicate in another scene ranks first") {
  Fixture f(60, 19);
  std::size_t anchor = f.corpus.size();
  for (std::size_t i = 0; i < f.corpus.size() && anchor == f.corpus.size(); ++i) {
    for (std::size_t id = 0; id < f.corpus.size(); ++id) {
      if (f.corpus.entry(id).scene_id == f.corpus.entry(i).scene_id) continue;
      if (f.corpus.expression(id).tokens == f.corpus.expression(i).tokens) {
        anchor = i;
        break;
      }
    }
  }
  REQUIRE(anchor < f.corpus.size());  // attribute phrases repeat across scenes
  const auto mined =
      sampler::mine_negatives_language(f.corpus, f.index, anchor, 1,
                                       SamplingMode::kInter);
  REQUIRE(mined.size() == 1);
  CHECK(f.corpus.expression(mined[0]).tokens == f.corpus.expression(anchor).tokens);
}

TEST_CASE("language mining with n = corpus size returns all eligible, sorted") {
  Fixture f(8, 23);
  const std::size_t anchor = 0;
  const auto mined = sampler::mine_negatives_language(
      f.corpus, f.index, anchor, f.corpus.size(), SamplingMode::kInter);

  std::size_t eligible = 0;
  for (std::size_t id = 0; id < f.corpus.size(); ++id) {
    if (id != anchor &&
        f.corpus.entry(id).scene_id != f.corpus.entry(anchor).scene_id) {
      ++eligible;
    }
  }
  REQUIRE(mined.size() == eligible);
  double prev = 2.0;
  for (std::size_t i = 0; i < mined.size(); ++i) {
    const double sim = cosine(f.index.language[anchor], f.index.norms[anchor],
                              f.index.language[mined[i]], f.index.norms[mined[i]]);
    CHECK(sim <= prev + 1e-15);
    if (i > 0 && sim == prev) CHECK(mined[i] > mined[i - 1]);
    prev = sim;
  }

  const auto again = sampler::mine_negatives_language(
      f.corpus, f.index, anchor, f.corpus.size(), SamplingMode::kInter);
  CHECK(again == mined);
}

// ===========================================================================
// Contrastive batches
// ===========================================================================

TEST_CASE("contrastive batches satisfy their invariants over a long sweep") {
  Fixture f;
  Rng rng(47);
  BatchConfig cfg;
  for (int draw = 0; draw < 1000; ++draw) {
    const std::size_t anchor = rng.index(f.corpus.size());
    const auto batch = sampler::build_contrastive_batch(f.corpus, f.index, anchor,
                                                        cfg, SamplingMode::kInter,
                                                        rng);
    const auto& a = f.corpus.entry(anchor);
    REQUIRE(batch.anchor == anchor);
    REQUIRE(!batch.positives.empty());
    REQUIRE(batch.positives.size() <= 4);
    for (std::size_t id : batch.positives) {
      CHECK(id != anchor);
      CHECK(f.corpus.entry(id).scene_id == a.scene_id);
      CHECK(f.corpus.entry(id).target_object == a.target_object);
    }
    REQUIRE(!batch.negatives.empty());
    REQUIRE(batch.negatives.size() <= 16);
    std::set<std::size_t> seen;
    for (std::size_t id : batch.negatives) {
      CHECK(seen.insert(id).second);
      CHECK(f.corpus.entry(id).scene_id != a.scene_id);
    }
  }
}

TEST_CASE("intra mode keeps the whole batch inside the anchor's dataset") {
  Fixture f;
  Rng rng(53);
  BatchConfig cfg;
  for (int draw = 0; draw < 200; ++draw) {
    const std::size_t anchor = rng.index(f.corpus.size());
    const auto batch = sampler::build_contrastive_batch(f.corpus, f.index, anchor,
                                                        cfg, SamplingMode::kIntra,
                                                        rng);
    const std::size_t home = f.corpus.entry(anchor).dataset;
    for (std::size_t id : batch.positives) {
      CHECK(f.corpus.entry(id).dataset == home);
      CHECK(f.corpus.entry(id).group == f.corpus.entry(anchor).group);
    }
    for (std::size_t id : batch.negatives) {
      CHECK(f.corpus.entry(id).dataset == home);
    }
  }
}

TEST_CASE("inter mode mixes datasets across a batch sweep") {
  Fixture f;
  Rng rng(59);
  BatchConfig cfg;
  bool pos_cross = false;
  bool neg_cross = false;
  for (int draw = 0; draw < 1000; ++draw) {
    const std::size_t anchor = rng.index(f.corpus.size());
    const auto batch = sampler::build_contrastive_batch(f.corpus, f.index, anchor,
                                                        cfg, SamplingMode::kInter,
                                                        rng);
    const std::size_t home = f.corpus.entry(anchor).dataset;
    for (std::size_t id : batch.positives) {
      if (f.corpus.entry(id).dataset != home) pos_cross = true;
    }
    for (std::size_t id : batch.negatives) {
      if (f.corpus.entry(id).dataset != home) neg_cross = true;
    }
  }
  CHECK(pos_cross);
  CHECK(neg_cross);
}

TEST_CASE("a minimal batch config yields a usable degenerate batch") {
  Fixture f;
  Rng rng(61);
  BatchConfig cfg;
  cfg.positives = 1;
  cfg.category_negatives = 0;
  cfg.language_negatives = 1;
  const auto batch = sampler::build_contrastive_batch(f.corpus, f.index, 0, cfg,
                                                      SamplingMode::kInter, rng);
  CHECK(batch.positives.size() == 1);
  CHECK(batch.negatives.size() == 1);
}

TEST_CASE("language mining tops up a category shortfall") {
  Fixture f(8, 67);
  Rng rng(67);
  BatchConfig cfg;
  cfg.category_negatives = 5000;  // far beyond any category pool
  cfg.language_negatives = 4;
  const std::size_t anchor = 0;
  const auto batch = sampler::build_contrastive_batch(f.corpus, f.index, anchor, cfg,
                                                      SamplingMode::kInter, rng);
  std::size_t eligible = 0;
  for (std::size_t id = 0; id < f.corpus.size(); ++id) {
    if (f.corpus.entry(id).scene_id != f.corpus.entry(anchor).scene_id) ++eligible;
  }
  CHECK(batch.negatives.size() == eligible);
  std::set<std::size_t> seen(batch.negatives.begin(), batch.negatives.end());
  CHECK(seen.size() == batch.negatives.size());
}

TEST_CASE("unmined batches draw uniform other-scene negatives") {
  Fixture f;
  BatchConfig cfg;
  cfg.mined = false;
  Rng a(71);
  Rng b(71);
  const auto ba = sampler::build_contrastive_batch(f.corpus, f.index, 3, cfg,
                                                   SamplingMode::kInter, a);
  const auto bb = sampler::build_contrastive_batch(f.corpus, f.index, 3, cfg,
                                                   SamplingMode::kInter, b);
  CHECK(ba.positives == bb.positives);
  CHECK(ba.negatives == bb.negatives);
  CHECK(ba.negatives.size() == 16);
  for (std::size_t id : ba.negatives) {
    CHECK(f.corpus.entry(id).scene_id != f.corpus.entry(3).scene_id);
  }
}

TEST_CASE("batch construction reports impossible requests") {
  world::DataConfig lonely = paired_config(4);
  lonely.datasets = {{"solo", "base", "p", 4}};
  lonely.expressions_per_object = 1;
  auto sets = world::make_datasets(73, lonely, "testhash");
  Corpus corpus({&sets[0]});
  model::GroundingModel m(Fixture::tiny_model_config(),
                          world::Lexicon::instance().vocabulary(), 3);
  const auto index = sampler::build_mining_index(corpus, m, 0);
  Rng rng(73);
  BatchConfig cfg;
  CHECK_THROWS_AS(sampler::build_contrastive_batch(corpus, index, 0, cfg,
                                                   SamplingMode::kIntra, rng),
                  DomainError);

  world::DataConfig single = paired_config(4);
  single.datasets = {{"one", "base", "p", 1}};
  single.split_fractions = {1.0, 0.0, 0.0};
  auto sets2 = world::make_datasets(75, single, "testhash");
  Corpus corpus2({&sets2[0]});  // one scene: no eligible negatives exist
  REQUIRE(corpus2.size() > 0);
  const auto index2 = sampler::build_mining_index(corpus2, m, 0);
  CHECK_THROWS_AS(sampler::build_contrastive_batch(corpus2, index2, 0, cfg,
                                                   SamplingMode::kInter, rng),
                  DomainError);

  BatchConfig bad_counts;
  bad_counts.category_negatives = 0;
  bad_counts.language_negatives = 0;
  CHECK_THROWS_AS(bad_counts.validate(), DomainError);
  BatchConfig neg;
  neg.language_negatives = -1;
  CHECK_THROWS_AS(neg.validate(), DomainError);
}

TEST_CASE("sampling mode names round-trip") {
  CHECK(sampler::sampling_mode_from_name("intra") == SamplingMode::kIntra);
  CHECK(sampler::sampling_mode_from_name("inter") == SamplingMode::kInter);
  CHECK(std::string(sampler::sampling_mode_name(SamplingMode::kInter)) == "inter");
  CHECK_THROWS_AS(sampler::sampling_mode_from_name("between"), DomainError);
}
