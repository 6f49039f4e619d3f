#include "synref/cli.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "synref/config.hpp"
#include "synref/error.hpp"
#include "synref/experiment.hpp"
#include "synref/losses.hpp"
#include "synref/model.hpp"
#include "synref/sampler.hpp"
#include "synref/tensor.hpp"
#include "synref/world.hpp"

namespace synref::cli {

namespace {

namespace fs = std::filesystem;

constexpr const char* kSubcommands[] = {"gen-data", "train",   "eval",    "ablate",
                                        "transfer", "analyze", "selftest"};

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

// Config, hash, and output directory shared by every subcommand.
struct Workspace {
  config::RunConfig cfg;
  std::string hash;
  fs::path out;
};

Workspace make_workspace(const Invocation& inv) {
  Workspace ws;
  ws.cfg = config::resolve_config(inv.config_path, inv.overrides);
  if (inv.seed) {
    ws.cfg.data_seed = *inv.seed;
    ws.cfg.train.seed = *inv.seed;
  }
  ws.hash = config::config_hash_hex(ws.cfg);
  ws.out = inv.out_dir.empty() ? fs::path(".") : fs::path(inv.out_dir);
  fs::create_directories(ws.out);
  return ws;
}

void write_snapshot(const Workspace& ws) {
  write_file(ws.out / "config.resolved.json", config::resolved_json(ws.cfg));
}

std::vector<world::Dataset> build_data(const Workspace& ws) {
  return world::make_datasets(ws.cfg.data_seed, ws.cfg.data, ws.hash);
}

std::vector<const world::Dataset*> select(const std::vector<world::Dataset>& all,
                                          const std::vector<std::string>& names) {
  std::vector<const world::Dataset*> picked;
  for (const std::string& name : names) {
    const world::Dataset* found = nullptr;
    for (const world::Dataset& ds : all) {
      if (ds.name == name) {
        found = &ds;
        break;
      }
    }
    if (!found) throw DomainError("no dataset named " + name + " in the config");
    picked.push_back(found);
  }
  return picked;
}

int run_gen_data(const Workspace& ws) {
  std::vector<world::Dataset> datasets = build_data(ws);
  write_snapshot(ws);
  for (const world::Dataset& ds : datasets) {
    fs::path path = ws.out / (ds.name + ".jsonl");
    world::save_dataset_jsonl(ds, path.string());
    std::cerr << "wrote " << path.string() << " (" << ds.scenes.size()
              << " scenes, " << ds.expressions.size() << " expressions)\n";
  }
  return 0;
}

int run_train(const Workspace& ws) {
  std::vector<world::Dataset> datasets = build_data(ws);
  std::vector<const world::Dataset*> all;
  for (const world::Dataset& ds : datasets) all.push_back(&ds);
  write_snapshot(ws);

  const std::string run_id = "train-s" + std::to_string(ws.cfg.train.seed);
  std::cerr << "training " << run_id << ": " << ws.cfg.train.epochs
            << " epochs x " << ws.cfg.train.steps_per_epoch << " steps\n";
  experiment::TrainResult result = experiment::train(all, ws.cfg.train, run_id);

  fs::path metrics = ws.out / "metrics.csv";
  result.metrics.save_csv(metrics.string());
  fs::path checkpoint = ws.out / "checkpoint.bin";
  experiment::save_checkpoint(checkpoint.string(), result.model,
                              ws.cfg.train.epochs, result.rng_state, ws.hash);
  std::cerr << "wrote " << metrics.string() << "\n";
  std::cerr << "wrote " << checkpoint.string() << "\n";
  return 0;
}

int run_eval(const Workspace& ws) {
  std::vector<world::Dataset> datasets = build_data(ws);
  experiment::LoadedCheckpoint loaded =
      experiment::load_checkpoint(ws.cfg.eval.checkpoint);
  std::vector<const world::Dataset*> sets =
      select(datasets, ws.cfg.train.dataset_names);
  world::Split split = world::split_from_name(ws.cfg.eval.split);
  experiment::EvalResult result =
      experiment::evaluate(loaded.model, sets, split, ws.cfg.train.seed);

  write_snapshot(ws);
  std::size_t correct = 0;
  for (const experiment::EvalSample& s : result.samples) correct += s.correct ? 1 : 0;
  std::ostringstream csv;
  csv << "split,total,correct,accuracy\n"
      << ws.cfg.eval.split << "," << result.total << "," << correct << ","
      << fmt(result.accuracy) << "\n";
  fs::path path = ws.out / "eval.csv";
  write_file(path, csv.str());
  std::cerr << "accuracy " << fmt(result.accuracy) << " on " << result.total
            << " " << ws.cfg.eval.split << " expressions\n";
  std::cerr << "wrote " << path.string() << "\n";
  return 0;
}

int run_analyze(const Workspace& ws) {
  std::vector<world::Dataset> datasets = build_data(ws);
  experiment::LoadedCheckpoint loaded =
      experiment::load_checkpoint(ws.cfg.eval.checkpoint);
  std::vector<const world::Dataset*> sets =
      select(datasets, ws.cfg.train.dataset_names);
  world::Split split = world::split_from_name(ws.cfg.eval.split);
  experiment::SimilarityResult result =
      experiment::similarity_analysis(loaded.model, sets, split, ws.cfg.train.seed);

  write_snapshot(ws);
  std::ostringstream csv;
  csv << "split,mean,pairs,skipped\n"
      << ws.cfg.eval.split << "," << fmt(result.mean) << "," << result.pairs
      << "," << result.skipped << "\n";
  fs::path path = ws.out / "similarity.csv";
  write_file(path, csv.str());
  std::cerr << "mean synonym similarity " << fmt(result.mean) << " over "
            << result.pairs << " pairs (" << result.skipped << " scenes skipped)\n";
  std::cerr << "wrote " << path.string() << "\n";
  return 0;
}

int run_ablate(const Workspace& ws) {
  std::vector<world::Dataset> datasets = build_data(ws);
  std::vector<const world::Dataset*> sets =
      select(datasets, ws.cfg.train.dataset_names);
  write_snapshot(ws);
  experiment::MatrixReport report =
      experiment::run_ablation(sets, ws.cfg.train, ws.cfg.matrix.seeds);
  fs::path path = ws.out / "ablation.csv";
  write_file(path, report.to_csv());
  std::cerr << "wrote " << path.string() << "\n";
  return 0;
}

int run_transfer(const Workspace& ws) {
  std::vector<world::Dataset> datasets = build_data(ws);
  std::vector<const world::Dataset*> pretrain =
      select(datasets, ws.cfg.matrix.pretrain);
  std::vector<const world::Dataset*> transfer =
      select(datasets, ws.cfg.matrix.transfer);
  write_snapshot(ws);
  experiment::MatrixReport report = experiment::run_transfer(
      pretrain, transfer, ws.cfg.train, ws.cfg.matrix.seeds);
  fs::path path = ws.out / "transfer.csv";
  write_file(path, report.to_csv());
  std::cerr << "wrote " << path.string() << "\n";
  return 0;
}

// ---- selftest ----------------------------------------------------------

struct SelftestState {
  int passed = 0;
  int failed = 0;
};

void run_check(SelftestState& state, const std::string& name,
               const std::function<bool()>& body) {
  bool ok = false;
  std::string note;
  try {
    ok = body();
    if (!ok) note = "check returned false";
  } catch (const std::exception& e) {
    note = e.what();
  }
  if (ok) {
    ++state.passed;
    std::cerr << " ok  " << name << "\n";
  } else {
    ++state.failed;
    std::cerr << "FAIL " << name << ": " << note << "\n";
  }
}

model::ModelConfig selftest_model_config() {
  model::ModelConfig mc;
  mc.visual_dim = 6;
  mc.embed_dim = 4;
  mc.pos_buckets = 4;
  mc.attn_dim = 4;
  mc.gcn_hidden = 5;
  mc.instance_dim = 6;
  mc.head_hidden = 6;
  mc.proj_hidden = 4;
  mc.proj_dim = 4;
  mc.proposal_count = 6;
  return mc;
}

bool check_rng_determinism() {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 100; ++i) {
    if (a.next_u64() != b.next_u64()) return false;
  }
  Rng direct = Rng::keyed(7, "tag", 3);
  Rng scrambled = Rng::keyed(7, "other", 1);
  (void)scrambled.next_u64();
  Rng again = Rng::keyed(7, "tag", 3);
  return direct.next_u64() == again.next_u64();
}

bool check_primitive_gradients() {
  Rng rng(3);
  Tensor x = Tensor::uniform(rng, {3, 4}, -1.0, 1.0, true);
  Tensor w = Tensor::uniform(rng, {4, 5}, -1.0, 1.0, true);
  Tensor u = Tensor::uniform(rng, {15}, -1.0, 1.0, true);
  Tensor v = Tensor::uniform(rng, {15}, -1.0, 1.0, true);
  auto loss = [&]() {
    Tensor s = softmax_lastdim(matmul(relu(x), w));
    Tensor p = l2_normalize(reshape(s, {15}));
    return add(sigmoid(dot(p, u)), l2_distance(p, v));
  };
  for (Tensor* t : {&x, &w, &u}) {
    if (grad_check(loss, *t, 1e-5) >= 1e-4) return false;
  }
  return true;
}

bool check_pipeline_gradient() {
  world::WorldConfig wc = world::WorldConfig::defaults();
  wc.grid_h = 8;
  wc.grid_w = 8;
  wc.min_objects = 3;
  wc.max_objects = 3;
  world::Scene scene = world::generate_scene(5, wc);
  model::GroundingModel m(selftest_model_config(),
                          world::Lexicon::instance().vocabulary(), 3);
  Rng rng(11);
  std::vector<model::Proposal> proposals = model::propose(scene, rng, 6, 0.1);
  std::vector<world::Expression> exprs = world::generate_expressions(
      scene, scene.objects[0].id, "base", 1, rng);
  const int target = model::select_matching_proposal(proposals, scene.objects[0].box);
  auto loss = [&]() {
    model::ForwardResult f = m.forward(scene, exprs[0].tokens, proposals);
    return losses::detection_loss(f.scores, target);
  };
  std::vector<Tensor>& params = m.parameters();
  Rng probe(17);
  for (std::size_t i : {std::size_t{0}, params.size() / 2, params.size() - 1}) {
    if (grad_check_sample(loss, params[i], 1e-5, 6, probe) >= 1e-4) return false;
  }
  return true;
}

bool check_contrastive_oracle() {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const int np = rng.uniform_int(1, 4);
    const int nn = rng.uniform_int(1, 6);
    const double tau = 0.1;
    Tensor anchor = l2_normalize(Tensor::uniform(rng, {4}, -1.0, 1.0));
    std::vector<Tensor> pos, neg;
    double sum_pos = 0.0, sum_all = 0.0;
    auto term = [&](Tensor& z) {
      double d = 0.0;
      for (std::size_t i = 0; i < 4; ++i) d += anchor.values()[i] * z.values()[i];
      return std::exp(d / tau);
    };
    for (int i = 0; i < np; ++i) {
      pos.push_back(l2_normalize(Tensor::uniform(rng, {4}, -1.0, 1.0)));
      sum_pos += term(pos.back());
    }
    for (int i = 0; i < nn; ++i) {
      neg.push_back(l2_normalize(Tensor::uniform(rng, {4}, -1.0, 1.0)));
      sum_all += term(neg.back());
    }
    sum_all += sum_pos;
    const double naive = -std::log(sum_pos / sum_all);
    const double got = losses::contrastive_loss(anchor, pos, neg, tau).scalar_value();
    if (std::abs(got - naive) > 1e-10) return false;
  }
  // Identical positive and negative terms: probability mass p/(p+n).
  Tensor z = l2_normalize(Tensor::from_values({2}, {1.0, 1.0}));
  std::vector<Tensor> pos(2, z), neg(6, z);
  const double sym = losses::contrastive_loss(z, pos, neg, 0.1).scalar_value();
  return std::abs(sym - (-std::log(2.0 / 8.0))) < 1e-9;
}

bool check_triplet_formulas() {
  Tensor r = Tensor::zeros({2, 2});
  Tensor rp = Tensor::full({2, 2}, 0.1);    // distance 0.2
  Tensor rn = Tensor::full({2, 2}, 0.45);   // distance 0.9
  const double img = losses::image_triplet_loss(r, rp, rn, 1.0).scalar_value();
  if (std::abs(img - 0.3) > 1e-12) return false;
  Tensor h = Tensor::zeros({1, 3});
  Tensor hp = Tensor::from_values({1, 3}, {0.5, 0.0, 0.0});  // distance 0.5
  Tensor hn = Tensor::from_values({1, 3}, {0.1, 0.0, 0.0});  // distance 0.1
  const double ins = losses::instance_triplet_loss(h, hp, hn, 1.0).scalar_value();
  return std::abs(ins - 1.4) < 1e-12;
}

bool check_iou_oracle() {
  world::BoundingBox a{0, 0, 2, 2};
  world::BoundingBox b{1, 1, 3, 3};
  if (std::abs(world::iou(a, b) - 1.0 / 7.0) > 1e-15) return false;
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    auto random_box = [&]() {
      const int x0 = rng.uniform_int(0, 9);
      const int y0 = rng.uniform_int(0, 9);
      world::BoundingBox box;
      box.x_tl = x0;
      box.y_tl = y0;
      box.x_br = x0 + rng.uniform_int(1, 10 - x0);
      box.y_br = y0 + rng.uniform_int(1, 10 - y0);
      return box;
    };
    world::BoundingBox p = random_box();
    world::BoundingBox q = random_box();
    int inter = 0, uni = 0;
    for (int yy = 0; yy < 10; ++yy) {
      for (int xx = 0; xx < 10; ++xx) {
        const bool in_p = xx >= p.x_tl && xx < p.x_br && yy >= p.y_tl && yy < p.y_br;
        const bool in_q = xx >= q.x_tl && xx < q.x_br && yy >= q.y_tl && yy < q.y_br;
        inter += (in_p && in_q) ? 1 : 0;
        uni += (in_p || in_q) ? 1 : 0;
      }
    }
    const double expected = uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
    if (std::abs(world::iou(p, q) - expected) > 1e-12) return false;
  }
  return true;
}

bool check_attention_pooling_oracles() {
  model::GroundingModel m(selftest_model_config(),
                          world::Lexicon::instance().vocabulary(), 4);
  Rng rng(31);
  // roi_pool equals a direct mean over covered cells.
  Tensor volume = Tensor::uniform(rng, {6, 6, 3}, -1.0, 1.0);
  world::BoundingBox box{1, 2, 4, 5};
  Tensor pooled = model::GroundingModel::roi_pool(volume, box);
  for (std::size_t c = 0; c < 3; ++c) {
    double acc = 0.0;
    int n = 0;
    for (int yy = 0; yy < 6; ++yy) {
      for (int xx = 0; xx < 6; ++xx) {
        if (!box.covers_cell(yy, xx)) continue;
        acc += volume.values()[(yy * 6 + xx) * 3 + c];
        ++n;
      }
    }
    if (std::abs(pooled.values()[c] - acc / n) > 1e-12) return false;
  }
  // Word attention equals the naive mean of projected inner products.
  world::WorldConfig wc = world::WorldConfig::defaults();
  wc.grid_h = 8;
  wc.grid_w = 8;
  world::Scene scene = world::generate_scene(2, wc);
  std::vector<world::Expression> exprs = world::generate_expressions(
      scene, scene.objects[0].id, "base", 1, rng);
  model::LanguageEncoding lang = m.encode_language(exprs[0].tokens);
  Tensor row = Tensor::uniform(rng, {1, 6}, -1.0, 1.0);
  const double got = m.word_attention(lang.words, row).scalar_value();
  Tensor pw = matmul(lang.words, m.param("wattn_w"));
  Tensor pp = matmul(row, m.param("wattn_p"));
  const std::size_t t_count = lang.words.shape()[0];
  const std::size_t dim = pp.shape()[1];
  double mean_ip = 0.0;
  for (std::size_t t = 0; t < t_count; ++t) {
    double ip = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      ip += pw.values()[t * dim + d] * pp.values()[d];
    }
    mean_ip += ip;
  }
  mean_ip /= static_cast<double>(t_count);
  const double expected = 1.0 / (1.0 + std::exp(-mean_ip));
  if (std::abs(got - expected) > 1e-12) return false;
  // GCN symmetry: identical node inputs give identical output rows.
  Tensor same_pooled = Tensor::zeros({4, 6});
  Tensor same_attn = Tensor::full({4, 1}, 0.7);
  Tensor same_loc = Tensor::zeros({4, 5});
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t d = 0; d < 6; ++d) same_pooled.values_mut()[k * 6 + d] = 0.3 * d;
    for (std::size_t d = 0; d < 5; ++d) same_loc.values_mut()[k * 5 + d] = 0.1 * d;
  }
  Tensor inst = m.gcn_forward(same_pooled, same_attn, same_loc);
  const std::size_t width = inst.shape()[1];
  for (std::size_t k = 1; k < 4; ++k) {
    for (std::size_t d = 0; d < width; ++d) {
      if (inst.values()[k * width + d] != inst.values()[d]) return false;
    }
  }
  return true;
}

world::DataConfig selftest_data_config() {
  world::DataConfig dc;
  dc.world = world::WorldConfig::defaults();
  dc.world.grid_h = 8;
  dc.world.grid_w = 8;
  dc.world.min_objects = 2;
  dc.world.max_objects = 3;
  dc.expressions_per_object = 2;
  dc.split_fractions = {0.7, 0.15, 0.15};
  dc.datasets = {{"a", "base", "p", 12}, {"b", "plus", "p", 12}};
  return dc;
}

bool check_language_mining() {
  std::vector<world::Dataset> datasets = world::make_datasets(3, selftest_data_config(), "h");
  sampler::Corpus corpus({&datasets[0], &datasets[1]});
  model::GroundingModel m(selftest_model_config(),
                          world::Lexicon::instance().vocabulary(), 6);
  sampler::MiningIndex index = sampler::build_mining_index(corpus, m, 0);
  for (std::size_t anchor = 0; anchor < corpus.size(); anchor += 3) {
    std::vector<std::size_t> got =
        sampler::mine_negatives_language(corpus, index, anchor, 5,
                                         sampler::SamplingMode::kInter);
    // Brute force: cosine of frozen features, other scenes only, ties to
    // the lowest id.
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (corpus.entry(i).scene_id == corpus.entry(anchor).scene_id) continue;
      double ip = 0.0;
      for (std::size_t d = 0; d < index.language[anchor].size(); ++d) {
        ip += index.language[anchor][d] * index.language[i][d];
      }
      const double denom = index.norms[anchor] * index.norms[i];
      scored.push_back({denom == 0.0 ? 0.0 : ip / denom, i});
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (std::size_t i = 0; i < got.size(); ++i) {
      if (got[i] != scored[i].second) return false;
    }
  }
  // Mined negatives never share the anchor's scene.
  Rng rng(8);
  sampler::BatchConfig bc;
  for (int draw = 0; draw < 200; ++draw) {
    const std::size_t anchor = rng.index(corpus.size());
    sampler::ContrastiveBatch batch = sampler::build_contrastive_batch(
        corpus, index, anchor, bc, sampler::SamplingMode::kInter, rng);
    for (std::size_t id : batch.negatives) {
      if (corpus.entry(id).scene_id == corpus.entry(anchor).scene_id) return false;
    }
  }
  return true;
}

bool check_world_resolution() {
  world::WorldConfig wc = world::WorldConfig::defaults();
  Rng rng(12);
  const char* dialects[] = {"base", "plus", "reason"};
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    world::Scene scene = world::generate_scene(seed, wc);
    const std::string dialect = dialects[seed % 3];
    for (const world::ObjectInstance& object : scene.objects) {
      std::vector<world::Expression> exprs =
          world::generate_expressions(scene, object.id, dialect, 2, rng);
      for (const world::Expression& e : exprs) {
        world::ResolveOutcome outcome = world::resolve(e, scene);
        if (outcome.kind != world::ResolveOutcome::Kind::kUnique) return false;
        if (outcome.object_id != object.id) return false;
        if (dialect == "plus") {
          for (const std::string& token : e.tokens) {
            const world::Lexicon& lex = world::Lexicon::instance();
            if (lex.halfplane_index(token) || lex.extremum_index(token)) return false;
          }
        }
      }
    }
  }
  return true;
}

bool check_dataset_round_trip() {
  std::vector<world::Dataset> datasets = world::make_datasets(4, selftest_data_config(), "h");
  const std::string once = world::dataset_to_jsonl(datasets[0]);
  world::Dataset parsed = world::dataset_from_jsonl(once);
  return world::dataset_to_jsonl(parsed) == once;
}

bool check_checkpoint_round_trip(const fs::path& out) {
  model::GroundingModel m(selftest_model_config(),
                          world::Lexicon::instance().vocabulary(), 9);
  const fs::path first = out / "selftest_checkpoint_a.bin";
  const fs::path second = out / "selftest_checkpoint_b.bin";
  experiment::save_checkpoint(first.string(), m, 2, "state", "hash");
  experiment::LoadedCheckpoint loaded = experiment::load_checkpoint(first.string());
  experiment::save_checkpoint(second.string(), loaded.model, loaded.epoch,
                              loaded.rng_state, loaded.config_hash);
  std::ifstream fa(first, std::ios::binary), fb(second, std::ios::binary);
  std::stringstream ba, bb;
  ba << fa.rdbuf();
  bb << fb.rdbuf();
  const bool equal = ba.str() == bb.str() && !ba.str().empty();
  fs::remove(first);
  fs::remove(second);
  return equal;
}

bool check_config_canonicalization() {
  config::RunConfig base = config::resolve_config("", {});
  config::RunConfig reparsed = config::config_from_json_text(config::resolved_json(base));
  return config::config_hash(base) == config::config_hash(reparsed);
}

int run_selftest(const Workspace& ws) {
  write_snapshot(ws);
  SelftestState state;
  run_check(state, "rng determinism", check_rng_determinism);
  run_check(state, "primitive gradients", check_primitive_gradients);
  run_check(state, "detection pipeline gradient", check_pipeline_gradient);
  run_check(state, "contrastive loss oracle", check_contrastive_oracle);
  run_check(state, "triplet loss formulas", check_triplet_formulas);
  run_check(state, "iou oracle", check_iou_oracle);
  run_check(state, "attention and pooling oracles", check_attention_pooling_oracles);
  run_check(state, "language mining brute force", check_language_mining);
  run_check(state, "world resolution", check_world_resolution);
  run_check(state, "dataset round trip", check_dataset_round_trip);
  run_check(state, "checkpoint round trip",
            [&]() { return check_checkpoint_round_trip(ws.out); });
  run_check(state, "config canonicalization", check_config_canonicalization);
  std::cerr << "selftest: " << state.passed << "/" << (state.passed + state.failed)
            << " passed\n";
  return state.failed == 0 ? 0 : 1;
}

}  // namespace

std::string usage() {
  return
      "usage: synref <subcommand> [config.json] [options]\n"
      "\n"
      "subcommands:\n"
      "  gen-data   write every configured dataset as JSONL\n"
      "  train      train one model; writes metrics.csv and checkpoint.bin\n"
      "  eval       evaluate a checkpoint on one split; writes eval.csv\n"
      "  ablate     train the loss-ablation grid; writes ablation.csv\n"
      "  transfer   pretrain/finetune matrix on a held-out dialect; writes transfer.csv\n"
      "  analyze    synonym-pair similarity of a checkpoint; writes similarity.csv\n"
      "  selftest   run the oracle and gradient property suite\n"
      "\n"
      "options:\n"
      "  --config <path>          config file (also accepted positionally)\n"
      "  --seed <n>               override both data.seed and train.seed\n"
      "  --out <dir>              output directory (default .)\n"
      "  --override <key=value>   config override, repeatable (dotted paths)\n"
      "  --help                   show this text\n";
}

Invocation parse_args(const std::vector<std::string>& args) {
  Invocation inv;
  for (const std::string& a : args) {
    if (a == "-h" || a == "--help") {
      inv.subcommand = "help";
      return inv;
    }
  }
  if (args.empty()) throw UsageError("missing subcommand\n" + usage());
  inv.subcommand = args[0];
  bool known = false;
  for (const char* sub : kSubcommands) known = known || inv.subcommand == sub;
  if (!known) throw UsageError("unknown subcommand: " + inv.subcommand);

  auto value_of = [&](std::size_t& i) -> const std::string& {
    if (i + 1 >= args.size()) throw UsageError(args[i] + " needs a value");
    return args[++i];
  };
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--config") {
      if (!inv.config_path.empty()) throw UsageError("config path given twice");
      inv.config_path = value_of(i);
    } else if (a == "--seed") {
      const std::string& text = value_of(i);
      char* end = nullptr;
      const unsigned long long parsed = std::strtoull(text.c_str(), &end, 10);
      if (text.empty() || *end != '\0' || text[0] == '-') {
        throw UsageError("--seed needs a nonnegative integer, got: " + text);
      }
      inv.seed = parsed;
    } else if (a == "--out") {
      inv.out_dir = value_of(i);
    } else if (a == "--override") {
      inv.overrides.push_back(value_of(i));
    } else if (a.rfind("--", 0) == 0) {
      throw UsageError("unknown option: " + a);
    } else {
      if (!inv.config_path.empty()) throw UsageError("unexpected argument: " + a);
      inv.config_path = a;
    }
  }
  return inv;
}

int dispatch(const Invocation& invocation) {
  if (invocation.subcommand == "help") {
    std::cerr << usage();
    return 0;
  }
  Workspace ws = make_workspace(invocation);
  if (invocation.subcommand == "gen-data") return run_gen_data(ws);
  if (invocation.subcommand == "train") return run_train(ws);
  if (invocation.subcommand == "eval") return run_eval(ws);
  if (invocation.subcommand == "ablate") return run_ablate(ws);
  if (invocation.subcommand == "transfer") return run_transfer(ws);
  if (invocation.subcommand == "analyze") return run_analyze(ws);
  if (invocation.subcommand == "selftest") return run_selftest(ws);
  throw UsageError("unknown subcommand: " + invocation.subcommand);
}

int run_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  try {
    return dispatch(parse_args(args));
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 1;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return 1;
  } catch (const VocabError& e) {
    std::cerr << "vocabulary error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace synref::cli
