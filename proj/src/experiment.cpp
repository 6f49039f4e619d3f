#include "synref/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <utility>

#include "json.hpp"
#include "synref/error.hpp"

namespace synref::experiment {

using json = nlohmann::json;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

double parse_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw SchemaError("metrics: malformed number '" + s + "'");
    return v;
  } catch (const std::invalid_argument&) {
    throw SchemaError("metrics: malformed number '" + s + "'");
  } catch (const std::out_of_range&) {
    throw SchemaError("metrics: number out of range '" + s + "'");
  }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

/// Row i of a [K, d] matrix as a [1, d] tensor, on the tape.
Tensor matrix_row(const Tensor& mat, int row) {
  const auto& shape = mat.shape();
  const int k = static_cast<int>(shape[0]);
  std::vector<double> sel(static_cast<std::size_t>(k), 0.0);
  sel[static_cast<std::size_t>(row)] = 1.0;
  return matmul(Tensor::from_values({1, static_cast<std::size_t>(k)}, std::move(sel)), mat);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<const world::Dataset*> resolve_datasets(
    const std::vector<const world::Dataset*>& datasets,
    const std::vector<std::string>& names) {
  std::vector<const world::Dataset*> out;
  for (const auto& name : names) {
    const auto it = std::find_if(datasets.begin(), datasets.end(),
                                 [&](const world::Dataset* d) { return d->name == name; });
    if (it == datasets.end()) throw DomainError("train: unknown dataset '" + name + "'");
    out.push_back(*it);
  }
  return out;
}

const world::ObjectInstance& target_of(const world::Scene& scene,
                                       const world::Expression& e) {
  const auto* obj = scene.find_object(e.target_object_id);
  if (obj == nullptr) {
    throw StateError("experiment: expression targets missing object " +
                     std::to_string(e.target_object_id) + " in scene " + scene.id);
  }
  return *obj;
}

// Per-step scene context: one visual encoding and one proposal set per
// distinct scene, shared by every expression that names it. Paired
// datasets reuse scene ids for identical content, so the id is the key.
struct SceneContext {
  Tensor visual;
  std::vector<model::Proposal> proposals;
};

class StepCache {
 public:
  StepCache(const model::GroundingModel& m, Rng& prop_rng) : model_(m), rng_(prop_rng) {}

  const SceneContext& context(const world::Scene& scene) {
    auto it = cache_.find(scene.id);
    if (it != cache_.end()) return it->second;
    SceneContext ctx;
    ctx.visual = model_.encode_visual(scene);
    ctx.proposals = model::propose(scene, rng_, model_.config().proposal_count,
                                   model_.config().jitter);
    return cache_.emplace(scene.id, std::move(ctx)).first->second;
  }

 private:
  const model::GroundingModel& model_;
  Rng& rng_;
  std::map<std::string, SceneContext> cache_;
};

Tensor combine_parts(std::vector<Tensor>& parts, int batch_size) {
  Tensor sum = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) sum = add(sum, parts[i]);
  if (batch_size > 1) sum = scale(sum, 1.0 / static_cast<double>(batch_size));
  return sum;
}

void check_finite_loss(const losses::LossParts& parts, const Tensor& total,
                       int epoch, int step) {
  const auto where = " at epoch " + std::to_string(epoch + 1) + " step " +
                     std::to_string(step);
  if (parts.det.defined() && !parts.det.all_finite())
    throw StateError("train aborted: non-finite detection loss" + where);
  if (parts.img.defined() && !parts.img.all_finite())
    throw StateError("train aborted: non-finite image triplet loss" + where);
  if (parts.ins.defined() && !parts.ins.all_finite())
    throw StateError("train aborted: non-finite instance loss" + where);
  if (!total.all_finite())
    throw StateError("train aborted: non-finite total loss" + where);
}

model::GroundingModel clone_model(const model::GroundingModel& m) {
  model::GroundingModel copy(m.config(), m.vocabulary(), 0);
  auto& dst = copy.parameters();
  const auto& src = m.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto out = dst[i].values_mut();
    const auto in = src[i].values();
    std::copy(in.begin(), in.end(), out.begin());
  }
  return copy;
}

// Length-prefixed binary primitives for the checkpoint format.
constexpr char kMagic[8] = {'S', 'Y', 'N', 'R', 'E', 'F', 'C', 'K'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw SchemaError("checkpoint: truncated file");
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw SchemaError("checkpoint: truncated file");
  return v;
}

std::string read_string(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (1ull << 32)) throw SchemaError("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw SchemaError("checkpoint: truncated file");
  return s;
}

json model_config_json(const model::ModelConfig& c,
                       const std::vector<std::string>& vocabulary) {
  return json{{"visual_dim", c.visual_dim},
              {"embed_dim", c.embed_dim},
              {"pos_buckets", c.pos_buckets},
              {"attn_dim", c.attn_dim},
              {"gcn_hidden", c.gcn_hidden},
              {"instance_dim", c.instance_dim},
              {"head_hidden", c.head_hidden},
              {"proj_hidden", c.proj_hidden},
              {"proj_dim", c.proj_dim},
              {"proposal_count", c.proposal_count},
              {"jitter", c.jitter},
              {"use_gcn", c.use_gcn},
              {"vocabulary", vocabulary}};
}

model::ModelConfig model_config_from_json(const json& j,
                                          std::vector<std::string>* vocabulary) {
  model::ModelConfig c;
  try {
    c.visual_dim = j.at("visual_dim").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.pos_buckets = j.at("pos_buckets").get<int>();
    c.attn_dim = j.at("attn_dim").get<int>();
    c.gcn_hidden = j.at("gcn_hidden").get<int>();
    c.instance_dim = j.at("instance_dim").get<int>();
    c.head_hidden = j.at("head_hidden").get<int>();
    c.proj_hidden = j.at("proj_hidden").get<int>();
    c.proj_dim = j.at("proj_dim").get<int>();
    c.proposal_count = j.at("proposal_count").get<int>();
    c.jitter = j.at("jitter").get<double>();
    c.use_gcn = j.at("use_gcn").get<bool>();
    *vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("checkpoint: bad model config: ") + e.what());
  }
  return c;
}

}  // namespace

double TrainConfig::lr_at(int epoch) const {
  const int drop_after = static_cast<int>(std::floor(lr_drop_frac * epochs));
  return epoch >= drop_after ? lr0 * lr_decay : lr0;
}

void TrainConfig::validate() const {
  if (dataset_names.empty()) throw DomainError("train config: no dataset names");
  if (epochs < 1) throw DomainError("train config: epochs must be >= 1");
  if (steps_per_epoch < 1) throw DomainError("train config: steps_per_epoch must be >= 1");
  if (batch_size < 1) throw DomainError("train config: batch_size must be >= 1");
  if (!(lr0 > 0.0)) throw DomainError("train config: lr0 must be positive");
  if (!(lr_decay > 0.0)) throw DomainError("train config: lr_decay must be positive");
  if (!(lr_drop_frac >= 0.0 && lr_drop_frac <= 1.0))
    throw DomainError("train config: lr_drop_frac must be in [0, 1]");
  if (eval_every < 1) throw DomainError("train config: eval_every must be >= 1");
  loss.validate();
  model.validate();
  batch.validate();
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "run_id,epoch,loss_det,loss_img,loss_ins,acc_val,acc_test,sim_mean\n";
  for (const auto& r : rows) {
    os << r.run_id << ',' << r.epoch << ',' << fmt_double(r.loss_det) << ','
       << fmt_double(r.loss_img) << ',' << fmt_double(r.loss_ins) << ','
       << fmt_double(r.acc_val) << ',' << fmt_double(r.acc_test) << ','
       << fmt_double(r.sim_mean) << '\n';
  }
  return os.str();
}

void MetricsReport::save_csv(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("metrics: cannot open '" + path + "' for writing");
  os << to_csv();
  if (!os) throw IoError("metrics: write to '" + path + "' failed");
}

MetricsReport metrics_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line))
    throw SchemaError("metrics: empty file");
  if (line != "run_id,epoch,loss_det,loss_img,loss_ins,acc_val,acc_test,sim_mean")
    throw SchemaError("metrics: unexpected header '" + line + "'");
  MetricsReport report;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 8)
      throw SchemaError("metrics: expected 8 columns, got " + std::to_string(fields.size()));
    MetricsRow r;
    r.run_id = fields[0];
    r.epoch = static_cast<int>(parse_double(fields[1]));
    r.loss_det = parse_double(fields[2]);
    r.loss_img = parse_double(fields[3]);
    r.loss_ins = parse_double(fields[4]);
    r.acc_val = parse_double(fields[5]);
    r.acc_test = parse_double(fields[6]);
    r.sim_mean = parse_double(fields[7]);
    report.rows.push_back(std::move(r));
  }
  return report;
}

TrainResult train(const std::vector<const world::Dataset*>& datasets,
                  const TrainConfig& config, const std::string& run_id,
                  std::optional<ResumeState> resume) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();

  const auto sets = resolve_datasets(datasets, config.dataset_names);
  const auto& vocab = sets.front()->vocabulary;
  for (const auto* ds : sets) {
    if (ds->vocabulary != vocab)
      throw VocabError("train: datasets disagree on vocabulary");
  }

  sampler::Corpus corpus(sets);

  model::GroundingModel m = resume ? std::move(resume->model)
                                   : model::GroundingModel(config.model, vocab, config.seed);
  if (m.vocabulary() != vocab)
    throw VocabError("train: model vocabulary does not match the datasets");

  int start_epoch = 0;
  Rng sample_rng = Rng::keyed(config.seed, "train.sample", 0);
  Rng prop_rng = Rng::keyed(config.seed, "train.prop", 0);
  if (resume) {
    start_epoch = resume->epoch;
    if (start_epoch < 0 || start_epoch > config.epochs)
      throw DomainError("train: checkpoint epoch " + std::to_string(start_epoch) +
                        " is outside the schedule of " + std::to_string(config.epochs));
    if (!resume->rng_state.empty()) {
      const auto cut = resume->rng_state.find('\n');
      if (cut == std::string::npos)
        throw SchemaError("train: malformed rng state in checkpoint");
      sample_rng.set_state(resume->rng_state.substr(0, cut));
      prop_rng.set_state(resume->rng_state.substr(cut + 1));
    }
  }

  TrainResult result{std::move(m), {}, {}};
  auto& model_ = result.model;
  const auto& loss = config.loss;

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    sampler::MiningIndex index;
    if (loss.use_ins_cl) index = sampler::build_mining_index(corpus, model_, epoch);

    const double lr = config.lr_at(epoch);
    double sum_det = 0.0, sum_img = 0.0, sum_ins = 0.0;

    for (int step = 0; step < config.steps_per_epoch; ++step) {
      Tape tape;
      StepCache cache(model_, prop_rng);

      // Sampling first: its domain errors (no paraphrase, no negatives)
      // describe the corpus, not the numerics.
      struct AnchorPlan {
        sampler::TripletSample tri;
        std::optional<sampler::ContrastiveBatch> batch;
      };
      std::vector<AnchorPlan> plans;
      for (int b = 0; b < config.batch_size; ++b) {
        AnchorPlan plan{sampler::sample_triplet(corpus, sample_rng), std::nullopt};
        if (loss.use_ins_cl) {
          plan.batch = sampler::build_contrastive_batch(
              corpus, index, plan.tri.anchor, config.batch, config.mode, sample_rng);
        }
        plans.push_back(std::move(plan));
      }

      try {
        std::vector<Tensor> det_parts, img_parts, ins_parts;
        for (const auto& plan : plans) {
          const auto& tri = plan.tri;
          const auto& expr = corpus.expression(tri.anchor);
          const auto& scene = corpus.scene(tri.anchor);
          const auto& ctx = cache.context(scene);
          const auto fwd = model_.forward(scene, expr.tokens, ctx.proposals, &ctx.visual);
          const int matched = model::select_matching_proposal(
              ctx.proposals, target_of(scene, expr).box);

          if (loss.use_det) det_parts.push_back(losses::detection_loss(fwd.scores, matched));

          const auto& pos_tokens = corpus.expression(tri.positive).tokens;
          const auto& neg_expr = corpus.expression(tri.negative);

          if (loss.use_img) {
            const Tensor r_pos = model_.image_attention(
                model_.encode_language(pos_tokens).sentence, ctx.visual);
            const Tensor r_neg = model_.image_attention(
                model_.encode_language(neg_expr.tokens).sentence, ctx.visual);
            img_parts.push_back(
                losses::image_triplet_loss(fwd.response, r_pos, r_neg, loss.alpha));
          }

          if (loss.use_ins_tri) {
            const auto fwd_pos = model_.forward(scene, pos_tokens, ctx.proposals, &ctx.visual);
            const auto fwd_neg = model_.forward(scene, neg_expr.tokens, ctx.proposals, &ctx.visual);
            const int matched_neg = model::select_matching_proposal(
                ctx.proposals, target_of(scene, neg_expr).box);
            ins_parts.push_back(losses::instance_triplet_loss(
                matrix_row(fwd.instance, matched), matrix_row(fwd_pos.instance, matched),
                matrix_row(fwd_neg.instance, matched_neg), loss.alpha));
          }

          if (plan.batch) {
            const Tensor z_anchor = model_.project(matrix_row(fwd.instance, matched));
            auto project_entry = [&](std::size_t id) {
              const auto& e = corpus.expression(id);
              const auto& sc = corpus.scene(id);
              const auto& c = cache.context(sc);
              const auto f = model_.forward(sc, e.tokens, c.proposals, &c.visual);
              const int mi = model::select_matching_proposal(c.proposals,
                                                             target_of(sc, e).box);
              return model_.project(matrix_row(f.instance, mi));
            };
            std::vector<Tensor> zp, zn;
            for (const auto id : plan.batch->positives) zp.push_back(project_entry(id));
            for (const auto id : plan.batch->negatives) zn.push_back(project_entry(id));
            ins_parts.push_back(losses::contrastive_loss(z_anchor, zp, zn, loss.tau));
          }
        }

        losses::LossParts parts;
        if (!det_parts.empty()) parts.det = combine_parts(det_parts, config.batch_size);
        if (!img_parts.empty()) parts.img = combine_parts(img_parts, config.batch_size);
        if (!ins_parts.empty()) parts.ins = combine_parts(ins_parts, config.batch_size);
        const Tensor total = losses::total_loss(parts, loss);
        check_finite_loss(parts, total, epoch, step);

        if (parts.det.defined()) sum_det += parts.det.scalar_value();
        if (parts.img.defined()) sum_img += parts.img.scalar_value();
        if (parts.ins.defined()) sum_ins += parts.ins.scalar_value();

        backward(total);
        for (auto& p : model_.parameters()) p.ensure_grad();
        sgd_step(model_.parameters(), lr);
      } catch (const DomainError& e) {
        throw StateError("train aborted: non-finite numerics at epoch " +
                         std::to_string(epoch + 1) + " step " + std::to_string(step) +
                         ": " + e.what());
      }
    }

    MetricsRow row;
    row.run_id = run_id;
    row.epoch = epoch + 1;
    const double steps = static_cast<double>(config.steps_per_epoch);
    row.loss_det = loss.use_det ? sum_det / steps : kNan;
    row.loss_img = loss.use_img ? sum_img / steps : kNan;
    row.loss_ins = loss.uses_instance_term() ? sum_ins / steps : kNan;

    const bool eval_now =
        ((epoch + 1) % config.eval_every == 0) || (epoch + 1 == config.epochs);
    if (eval_now) {
      row.acc_val = evaluate(model_, sets, world::Split::kVal, config.seed).accuracy;
      row.acc_test = evaluate(model_, sets, world::Split::kTest, config.seed).accuracy;
      row.sim_mean = similarity_analysis(model_, sets, world::Split::kVal, config.seed).mean;
    } else {
      row.acc_val = kNan;
      row.acc_test = kNan;
      row.sim_mean = kNan;
    }
    result.metrics.rows.push_back(std::move(row));
  }

  result.rng_state = sample_rng.state() + "\n" + prop_rng.state();
  result.metrics.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

EvalResult evaluate_scored(const std::vector<const world::Dataset*>& datasets,
                           world::Split split, std::uint64_t seed,
                           int proposal_count, double jitter,
                           const Scorer& scorer) {
  if (datasets.empty()) throw DomainError("evaluate: no datasets");
  EvalResult result;
  std::size_t correct = 0;
  for (std::size_t di = 0; di < datasets.size(); ++di) {
    const auto& ds = *datasets[di];
    const auto& split_ids = ds.expression_splits[static_cast<std::size_t>(split)];
    const std::string stream = "eval:" + ds.name + ":" + world::split_name(split);
    for (const int ei : split_ids) {
      const auto& expr = ds.expressions[static_cast<std::size_t>(ei)];
      const auto& scene = ds.scene_of(ei);
      const auto& target = target_of(scene, expr);
      Rng rng = Rng::keyed(seed, stream, static_cast<std::uint64_t>(ei));
      const auto proposals = model::propose(scene, rng, proposal_count, jitter);
      const auto scores = scorer(EvalItem{scene, expr, proposals, target.box});
      if (scores.size() != proposals.size())
        throw StateError("evaluate: scorer returned " + std::to_string(scores.size()) +
                         " scores for " + std::to_string(proposals.size()) + " proposals");
      std::size_t best = 0;
      for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = i;
      }
      EvalSample sample;
      sample.dataset = di;
      sample.expression = ei;
      sample.predicted = static_cast<int>(best);
      sample.iou = world::iou(proposals[best].box, target.box);
      sample.correct = sample.iou > 0.5;
      if (sample.correct) ++correct;
      result.samples.push_back(sample);
    }
  }
  result.total = result.samples.size();
  if (result.total == 0) throw DomainError("evaluate: selected split is empty");
  result.accuracy = static_cast<double>(correct) / static_cast<double>(result.total);
  return result;
}

EvalResult evaluate(const model::GroundingModel& m,
                    const std::vector<const world::Dataset*>& datasets,
                    world::Split split, std::uint64_t seed) {
  for (const auto* ds : datasets) {
    if (ds->vocabulary != m.vocabulary())
      throw VocabError("evaluate: model vocabulary does not match dataset '" +
                       ds->name + "'");
  }
  TapeSuspend suspend;
  std::map<std::string, Tensor> visual_cache;
  const Scorer scorer = [&](const EvalItem& item) {
    auto it = visual_cache.find(item.scene.id);
    if (it == visual_cache.end()) {
      it = visual_cache.emplace(item.scene.id, m.encode_visual(item.scene)).first;
    }
    const auto fwd = m.forward(item.scene, item.expression.tokens, item.proposals,
                               &it->second);
    const auto row = fwd.scores.values();
    return std::vector<double>(row.begin(), row.end());
  };
  return evaluate_scored(datasets, split, seed, m.config().proposal_count,
                         m.config().jitter, scorer);
}

SimilarityResult similarity_analysis(const model::GroundingModel& m,
                                     const std::vector<const world::Dataset*>& datasets,
                                     world::Split split, std::uint64_t seed) {
  for (const auto* ds : datasets) {
    if (ds->vocabulary != m.vocabulary())
      throw VocabError("similarity: model vocabulary does not match dataset '" +
                       ds->name + "'");
  }
  TapeSuspend suspend;
  SimilarityResult result;
  double sum = 0.0;
  for (const auto* dsp : datasets) {
    const auto& ds = *dsp;
    // Split expressions bucketed per scene, then per target object.
    std::map<int, std::map<int, std::vector<int>>> by_scene;
    for (const int ei : ds.expression_splits[static_cast<std::size_t>(split)]) {
      const auto& e = ds.expressions[static_cast<std::size_t>(ei)];
      by_scene[ds.expression_scene[static_cast<std::size_t>(ei)]][e.target_object_id]
          .push_back(ei);
    }
    const std::string stream = "sim:" + ds.name + ":" + world::split_name(split);
    for (const int si : ds.scene_splits[static_cast<std::size_t>(split)]) {
      std::vector<std::pair<int, const std::vector<int>*>> eligible;
      const auto scene_it = by_scene.find(si);
      if (scene_it != by_scene.end()) {
        for (const auto& [obj, ids] : scene_it->second) {
          if (ids.size() >= 2) eligible.emplace_back(obj, &ids);
        }
      }
      if (eligible.empty()) {
        ++result.skipped;
        continue;
      }
      Rng rng = Rng::keyed(seed, stream, static_cast<std::uint64_t>(si));
      const auto& [obj_id, ids] = eligible[rng.index(eligible.size())];
      const std::size_t first = rng.index(ids->size());
      std::size_t second = rng.index(ids->size() - 1);
      if (second >= first) ++second;
      const auto& scene = ds.scenes[static_cast<std::size_t>(si)];
      const auto proposals = model::propose(scene, rng, m.config().proposal_count,
                                            m.config().jitter);
      const Tensor visual = m.encode_visual(scene);
      const auto& ea = ds.expressions[static_cast<std::size_t>((*ids)[first])];
      const auto& eb = ds.expressions[static_cast<std::size_t>((*ids)[second])];
      const auto fa = m.forward(scene, ea.tokens, proposals, &visual);
      const auto fb = m.forward(scene, eb.tokens, proposals, &visual);
      const int matched = model::select_matching_proposal(
          proposals, target_of(scene, ea).box);
      const std::size_t d = fa.instance.shape()[1];
      const auto va = fa.instance.values().subspan(static_cast<std::size_t>(matched) * d, d);
      const auto vb = fb.instance.values().subspan(static_cast<std::size_t>(matched) * d, d);
      sum += cosine(va, vb);
      ++result.pairs;
    }
  }
  result.mean = result.pairs > 0 ? sum / static_cast<double>(result.pairs) : kNan;
  return result;
}

void save_checkpoint(const std::string& path, const model::GroundingModel& m,
                     int epoch, const std::string& rng_state,
                     const std::string& config_hash) {
  if (epoch < 0) throw DomainError("checkpoint: negative epoch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof kMagic);
  write_u32(os, static_cast<std::uint32_t>(kCheckpointSchema));
  write_string(os, config_hash);
  write_string(os, model_config_json(m.config(), m.vocabulary()).dump());
  write_u32(os, static_cast<std::uint32_t>(epoch));
  write_string(os, rng_state);
  const auto& names = m.parameter_names();
  const auto& params = m.parameters();
  write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    write_string(os, names[i]);
    const auto& shape = params[i].shape();
    write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (const auto dim : shape) write_u64(os, static_cast<std::uint64_t>(dim));
    const auto values = params[i].values();
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(double)));
  }
  if (!os) throw IoError("checkpoint: write to '" + path + "' failed");
}

LoadedCheckpoint load_checkpoint(const std::string& path,
                                 const std::optional<std::string>& expected_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[8] = {};
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw SchemaError("checkpoint: bad magic in '" + path + "'");
  const auto schema = read_u32(is);
  if (schema != static_cast<std::uint32_t>(kCheckpointSchema))
    throw SchemaError("checkpoint: unsupported schema version " + std::to_string(schema));
  const std::string config_hash = read_string(is);
  if (expected_hash && config_hash != *expected_hash)
    throw SchemaError("checkpoint: config hash mismatch (stored " + config_hash +
                      ", expected " + *expected_hash + ")");
  json config_json;
  try {
    config_json = json::parse(read_string(is));
  } catch (const json::exception& e) {
    throw SchemaError(std::string("checkpoint: bad config json: ") + e.what());
  }
  const int epoch = static_cast<int>(read_u32(is));
  const std::string rng_state = read_string(is);

  std::vector<std::string> vocabulary;
  const auto config = model_config_from_json(config_json, &vocabulary);
  model::GroundingModel m(config, std::move(vocabulary), 0);

  const auto count = read_u32(is);
  const auto& names = m.parameter_names();
  if (count != names.size())
    throw SchemaError("checkpoint: expected " + std::to_string(names.size()) +
                      " parameters, found " + std::to_string(count));
  auto& params = m.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string name = read_string(is);
    if (name != names[i])
      throw SchemaError("checkpoint: parameter '" + name + "' where '" + names[i] +
                        "' was expected");
    const auto ndim = read_u32(is);
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d)
      shape.push_back(static_cast<std::size_t>(read_u64(is)));
    if (shape != params[i].shape())
      throw SchemaError("checkpoint: parameter '" + name + "' has unexpected shape");
    auto out = params[i].values_mut();
    is.read(reinterpret_cast<char*>(out.data()),
            static_cast<std::streamsize>(out.size() * sizeof(double)));
    if (!is) throw SchemaError("checkpoint: truncated file");
  }
  return LoadedCheckpoint{std::move(m), epoch, rng_state, config_hash};
}

std::vector<AblationSpec> ablation_grid() {
  return {
      {"baseline", false, false, false, true, true},
      {"img", true, false, false, true, true},
      {"ins_tri", false, true, false, true, true},
      {"ins_cl", false, false, true, true, true},
      {"img_ins_tri", true, true, false, true, true},
      {"full", true, false, true, true, true},
      {"full_no_mining", true, false, true, false, true},
      {"full_no_gcn", true, false, true, true, false},
  };
}

std::string MatrixReport::to_csv() const {
  std::ostringstream os;
  os << "name,seed,acc_val,acc_test,sim_val,sim_test\n";
  const auto emit = [&os](const MatrixCell& c, const std::string& seed_field) {
    os << c.name << ',' << seed_field << ',' << fmt_double(c.acc_val) << ','
       << fmt_double(c.acc_test) << ',' << fmt_double(c.sim_val) << ','
       << fmt_double(c.sim_test) << '\n';
  };
  for (const auto& c : cells) emit(c, std::to_string(c.seed));
  for (const auto& c : means) emit(c, "mean");
  return os.str();
}

const MatrixCell& MatrixReport::mean_of(const std::string& name) const {
  const auto it = std::find_if(means.begin(), means.end(),
                               [&](const MatrixCell& c) { return c.name == name; });
  if (it == means.end()) throw StateError("matrix report: no mean row named '" + name + "'");
  return *it;
}

namespace {

void append_means(MatrixReport& report, const std::vector<std::string>& order) {
  for (const auto& name : order) {
    MatrixCell mean;
    mean.name = name;
    std::size_t n = 0;
    for (const auto& c : report.cells) {
      if (c.name != name) continue;
      mean.acc_val += c.acc_val;
      mean.acc_test += c.acc_test;
      mean.sim_val += c.sim_val;
      mean.sim_test += c.sim_test;
      ++n;
    }
    if (n == 0) throw StateError("matrix report: no cells named '" + name + "'");
    mean.acc_val /= static_cast<double>(n);
    mean.acc_test /= static_cast<double>(n);
    mean.sim_val /= static_cast<double>(n);
    mean.sim_test /= static_cast<double>(n);
    report.means.push_back(std::move(mean));
  }
}

MatrixCell measure_cell(const std::string& name, std::uint64_t seed,
                        const model::GroundingModel& m,
                        const std::vector<const world::Dataset*>& sets) {
  MatrixCell cell;
  cell.name = name;
  cell.seed = seed;
  cell.acc_val = evaluate(m, sets, world::Split::kVal, seed).accuracy;
  cell.acc_test = evaluate(m, sets, world::Split::kTest, seed).accuracy;
  cell.sim_val = similarity_analysis(m, sets, world::Split::kVal, seed).mean;
  cell.sim_test = similarity_analysis(m, sets, world::Split::kTest, seed).mean;
  return cell;
}

}  // namespace

MatrixReport run_ablation(const std::vector<const world::Dataset*>& datasets,
                          const TrainConfig& base,
                          std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw DomainError("ablation: no seeds");
  const auto sets = resolve_datasets(datasets, base.dataset_names);
  MatrixReport report;
  std::vector<std::string> order;
  for (const auto& spec : ablation_grid()) {
    order.push_back(spec.name);
    for (const auto seed : seeds) {
      TrainConfig config = base;
      config.seed = seed;
      config.loss.use_det = true;
      config.loss.use_img = spec.use_img;
      config.loss.use_ins_tri = spec.use_ins_tri;
      config.loss.use_ins_cl = spec.use_ins_cl;
      config.batch.mined = spec.mined;
      config.model.use_gcn = spec.use_gcn;
      const std::string run_id = spec.name + "-s" + std::to_string(seed);
      auto trained = train(datasets, config, run_id);
      report.cells.push_back(measure_cell(spec.name, seed, trained.model, sets));
    }
  }
  append_means(report, order);
  return report;
}

MatrixReport run_transfer(const std::vector<const world::Dataset*>& pretrain,
                          const std::vector<const world::Dataset*>& transfer,
                          const TrainConfig& base,
                          std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw DomainError("transfer: no seeds");
  if (pretrain.empty() || transfer.empty())
    throw DomainError("transfer: both stages need datasets");

  auto names_of = [](const std::vector<const world::Dataset*>& sets) {
    std::vector<std::string> names;
    for (const auto* ds : sets) names.push_back(ds->name);
    return names;
  };

  auto with_loss = [&base](bool contrastive, std::uint64_t seed,
                           const std::vector<std::string>& names) {
    TrainConfig c = base;
    c.seed = seed;
    c.dataset_names = names;
    c.loss.use_det = true;
    c.loss.use_img = contrastive;
    c.loss.use_ins_tri = false;
    c.loss.use_ins_cl = contrastive;
    return c;
  };

  const auto pre_names = names_of(pretrain);
  const auto ft_names = names_of(transfer);

  MatrixReport report;
  const std::vector<std::string> order = {"no_pretrain", "neither",  "ft_only",
                                          "pre_only",    "both",     "zero_shot_base",
                                          "zero_shot_full"};
  for (const auto seed : seeds) {
    const auto tag = "-s" + std::to_string(seed);
    auto pre_base = train(pretrain, with_loss(false, seed, pre_names), "pre_base" + tag);
    auto pre_full = train(pretrain, with_loss(true, seed, pre_names), "pre_full" + tag);

    auto finetune = [&](const std::string& name, bool contrastive,
                        const model::GroundingModel* init) {
      std::optional<ResumeState> warm;
      if (init != nullptr) warm = ResumeState{clone_model(*init), 0, ""};
      auto result = train(transfer, with_loss(contrastive, seed, ft_names),
                          name + tag, std::move(warm));
      report.cells.push_back(measure_cell(name, seed, result.model, transfer));
    };

    finetune("no_pretrain", false, nullptr);
    finetune("neither", false, &pre_base.model);
    finetune("ft_only", true, &pre_base.model);
    finetune("pre_only", false, &pre_full.model);
    finetune("both", true, &pre_full.model);

    report.cells.push_back(measure_cell("zero_shot_base", seed, pre_base.model, transfer));
    report.cells.push_back(measure_cell("zero_shot_full", seed, pre_full.model, transfer));
  }
  // Regroup per row so the CSV reads config-by-config.
  std::stable_sort(report.cells.begin(), report.cells.end(),
                   [&order](const MatrixCell& a, const MatrixCell& b) {
                     const auto ia = std::find(order.begin(), order.end(), a.name);
                     const auto ib = std::find(order.begin(), order.end(), b.name);
                     return ia < ib;
                   });
  append_means(report, order);
  return report;
}

}  // namespace synref::experiment
