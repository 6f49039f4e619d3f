#include "synref/model.hpp"

#include <algorithm>
#include <cmath>

#include "synref/error.hpp"

namespace synref::model {

using world::BoundingBox;
using world::Scene;

void ModelConfig::validate() const {
  if (visual_dim < 1 || embed_dim < 1 || pos_buckets < 1 || attn_dim < 1 ||
      gcn_hidden < 1 || instance_dim < 1 || head_hidden < 1 || proj_hidden < 1 ||
      proj_dim < 1) {
    throw DomainError("model config: all dimensions must be positive");
  }
  if (proposal_count < 1) {
    throw DomainError("model config: proposal_count must be positive");
  }
  if (jitter < 0.0 || jitter > 0.5) {
    throw DomainError("model config: jitter must be in [0, 0.5]");
  }
}

namespace {

double clamp(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

bool covers_some_center(const BoundingBox& box, int grid_h, int grid_w) {
  for (int row = 0; row < grid_h; ++row) {
    for (int col = 0; col < grid_w; ++col) {
      if (box.covers_cell(static_cast<std::size_t>(row),
                          static_cast<std::size_t>(col))) {
        return true;
      }
    }
  }
  return false;
}

}  // namespace

std::vector<Proposal> propose(const Scene& scene, Rng& rng, int k, double jitter) {
  if (k < static_cast<int>(scene.objects.size())) {
    throw DomainError("propose: need k >= object count");
  }
  const double w = scene.grid_w;
  const double h = scene.grid_h;
  std::vector<Proposal> out;
  out.reserve(static_cast<std::size_t>(k));
  for (const auto& obj : scene.objects) {
    const double dx = jitter * obj.box.width();
    const double dy = jitter * obj.box.height();
    BoundingBox box;
    box.x_tl = clamp(obj.box.x_tl + rng.uniform(-dx, dx), 0.0, w);
    box.x_br = clamp(obj.box.x_br + rng.uniform(-dx, dx), 0.0, w);
    box.y_tl = clamp(obj.box.y_tl + rng.uniform(-dy, dy), 0.0, h);
    box.y_br = clamp(obj.box.y_br + rng.uniform(-dy, dy), 0.0, h);
    out.push_back({box, ProposalSource::kJitteredGroundTruth});
  }
  while (static_cast<int>(out.size()) < k) {
    BoundingBox box;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double side_w = rng.uniform(1.0, std::min(6.0, w));
      const double side_h = rng.uniform(1.0, std::min(6.0, h));
      box.x_tl = rng.uniform(0.0, w - side_w);
      box.y_tl = rng.uniform(0.0, h - side_h);
      box.x_br = box.x_tl + side_w;
      box.y_br = box.y_tl + side_h;
      if (covers_some_center(box, scene.grid_h, scene.grid_w)) break;
    }
    out.push_back({box, ProposalSource::kDistractor});
  }
  return out;
}

int select_matching_proposal(std::span<const Proposal> proposals,
                             const BoundingBox& gt) {
  if (proposals.empty()) throw DomainError("select_matching_proposal: no proposals");
  int best = 0;
  double best_iou = world::iou(proposals[0].box, gt);
  for (std::size_t i = 1; i < proposals.size(); ++i) {
    const double v = world::iou(proposals[i].box, gt);
    if (v > best_iou) {
      best_iou = v;
      best = static_cast<int>(i);
    }
  }
  return best;
}

int predict(const Tensor& scores) {
  if (scores.shape().size() != 2 || scores.shape()[0] != 1) {
    throw ShapeError("predict: expected [1, K] scores, got " +
                     shape_str(scores.shape()));
  }
  const auto& v = scores.values();
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

Tensor scene_channels_tensor(const Scene& scene) {
  const int c = world::channel_count();
  if (scene.channels.size() !=
      static_cast<std::size_t>(scene.grid_h) * scene.grid_w * c) {
    throw ShapeError("scene channels not rendered");
  }
  return Tensor::from_values({static_cast<std::size_t>(scene.grid_h),
                              static_cast<std::size_t>(scene.grid_w),
                              static_cast<std::size_t>(c)},
                             scene.channels);
}

Tensor GroundingModel::make_param(const std::string& name, const Shape& shape,
                                  Rng& rng, double scale) {
  std::vector<double> values(shape_numel(shape), 0.0);
  if (scale != 0.0) {
    for (auto& v : values) v = rng.normal() * scale;
  }
  Tensor t = Tensor::from_values(shape, std::move(values), true);
  t.set_name(name);
  params_.push_back(t);
  names_.push_back(name);
  return t;
}

GroundingModel::GroundingModel(const ModelConfig& config,
                               std::vector<std::string> vocabulary,
                               std::uint64_t seed)
    : config_(config), vocabulary_(std::move(vocabulary)) {
  config_.validate();
  if (vocabulary_.empty()) throw DomainError("model: empty vocabulary");
  if (!std::is_sorted(vocabulary_.begin(), vocabulary_.end())) {
    throw DomainError("model: vocabulary must be sorted");
  }
  Rng rng(seed);
  const std::size_t v = static_cast<std::size_t>(config_.visual_dim);
  const std::size_t de = static_cast<std::size_t>(config_.embed_dim);
  const std::size_t l = static_cast<std::size_t>(config_.lang_dim());
  const std::size_t c = static_cast<std::size_t>(world::channel_count());
  const std::size_t da = static_cast<std::size_t>(config_.attn_dim);
  const std::size_t gh = static_cast<std::size_t>(config_.gcn_hidden);
  const std::size_t di = static_cast<std::size_t>(config_.instance_dim);
  const std::size_t hh = static_cast<std::size_t>(config_.head_hidden);
  const std::size_t ph = static_cast<std::size_t>(config_.proj_hidden);
  const std::size_t pd = static_cast<std::size_t>(config_.proj_dim);
  auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  make_param("embed", {vocabulary_.size(), de}, rng, fan(de));
  make_param("pos", {static_cast<std::size_t>(config_.pos_buckets), de}, rng, 1.0);
  make_param("lang_w1", {l, l}, rng, fan(l));
  make_param("lang_b1", {1, l}, rng, 0.0);
  make_param("lang_w2", {l, l}, rng, fan(l));
  make_param("lang_b2", {1, l}, rng, 0.0);
  make_param("vis_w1", {2 * c, v}, rng, fan(2 * c));
  make_param("vis_b1", {1, v}, rng, 0.0);
  make_param("vis_w2", {v, v}, rng, fan(v));
  make_param("vis_b2", {1, v}, rng, 0.0);
  make_param("attn_w", {l, v + 1}, rng, fan(l));
  make_param("attn_b", {1, v + 1}, rng, 0.0);
  make_param("wattn_w", {l, da}, rng, fan(l));
  make_param("wattn_p", {v, da}, rng, fan(v));
  make_param("gcn_w1", {v + 5, gh}, rng, fan(v + 5));
  make_param("gcn_w2", {gh, di}, rng, fan(gh));
  make_param("head_w1", {di + v, hh}, rng, fan(di + v));
  make_param("head_b1", {1, hh}, rng, 0.0);
  make_param("head_w2", {hh, 1}, rng, fan(hh));
  make_param("head_b2", {1, 1}, rng, 0.0);
  make_param("proj_w1", {di, ph}, rng, fan(di));
  make_param("proj_b1", {1, ph}, rng, 0.0);
  make_param("proj_w2", {ph, pd}, rng, fan(ph));
  // Nonzero so the normalized projection stays defined when the hidden
  // layer is fully inactive for some input.
  Tensor proj_b2 = make_param("proj_b2", {1, pd}, rng, 0.0);
  for (auto& value : proj_b2.values_mut()) value = 0.01;
}

Tensor& GroundingModel::param(const std::string& name) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return params_[i];
  }
  throw StateError("no parameter named " + name);
}

const Tensor& GroundingModel::param(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return params_[i];
  }
  throw StateError("no parameter named " + name);
}

Tensor GroundingModel::encode_visual(const Tensor& channels) const {
  const Shape& s = channels.shape();
  if (s.size() != 3 || s[2] != static_cast<std::size_t>(world::channel_count())) {
    throw ShapeError("encode_visual: expected [H, W, C] channels, got " +
                     shape_str(s));
  }
  const std::size_t h = s[0];
  const std::size_t w = s[1];
  const std::size_t c = s[2];
  const Tensor flat = reshape(channels, {h * w, c});
  std::vector<Tensor> context;
  context.reserve(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::vector<double> sel(c, 0.0);
    sel[ch] = 1.0;
    const Tensor plane = reshape(
        matmul(flat, Tensor::from_values({c, 1}, std::move(sel))), {h, w, 1});
    context.push_back(avg4_neighbors(plane));
  }
  const Tensor full = concat_lastdim({channels, concat_lastdim(context)});
  const Tensor x = reshape(full, {h * w, 2 * c});
  const Tensor ones = Tensor::full({h * w, 1}, 1.0);
  const Tensor h1 = relu(add(matmul(x, param("vis_w1")), matmul(ones, param("vis_b1"))));
  const Tensor out = add(matmul(h1, param("vis_w2")), matmul(ones, param("vis_b2")));
  return reshape(out, {h, w, static_cast<std::size_t>(config_.visual_dim)});
}

Tensor GroundingModel::encode_visual(const Scene& scene) const {
  return encode_visual(scene_channels_tensor(scene));
}

Tensor GroundingModel::onehot_rows(const std::vector<std::string>& tokens) const {
  const std::size_t t = tokens.size();
  const std::size_t v = vocabulary_.size();
  std::vector<double> values(t * v, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    const auto it =
        std::lower_bound(vocabulary_.begin(), vocabulary_.end(), tokens[i]);
    if (it == vocabulary_.end() || *it != tokens[i]) {
      throw VocabError("encode_language: unknown token " + tokens[i]);
    }
    values[i * v + static_cast<std::size_t>(it - vocabulary_.begin())] = 1.0;
  }
  return Tensor::from_values({t, v}, std::move(values));
}

LanguageEncoding GroundingModel::encode_language(
    const std::vector<std::string>& tokens) const {
  if (tokens.empty()) throw DomainError("encode_language: empty expression");
  const std::size_t t = tokens.size();
  const std::size_t buckets = static_cast<std::size_t>(config_.pos_buckets);
  const Tensor emb = matmul(onehot_rows(tokens), param("embed"));
  std::vector<double> pos_sel(t * buckets, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    pos_sel[i * buckets + std::min(i, buckets - 1)] = 1.0;
  }
  const Tensor pos =
      matmul(Tensor::from_values({t, buckets}, std::move(pos_sel)), param("pos"));
  const Tensor words = concat_lastdim({emb, mul(emb, pos)});
  const Tensor pool =
      matmul(Tensor::full({1, t}, 1.0 / static_cast<double>(t)), words);
  const Tensor h1 = relu(add(matmul(pool, param("lang_w1")), param("lang_b1")));
  const Tensor sentence = add(matmul(h1, param("lang_w2")), param("lang_b2"));
  return {words, sentence};
}

Tensor GroundingModel::image_attention(const Tensor& sentence,
                                       const Tensor& visual) const {
  const Shape& s = visual.shape();
  if (s.size() != 3 || s[2] != static_cast<std::size_t>(config_.visual_dim)) {
    throw ShapeError("image_attention: expected [H, W, v] visual map, got " +
                     shape_str(s));
  }
  const std::size_t h = s[0];
  const std::size_t w = s[1];
  const std::size_t v = s[2];
  const Tensor filter = add(matmul(sentence, param("attn_w")), param("attn_b"));
  std::vector<double> take_w((v + 1) * v, 0.0);
  for (std::size_t i = 0; i < v; ++i) take_w[i * v + i] = 1.0;
  std::vector<double> take_b(v + 1, 0.0);
  take_b[v] = 1.0;
  const Tensor fw = matmul(filter, Tensor::from_values({v + 1, v}, std::move(take_w)));
  const Tensor fb = matmul(filter, Tensor::from_values({v + 1, 1}, std::move(take_b)));
  const Tensor logits = add(matmul(reshape(visual, {h * w, v}), reshape(fw, {v, 1})),
                            matmul(Tensor::full({h * w, 1}, 1.0), fb));
  return reshape(sigmoid(logits), {h, w});
}

Tensor GroundingModel::fuse(const Tensor& response, const Tensor& visual) {
  return mul(response, visual);
}

namespace {

Tensor pooling_selector(const Tensor& volume, std::span<const Proposal> proposals) {
  const Shape& s = volume.shape();
  if (s.size() != 3) {
    throw ShapeError("roi_pool: expected [H, W, v] volume, got " + shape_str(s));
  }
  const std::size_t h = s[0];
  const std::size_t w = s[1];
  std::vector<double> sel(proposals.size() * h * w, 0.0);
  for (std::size_t p = 0; p < proposals.size(); ++p) {
    const BoundingBox& box = proposals[p].box;
    std::vector<std::size_t> cells;
    for (std::size_t row = 0; row < h; ++row) {
      for (std::size_t col = 0; col < w; ++col) {
        if (box.covers_cell(row, col)) cells.push_back(row * w + col);
      }
    }
    if (cells.empty()) {
      throw DomainError("roi_pool: box covers no cell centers");
    }
    const double weight = 1.0 / static_cast<double>(cells.size());
    for (std::size_t cell : cells) sel[p * h * w + cell] = weight;
  }
  return Tensor::from_values({proposals.size(), h * w}, std::move(sel));
}

}  // namespace

Tensor GroundingModel::roi_pool(const Tensor& volume, const BoundingBox& box) {
  const Proposal one{box, ProposalSource::kDistractor};
  return roi_pool_rows(volume, std::span<const Proposal>(&one, 1));
}

Tensor GroundingModel::roi_pool_rows(const Tensor& volume,
                                     std::span<const Proposal> proposals) {
  const Tensor sel = pooling_selector(volume, proposals);
  const Shape& s = volume.shape();
  return matmul(sel, reshape(volume, {s[0] * s[1], s[2]}));
}

Tensor GroundingModel::word_attention(const Tensor& words,
                                      const Tensor& pooled_row) const {
  if (words.shape().size() != 2 || words.shape()[0] == 0) {
    throw ShapeError("word_attention: expected nonempty [T, l] word features");
  }
  const Tensor pw = matmul(words, param("wattn_w"));
  const Tensor pp = matmul(pooled_row, param("wattn_p"));
  const Tensor scores =
      matmul(pw, reshape(pp, {static_cast<std::size_t>(config_.attn_dim), 1}));
  return sigmoid(mean(scores));
}

Tensor GroundingModel::location_feature(const BoundingBox& box, int grid_w,
                                        int grid_h) {
  const double w = grid_w;
  const double h = grid_h;
  return Tensor::from_values(
      {1, 5}, {box.x_tl / w, box.y_tl / h, box.x_br / w, box.y_br / h,
               box.width() * box.height() / (w * h)});
}

Tensor GroundingModel::location_rows(std::span<const Proposal> proposals,
                                     int grid_w, int grid_h) {
  std::vector<double> values;
  values.reserve(proposals.size() * 5);
  for (const auto& p : proposals) {
    const Tensor row = location_feature(p.box, grid_w, grid_h);
    const auto& v = row.values();
    values.insert(values.end(), v.begin(), v.end());
  }
  return Tensor::from_values({proposals.size(), 5}, std::move(values));
}

Tensor GroundingModel::adjacency(int k) const {
  if (k < 1) throw DomainError("adjacency: need at least one node");
  const std::size_t n = static_cast<std::size_t>(k);
  std::vector<double> values(n * n, 0.0);
  if (config_.use_gcn) {
    std::fill(values.begin(), values.end(), 1.0 / static_cast<double>(n));
  } else {
    for (std::size_t i = 0; i < n; ++i) values[i * n + i] = 1.0;
  }
  return Tensor::from_values({n, n}, std::move(values));
}

Tensor GroundingModel::gcn_forward(const Tensor& pooled, const Tensor& attn,
                                   const Tensor& locations) const {
  const std::size_t k = pooled.shape().at(0);
  if (attn.shape() != Shape{k, 1} || locations.shape() != Shape{k, 5}) {
    throw ShapeError("gcn_forward: inconsistent row counts");
  }
  const Tensor x = concat_lastdim({pooled, locations});
  const std::size_t width = x.shape()[1];
  const Tensor scaled = reshape(mul(attn, reshape(x, {k, 1, width})), {k, width});
  const Tensor a = adjacency(static_cast<int>(k));
  const Tensor h1 = relu(matmul(a, matmul(scaled, param("gcn_w1"))));
  return relu(matmul(a, matmul(h1, param("gcn_w2"))));
}

Tensor GroundingModel::detection_scores(const Tensor& instance,
                                        const Tensor& pooled) const {
  const std::size_t k = instance.shape().at(0);
  if (pooled.shape().at(0) != k) {
    throw ShapeError("detection_scores: row count mismatch");
  }
  const Tensor d = concat_lastdim({instance, pooled});
  const Tensor ones = Tensor::full({k, 1}, 1.0);
  const Tensor hid =
      relu(add(matmul(d, param("head_w1")), matmul(ones, param("head_b1"))));
  const Tensor col = add(matmul(hid, param("head_w2")), matmul(ones, param("head_b2")));
  return reshape(col, {1, k});
}

Tensor GroundingModel::project(const Tensor& row) const {
  const Tensor h1 = relu(add(matmul(row, param("proj_w1")), param("proj_b1")));
  const Tensor out = add(matmul(h1, param("proj_w2")), param("proj_b2"));
  return l2_normalize(out);
}

ForwardResult GroundingModel::forward(const Scene& scene,
                                      const std::vector<std::string>& tokens,
                                      std::span<const Proposal> proposals,
                                      const Tensor* cached_visual) const {
  ForwardResult r;
  r.visual = cached_visual != nullptr ? *cached_visual : encode_visual(scene);
  r.language = encode_language(tokens);
  r.response = image_attention(r.language.sentence, r.visual);
  r.fused = fuse(r.response, r.visual);
  r.pooled = roi_pool_rows(r.fused, proposals);
  const std::size_t k = proposals.size();
  std::vector<Tensor> attns;
  attns.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> sel(k, 0.0);
    sel[i] = 1.0;
    const Tensor row = matmul(Tensor::from_values({1, k}, std::move(sel)), r.pooled);
    attns.push_back(reshape(word_attention(r.language.words, row), {1}));
  }
  r.attn = reshape(concat_lastdim(attns), {k, 1});
  const Tensor loc = location_rows(proposals, scene.grid_w, scene.grid_h);
  r.instance = gcn_forward(r.pooled, r.attn, loc);
  r.scores = detection_scores(r.instance, r.pooled);
  return r;
}

}  // namespace synref::model
