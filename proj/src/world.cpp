#include "synref/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <utility>

#include "json.hpp"
#include "synref/error.hpp"

namespace synref::world {

using json = nlohmann::json;

bool BoundingBox::covers_cell(std::size_t row, std::size_t col) const {
  const double cx = static_cast<double>(col) + 0.5;
  const double cy = static_cast<double>(row) + 0.5;
  return x_tl <= cx && cx < x_br && y_tl <= cy && cy < y_br;
}

double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  const double w = std::min(a.x_br, b.x_br) - std::max(a.x_tl, b.x_tl);
  const double h = std::min(a.y_br, b.y_br) - std::max(a.y_tl, b.y_tl);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

int size_side(SizeClass size) {
  switch (size) {
    case SizeClass::kSmall: return 2;
    case SizeClass::kMedium: return 3;
    case SizeClass::kLarge: return 4;
  }
  throw DomainError("size_side: bad size class");
}

const char* size_name(SizeClass size) {
  switch (size) {
    case SizeClass::kSmall: return "small";
    case SizeClass::kMedium: return "medium";
    case SizeClass::kLarge: return "large";
  }
  throw DomainError("size_name: bad size class");
}

SizeClass size_from_name(const std::string& name) {
  if (name == "small") return SizeClass::kSmall;
  if (name == "medium") return SizeClass::kMedium;
  if (name == "large") return SizeClass::kLarge;
  throw SchemaError("unknown size class: " + name);
}

namespace {

int find_in(const std::vector<std::string>& values, const std::string& token) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] == token) return static_cast<int>(i);
  }
  return -1;
}

int find_in_groups(const std::vector<std::vector<std::string>>& groups,
                   const std::string& token) {
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (find_in(groups[i], token) >= 0) return static_cast<int>(i);
  }
  return -1;
}

std::optional<int> to_optional(int index) {
  if (index < 0) return std::nullopt;
  return index;
}

}  // namespace

Lexicon::Lexicon() {
  categories_ = {"circle", "square", "triangle", "star", "diamond"};
  category_tokens_ = {
      {"circle", "disc"},
      {"square", "box"},
      {"triangle", "wedge"},
      {"star"},
      {"diamond", "rhombus"},
  };
  colors_ = {"red", "green", "blue", "yellow", "purple"};
  color_tokens_ = {
      {"red", "crimson"},
      {"green", "emerald"},
      {"blue", "azure"},
      {"yellow", "gold"},
      {"purple", "violet"},
  };
  size_tokens_ = {
      {"small", "tiny", "little"},
      {"medium", "midsize"},
      {"large", "big", "huge"},
  };
  wildcards_ = {"thing", "object", "shape"};
  fillers_ = {"the", "that", "is", "on"};
  halfplane_tokens_ = {
      {"left"},
      {"right"},
      {"top", "upper"},
      {"bottom", "lower"},
  };
  extremum_tokens_ = {
      {"leftmost"},
      {"rightmost"},
      {"topmost", "highest"},
      {"bottommost", "lowest"},
  };
  base_relation_tokens_ = {
      {"left_of"},
      {"right_of"},
      {"above", "over"},
      {"below", "under"},
  };
  reason_relation_tokens_ = {
      {"west_of"},
      {"east_of"},
      {"north_of"},
      {"south_of"},
  };

  std::set<std::string> vocab;
  auto add_all = [&vocab](const std::vector<std::string>& v) {
    vocab.insert(v.begin(), v.end());
  };
  auto add_groups = [&](const std::vector<std::vector<std::string>>& groups) {
    for (const auto& g : groups) add_all(g);
  };
  add_groups(category_tokens_);
  add_groups(color_tokens_);
  add_groups(size_tokens_);
  add_all(wildcards_);
  add_all(fillers_);
  add_groups(halfplane_tokens_);
  add_groups(extremum_tokens_);
  add_groups(base_relation_tokens_);
  add_groups(reason_relation_tokens_);
  vocab.insert("and");
  vocabulary_.assign(vocab.begin(), vocab.end());
}

const Lexicon& Lexicon::instance() {
  static const Lexicon lexicon;
  return lexicon;
}

std::size_t Lexicon::token_index(const std::string& token) const {
  auto it = std::lower_bound(vocabulary_.begin(), vocabulary_.end(), token);
  if (it == vocabulary_.end() || *it != token) {
    throw VocabError("unknown token: " + token);
  }
  return static_cast<std::size_t>(it - vocabulary_.begin());
}

bool Lexicon::has_token(const std::string& token) const {
  return std::binary_search(vocabulary_.begin(), vocabulary_.end(), token);
}

std::optional<int> Lexicon::category_index(const std::string& token) const {
  return to_optional(find_in_groups(category_tokens_, token));
}

std::optional<int> Lexicon::color_index(const std::string& token) const {
  return to_optional(find_in_groups(color_tokens_, token));
}

std::optional<int> Lexicon::size_index(const std::string& token) const {
  return to_optional(find_in_groups(size_tokens_, token));
}

bool Lexicon::is_wildcard(const std::string& token) const {
  return find_in(wildcards_, token) >= 0;
}

bool Lexicon::is_filler(const std::string& token) const {
  return find_in(fillers_, token) >= 0;
}

bool Lexicon::is_connector(const std::string& token) const {
  return token == "and";
}

std::optional<int> Lexicon::halfplane_index(const std::string& token) const {
  return to_optional(find_in_groups(halfplane_tokens_, token));
}

std::optional<int> Lexicon::extremum_index(const std::string& token) const {
  return to_optional(find_in_groups(extremum_tokens_, token));
}

std::optional<int> Lexicon::relation_index(const std::string& token) const {
  int i = find_in_groups(base_relation_tokens_, token);
  if (i < 0) i = find_in_groups(reason_relation_tokens_, token);
  return to_optional(i);
}

bool Lexicon::is_reason_relation(const std::string& token) const {
  return find_in_groups(reason_relation_tokens_, token) >= 0;
}

const std::vector<std::string>& Lexicon::category_tokens(int category) const {
  return category_tokens_.at(static_cast<std::size_t>(category));
}

const std::vector<std::string>& Lexicon::color_tokens(int color) const {
  return color_tokens_.at(static_cast<std::size_t>(color));
}

const std::vector<std::string>& Lexicon::size_tokens(int size) const {
  return size_tokens_.at(static_cast<std::size_t>(size));
}

const std::vector<std::string>& Lexicon::halfplane_tokens(int direction) const {
  return halfplane_tokens_.at(static_cast<std::size_t>(direction));
}

const std::vector<std::string>& Lexicon::extremum_tokens(int direction) const {
  return extremum_tokens_.at(static_cast<std::size_t>(direction));
}

const std::vector<std::string>& Lexicon::base_relation_tokens(int direction) const {
  return base_relation_tokens_.at(static_cast<std::size_t>(direction));
}

const std::vector<std::string>& Lexicon::reason_relation_tokens(int direction) const {
  return reason_relation_tokens_.at(static_cast<std::size_t>(direction));
}

int channel_count() {
  const Lexicon& lex = Lexicon::instance();
  return static_cast<int>(lex.categories().size() + lex.colors().size()) +
         kSizeClassCount + 1;
}

const ObjectInstance* Scene::find_object(int object_id) const {
  for (const auto& obj : objects) {
    if (obj.id == object_id) return &obj;
  }
  return nullptr;
}

double Scene::channel_at(int row, int col, int channel) const {
  const int c = channel_count();
  return channels.at(static_cast<std::size_t>((row * grid_w + col) * c + channel));
}

void render_channels(Scene& scene) {
  const Lexicon& lex = Lexicon::instance();
  const int n_cat = static_cast<int>(lex.categories().size());
  const int n_col = static_cast<int>(lex.colors().size());
  const int c = channel_count();
  scene.channels.assign(
      static_cast<std::size_t>(scene.grid_h) * scene.grid_w * c, 0.0);
  for (const auto& obj : scene.objects) {
    for (int row = 0; row < scene.grid_h; ++row) {
      for (int col = 0; col < scene.grid_w; ++col) {
        if (!obj.box.covers_cell(static_cast<std::size_t>(row),
                                 static_cast<std::size_t>(col))) {
          continue;
        }
        double* cell =
            scene.channels.data() + static_cast<std::size_t>(row * scene.grid_w + col) * c;
        cell[obj.category] = 1.0;
        cell[n_cat + obj.color] = 1.0;
        cell[n_cat + n_col + static_cast<int>(obj.size)] = 1.0;
        cell[c - 1] = 1.0;
      }
    }
  }
}

WorldConfig WorldConfig::defaults() {
  WorldConfig config;
  config.categories = Lexicon::instance().categories();
  config.colors = Lexicon::instance().colors();
  return config;
}

namespace {

void validate_world_config(const WorldConfig& config) {
  const Lexicon& lex = Lexicon::instance();
  if (config.grid_h < 8 || config.grid_w < 8) {
    throw DomainError("world config: grid must be at least 8x8");
  }
  if (config.min_objects < 2) {
    throw DomainError("world config: need at least 2 objects per scene");
  }
  if (config.max_objects < config.min_objects) {
    throw DomainError("world config: max_objects < min_objects");
  }
  if (config.max_objects > 8) {
    throw DomainError("world config: more than 8 objects per scene");
  }
  if (config.categories.empty() || config.colors.empty()) {
    throw DomainError("world config: empty attribute palette");
  }
  for (const auto& name : config.categories) {
    if (find_in(lex.categories(), name) < 0) {
      throw DomainError("world config: unknown category " + name);
    }
  }
  for (const auto& name : config.colors) {
    if (find_in(lex.colors(), name) < 0) {
      throw DomainError("world config: unknown color " + name);
    }
  }
  const std::size_t pairs = config.categories.size() * config.colors.size();
  if (static_cast<std::size_t>(config.max_objects) > pairs) {
    throw DomainError("world config: max_objects exceeds distinct (category, color) pairs");
  }
}

bool place_objects(Scene& scene, const WorldConfig& config, Rng& rng) {
  const Lexicon& lex = Lexicon::instance();
  const int n = rng.uniform_int(config.min_objects, config.max_objects);
  std::vector<std::pair<int, int>> pairs;
  for (const auto& cat : config.categories) {
    for (const auto& col : config.colors) {
      pairs.emplace_back(find_in(lex.categories(), cat), find_in(lex.colors(), col));
    }
  }
  rng.shuffle(pairs);
  scene.objects.clear();
  for (int i = 0; i < n; ++i) {
    ObjectInstance obj;
    obj.id = i;
    obj.category = pairs[static_cast<std::size_t>(i)].first;
    obj.color = pairs[static_cast<std::size_t>(i)].second;
    obj.size = static_cast<SizeClass>(rng.index(kSizeClassCount));
    const int side = size_side(obj.size);
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const int x = rng.uniform_int(0, config.grid_w - side);
      const int y = rng.uniform_int(0, config.grid_h - side);
      obj.box = {static_cast<double>(x), static_cast<double>(y),
                 static_cast<double>(x + side), static_cast<double>(y + side)};
      placed = true;
      for (const auto& other : scene.objects) {
        if (intersection_area(obj.box, other.box) > 0.0) {
          placed = false;
          break;
        }
      }
    }
    if (!placed) return false;
    scene.objects.push_back(obj);
  }
  return true;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const WorldConfig& config) {
  validate_world_config(config);
  Rng rng(seed);
  Scene scene;
  std::ostringstream id;
  id << "s" << std::hex << seed;
  scene.id = id.str();
  scene.grid_h = config.grid_h;
  scene.grid_w = config.grid_w;
  for (int attempt = 0; attempt < 50; ++attempt) {
    if (place_objects(scene, config, rng)) {
      render_channels(scene);
      return scene;
    }
  }
  throw GenerationError("generate_scene: could not place objects without overlap");
}

const char* style_name(Style style) {
  switch (style) {
    case Style::kAttribute: return "attribute";
    case Style::kLocation: return "location";
    case Style::kRelation: return "relation";
  }
  throw DomainError("style_name: bad style");
}

Style style_from_name(const std::string& name) {
  if (name == "attribute") return Style::kAttribute;
  if (name == "location") return Style::kLocation;
  if (name == "relation") return Style::kRelation;
  throw SchemaError("unknown expression style: " + name);
}

namespace {

// Conjunction of per-object constraints plus set-level extremum terms.
struct Filter {
  std::vector<int> categories;
  std::vector<int> colors;
  std::vector<int> sizes;
  std::vector<int> halfplanes;
  std::vector<int> extrema;
};

struct Clause {
  int relation = -1;
  Filter landmark;
};

struct ParsedExpression {
  Filter head;
  std::vector<Clause> clauses;
};

ParsedExpression parse_tokens(const std::vector<std::string>& tokens) {
  const Lexicon& lex = Lexicon::instance();
  if (tokens.empty()) throw DomainError("resolve: empty expression");
  ParsedExpression parsed;
  Filter* current = &parsed.head;
  bool expecting_relation = false;
  for (const auto& token : tokens) {
    if (!lex.has_token(token)) throw VocabError("unknown token: " + token);
    if (lex.is_filler(token)) continue;
    if (lex.is_connector(token)) {
      if (parsed.clauses.empty() || expecting_relation) {
        throw DomainError("resolve: connector without a preceding relation clause");
      }
      expecting_relation = true;
      continue;
    }
    if (auto rel = lex.relation_index(token)) {
      parsed.clauses.push_back(Clause{*rel, {}});
      current = &parsed.clauses.back().landmark;
      expecting_relation = false;
      continue;
    }
    if (expecting_relation) {
      throw DomainError("resolve: expected a relation after connector, got " + token);
    }
    if (lex.is_wildcard(token)) continue;
    if (auto cat = lex.category_index(token)) {
      current->categories.push_back(*cat);
    } else if (auto col = lex.color_index(token)) {
      current->colors.push_back(*col);
    } else if (auto size = lex.size_index(token)) {
      current->sizes.push_back(*size);
    } else if (auto hp = lex.halfplane_index(token)) {
      current->halfplanes.push_back(*hp);
    } else if (auto ex = lex.extremum_index(token)) {
      current->extrema.push_back(*ex);
    } else {
      throw DomainError("resolve: unclassifiable token " + token);
    }
  }
  if (expecting_relation) {
    throw DomainError("resolve: dangling connector");
  }
  return parsed;
}

bool in_halfplane(const ObjectInstance& obj, int direction, const Scene& scene) {
  const double cx = obj.box.center_x();
  const double cy = obj.box.center_y();
  const double mid_x = 0.5 * scene.grid_w;
  const double mid_y = 0.5 * scene.grid_h;
  switch (direction) {
    case 0: return cx < mid_x;
    case 1: return cx > mid_x;
    case 2: return cy < mid_y;
    case 3: return cy > mid_y;
  }
  throw DomainError("in_halfplane: bad direction");
}

bool relation_holds(const ObjectInstance& a, const ObjectInstance& b, int direction) {
  switch (direction) {
    case 0: return a.box.center_x() < b.box.center_x();
    case 1: return a.box.center_x() > b.box.center_x();
    case 2: return a.box.center_y() < b.box.center_y();
    case 3: return a.box.center_y() > b.box.center_y();
  }
  throw DomainError("relation_holds: bad direction");
}

bool matches_filter(const ObjectInstance& obj, const Filter& filter, const Scene& scene) {
  for (int cat : filter.categories) {
    if (obj.category != cat) return false;
  }
  for (int col : filter.colors) {
    if (obj.color != col) return false;
  }
  for (int size : filter.sizes) {
    if (static_cast<int>(obj.size) != size) return false;
  }
  for (int hp : filter.halfplanes) {
    if (!in_halfplane(obj, hp, scene)) return false;
  }
  return true;
}

double extremum_key(const ObjectInstance& obj, int direction) {
  switch (direction) {
    case 0: return obj.box.center_x();
    case 1: return -obj.box.center_x();
    case 2: return obj.box.center_y();
    case 3: return -obj.box.center_y();
  }
  throw DomainError("extremum_key: bad direction");
}

// Keeps only the objects attaining the extreme coordinate; ties keep all.
void apply_extrema(std::vector<const ObjectInstance*>& set,
                   const std::vector<int>& extrema) {
  for (int direction : extrema) {
    if (set.empty()) return;
    double best = extremum_key(*set.front(), direction);
    for (const auto* obj : set) {
      best = std::min(best, extremum_key(*obj, direction));
    }
    std::vector<const ObjectInstance*> kept;
    for (const auto* obj : set) {
      if (extremum_key(*obj, direction) == best) kept.push_back(obj);
    }
    set = std::move(kept);
  }
}

std::vector<const ObjectInstance*> filter_objects(const Scene& scene,
                                                  const Filter& filter) {
  std::vector<const ObjectInstance*> out;
  for (const auto& obj : scene.objects) {
    if (matches_filter(obj, filter, scene)) out.push_back(&obj);
  }
  return out;
}

}  // namespace

ResolveOutcome resolve_tokens(const std::vector<std::string>& tokens,
                              const Scene& scene) {
  const ParsedExpression parsed = parse_tokens(tokens);
  std::vector<const ObjectInstance*> candidates = filter_objects(scene, parsed.head);
  for (const auto& clause : parsed.clauses) {
    std::vector<const ObjectInstance*> landmarks =
        filter_objects(scene, clause.landmark);
    apply_extrema(landmarks, clause.landmark.extrema);
    std::vector<const ObjectInstance*> kept;
    for (const auto* a : candidates) {
      for (const auto* b : landmarks) {
        if (b->id != a->id && relation_holds(*a, *b, clause.relation)) {
          kept.push_back(a);
          break;
        }
      }
    }
    candidates = std::move(kept);
  }
  apply_extrema(candidates, parsed.head.extrema);
  ResolveOutcome outcome;
  if (candidates.size() == 1) {
    outcome.kind = ResolveOutcome::Kind::kUnique;
    outcome.object_id = candidates.front()->id;
  } else if (candidates.empty()) {
    outcome.kind = ResolveOutcome::Kind::kNone;
  } else {
    outcome.kind = ResolveOutcome::Kind::kAmbiguous;
  }
  return outcome;
}

ResolveOutcome resolve(const Expression& expression, const Scene& scene) {
  return resolve_tokens(expression.tokens, scene);
}

bool is_known_dialect(const std::string& dialect) {
  return dialect == "base" || dialect == "plus" || dialect == "reason";
}

namespace {

using Tokens = std::vector<std::string>;

struct Candidate {
  Tokens tokens;
  Style style = Style::kAttribute;
};

void add_attribute_candidates(const ObjectInstance& obj,
                              std::vector<Candidate>& out) {
  const Lexicon& lex = Lexicon::instance();
  const auto& cats = lex.category_tokens(obj.category);
  const auto& cols = lex.color_tokens(obj.color);
  const auto& sizes = lex.size_tokens(static_cast<int>(obj.size));
  auto add = [&out](Tokens tokens) {
    out.push_back({std::move(tokens), Style::kAttribute});
  };
  for (const auto& ct : cats) {
    add({"the", ct});
    for (const auto& col : cols) {
      add({col, ct});
      add({"the", col, ct});
      add({"the", ct, "that", "is", col});
      for (const auto& st : sizes) {
        add({st, col, ct});
        add({"the", st, col, ct});
      }
    }
    for (const auto& st : sizes) {
      add({st, ct});
      add({"the", st, ct});
    }
  }
  for (const auto& col : cols) {
    for (const auto& w : lex.wildcard_tokens()) {
      add({col, w});
      add({"the", col, w});
      for (const auto& st : sizes) {
        add({st, col, w});
      }
    }
  }
}

void add_location_candidates(const ObjectInstance& obj, const Scene& scene,
                             std::vector<Candidate>& out) {
  const Lexicon& lex = Lexicon::instance();
  const auto& cats = lex.category_tokens(obj.category);
  const auto& cols = lex.color_tokens(obj.color);
  auto add = [&out](Tokens tokens) {
    out.push_back({std::move(tokens), Style::kLocation});
  };
  for (int hp = 0; hp < 4; ++hp) {
    if (!in_halfplane(obj, hp, scene)) continue;
    for (const auto& ht : lex.halfplane_tokens(hp)) {
      for (const auto& ct : cats) {
        add({"the", ht, ct});
        add({"the", ct, "on", "the", ht});
        for (const auto& col : cols) {
          add({"the", ht, col, ct});
          add({col, ct, "on", "the", ht});
        }
      }
    }
  }
  // Non-extreme directions yield ambiguous or wrong readings and are
  // rejected by validation.
  for (int e = 0; e < 4; ++e) {
    for (const auto& et : lex.extremum_tokens(e)) {
      for (const auto& ct : cats) {
        add({"the", et, ct});
        for (const auto& col : cols) {
          add({"the", et, col, ct});
        }
      }
      for (const auto& w : lex.wildcard_tokens()) {
        add({"the", et, w});
      }
    }
  }
}

void add_relation_candidates(const ObjectInstance& obj, const Scene& scene,
                             bool reason_inventory, std::vector<Candidate>& out) {
  const Lexicon& lex = Lexicon::instance();
  const auto& cats = lex.category_tokens(obj.category);
  const auto& cols = lex.color_tokens(obj.color);
  auto add = [&out](Tokens tokens) {
    out.push_back({std::move(tokens), Style::kRelation});
  };
  for (const auto& other : scene.objects) {
    if (other.id == obj.id) continue;
    const auto& lm_cats = lex.category_tokens(other.category);
    const auto& lm_cols = lex.color_tokens(other.color);
    for (int dir = 0; dir < 4; ++dir) {
      if (!relation_holds(obj, other, dir)) continue;
      const auto& rel_tokens = reason_inventory ? lex.reason_relation_tokens(dir)
                                                : lex.base_relation_tokens(dir);
      std::vector<Tokens> heads;
      for (const auto& ct : cats) {
        heads.push_back({"the", ct});
        for (const auto& col : cols) {
          heads.push_back({col, ct});
          heads.push_back({"the", col, ct});
        }
      }
      std::vector<Tokens> landmarks;
      for (const auto& ct : lm_cats) {
        landmarks.push_back({"the", ct});
        for (const auto& col : lm_cols) {
          landmarks.push_back({"the", col, ct});
        }
      }
      for (const auto& rt : rel_tokens) {
        for (const auto& head : heads) {
          for (const auto& lm : landmarks) {
            Tokens tokens = head;
            tokens.push_back(rt);
            tokens.insert(tokens.end(), lm.begin(), lm.end());
            add(std::move(tokens));
          }
        }
      }
    }
  }
}

void add_chain_candidates(const ObjectInstance& obj, const Scene& scene,
                          std::vector<Candidate>& out) {
  const Lexicon& lex = Lexicon::instance();
  const std::string& cat = lex.categories().at(static_cast<std::size_t>(obj.category));
  const std::string& col = lex.colors().at(static_cast<std::size_t>(obj.color));
  // One clause per (landmark, direction) that holds, canonical tokens only;
  // chains pair clauses about two different landmarks.
  struct ChainClause {
    int landmark_id;
    Tokens tokens;
  };
  std::vector<ChainClause> clauses;
  for (const auto& other : scene.objects) {
    if (other.id == obj.id) continue;
    const std::string& lm_cat =
        lex.categories().at(static_cast<std::size_t>(other.category));
    const std::string& lm_col = lex.colors().at(static_cast<std::size_t>(other.color));
    for (int dir = 0; dir < 4; ++dir) {
      if (!relation_holds(obj, other, dir)) continue;
      const std::string& rt = lex.reason_relation_tokens(dir).front();
      clauses.push_back({other.id, {rt, "the", lm_col, lm_cat}});
    }
  }
  auto add = [&out](Tokens tokens) {
    out.push_back({std::move(tokens), Style::kRelation});
  };
  for (std::size_t i = 0; i < clauses.size(); ++i) {
    for (std::size_t j = i + 1; j < clauses.size(); ++j) {
      if (clauses[i].landmark_id == clauses[j].landmark_id) continue;
      for (const Tokens& head : {Tokens{"the", cat}, Tokens{"the", col, cat}}) {
        Tokens tokens = head;
        tokens.insert(tokens.end(), clauses[i].tokens.begin(), clauses[i].tokens.end());
        tokens.push_back("and");
        tokens.insert(tokens.end(), clauses[j].tokens.begin(), clauses[j].tokens.end());
        add(std::move(tokens));
      }
    }
  }
}

std::string join_tokens(const Tokens& tokens) {
  std::string s;
  for (const auto& t : tokens) {
    if (!s.empty()) s.push_back(' ');
    s += t;
  }
  return s;
}

}  // namespace

std::vector<Expression> generate_expressions(const Scene& scene, int object_id,
                                             const std::string& dialect,
                                             int count, Rng& rng) {
  if (!is_known_dialect(dialect)) {
    throw DomainError("unknown dialect: " + dialect);
  }
  if (count < 1) throw DomainError("generate_expressions: count must be positive");
  const ObjectInstance* target = scene.find_object(object_id);
  if (target == nullptr) {
    throw DomainError("generate_expressions: no object with id " +
                      std::to_string(object_id) + " in scene " + scene.id);
  }
  std::vector<Candidate> candidates;
  if (dialect == "base") {
    add_attribute_candidates(*target, candidates);
    add_location_candidates(*target, scene, candidates);
    add_relation_candidates(*target, scene, false, candidates);
  } else if (dialect == "plus") {
    add_attribute_candidates(*target, candidates);
    add_relation_candidates(*target, scene, false, candidates);
  } else {
    add_relation_candidates(*target, scene, true, candidates);
    add_chain_candidates(*target, scene, candidates);
  }

  std::set<std::string> seen;
  std::vector<Candidate> unique;
  for (auto& cand : candidates) {
    if (cand.tokens.size() > static_cast<std::size_t>(kMaxExpressionTokens)) continue;
    if (seen.insert(join_tokens(cand.tokens)).second) {
      unique.push_back(std::move(cand));
    }
  }
  rng.shuffle(unique);

  std::vector<Expression> out;
  const std::string group = scene.id + ":o" + std::to_string(object_id) + ":" + dialect;
  for (const auto& cand : unique) {
    if (static_cast<int>(out.size()) == count) break;
    const ResolveOutcome outcome = resolve_tokens(cand.tokens, scene);
    if (outcome.kind != ResolveOutcome::Kind::kUnique ||
        outcome.object_id != object_id) {
      continue;
    }
    Expression expr;
    expr.tokens = cand.tokens;
    expr.target_object_id = object_id;
    expr.scene_id = scene.id;
    expr.dialect = dialect;
    expr.style = cand.style;
    expr.synonym_group_id = group;
    out.push_back(std::move(expr));
  }
  if (static_cast<int>(out.size()) < count) {
    throw GenerationError("generate_expressions: only " +
                          std::to_string(out.size()) + " of " +
                          std::to_string(count) + " expressions for object " +
                          std::to_string(object_id) + " in scene " + scene.id +
                          " (" + dialect + ")");
  }
  return out;
}

const char* split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  throw DomainError("split_name: bad split");
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw SchemaError("unknown split: " + name);
}

const Scene& Dataset::scene_of(int expression_index) const {
  return scenes.at(static_cast<std::size_t>(
      expression_scene.at(static_cast<std::size_t>(expression_index))));
}

int Dataset::scene_index_by_id(const std::string& scene_id) const {
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (scenes[i].id == scene_id) return static_cast<int>(i);
  }
  throw DomainError("no scene with id " + scene_id);
}

DataConfig DataConfig::defaults() {
  DataConfig config;
  config.world = WorldConfig::defaults();
  config.datasets = {
      {"base", "base", "main", 1000},
      {"plus", "plus", "main", 1000},
      {"reason", "reason", "held", 200},
  };
  return config;
}

namespace {

void validate_data_config(const DataConfig& config) {
  validate_world_config(config.world);
  if (config.expressions_per_object < 1) {
    throw DomainError("data config: expressions_per_object must be positive");
  }
  double total = 0.0;
  for (double f : config.split_fractions) {
    if (f < 0.0) throw DomainError("data config: negative split fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw DomainError("data config: split fractions must sum to 1");
  }
  if (config.datasets.empty()) {
    throw DomainError("data config: no datasets requested");
  }
  std::set<std::string> names;
  for (const auto& spec : config.datasets) {
    if (spec.name.empty() || spec.pool.empty()) {
      throw DomainError("data config: dataset name and pool must be nonempty");
    }
    if (!names.insert(spec.name).second) {
      throw DomainError("data config: duplicate dataset name " + spec.name);
    }
    if (!is_known_dialect(spec.dialect)) {
      throw DomainError("data config: unknown dialect " + spec.dialect);
    }
    if (spec.scene_count < 1) {
      throw DomainError("data config: scene_count must be positive");
    }
    for (const auto& other : config.datasets) {
      if (other.pool == spec.pool && other.scene_count != spec.scene_count) {
        throw DomainError("data config: pool " + spec.pool +
                          " requested with differing scene counts");
      }
    }
  }
}

struct PoolData {
  std::vector<Scene> scenes;
  std::vector<Split> scene_split;
  // dialect -> per scene expressions (objects in id order).
  std::map<std::string, std::vector<std::vector<Expression>>> expressions;
};

PoolData build_pool(std::uint64_t master_seed, const std::string& pool,
                    int scene_count, const std::vector<std::string>& dialects,
                    const DataConfig& config) {
  PoolData data;
  const std::uint64_t pool_seed = mix64(master_seed, fnv1a64(pool));
  for (const auto& dialect : dialects) {
    data.expressions[dialect].resize(static_cast<std::size_t>(scene_count));
  }
  for (int index = 0; index < scene_count; ++index) {
    bool done = false;
    std::string last_error;
    for (int attempt = 0; attempt < 20 && !done; ++attempt) {
      const std::uint64_t scene_seed =
          mix64(pool_seed, mix64(static_cast<std::uint64_t>(index),
                                 static_cast<std::uint64_t>(attempt)));
      Scene scene;
      try {
        scene = generate_scene(scene_seed, config.world);
      } catch (const GenerationError& err) {
        last_error = err.what();
        continue;
      }
      scene.id = pool + "-" + std::to_string(index);
      std::map<std::string, std::vector<Expression>> per_dialect;
      try {
        for (const auto& dialect : dialects) {
          std::vector<Expression>& list = per_dialect[dialect];
          for (const auto& obj : scene.objects) {
            Rng rng = Rng::keyed(scene_seed, "expr:" + dialect,
                                 static_cast<std::uint64_t>(obj.id));
            auto exprs = generate_expressions(scene, obj.id, dialect,
                                              config.expressions_per_object, rng);
            list.insert(list.end(), exprs.begin(), exprs.end());
          }
        }
      } catch (const GenerationError& err) {
        last_error = err.what();
        continue;
      }
      data.scenes.push_back(std::move(scene));
      for (auto& [dialect, list] : per_dialect) {
        data.expressions[dialect][static_cast<std::size_t>(index)] = std::move(list);
      }
      done = true;
    }
    if (!done) {
      throw GenerationError("pool " + pool + ", scene " + std::to_string(index) +
                            ": no valid scene after 20 attempts; last error: " +
                            last_error);
    }
  }

  std::vector<int> order(static_cast<std::size_t>(scene_count));
  for (int i = 0; i < scene_count; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng split_rng = Rng::keyed(pool_seed, "split", 0);
  split_rng.shuffle(order);
  const int n_val =
      static_cast<int>(std::floor(scene_count * config.split_fractions[1]));
  const int n_test =
      static_cast<int>(std::floor(scene_count * config.split_fractions[2]));
  const int n_train = scene_count - n_val - n_test;
  data.scene_split.assign(static_cast<std::size_t>(scene_count), Split::kTrain);
  for (int i = 0; i < scene_count; ++i) {
    Split split = Split::kTrain;
    if (i >= n_train && i < n_train + n_val) split = Split::kVal;
    if (i >= n_train + n_val) split = Split::kTest;
    data.scene_split[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] =
        split;
  }
  return data;
}

}  // namespace

std::vector<Dataset> make_datasets(std::uint64_t seed, const DataConfig& config,
                                   const std::string& config_hash) {
  validate_data_config(config);

  std::vector<std::string> pool_order;
  std::map<std::string, std::vector<std::string>> pool_dialects;
  std::map<std::string, int> pool_scene_count;
  for (const auto& spec : config.datasets) {
    if (pool_dialects.find(spec.pool) == pool_dialects.end()) {
      pool_order.push_back(spec.pool);
      pool_scene_count[spec.pool] = spec.scene_count;
    }
    auto& dialects = pool_dialects[spec.pool];
    if (find_in(dialects, spec.dialect) < 0) dialects.push_back(spec.dialect);
  }

  std::map<std::string, PoolData> pools;
  for (const auto& pool : pool_order) {
    pools.emplace(pool, build_pool(seed, pool, pool_scene_count[pool],
                                   pool_dialects[pool], config));
  }

  std::vector<Dataset> out;
  for (const auto& spec : config.datasets) {
    const PoolData& pool = pools.at(spec.pool);
    Dataset ds;
    ds.name = spec.name;
    ds.dialect = spec.dialect;
    ds.seed = seed;
    ds.config_hash = config_hash;
    ds.vocabulary = Lexicon::instance().vocabulary();
    ds.scenes = pool.scenes;
    for (std::size_t i = 0; i < pool.scenes.size(); ++i) {
      const Split split = pool.scene_split[i];
      ds.scene_splits[static_cast<std::size_t>(split)].push_back(
          static_cast<int>(i));
      for (const auto& expr : pool.expressions.at(spec.dialect)[i]) {
        ds.expression_splits[static_cast<std::size_t>(split)].push_back(
            static_cast<int>(ds.expressions.size()));
        ds.expression_scene.push_back(static_cast<int>(i));
        ds.expressions.push_back(expr);
      }
    }
    out.push_back(std::move(ds));
  }
  return out;
}

namespace {

json scene_to_json(const Dataset& dataset, std::size_t scene_index) {
  const Lexicon& lex = Lexicon::instance();
  const Scene& scene = dataset.scenes[scene_index];
  json j;
  j["id"] = scene.id;
  j["grid_h"] = scene.grid_h;
  j["grid_w"] = scene.grid_w;
  for (int s = 0; s < 3; ++s) {
    const auto& split = dataset.scene_splits[static_cast<std::size_t>(s)];
    if (std::find(split.begin(), split.end(), static_cast<int>(scene_index)) !=
        split.end()) {
      j["split"] = split_name(static_cast<Split>(s));
    }
  }
  if (!j.contains("split")) {
    throw StateError("scene " + scene.id + " missing from all splits");
  }
  json objects = json::array();
  for (const auto& obj : scene.objects) {
    json o;
    o["id"] = obj.id;
    o["category"] = lex.categories().at(static_cast<std::size_t>(obj.category));
    o["color"] = lex.colors().at(static_cast<std::size_t>(obj.color));
    o["size"] = size_name(obj.size);
    o["box"] = {obj.box.x_tl, obj.box.y_tl, obj.box.x_br, obj.box.y_br};
    objects.push_back(std::move(o));
  }
  j["objects"] = std::move(objects);
  json expressions = json::array();
  for (std::size_t i = 0; i < dataset.expressions.size(); ++i) {
    if (dataset.expression_scene[i] != static_cast<int>(scene_index)) continue;
    const Expression& expr = dataset.expressions[i];
    json e;
    e["tokens"] = expr.tokens;
    e["target"] = expr.target_object_id;
    e["style"] = style_name(expr.style);
    e["group"] = expr.synonym_group_id;
    expressions.push_back(std::move(e));
  }
  j["expressions"] = std::move(expressions);
  return j;
}

}  // namespace

std::string dataset_to_jsonl(const Dataset& dataset) {
  json header;
  header["schema_version"] = 1;
  header["kind"] = "synref.dataset";
  header["name"] = dataset.name;
  header["dialect"] = dataset.dialect;
  header["seed"] = dataset.seed;
  header["config_hash"] = dataset.config_hash;
  header["vocabulary"] = dataset.vocabulary;
  std::string out = header.dump();
  out.push_back('\n');
  for (std::size_t i = 0; i < dataset.scenes.size(); ++i) {
    out += scene_to_json(dataset, i).dump();
    out.push_back('\n');
  }
  return out;
}

Dataset dataset_from_jsonl(const std::string& text) {
  const Lexicon& lex = Lexicon::instance();
  std::istringstream stream(text);
  std::string line;
  if (!std::getline(stream, line)) {
    throw SchemaError("dataset: empty input");
  }
  Dataset ds;
  try {
    const json header = json::parse(line);
    if (header.at("kind").get<std::string>() != "synref.dataset") {
      throw SchemaError("dataset: unexpected kind");
    }
    if (header.at("schema_version").get<int>() != 1) {
      throw SchemaError("dataset: unsupported schema_version");
    }
    ds.name = header.at("name").get<std::string>();
    ds.dialect = header.at("dialect").get<std::string>();
    ds.seed = header.at("seed").get<std::uint64_t>();
    ds.config_hash = header.at("config_hash").get<std::string>();
    ds.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();
  } catch (const json::exception& err) {
    throw SchemaError(std::string("dataset header: ") + err.what());
  }
  if (!is_known_dialect(ds.dialect)) {
    throw SchemaError("dataset: unknown dialect " + ds.dialect);
  }
  if (ds.vocabulary != lex.vocabulary()) {
    throw SchemaError("dataset: vocabulary does not match this build's lexicon");
  }
  while (std::getline(stream, line)) {
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Scene scene;
      scene.id = j.at("id").get<std::string>();
      scene.grid_h = j.at("grid_h").get<int>();
      scene.grid_w = j.at("grid_w").get<int>();
      for (const auto& o : j.at("objects")) {
        ObjectInstance obj;
        obj.id = o.at("id").get<int>();
        obj.category = find_in(lex.categories(), o.at("category").get<std::string>());
        obj.color = find_in(lex.colors(), o.at("color").get<std::string>());
        if (obj.category < 0 || obj.color < 0) {
          throw SchemaError("dataset: unknown attribute value in scene " + scene.id);
        }
        obj.size = size_from_name(o.at("size").get<std::string>());
        const auto box = o.at("box").get<std::vector<double>>();
        if (box.size() != 4) {
          throw SchemaError("dataset: box must have 4 coordinates");
        }
        obj.box = {box[0], box[1], box[2], box[3]};
        scene.objects.push_back(obj);
      }
      render_channels(scene);
      const Split split = split_from_name(j.at("split").get<std::string>());
      const int scene_index = static_cast<int>(ds.scenes.size());
      ds.scene_splits[static_cast<std::size_t>(split)].push_back(scene_index);
      for (const auto& e : j.at("expressions")) {
        Expression expr;
        expr.tokens = e.at("tokens").get<std::vector<std::string>>();
        expr.target_object_id = e.at("target").get<int>();
        expr.scene_id = scene.id;
        expr.dialect = ds.dialect;
        expr.style = style_from_name(e.at("style").get<std::string>());
        expr.synonym_group_id = e.at("group").get<std::string>();
        for (const auto& token : expr.tokens) {
          if (!lex.has_token(token)) {
            throw VocabError("dataset: unknown token " + token + " in scene " +
                             scene.id);
          }
        }
        ds.expression_splits[static_cast<std::size_t>(split)].push_back(
            static_cast<int>(ds.expressions.size()));
        ds.expression_scene.push_back(scene_index);
        ds.expressions.push_back(std::move(expr));
      }
      ds.scenes.push_back(std::move(scene));
    } catch (const json::exception& err) {
      throw SchemaError(std::string("dataset scene line: ") + err.what());
    }
  }
  if (ds.scenes.empty()) {
    throw SchemaError("dataset: no scenes");
  }
  return ds;
}

void save_dataset_jsonl(const Dataset& dataset, const std::string& path) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open for writing: " + path);
  const std::string text = dataset_to_jsonl(dataset);
  file.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!file) throw IoError("write failed: " + path);
}

Dataset load_dataset_jsonl(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open for reading: " + path);
  std::ostringstream buffer;
  buffer << file.rdbuf();
  return dataset_from_jsonl(buffer.str());
}

}  // namespace synref::world
