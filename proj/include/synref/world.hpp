#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "synref/rng.hpp"

namespace synref::world {

// Axis-aligned box on the scene grid, half-open: [x_tl, x_br) x [y_tl, y_br).
// Generated boxes have integer corners; jittered proposals do not.
struct BoundingBox {
  double x_tl = 0.0;
  double y_tl = 0.0;
  double x_br = 0.0;
  double y_br = 0.0;

  double width() const { return x_br - x_tl; }
  double height() const { return y_br - y_tl; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_tl + x_br); }
  double center_y() const { return 0.5 * (y_tl + y_br); }

  /// True when the center of grid cell (row, col) lies inside the box.
  bool covers_cell(std::size_t row, std::size_t col) const;
};

double intersection_area(const BoundingBox& a, const BoundingBox& b);

/// Intersection over union; 0 when the union has zero area.
double iou(const BoundingBox& a, const BoundingBox& b);

enum class SizeClass { kSmall = 0, kMedium = 1, kLarge = 2 };

constexpr int kSizeClassCount = 3;

/// Side length of the rendered square footprint for a size class.
int size_side(SizeClass size);

const char* size_name(SizeClass size);
SizeClass size_from_name(const std::string& name);

// Closed token inventory shared by every dataset: canonical attribute
// values, their surface synonyms, spatial terms, relation terms, and
// fillers. The full sorted vocabulary is fixed so embedding tables keep
// the same row order across runs and dialects.
class Lexicon {
 public:
  static const Lexicon& instance();

  const std::vector<std::string>& categories() const { return categories_; }
  const std::vector<std::string>& colors() const { return colors_; }

  /// Sorted, duplicate-free list of every token any dialect can emit.
  const std::vector<std::string>& vocabulary() const { return vocabulary_; }

  /// Index of a token in vocabulary(); throws VocabError when absent.
  std::size_t token_index(const std::string& token) const;
  bool has_token(const std::string& token) const;

  // Token classification used by the resolver. Each returns the canonical
  // attribute index when the token names (or is a synonym for) a value of
  // that attribute, and nullopt otherwise.
  std::optional<int> category_index(const std::string& token) const;
  std::optional<int> color_index(const std::string& token) const;
  std::optional<int> size_index(const std::string& token) const;

  bool is_wildcard(const std::string& token) const;   // "thing", "object", "shape"
  bool is_filler(const std::string& token) const;     // "the", "that", "is", "on"
  bool is_connector(const std::string& token) const;  // "and"

  /// Half-plane terms: left/right/top/bottom (+ synonyms). 0..3.
  std::optional<int> halfplane_index(const std::string& token) const;
  /// Extremum terms: leftmost/rightmost/topmost/bottommost (+ synonyms). 0..3.
  std::optional<int> extremum_index(const std::string& token) const;
  /// Binary relation terms across both dialect inventories. 0..3 with the
  /// same axis order as half-planes: left/right/top/bottom of the landmark.
  std::optional<int> relation_index(const std::string& token) const;
  /// True for the held-out relation inventory (west_of, north_of, ...).
  bool is_reason_relation(const std::string& token) const;

  /// Surface variants for attribute values, used by expression templates.
  const std::vector<std::string>& category_tokens(int category) const;
  const std::vector<std::string>& color_tokens(int color) const;
  const std::vector<std::string>& size_tokens(int size) const;
  const std::vector<std::string>& wildcard_tokens() const { return wildcards_; }
  const std::vector<std::string>& halfplane_tokens(int direction) const;
  const std::vector<std::string>& extremum_tokens(int direction) const;
  /// Relation variants for one direction, split by inventory.
  const std::vector<std::string>& base_relation_tokens(int direction) const;
  const std::vector<std::string>& reason_relation_tokens(int direction) const;

 private:
  Lexicon();

  std::vector<std::string> categories_;
  std::vector<std::string> colors_;
  std::vector<std::vector<std::string>> category_tokens_;
  std::vector<std::vector<std::string>> color_tokens_;
  std::vector<std::vector<std::string>> size_tokens_;
  std::vector<std::string> wildcards_;
  std::vector<std::string> fillers_;
  std::vector<std::vector<std::string>> halfplane_tokens_;
  std::vector<std::vector<std::string>> extremum_tokens_;
  std::vector<std::vector<std::string>> base_relation_tokens_;
  std::vector<std::vector<std::string>> reason_relation_tokens_;
  std::vector<std::string> vocabulary_;
};

struct ObjectInstance {
  int id = -1;
  int category = -1;  // index into Lexicon::categories()
  int color = -1;     // index into Lexicon::colors()
  SizeClass size = SizeClass::kSmall;
  BoundingBox box;
};

/// Number of scene channels: category one-hots, color one-hots, size
/// one-hots, and one occupancy plane.
int channel_count();

struct Scene {
  std::string id;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<ObjectInstance> objects;
  // grid_h * grid_w * channel_count(), row-major (row, col, channel).
  std::vector<double> channels;

  const ObjectInstance* find_object(int object_id) const;
  double channel_at(int row, int col, int channel) const;
};

/// Rebuilds scene.channels from scene.objects.
void render_channels(Scene& scene);

struct WorldConfig {
  int grid_h = 16;
  int grid_w = 16;
  int min_objects = 3;
  int max_objects = 6;
  // Attribute values scenes may use; both must be subsets of the lexicon.
  // Channel layout always spans the full lexicon so model input dims do
  // not depend on this choice.
  std::vector<std::string> categories;
  std::vector<std::string> colors;

  static WorldConfig defaults();
};

/// Generates one scene: objects with scene-unique (category, color) pairs
/// and non-overlapping integer boxes fully inside the grid. Deterministic
/// in (seed, config). Throws GenerationError when placement fails and
/// DomainError when the config cannot be satisfied at all.
Scene generate_scene(std::uint64_t seed, const WorldConfig& config);

enum class Style { kAttribute = 0, kLocation = 1, kRelation = 2 };

const char* style_name(Style style);
Style style_from_name(const std::string& name);

constexpr int kMaxExpressionTokens = 12;

struct Expression {
  std::vector<std::string> tokens;
  int target_object_id = -1;
  std::string scene_id;
  std::string dialect;
  Style style = Style::kAttribute;
  // Shared by all expressions produced for one object by one generator
  // call; marks them as mutual paraphrases.
  std::string synonym_group_id;
};

struct ResolveOutcome {
  enum class Kind { kUnique, kAmbiguous, kNone };
  Kind kind = Kind::kNone;
  int object_id = -1;  // only meaningful when kind == kUnique
};

/// Interprets a token sequence against a scene by set filtering:
/// attribute and half-plane constraints first, then relation clauses in
/// order, then extremum terms. Throws VocabError for unknown tokens and
/// DomainError for malformed structure (e.g. "and" without a following
/// relation).
ResolveOutcome resolve_tokens(const std::vector<std::string>& tokens,
                              const Scene& scene);
ResolveOutcome resolve(const Expression& expression, const Scene& scene);

/// Produces `count` distinct expressions for one object, each validated
/// to resolve uniquely to that object. Dialects:
///   base   - attribute, location, and relation styles; plain relation terms
///   plus   - attribute and relation styles only (no location vocabulary)
///   reason - relation chains using the held-out relation inventory
/// Throws GenerationError when fewer than `count` valid expressions exist.
std::vector<Expression> generate_expressions(const Scene& scene, int object_id,
                                             const std::string& dialect,
                                             int count, Rng& rng);

bool is_known_dialect(const std::string& dialect);

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };
const char* split_name(Split split);
Split split_from_name(const std::string& name);

struct Dataset {
  std::string name;
  std::string dialect;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::string> vocabulary;
  std::vector<Scene> scenes;
  // Grouped by scene, scenes in order; within a scene grouped by object id.
  std::vector<Expression> expressions;
  std::vector<int> expression_scene;              // scene index per expression
  std::array<std::vector<int>, 3> scene_splits;   // scene indices per Split
  std::array<std::vector<int>, 3> expression_splits;

  const Scene& scene_of(int expression_index) const;
  int scene_index_by_id(const std::string& scene_id) const;
};

struct DatasetSpec {
  std::string name;
  std::string dialect;
  // Datasets naming the same pool are built over the same scenes, so
  // expressions in different dialects describe identical worlds.
  std::string pool;
  int scene_count = 0;
};

struct DataConfig {
  WorldConfig world;
  int expressions_per_object = 5;
  std::array<double, 3> split_fractions{0.8, 0.1, 0.1};
  std::vector<DatasetSpec> datasets;

  static DataConfig defaults();
};

/// Builds every dataset in config.datasets. Scene splits are decided per
/// pool before dialects are expanded, so paired datasets agree on which
/// scenes are train/val/test. Deterministic in (seed, config).
std::vector<Dataset> make_datasets(std::uint64_t seed, const DataConfig& config,
                                   const std::string& config_hash);

// JSONL serialization: one header line followed by one line per scene.
// Loading then saving reproduces the file byte for byte.
std::string dataset_to_jsonl(const Dataset& dataset);
Dataset dataset_from_jsonl(const std::string& text);
void save_dataset_jsonl(const Dataset& dataset, const std::string& path);
Dataset load_dataset_jsonl(const std::string& path);

}  // namespace synref::world
