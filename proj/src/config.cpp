#include "synref/config.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <utility>

#include "json.hpp"
#include "synref/error.hpp"
#include "synref/rng.hpp"
#include "synref/sampler.hpp"

namespace synref::config {

namespace {

using nlohmann::json;

[[noreturn]] void wrong_type(const std::string& path, const char* expected) {
  throw SchemaError("config value " + path + ": expected " + expected);
}

std::string join(const std::string& head, const std::string& key) {
  return head.empty() ? key : head + "." + key;
}

// One object level of the tree: typed field reads plus rejection of any
// key no read ever asked for.
class Section {
 public:
  Section(const json& tree, std::string path)
      : tree_(tree), path_(std::move(path)) {
    if (!tree_.is_object()) {
      throw SchemaError("config section " +
                        (path_.empty() ? std::string("<root>") : path_) +
                        ": expected an object");
    }
  }

  const json* field(const std::string& key) {
    seen_.push_back(key);
    auto it = tree_.find(key);
    return it == tree_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, int& out) {
    if (const json* v = field(key)) {
      if (!v->is_number_integer()) wrong_type(join(path_, key), "an integer");
      out = v->get<int>();
    }
  }

  void get(const std::string& key, std::uint64_t& out) {
    if (const json* v = field(key)) {
      if (!v->is_number_integer() ||
          (!v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
        wrong_type(join(path_, key), "a nonnegative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }

  void get(const std::string& key, double& out) {
    if (const json* v = field(key)) {
      if (!v->is_number()) wrong_type(join(path_, key), "a number");
      out = v->get<double>();
    }
  }

  void get(const std::string& key, bool& out) {
    if (const json* v = field(key)) {
      if (!v->is_boolean()) wrong_type(join(path_, key), "a boolean");
      out = v->get<bool>();
    }
  }

  void get(const std::string& key, std::string& out) {
    if (const json* v = field(key)) {
      if (!v->is_string()) wrong_type(join(path_, key), "a string");
      out = v->get<std::string>();
    }
  }

  void get(const std::string& key, std::vector<std::string>& out) {
    if (const json* v = field(key)) {
      if (!v->is_array()) wrong_type(join(path_, key), "an array of strings");
      std::vector<std::string> parsed;
      for (const json& item : *v) {
        if (!item.is_string()) wrong_type(join(path_, key), "an array of strings");
        parsed.push_back(item.get<std::string>());
      }
      out = std::move(parsed);
    }
  }

  void get(const std::string& key, std::vector<std::uint64_t>& out) {
    if (const json* v = field(key)) {
      if (!v->is_array()) wrong_type(join(path_, key), "an array of integers");
      std::vector<std::uint64_t> parsed;
      for (const json& item : *v) {
        if (!item.is_number_integer() ||
            (!item.is_number_unsigned() && item.get<std::int64_t>() < 0)) {
          wrong_type(join(path_, key), "an array of nonnegative integers");
        }
        parsed.push_back(item.get<std::uint64_t>());
      }
      out = std::move(parsed);
    }
  }

  void get(const std::string& key, std::array<double, 3>& out) {
    if (const json* v = field(key)) {
      if (!v->is_array() || v->size() != 3) {
        wrong_type(join(path_, key), "an array of 3 numbers");
      }
      for (std::size_t i = 0; i < 3; ++i) {
        if (!(*v)[i].is_number()) wrong_type(join(path_, key), "an array of 3 numbers");
        out[i] = (*v)[i].get<double>();
      }
    }
  }

  const json* child(const std::string& key) { return field(key); }

  void finish() const {
    for (const auto& item : tree_.items()) {
      bool known = false;
      for (const std::string& k : seen_) {
        if (k == item.key()) {
          known = true;
          break;
        }
      }
      if (!known) {
        throw UsageError("unknown config key: " + join(path_, item.key()));
      }
    }
  }

 private:
  const json& tree_;
  std::string path_;
  std::vector<std::string> seen_;
};

void parse_world(const json& tree, world::WorldConfig& out) {
  Section s(tree, "data.world");
  s.get("grid_h", out.grid_h);
  s.get("grid_w", out.grid_w);
  s.get("min_objects", out.min_objects);
  s.get("max_objects", out.max_objects);
  s.get("categories", out.categories);
  s.get("colors", out.colors);
  s.finish();
}

world::DatasetSpec parse_dataset_spec(const json& tree, const std::string& path) {
  Section s(tree, path);
  world::DatasetSpec spec;
  for (const char* key : {"name", "dialect", "pool", "scene_count"}) {
    if (!tree.is_object() || !tree.contains(key)) {
      throw SchemaError("config value " + path +
                        ": needs name, dialect, pool, and scene_count");
    }
  }
  s.get("name", spec.name);
  s.get("dialect", spec.dialect);
  s.get("pool", spec.pool);
  s.get("scene_count", spec.scene_count);
  s.finish();
  return spec;
}

void parse_data(const json& tree, RunConfig& out) {
  Section s(tree, "data");
  s.get("seed", out.data_seed);
  if (const json* w = s.child("world")) parse_world(*w, out.data.world);
  s.get("expressions_per_object", out.data.expressions_per_object);
  s.get("split_fractions", out.data.split_fractions);
  if (const json* d = s.child("datasets")) {
    if (!d->is_array()) wrong_type("data.datasets", "an array of objects");
    std::vector<world::DatasetSpec> specs;
    for (std::size_t i = 0; i < d->size(); ++i) {
      specs.push_back(parse_dataset_spec(
          (*d)[i], "data.datasets[" + std::to_string(i) + "]"));
    }
    out.data.datasets = std::move(specs);
  }
  s.finish();
}

void parse_model(const json& tree, model::ModelConfig& out) {
  Section s(tree, "model");
  s.get("visual_dim", out.visual_dim);
  s.get("embed_dim", out.embed_dim);
  s.get("pos_buckets", out.pos_buckets);
  s.get("attn_dim", out.attn_dim);
  s.get("gcn_hidden", out.gcn_hidden);
  s.get("instance_dim", out.instance_dim);
  s.get("head_hidden", out.head_hidden);
  s.get("proj_hidden", out.proj_hidden);
  s.get("proj_dim", out.proj_dim);
  s.get("proposal_count", out.proposal_count);
  s.get("jitter", out.jitter);
  s.get("use_gcn", out.use_gcn);
  s.finish();
}

void parse_loss(const json& tree, losses::LossConfig& out) {
  Section s(tree, "loss");
  s.get("alpha", out.alpha);
  s.get("tau", out.tau);
  s.get("use_det", out.use_det);
  s.get("use_img", out.use_img);
  s.get("use_ins_tri", out.use_ins_tri);
  s.get("use_ins_cl", out.use_ins_cl);
  s.get("det_weight", out.det_weight);
  s.get("img_weight", out.img_weight);
  s.get("ins_weight", out.ins_weight);
  s.finish();
}

void parse_sampler(const json& tree, experiment::TrainConfig& out) {
  Section s(tree, "sampler");
  s.get("positives", out.batch.positives);
  s.get("category_negatives", out.batch.category_negatives);
  s.get("language_negatives", out.batch.language_negatives);
  s.get("mined", out.batch.mined);
  std::string mode = sampler::sampling_mode_name(out.mode);
  s.get("mode", mode);
  if (mode != "intra" && mode != "inter") {
    wrong_type("sampler.mode", "\"intra\" or \"inter\"");
  }
  out.mode = sampler::sampling_mode_from_name(mode);
  s.finish();
}

void parse_train(const json& tree, experiment::TrainConfig& out) {
  Section s(tree, "train");
  s.get("datasets", out.dataset_names);
  s.get("epochs", out.epochs);
  s.get("steps_per_epoch", out.steps_per_epoch);
  s.get("batch_size", out.batch_size);
  s.get("lr0", out.lr0);
  s.get("lr_decay", out.lr_decay);
  s.get("lr_drop_frac", out.lr_drop_frac);
  s.get("eval_every", out.eval_every);
  s.get("seed", out.seed);
  s.finish();
}

void parse_eval(const json& tree, EvalConfig& out) {
  Section s(tree, "eval");
  s.get("checkpoint", out.checkpoint);
  s.get("split", out.split);
  s.finish();
  world::split_from_name(out.split);
}

void parse_matrix(const json& tree, MatrixConfig& out) {
  Section s(tree, "matrix");
  s.get("seeds", out.seeds);
  s.get("pretrain", out.pretrain);
  s.get("transfer", out.transfer);
  s.finish();
}

RunConfig parse_config(const json& tree) {
  RunConfig out;
  Section root(tree, "");
  if (const json* j = root.child("data")) parse_data(*j, out);
  if (const json* j = root.child("model")) parse_model(*j, out.train.model);
  if (const json* j = root.child("loss")) parse_loss(*j, out.train.loss);
  if (const json* j = root.child("sampler")) parse_sampler(*j, out.train);
  if (const json* j = root.child("train")) parse_train(*j, out.train);
  if (const json* j = root.child("eval")) parse_eval(*j, out.eval);
  if (const json* j = root.child("matrix")) parse_matrix(*j, out.matrix);
  root.finish();
  out.validate();
  return out;
}

json to_json(const RunConfig& c) {
  json j;
  j["data"]["seed"] = c.data_seed;
  j["data"]["world"]["grid_h"] = c.data.world.grid_h;
  j["data"]["world"]["grid_w"] = c.data.world.grid_w;
  j["data"]["world"]["min_objects"] = c.data.world.min_objects;
  j["data"]["world"]["max_objects"] = c.data.world.max_objects;
  j["data"]["world"]["categories"] = c.data.world.categories;
  j["data"]["world"]["colors"] = c.data.world.colors;
  j["data"]["expressions_per_object"] = c.data.expressions_per_object;
  j["data"]["split_fractions"] = c.data.split_fractions;
  j["data"]["datasets"] = json::array();
  for (const world::DatasetSpec& spec : c.data.datasets) {
    json entry;
    entry["name"] = spec.name;
    entry["dialect"] = spec.dialect;
    entry["pool"] = spec.pool;
    entry["scene_count"] = spec.scene_count;
    j["data"]["datasets"].push_back(entry);
  }
  j["model"]["visual_dim"] = c.train.model.visual_dim;
  j["model"]["embed_dim"] = c.train.model.embed_dim;
  j["model"]["pos_buckets"] = c.train.model.pos_buckets;
  j["model"]["attn_dim"] = c.train.model.attn_dim;
  j["model"]["gcn_hidden"] = c.train.model.gcn_hidden;
  j["model"]["instance_dim"] = c.train.model.instance_dim;
  j["model"]["head_hidden"] = c.train.model.head_hidden;
  j["model"]["proj_hidden"] = c.train.model.proj_hidden;
  j["model"]["proj_dim"] = c.train.model.proj_dim;
  j["model"]["proposal_count"] = c.train.model.proposal_count;
  j["model"]["jitter"] = c.train.model.jitter;
  j["model"]["use_gcn"] = c.train.model.use_gcn;
  j["loss"]["alpha"] = c.train.loss.alpha;
  j["loss"]["tau"] = c.train.loss.tau;
  j["loss"]["use_det"] = c.train.loss.use_det;
  j["loss"]["use_img"] = c.train.loss.use_img;
  j["loss"]["use_ins_tri"] = c.train.loss.use_ins_tri;
  j["loss"]["use_ins_cl"] = c.train.loss.use_ins_cl;
  j["loss"]["det_weight"] = c.train.loss.det_weight;
  j["loss"]["img_weight"] = c.train.loss.img_weight;
  j["loss"]["ins_weight"] = c.train.loss.ins_weight;
  j["sampler"]["positives"] = c.train.batch.positives;
  j["sampler"]["category_negatives"] = c.train.batch.category_negatives;
  j["sampler"]["language_negatives"] = c.train.batch.language_negatives;
  j["sampler"]["mined"] = c.train.batch.mined;
  j["sampler"]["mode"] = sampler::sampling_mode_name(c.train.mode);
  j["train"]["datasets"] = c.train.dataset_names;
  j["train"]["epochs"] = c.train.epochs;
  j["train"]["steps_per_epoch"] = c.train.steps_per_epoch;
  j["train"]["batch_size"] = c.train.batch_size;
  j["train"]["lr0"] = c.train.lr0;
  j["train"]["lr_decay"] = c.train.lr_decay;
  j["train"]["lr_drop_frac"] = c.train.lr_drop_frac;
  j["train"]["eval_every"] = c.train.eval_every;
  j["train"]["seed"] = c.train.seed;
  j["eval"]["checkpoint"] = c.eval.checkpoint;
  j["eval"]["split"] = c.eval.split;
  j["matrix"]["seeds"] = c.matrix.seeds;
  j["matrix"]["pretrain"] = c.matrix.pretrain;
  j["matrix"]["transfer"] = c.matrix.transfer;
  return j;
}

json parse_json_text(const std::string& text, const std::string& what) {
  json tree = json::parse(text, nullptr, false);
  if (tree.is_discarded()) throw SchemaError(what + ": not valid JSON");
  return tree;
}

// Splits "a.b.c=value" and writes the parsed value at that path, creating
// objects along the way. The value is JSON when it parses, else a string.
void apply_override(json& tree, const std::string& text) {
  const std::size_t eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw UsageError("override must look like key.path=value: " + text);
  }
  const std::string path = text.substr(0, eq);
  const std::string raw = text.substr(eq + 1);

  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw UsageError("override has an empty path segment: " + text);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (!node->is_object() && !node->is_null()) {
      throw UsageError("override path crosses a non-object value: " + text);
    }
    start = dot + 1;
  }
}

}  // namespace

void RunConfig::validate() const {
  if (data.expressions_per_object < 1) {
    throw DomainError("data config: expressions_per_object must be >= 1");
  }
  if (data.datasets.empty()) throw DomainError("data config: no datasets");
  train.validate();
}

RunConfig config_from_json_text(const std::string& text) {
  return parse_config(parse_json_text(text, "config"));
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return config_from_json_text(buffer.str());
}

RunConfig resolve_config(const std::string& config_path,
                         const std::vector<std::string>& overrides) {
  json tree = json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + config_path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    tree = parse_json_text(buffer.str(), "config file " + config_path);
  }
  for (const std::string& text : overrides) apply_override(tree, text);
  return parse_config(tree);
}

std::string resolved_json(const RunConfig& config) {
  return to_json(config).dump(2) + "\n";
}

std::uint64_t config_hash(const RunConfig& config) {
  return fnv1a64(to_json(config).dump());
}

std::string config_hash_hex(const RunConfig& config) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << config_hash(config);
  return os.str();
}

}  // namespace synref::config
