#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "synref/cli.hpp"
#include "synref/error.hpp"

using namespace synref;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "data": {
    "seed": 5,
    "world": {"grid_h": 8, "grid_w": 8, "min_objects": 2, "max_objects": 3},
    "expressions_per_object": 2,
    "datasets": [
      {"name": "a", "dialect": "base", "pool": "p", "scene_count": 10},
      {"name": "b", "dialect": "plus", "pool": "p", "scene_count": 10}
    ]
  },
  "model": {"visual_dim": 6, "embed_dim": 4, "pos_buckets": 4, "attn_dim": 4,
            "gcn_hidden": 5, "instance_dim": 6, "head_hidden": 6,
            "proj_hidden": 4, "proj_dim": 4, "proposal_count": 6},
  "train": {"datasets": ["a", "b"], "epochs": 1, "steps_per_epoch": 4},
  "matrix": {"seeds": [1], "pretrain": ["a"], "transfer": ["b"]}
})";

std::string tiny_config_path() {
  static std::string path = [] {
    std::string p = "/tmp/synref_cli_tiny.json";
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << kTinyConfig;
    return p;
  }();
  return path;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::path("/tmp") / ("synref_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string file_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

int run_argv(std::vector<std::string> args) {
  std::vector<std::string> owned = std::move(args);
  owned.insert(owned.begin(), "synref");
  std::vector<char*> argv;
  for (std::string& a : owned) argv.push_back(a.data());
  return cli::run_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_CASE("parse_args: subcommand, positional config, and flags") {
  cli::Invocation inv = cli::parse_args(
      {"train", "cfg.json", "--seed", "7", "--out", "runs/x",
       "--override", "train.lr0=0.5", "--override", "model.use_gcn=false"});
  CHECK(inv.subcommand == "train");
  CHECK(inv.config_path == "cfg.json");
  REQUIRE(inv.seed.has_value());
  CHECK(*inv.seed == 7);
  CHECK(inv.out_dir == "runs/x");
  CHECK(inv.overrides ==
        std::vector<std::string>{"train.lr0=0.5", "model.use_gcn=false"});

  cli::Invocation flagged = cli::parse_args({"eval", "--config", "c.json"});
  CHECK(flagged.config_path == "c.json");
  CHECK(flagged.out_dir == ".");
  CHECK_FALSE(flagged.seed.has_value());
}

TEST_CASE("parse_args: --help wins from any position") {
  CHECK(cli::parse_args({"--help"}).subcommand == "help");
  CHECK(cli::parse_args({"train", "cfg.json", "-h"}).subcommand == "help");
  CHECK(cli::parse_args({"bogus", "--help"}).subcommand == "help");
}

TEST_CASE("parse_args: malformed invocations are usage errors") {
  CHECK_THROWS_AS(cli::parse_args({}), UsageError);
  CHECK_THROWS_AS(cli::parse_args({"frobnicate"}), UsageError);
  CHECK_THROWS_AS(cli::parse_args({"train", "--frobnicate"}), UsageError);
  CHECK_THROWS_AS(cli::parse_args({"train", "a.json", "b.json"}), UsageError);
  CHECK_THROWS_AS(cli::parse_args({"train", "a.json", "--config", "b.json"}),
                  UsageError);
  CHECK_THROWS_AS(cli::parse_args({"train", "--seed"}), UsageError);
  CHECK_THROWS_AS(cli::parse_args({"train", "--seed", "-3"}), UsageError);
  CHECK_THROWS_AS(cli::parse_args({"train", "--seed", "12x"}), UsageError);
  CHECK_THROWS_AS(cli::parse_args({"train", "--seed", "1.5"}), UsageError);
}

TEST_CASE("gen-data: writes one jsonl per dataset plus a config snapshot") {
  fs::path out = fresh_dir("gen");
  cli::Invocation inv;
  inv.subcommand = "gen-data";
  inv.config_path = tiny_config_path();
  inv.out_dir = out.string();
  CHECK(cli::dispatch(inv) == 0);
  CHECK(fs::exists(out / "a.jsonl"));
  CHECK(fs::exists(out / "b.jsonl"));
  CHECK(fs::exists(out / "config.resolved.json"));

  // Same seed and config give byte-identical files; another seed differs.
  fs::path again = fresh_dir("gen_again");
  inv.out_dir = again.string();
  CHECK(cli::dispatch(inv) == 0);
  CHECK(file_bytes(out / "a.jsonl") == file_bytes(again / "a.jsonl"));
  CHECK(file_bytes(out / "b.jsonl") == file_bytes(again / "b.jsonl"));
  CHECK(file_bytes(out / "config.resolved.json") ==
        file_bytes(again / "config.resolved.json"));

  fs::path reseeded = fresh_dir("gen_reseed");
  inv.out_dir = reseeded.string();
  inv.seed = 9;
  CHECK(cli::dispatch(inv) == 0);
  CHECK(file_bytes(out / "a.jsonl") != file_bytes(reseeded / "a.jsonl"));
  fs::remove_all(out);
  fs::remove_all(again);
  fs::remove_all(reseeded);
}

TEST_CASE("train, then eval and analyze against the written checkpoint") {
  fs::path out = fresh_dir("train");
  cli::Invocation train;
  train.subcommand = "train";
  train.config_path = tiny_config_path();
  train.out_dir = out.string();
  CHECK(cli::dispatch(train) == 0);
  CHECK(fs::exists(out / "metrics.csv"));
  CHECK(fs::exists(out / "checkpoint.bin"));
  const std::string metrics = file_bytes(out / "metrics.csv");
  CHECK(metrics.find("epoch") != std::string::npos);

  fs::path eval_out = fresh_dir("eval");
  cli::Invocation ev;
  ev.subcommand = "eval";
  ev.config_path = tiny_config_path();
  ev.out_dir = eval_out.string();
  ev.overrides = {"eval.checkpoint=" + (out / "checkpoint.bin").string()};
  CHECK(cli::dispatch(ev) == 0);
  const std::string eval_csv = file_bytes(eval_out / "eval.csv");
  CHECK(eval_csv.rfind("split,total,correct,accuracy\nval,", 0) == 0);

  ev.subcommand = "analyze";
  CHECK(cli::dispatch(ev) == 0);
  const std::string sim_csv = file_bytes(eval_out / "similarity.csv");
  CHECK(sim_csv.rfind("split,mean,pairs,skipped\nval,", 0) == 0);
  fs::remove_all(out);
  fs::remove_all(eval_out);
}

TEST_CASE("eval: a missing checkpoint fails before any output is written") {
  fs::path out = fresh_dir("eval_missing");
  cli::Invocation inv;
  inv.subcommand = "eval";
  inv.config_path = tiny_config_path();
  inv.out_dir = out.string();
  inv.overrides = {"eval.checkpoint=" + (out / "nope.bin").string()};
  CHECK_THROWS_AS(cli::dispatch(inv), IoError);
  CHECK_FALSE(fs::exists(out / "eval.csv"));
  CHECK_FALSE(fs::exists(out / "config.resolved.json"));
  fs::remove_all(out);
}

TEST_CASE("dispatch: unknown config keys and bad overrides are usage errors") {
  fs::path out = fresh_dir("badkey");
  cli::Invocation inv;
  inv.subcommand = "gen-data";
  inv.config_path = tiny_config_path();
  inv.out_dir = out.string();
  inv.overrides = {"train.frobnicate=1"};
  CHECK_THROWS_AS(cli::dispatch(inv), UsageError);
  inv.overrides = {"no_equals_sign"};
  CHECK_THROWS_AS(cli::dispatch(inv), UsageError);
  fs::remove_all(out);
}

TEST_CASE("run_main: exit codes distinguish usage, io, and success") {
  CHECK(run_argv({"--help"}) == 0);
  CHECK(run_argv({}) == 2);
  CHECK(run_argv({"frobnicate"}) == 2);
  CHECK(run_argv({"train", "--frobnicate"}) == 2);

  fs::path out = fresh_dir("main_io");
  CHECK(run_argv({"eval", tiny_config_path(), "--out", out.string(),
                  "--override",
                  "eval.checkpoint=" + (out / "nope.bin").string()}) == 1);
  CHECK(run_argv({"gen-data", "/tmp/synref_cli_no_such_config.json",
                  "--out", out.string()}) == 1);
  CHECK(run_argv({"gen-data", tiny_config_path(), "--out", out.string(),
                  "--override", "train.bogus=1"}) == 2);
  fs::remove_all(out);
}

TEST_CASE("selftest: every check passes and the out dir keeps only the snapshot") {
  fs::path out = fresh_dir("selftest");
  cli::Invocation inv;
  inv.subcommand = "selftest";
  inv.out_dir = out.string();
  CHECK(cli::dispatch(inv) == 0);
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(out)) {
    (void)entry;
    ++files;
  }
  CHECK(files == 1);  // config.resolved.json only; round-trip files removed
  fs::remove_all(out);
}
