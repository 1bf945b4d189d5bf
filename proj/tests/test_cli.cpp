#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.hpp"

using namespace s2m;
using namespace s2m::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("s2m_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "s2m");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

json small_config() {
  return json::parse(R"({
    "synth": {"num_classes": 12, "train_classes": 8, "val_classes": 2, "test_classes": 2,
              "items_per_class": 30, "input_dim": 16, "hidden_dim": 16},
    "net": {"hidden": [8], "embed_dim": 4},
    "train": {"epochs": 1, "batches_per_epoch": 4, "tuples_per_batch": 2, "concept_size": 10,
              "relevant_size": 8, "irrelevant_size": 10, "validation_interval": 2, "max_skip_fraction": 1.0},
    "eval": {"concept_size": 10, "csv": true, "csv_top": 5},
    "fewshot": {"ways": 2, "episodes": 20}
  })");
}

}  // namespace

TEST_CASE("unknown config keys are usage errors") {
  const auto dir = scratch_dir("unknown_key");
  write_json(dir / "c.json", json{{"synth", {{"num_clases", 3}}}});
  CHECK(run_cli({"synth", "--config", (dir / "c.json").string(), "--out", (dir / "o").string()}) == 1);
  write_json(dir / "c.json", json{{"eval", {{"split", "holdout"}}}});
  CHECK(run_cli({"synth", "--config", (dir / "c.json").string(), "--out", (dir / "o").string()}) == 1);
  write_json(dir / "c.json", json{{"threads", "two"}});
  CHECK(run_cli({"synth", "--config", (dir / "c.json").string(), "--out", (dir / "o").string()}) == 1);
  CHECK(run_cli({"nosuchcommand"}) == 1);
  CHECK_THROWS_AS(parse_config(json{{"em", {{"restarts", 0}}}}), UsageError);
}

TEST_CASE("the shipped default config equals the built-in defaults") {
  const auto shipped = load_config(std::string(S2M_SOURCE_DIR) + "/configs/default.json");
  CHECK(config_to_json(shipped) == config_to_json(RunConfig{}));
  CHECK(config_to_json(parse_config(config_to_json(RunConfig{}))) == config_to_json(RunConfig{}));
}

TEST_CASE("gradcheck on the default config passes") {
  const auto dir = scratch_dir("gradcheck");
  CHECK(run_cli({"gradcheck", "--out", dir.string(), "--seed", "5"}) == 0);
  const auto rep = read_json(dir / "gradcheck_report.json");
  CHECK(rep["passed"].get<bool>());
  CHECK(!rep["checks"].empty());
  CHECK(read_json(dir / "config_gradcheck.json")["seed"] == 5);
}

TEST_CASE("a dataset without test classes cannot be evaluated") {
  const auto dir = scratch_dir("no_test");
  auto c = small_config();
  c["synth"]["train_classes"] = 10;
  c["synth"]["test_classes"] = 0;
  write_json(dir / "c.json", c);
  const auto cfg = (dir / "c.json").string(), out = (dir / "o").string();
  REQUIRE(run_cli({"synth", "--config", cfg, "--out", out}) == 0);
  CHECK(run_cli({"eval", "--config", cfg, "--out", out}) == 2);
  CHECK(run_cli({"eval", "--config", cfg, "--out", (dir / "missing").string()}) == 2);
}

TEST_CASE("full pipeline reports and thread independence") {
  const auto dir = scratch_dir("pipeline");
  write_json(dir / "c.json", small_config());
  const auto cfg = (dir / "c.json").string();
  for (const char* threads : {"1", "2"}) {
    const auto out = (dir / (std::string("t") + threads)).string();
    REQUIRE(run_cli({"synth", "--config", cfg, "--out", out, "--threads", threads}) == 0);
    REQUIRE(run_cli({"train", "--config", cfg, "--out", out, "--threads", threads}) == 0);
    REQUIRE(run_cli({"eval", "--config", cfg, "--out", out, "--threads", threads}) == 0);
    REQUIRE(run_cli({"fewshot", "--config", cfg, "--out", out, "--threads", threads}) == 0);
  }
  const auto a = dir / "t1", b = dir / "t2";
  for (const char* f : {"dataset.json", "dataset.f64", "net_avg.json", "net_gauss.json", "net_gmm.json", "train_gauss.jsonl",
                        "train_gmm.jsonl", "eval_report.json", "eval_map.csv", "eval_ranked.csv",
                        "fewshot_report.json"}) {
    INFO(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  // The train report records its own output paths.
  auto ra = read_json(a / "train_report.json"), rb = read_json(b / "train_report.json");
  for (auto* r : {&ra, &rb})
    for (auto& run : (*r)["runs"]) run.erase("net");
  CHECK(ra == rb);

  const auto ev = read_json(a / "eval_report.json");
  CHECK(ev["table"].size() == RunConfig{}.eval.methods.size());
  for (const auto& row : ev["table"]) {
    CHECK(row["map"].get<double>() >= 0.0);
    CHECK(row["map"].get<double>() <= 1.0);
  }
  const double acc = read_json(a / "fewshot_report.json")["accuracy"].get<double>();
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(read_json(a / "synth_report.json").is_object());

  // A different master seed changes the data.
  const auto other = (dir / "s2").string();
  REQUIRE(run_cli({"synth", "--config", cfg, "--out", other, "--seed", "2"}) == 0);
  CHECK(slurp(a / "dataset.f64") != slurp(fs::path(other) / "dataset.f64"));
}

TEST_CASE("fit selects a model for a descriptor set") {
  const auto dir = scratch_dir("fit");
  Rng rng(1);
  json rows = json::array();
  for (int i = 0; i < 60; ++i) rows.push_back({rng.normal(i % 2 ? 4.0 : -4.0, 0.5), rng.normal(0, 0.5)});
  write_json(dir / "set.json", rows);
  REQUIRE(run_cli({"fit", (dir / "set.json").string(), "--out", dir.string()}) == 0);
  const auto rep = read_json(dir / "fit_report.json");
  const auto model = read_json(dir / "model.json");
  CHECK(model.is_object());
  CHECK(rep["k"] == 2);
  CHECK(rep["bic"].size() == 3);

  write_json(dir / "bad.json", json::array({{1.0, 2.0}, {1.0}}));
  CHECK(run_cli({"fit", (dir / "bad.json").string(), "--out", dir.string()}) == 2);
}
