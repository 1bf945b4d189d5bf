#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "s2m/dataset.hpp"
#include "s2m/gradcheck.hpp"
#include "s2m/meta_trainer.hpp"
#include "s2m/retrieval_eval.hpp"

namespace s2m::cli {

using nlohmann::json;

struct NetSection {
  std::vector<Index> hidden{32};
  Index embed_dim = 8;
};

// Training settings; one net is trained per entry of `relevances`.
struct TrainSection {
  std::vector<RelevanceKind> relevances{RelevanceKind::avg, RelevanceKind::gauss, RelevanceKind::gmm};
  TrainerConfig trainer;
};

struct MethodSection {
  std::string name;
  std::string net = "init";  // "init", a trained relevance name, or a net file path
  RankerKind ranker = RankerKind::s2m;
  ModelKind model = ModelKind::gauss;
  int k = 1;
  std::vector<int> bic_candidates{1, 2, 3};
  SvmOptions svm;
};

struct EvalSection {
  Split split = Split::test;
  int concept_size = 20;
  double noise_fraction = 0.2;
  int queries_per_class = 2;
  bool csv = false;
  int csv_top = 50;  // ranked items written per query
  std::vector<MethodSection> methods;
};

struct FewShotSection {
  Split split = Split::test;
  int ways = 5;
  int shots = 5;
  int episodes = 200;
  int probes_per_class = 1;
  std::string net = "gauss";
  ModelKind model = ModelKind::gauss;
  int k = 1;
  std::vector<int> bic_candidates{1, 2, 3};
};

struct FitSection {
  ModelKind model = ModelKind::bic;
  int k = 2;
  std::vector<int> bic_candidates{1, 2, 3};
  std::string input;   // descriptor set file; the positional argument overrides it
  std::string output;  // defaults to <out>/model.json
};

struct GradcheckSection {
  int instances = 10;
  check::EndToEndSetup end_to_end;
};

// Every stream seed is derived from `seed`, so --seed reseeds the whole run.
struct RunConfig {
  std::uint64_t seed = 1;
  int threads = 1;
  std::string out = "s2m_out";
  std::string dataset;  // defaults to <out>/dataset.json
  SynthSpec synth;
  NetSection net;
  TrainSection train;
  EmOptions em;
  ImplicitOptions implicit;
  EvalSection eval;
  FewShotSection fewshot;
  FitSection fit;
  GradcheckSection gradcheck;

  RunConfig();
  void validate() const;
  std::string dataset_path() const;
  SynthSpec synth_spec() const;
  TrainerConfig trainer_config(RelevanceKind r) const;
  std::uint64_t net_seed() const { return seed + 100; }
  std::uint64_t eval_seed() const { return seed * 7 + 1; }
  std::uint64_t fewshot_seed() const { return seed + 11; }
  std::uint64_t model_seed() const { return seed + 5; }
};

/// Throws UsageError on unknown keys, bad types or failed validation.
RunConfig parse_config(const json& j);
RunConfig load_config(const std::string& path);
json config_to_json(const RunConfig& cfg);

// Each command writes its artifacts under cfg.out and returns its report.
json cmd_synth(const RunConfig& cfg);
json cmd_train(const RunConfig& cfg);
json cmd_eval(const RunConfig& cfg);
json cmd_fewshot(const RunConfig& cfg);
json cmd_fit(const RunConfig& cfg, const std::string& set_file = "");
json cmd_gradcheck(const RunConfig& cfg);

/// Full entry point: argument parsing, dispatch, error reporting. Returns the
/// process exit code.
int run(int argc, const char* const* argv);

}  // namespace s2m::cli
