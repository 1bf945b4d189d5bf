#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "s2m/dataset.hpp"
#include "s2m/embedding_net.hpp"
#include "s2m/gmm_model.hpp"
#include "s2m/implicit_grad.hpp"
#include "s2m/retrieval_eval.hpp"

namespace s2m {

/// How a tuple's relevance scores are computed from its concept set: the
/// fitted model's log-density, or one of the plug-in baselines.
enum class RelevanceKind { gauss, gmm, avg, nn };

const char* to_string(RelevanceKind k);
RelevanceKind relevance_from_string(const std::string& s);

struct TrainerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 10;
  int batches_per_epoch = 20;
  int tuples_per_batch = 5;
  RelevanceKind relevance = RelevanceKind::gauss;
  int k = 2;  // components when relevance == gmm
  int bins = 100;
  int concept_size = 5;
  int relevant_size = 15;
  int irrelevant_size = 20;
  double concept_noise = 0.0;  // contamination of training concept sets
  std::uint64_t seed = 1;
  int validation_interval = 10;  // in batches; 0 validates only at start and end
  QueryProtocol validation;
  EmOptions em;
  ImplicitOptions implicit;
  double max_skip_fraction = 0.1;
  int threads = 1;

  void validate() const;
  /// Ranking method that matches the trained relevance.
  Method validation_method() const;
};

/// Row indices into the dataset.
struct LearningTuple {
  int class_id = 0;
  std::vector<Index> concept_set;
  std::vector<Index> relevant;
  std::vector<Index> irrelevant;
};

/// X and Z+ are drawn disjointly from one class (X optionally contaminated
/// from other pool classes), Z- uniformly from items of the other classes.
LearningTuple sample_tuple(const Dataset& ds, const std::vector<int>& pool_classes, int concept_size,
                           int relevant_size, int irrelevant_size, double concept_noise, Rng& rng);

using WarmStartCache = std::map<int, GmmModel<double>>;

struct TupleResult {
  double loss = 0.0;
  bool skipped = false;
  std::string skip_reason;
  int em_iterations = 0;
  std::optional<GmmModel<double>> fitted;  // model to memorize for the class
  std::pair<double, double> range{0.0, 0.0};
};

/// Forward pass, histogram loss and backward pass for one tuple. Gradients
/// w.r.t. the net weights are added onto `tape`. Returns the fitted model so
/// the caller can update its warm-start cache.
TupleResult tuple_forward_backward(const EmbeddingNet<double>& net, const Dataset& ds, const LearningTuple& tuple,
                                   const TrainerConfig& cfg, const WarmStartCache& cache, GradientTape<double>& tape);

/// Convenience overload that memorizes the fitted model in `cache`.
TupleResult tuple_forward_backward(const EmbeddingNet<double>& net, const Dataset& ds, const LearningTuple& tuple,
                                   const TrainerConfig& cfg, WarmStartCache& cache, GradientTape<double>& tape);

/// Forward-only tuple loss. `warm` seeds EM; `range` freezes the histogram
/// range (both are used by finite-difference checks).
TupleResult tuple_loss(const EmbeddingNet<double>& net, const Dataset& ds, const LearningTuple& tuple,
                       const TrainerConfig& cfg, const std::optional<GmmModel<double>>& warm,
                       const std::optional<std::pair<double, double>>& range = std::nullopt);

struct AdamState {
  GradientTape<double> m;
  GradientTape<double> v;
  long step = 0;
};

void adam_step(EmbeddingNet<double>& net, const GradientTape<double>& grad, AdamState& state, double lr,
               double beta1, double beta2, double eps);

struct TrainResult {
  EmbeddingNet<double> net;      // best-validation snapshot
  std::vector<std::string> log;  // JSON lines
  double initial_val_map = 0.0;
  double best_val_map = 0.0;
  long best_step = 0;
  long skipped_tuples = 0;
};

TrainResult train(const Dataset& ds, const TrainerConfig& cfg, const EmbeddingNet<double>& initial);

}  // namespace s2m
