#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "s2m/dataset.hpp"
#include "s2m/embedding_net.hpp"
#include "s2m/gmm_model.hpp"
#include "s2m/rng.hpp"

namespace s2m {

/// Items sorted by descending score, ties by ascending id.
struct RankedList {
  std::vector<std::uint64_t> ids;
  std::vector<double> scores;
  std::vector<bool> relevant;

  std::size_t size() const { return ids.size(); }
};

RankedList make_ranked_list(std::span<const std::uint64_t> ids, std::span<const double> scores,
                            const std::vector<bool>& relevant);

/// (1/R) sum_k Prec@k rel(k) over the full list. Throws without relevant items.
double average_precision(const RankedList& list);
double mean_average_precision(std::span<const double> aps);

enum class ModelKind { gauss, gmm, bic };

struct ModelSpec {
  ModelKind kind = ModelKind::gauss;
  int k = 1;                                 // gmm only
  std::vector<int> bic_candidates{1, 2, 3};  // bic only
  EmOptions em;
  std::uint64_t seed = 0;  // EM cold-start seed

  std::string label() const;
};

struct FittedConcept {
  GmmModel<double> model;
  int chosen_k = 1;
};

/// Embedded concept set -> generative model (closed form, EM, or BIC scan).
FittedConcept fit_concept(const Matrix<double>& descriptors, const ModelSpec& spec);

// Descriptor-level scorers, one score per row of `collection`.
Vector<double> score_s2m(const Matrix<double>& query, const Matrix<double>& collection, const ModelSpec& spec);
Vector<double> score_avg(const Matrix<double>& query, const Matrix<double>& collection);
Vector<double> score_nn(const Matrix<double>& query, const Matrix<double>& collection);

struct LinearScorer {
  Vector<double> u;
  double bias = 0.0;

  Vector<double> score(const Matrix<double>& rows) const {
    return (rows * u).array() + bias;
  }
};

struct SvmOptions {
  double lambda = 1e-2;
  int epochs = 500;
  bool use_bias = true;
};

/// l2-regularized hinge-loss linear classifier by per-sample subgradient
/// steps with the 1/(lambda t) schedule. Positives get label +1.
LinearScorer train_linear_svm(const Matrix<double>& positives, const Matrix<double>& negatives, const SvmOptions& opt,
                              Rng& rng);
double svm_objective(const LinearScorer& s, const Matrix<double>& positives, const Matrix<double>& negatives,
                     double lambda, double* hinge = nullptr);

/// Raw items to rank: one row of features per item.
struct Collection {
  std::vector<std::uint64_t> ids;
  Matrix<double> items;
  std::vector<bool> relevant;
};

RankedList rank_s2m(const EmbeddingNet<double>& net, const Matrix<double>& query, const Collection& c,
                    const ModelSpec& spec);
RankedList rank_avg(const EmbeddingNet<double>& net, const Matrix<double>& query, const Collection& c);
RankedList rank_nn(const EmbeddingNet<double>& net, const Matrix<double>& query, const Collection& c);
/// Trains on the concept set against 2|X| negatives drawn from `negative_pool`.
RankedList rank_svm(const EmbeddingNet<double>& net, const Matrix<double>& query,
                    const Matrix<double>& negative_pool, const Collection& c, Rng& rng, const SvmOptions& opt = {});

/// Index of the class whose fitted model gives the probe the highest
/// log-density; ties go to the smallest index.
int classify_few_shot(const std::vector<Matrix<double>>& class_descriptors, const Vector<double>& probe,
                      const ModelSpec& spec);
int classify_few_shot(const EmbeddingNet<double>& net, const std::vector<Matrix<double>>& class_sets,
                      const Vector<double>& probe, const ModelSpec& spec);
int argmax_first(const Vector<double>& scores);

// ---- Evaluation protocols ----

enum class RankerKind { s2m, avg, nn, svm };

struct Method {
  std::string name;
  RankerKind ranker = RankerKind::s2m;
  ModelSpec model;  // used by the s2m ranker
  SvmOptions svm;
};

struct QueryProtocol {
  int concept_size = 20;
  double noise_fraction = 0.2;
  int queries_per_class = 2;
  std::uint64_t seed = 7;
  bool keep_lists = false;  // store each query's ranked list in the result
};

struct QueryResult {
  int class_id = 0;
  double ap = 0.0;
  RankedList list;  // empty unless the protocol keeps lists
};

struct RetrievalResult {
  std::string method;
  std::vector<QueryResult> queries;
  double map = 0.0;
};

/// For every class in `classes`: sample a noisy concept set (contaminants
/// from the same class list), rank every other item of those classes, and
/// score the ranking by AP. Query sampling depends only on the protocol, so
/// different methods and nets see identical queries.
RetrievalResult evaluate_retrieval(const EmbeddingNet<double>& net, const Dataset& ds, const std::vector<int>& classes,
                                   const Method& method, const QueryProtocol& protocol);

struct FewShotProtocol {
  int ways = 5;
  int shots = 5;
  int episodes = 200;
  int probes_per_class = 1;
  std::uint64_t seed = 11;
};

struct FewShotResult {
  int correct = 0;
  int total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

FewShotResult evaluate_few_shot(const EmbeddingNet<double>& net, const Dataset& ds, const std::vector<int>& classes,
                                const ModelSpec& spec, const FewShotProtocol& protocol);

}  // namespace s2m
