#include "s2m/retrieval_eval.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>

#include "s2m/errors.hpp"
#include "s2m/gaussian_model.hpp"

namespace s2m {

RankedList make_ranked_list(std::span<const std::uint64_t> ids, std::span<const double> scores,
                            const std::vector<bool>& relevant) {
  if (ids.size() != scores.size() || ids.size() != relevant.size())
    throw DataError("ranked list: ids, scores and relevance must have equal length");
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  RankedList out;
  out.ids.reserve(ids.size());
  out.scores.reserve(ids.size());
  out.relevant.reserve(ids.size());
  for (std::size_t i : order) {
    out.ids.push_back(ids[i]);
    out.scores.push_back(scores[i]);
    out.relevant.push_back(relevant[i]);
  }
  return out;
}

double average_precision(const RankedList& list) {
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < list.size(); ++i) {
    if (!list.relevant[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  if (hits == 0) throw DataError("average_precision: ranking has no relevant items");
  return sum / static_cast<double>(hits);
}

double mean_average_precision(std::span<const double> aps) {
  if (aps.empty()) throw DataError("mean_average_precision: no queries");
  return std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(aps.size());
}

std::string ModelSpec::label() const {
  switch (kind) {
    case ModelKind::gauss: return "gauss";
    case ModelKind::gmm: return "gmm" + std::to_string(k);
    case ModelKind::bic: return "bic";
  }
  return "?";
}

FittedConcept fit_concept(const Matrix<double>& D, const ModelSpec& spec) {
  FittedConcept f;
  switch (spec.kind) {
    case ModelKind::gauss:
      f.model = GmmModel<double>::from_gaussian(fit_gaussian(D, spec.em.var_floor));
      f.chosen_k = 1;
      break;
    case ModelKind::gmm: {
      if (spec.k == 1) {
        f.model = GmmModel<double>::from_gaussian(fit_gaussian(D, spec.em.var_floor));
      } else {
        f.model = fit_gmm_em(D, spec.k, EmInit<double>{ColdStart{spec.seed}}, spec.em).model;
      }
      f.chosen_k = spec.k;
      break;
    }
    case ModelKind::bic: {
      std::vector<int> ks;
      for (int k : spec.bic_candidates)
        if (k <= D.rows()) ks.push_back(k);
      if (ks.empty()) ks.push_back(1);
      auto r = select_by_bic(D, ks, spec.seed, spec.em);
      f.model = std::move(r.model);
      f.chosen_k = r.chosen_k;
      break;
    }
  }
  return f;
}

Vector<double> score_s2m(const Matrix<double>& query, const Matrix<double>& collection, const ModelSpec& spec) {
  if (query.rows() == 0) throw DataError("rank: empty concept set");
  const auto fitted = fit_concept(query, spec);
  Vector<double> s(collection.rows());
  for (Index i = 0; i < collection.rows(); ++i) s(i) = gmm_logpdf(fitted.model, collection.row(i).transpose());
  return s;
}

Vector<double> score_avg(const Matrix<double>& query, const Matrix<double>& collection) {
  if (query.rows() == 0) throw DataError("rank_avg: empty concept set");
  const Vector<double> mean = query.colwise().mean().transpose();
  return collection * mean;
}

Vector<double> score_nn(const Matrix<double>& query, const Matrix<double>& collection) {
  if (query.rows() == 0) throw DataError("rank_nn: empty concept set");
  return (collection * query.transpose()).rowwise().maxCoeff();
}

double svm_objective(const LinearScorer& s, const Matrix<double>& pos, const Matrix<double>& neg, double lambda,
                     double* hinge) {
  const Vector<double> sp = s.score(pos), sn = s.score(neg);
  const double h = ((1.0 - sp.array()).max(0.0).sum() + (1.0 + sn.array()).max(0.0).sum()) /
                   static_cast<double>(pos.rows() + neg.rows());
  if (hinge) *hinge = h;
  return 0.5 * lambda * (s.u.squaredNorm() + s.bias * s.bias) + h;
}

LinearScorer train_linear_svm(const Matrix<double>& pos, const Matrix<double>& neg, const SvmOptions& opt, Rng& rng) {
  if (pos.rows() == 0 || neg.rows() == 0) throw DataError("svm: need positives and negatives");
  if (pos.cols() != neg.cols()) throw DataError("svm: dimension mismatch");
  if (!(opt.lambda > 0)) throw DataError("svm: lambda must be positive");
  const Index n = pos.cols(), M = pos.rows() + neg.rows();
  // With a bias the feature vector is augmented by a constant 1, so the
  // bias is regularized like every other coordinate.
  const Index dim = opt.use_bias ? n + 1 : n;
  Matrix<double> X(M, dim);
  Vector<double> y(M);
  X.setOnes();
  X.topLeftCorner(pos.rows(), n) = pos;
  X.bottomLeftCorner(neg.rows(), n) = neg;
  y.head(pos.rows()).setOnes();
  y.tail(neg.rows()).setConstant(-1.0);

  auto as_scorer = [&](const Vector<double>& w) {
    LinearScorer s;
    s.u = w.head(n);
    s.bias = opt.use_bias ? w(n) : 0.0;
    return s;
  };

  Vector<double> w = Vector<double>::Zero(dim);
  LinearScorer best = as_scorer(w);
  double best_obj = svm_objective(best, pos, neg, opt.lambda);
  std::vector<Index> order(static_cast<std::size_t>(M));
  std::iota(order.begin(), order.end(), Index{0});
  long t = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order);
    for (Index idx : order) {
      ++t;
      const double eta = 1.0 / (opt.lambda * static_cast<double>(t));
      const double margin = y(idx) * X.row(idx).dot(w);
      w *= (1.0 - eta * opt.lambda);
      if (margin < 1.0) w += eta * y(idx) * X.row(idx).transpose();
    }
    const LinearScorer cur = as_scorer(w);
    const double obj = svm_objective(cur, pos, neg, opt.lambda);
    if (obj < best_obj) {
      best_obj = obj;
      best = cur;
    }
  }
  return best;
}

namespace {

RankedList rank_from_scores(const Collection& c, const Vector<double>& s) {
  return make_ranked_list(c.ids, std::span<const double>(s.data(), static_cast<std::size_t>(s.size())), c.relevant);
}

}  // namespace

RankedList rank_s2m(const EmbeddingNet<double>& net, const Matrix<double>& query, const Collection& c,
                    const ModelSpec& spec) {
  return rank_from_scores(c, score_s2m(embed_rows(net, query), embed_rows(net, c.items), spec));
}

RankedList rank_avg(const EmbeddingNet<double>& net, const Matrix<double>& query, const Collection& c) {
  return rank_from_scores(c, score_avg(embed_rows(net, query), embed_rows(net, c.items)));
}

RankedList rank_nn(const EmbeddingNet<double>& net, const Matrix<double>& query, const Collection& c) {
  return rank_from_scores(c, score_nn(embed_rows(net, query), embed_rows(net, c.items)));
}

namespace {

Matrix<double> sample_negatives(const Matrix<double>& pool, Index count, Rng& rng) {
  if (pool.rows() < count)
    throw DataError("svm: need " + std::to_string(count) + " negatives, pool has " + std::to_string(pool.rows()));
  std::vector<Index> idx(static_cast<std::size_t>(pool.rows()));
  std::iota(idx.begin(), idx.end(), Index{0});
  Matrix<double> out(count, pool.cols());
  for (Index i = 0; i < count; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.index(idx.size() - static_cast<std::size_t>(i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    out.row(i) = pool.row(idx[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace

RankedList rank_svm(const EmbeddingNet<double>& net, const Matrix<double>& query, const Matrix<double>& negative_pool,
                    const Collection& c, Rng& rng, const SvmOptions& opt) {
  if (query.rows() == 0) throw DataError("rank_svm: empty concept set");
  const Matrix<double> pos = embed_rows(net, query);
  const Matrix<double> neg = embed_rows(net, sample_negatives(negative_pool, 2 * query.rows(), rng));
  const auto scorer = train_linear_svm(pos, neg, opt, rng);
  return rank_from_scores(c, scorer.score(embed_rows(net, c.items)));
}

int argmax_first(const Vector<double>& scores) {
  int best = 0;
  for (Index i = 1; i < scores.size(); ++i)
    if (scores(i) > scores(best)) best = static_cast<int>(i);
  return best;
}

int classify_few_shot(const std::vector<Matrix<double>>& class_descriptors, const Vector<double>& probe,
                      const ModelSpec& spec) {
  if (class_descriptors.size() < 2) throw DataError("classify_few_shot: need at least two classes");
  Vector<double> scores(static_cast<Index>(class_descriptors.size()));
  for (std::size_t c = 0; c < class_descriptors.size(); ++c) {
    if (class_descriptors[c].rows() == 0) throw DataError("classify_few_shot: class set " + std::to_string(c) + " is empty");
    scores(static_cast<Index>(c)) = gmm_logpdf(fit_concept(class_descriptors[c], spec).model, probe);
  }
  return argmax_first(scores);
}

int classify_few_shot(const EmbeddingNet<double>& net, const std::vector<Matrix<double>>& class_sets,
                      const Vector<double>& probe, const ModelSpec& spec) {
  std::vector<Matrix<double>> D;
  D.reserve(class_sets.size());
  for (const auto& s : class_sets) D.push_back(embed_rows(net, s));
  return classify_few_shot(D, embed(net, probe), spec);
}

namespace {

Matrix<double> gather_rows(const Matrix<double>& src, const std::vector<Index>& rows) {
  Matrix<double> out(static_cast<Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = src.row(rows[i]);
  return out;
}

}  // namespace

RetrievalResult evaluate_retrieval(const EmbeddingNet<double>& net, const Dataset& ds, const std::vector<int>& classes,
                                   const Method& method, const QueryProtocol& protocol) {
  if (classes.empty()) throw DataError("evaluate_retrieval: no classes to evaluate");
  std::vector<Index> pool_rows;
  for (Index r = 0; r < ds.size(); ++r)
    if (std::find(classes.begin(), classes.end(), ds.item_class[static_cast<std::size_t>(r)]) != classes.end())
      pool_rows.push_back(r);
  // Embed the split once; rows of E align with pool_rows.
  const Matrix<double> E = embed_rows(net, gather_rows(ds.features, pool_rows));
  std::vector<Index> pos_of(static_cast<std::size_t>(ds.size()), -1);
  for (std::size_t i = 0; i < pool_rows.size(); ++i) pos_of[static_cast<std::size_t>(pool_rows[i])] = static_cast<Index>(i);

  RetrievalResult res;
  res.method = method.name;
  Rng rng(protocol.seed);
  Rng svm_rng(protocol.seed ^ 0x5bd1e995ULL);
  for (int rep = 0; rep < protocol.queries_per_class; ++rep) {
    for (int cls : classes) {
      const auto concept_rows =
          sample_noisy_concept_set(ds, cls, protocol.concept_size, protocol.noise_fraction, rng, classes);
      std::set<Index> in_concept(concept_rows.begin(), concept_rows.end());
      std::vector<Index> concept_pos, coll_pos, neg_pos;
      for (Index r : concept_rows) concept_pos.push_back(pos_of[static_cast<std::size_t>(r)]);
      Collection meta;
      for (Index r : pool_rows) {
        if (in_concept.count(r)) continue;
        coll_pos.push_back(pos_of[static_cast<std::size_t>(r)]);
        meta.ids.push_back(ds.item_ids[static_cast<std::size_t>(r)]);
        const bool rel = ds.item_class[static_cast<std::size_t>(r)] == cls;
        meta.relevant.push_back(rel);
        if (!rel) neg_pos.push_back(pos_of[static_cast<std::size_t>(r)]);
      }
      const Matrix<double> Dx = gather_rows(E, concept_pos);
      const Matrix<double> Dc = gather_rows(E, coll_pos);
      Vector<double> s;
      switch (method.ranker) {
        case RankerKind::s2m: s = score_s2m(Dx, Dc, method.model); break;
        case RankerKind::avg: s = score_avg(Dx, Dc); break;
        case RankerKind::nn: s = score_nn(Dx, Dc); break;
        case RankerKind::svm: {
          const Matrix<double> pool = gather_rows(E, neg_pos);
          const Matrix<double> neg = sample_negatives(pool, 2 * Dx.rows(), svm_rng);
          s = train_linear_svm(Dx, neg, method.svm, svm_rng).score(Dc);
          break;
        }
      }
      const auto list =
          make_ranked_list(meta.ids, std::span<const double>(s.data(), static_cast<std::size_t>(s.size())), meta.relevant);
      res.queries.push_back({cls, average_precision(list), protocol.keep_lists ? list : RankedList{}});
    }
  }
  std::vector<double> aps;
  for (const auto& q : res.queries) aps.push_back(q.ap);
  res.map = mean_average_precision(aps);
  return res;
}

FewShotResult evaluate_few_shot(const EmbeddingNet<double>& net, const Dataset& ds, const std::vector<int>& classes,
                                const ModelSpec& spec, const FewShotProtocol& p) {
  if (p.ways < 2) throw DataError("few-shot: need at least two ways");
  if (static_cast<int>(classes.size()) < p.ways)
    throw DataError("few-shot: " + std::to_string(classes.size()) + " classes available, " + std::to_string(p.ways) +
                    " ways requested");
  Rng rng(p.seed);
  FewShotResult res;
  std::vector<int> pool = classes;
  for (int ep = 0; ep < p.episodes; ++ep) {
    // Partial shuffle picks the episode's classes.
    for (int i = 0; i < p.ways; ++i) {
      const std::size_t j = static_cast<std::size_t>(i) + rng.index(pool.size() - static_cast<std::size_t>(i));
      std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    }
    std::vector<Matrix<double>> support;
    std::vector<std::vector<Index>> probes;
    for (int w = 0; w < p.ways; ++w) {
      auto rows = ds.rows_of_class(pool[static_cast<std::size_t>(w)]);
      if (static_cast<int>(rows.size()) < p.shots + p.probes_per_class)
        throw DataError("few-shot: class " + std::to_string(pool[static_cast<std::size_t>(w)]) + " too small");
      for (int i = 0; i < p.shots + p.probes_per_class; ++i) {
        const std::size_t j = static_cast<std::size_t>(i) + rng.index(rows.size() - static_cast<std::size_t>(i));
        std::swap(rows[static_cast<std::size_t>(i)], rows[j]);
      }
      support.push_back(embed_rows(net, gather_rows(ds.features, std::vector<Index>(rows.begin(), rows.begin() + p.shots))));
      probes.emplace_back(rows.begin() + p.shots, rows.begin() + p.shots + p.probes_per_class);
    }
    std::vector<GmmModel<double>> models;
    for (const auto& s : support) models.push_back(fit_concept(s, spec).model);
    for (int w = 0; w < p.ways; ++w)
      for (Index r : probes[static_cast<std::size_t>(w)]) {
        const Vector<double> z = embed(net, ds.features.row(r).transpose());
        Vector<double> scores(p.ways);
        for (int c = 0; c < p.ways; ++c) scores(c) = gmm_logpdf(models[static_cast<std::size_t>(c)], z);
        res.correct += argmax_first(scores) == w ? 1 : 0;
        ++res.total;
      }
  }
  return res;
}

}  // namespace s2m
