#include "s2m/meta_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <thread>

#include "json.hpp"
#include "s2m/errors.hpp"
#include "s2m/gaussian_model.hpp"
#include "s2m/histogram_loss.hpp"

namespace s2m {

using nlohmann::json;

const char* to_string(RelevanceKind k) {
  switch (k) {
    case RelevanceKind::gauss: return "gauss";
    case RelevanceKind::gmm: return "gmm";
    case RelevanceKind::avg: return "avg";
    case RelevanceKind::nn: return "nn";
  }
  return "gauss";
}

RelevanceKind relevance_from_string(const std::string& s) {
  if (s == "gauss") return RelevanceKind::gauss;
  if (s == "gmm") return RelevanceKind::gmm;
  if (s == "avg") return RelevanceKind::avg;
  if (s == "nn") return RelevanceKind::nn;
  throw UsageError("unknown relevance kind '" + s + "'");
}

void TrainerConfig::validate() const {
  if (!(learning_rate > 0)) throw UsageError("trainer: learning_rate must be positive");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw UsageError("trainer: betas must lie in (0, 1)");
  if (!(adam_eps > 0)) throw UsageError("trainer: adam_eps must be positive");
  if (epochs < 0 || batches_per_epoch < 1 || tuples_per_batch < 1) throw UsageError("trainer: invalid loop sizes");
  if (concept_size < 1 || relevant_size < 1 || irrelevant_size < 1) throw UsageError("trainer: tuple sizes must be positive");
  if (bins < 2) throw UsageError("trainer: bins must be >= 2");
  if (relevance == RelevanceKind::gmm && k < 1) throw UsageError("trainer: k must be >= 1");
  if (concept_noise < 0 || concept_noise >= 0.5) throw UsageError("trainer: concept_noise must lie in [0, 0.5)");
  if (validation_interval < 0) throw UsageError("trainer: validation_interval must be >= 0");
  if (threads < 1) throw UsageError("trainer: threads must be >= 1");
}

Method TrainerConfig::validation_method() const {
  Method m;
  m.name = to_string(relevance);
  m.model.em = em;
  m.model.seed = seed;
  switch (relevance) {
    case RelevanceKind::gauss: m.ranker = RankerKind::s2m; m.model.kind = ModelKind::gauss; break;
    case RelevanceKind::gmm:
      m.ranker = RankerKind::s2m;
      m.model.kind = ModelKind::gmm;
      m.model.k = k;
      break;
    case RelevanceKind::avg: m.ranker = RankerKind::avg; break;
    case RelevanceKind::nn: m.ranker = RankerKind::nn; break;
  }
  return m;
}

LearningTuple sample_tuple(const Dataset& ds, const std::vector<int>& pool_classes, int concept_size,
                           int relevant_size, int irrelevant_size, double concept_noise, Rng& rng) {
  if (pool_classes.size() < 2) throw DataError("sample_tuple: need at least two classes to draw negatives");
  LearningTuple t;
  t.class_id = pool_classes[rng.index(pool_classes.size())];
  const int n_cont = contaminant_count(concept_size, concept_noise);
  auto own = ds.rows_of_class(t.class_id);
  const int need = concept_size - n_cont + relevant_size;
  if (static_cast<int>(own.size()) < need)
    throw DataError("sample_tuple: class " + std::to_string(t.class_id) + " has " + std::to_string(own.size()) +
                    " items, tuple needs " + std::to_string(need));
  for (int i = 0; i < need; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.index(own.size() - static_cast<std::size_t>(i));
    std::swap(own[static_cast<std::size_t>(i)], own[j]);
  }
  t.concept_set.assign(own.begin(), own.begin() + (concept_size - n_cont));
  t.relevant.assign(own.begin() + (concept_size - n_cont), own.begin() + need);

  std::vector<Index> others;
  for (int c : pool_classes) {
    if (c == t.class_id) continue;
    const auto rows = ds.rows_of_class(c);
    others.insert(others.end(), rows.begin(), rows.end());
  }
  if (static_cast<int>(others.size()) < irrelevant_size + n_cont)
    throw DataError("sample_tuple: not enough items outside class " + std::to_string(t.class_id));
  for (int i = 0; i < irrelevant_size + n_cont; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.index(others.size() - static_cast<std::size_t>(i));
    std::swap(others[static_cast<std::size_t>(i)], others[j]);
  }
  t.irrelevant.assign(others.begin(), others.begin() + irrelevant_size);
  t.concept_set.insert(t.concept_set.end(), others.begin() + irrelevant_size, others.begin() + irrelevant_size + n_cont);
  return t;
}

namespace {

struct Embedded {
  Matrix<double> D;
  std::vector<ForwardCache<double>> caches;
};

Embedded embed_items(const EmbeddingNet<double>& net, const Dataset& ds, const std::vector<Index>& rows, bool keep) {
  Embedded e;
  e.D.resize(static_cast<Index>(rows.size()), net.output_dim());
  if (keep) e.caches.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    e.D.row(static_cast<Index>(i)) =
        embed(net, ds.features.row(rows[i]).transpose(), keep ? &e.caches[i] : nullptr).transpose();
  return e;
}

std::uint64_t cold_seed(const TrainerConfig& cfg, int class_id) {
  return cfg.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(class_id) + 1;
}

bool floors_active(const GmmModel<double>& m, const ImplicitOptions& opt) {
  if (m.k() > 1 && m.weights.minCoeff() <= opt.weight_floor * (1 + 1e-9)) return true;
  return m.vars.minCoeff() <= opt.var_floor * (1 + 1e-9);
}

bool uses_model(RelevanceKind k) { return k == RelevanceKind::gauss || k == RelevanceKind::gmm; }
bool closed_form(const TrainerConfig& cfg) {
  return cfg.relevance == RelevanceKind::gauss || (cfg.relevance == RelevanceKind::gmm && cfg.k == 1);
}

// Shared forward (and optional backward) path.
TupleResult run_tuple(const EmbeddingNet<double>& net, const Dataset& ds, const LearningTuple& tuple,
                      const TrainerConfig& cfg, const std::optional<GmmModel<double>>& warm,
                      const std::optional<std::pair<double, double>>& range, GradientTape<double>* tape) {
  if (tuple.concept_set.empty() || tuple.relevant.empty() || tuple.irrelevant.empty())
    throw DataError("tuple: all three sets must be nonempty");
  const bool backward = tape != nullptr;
  TupleResult res;
  const Embedded X = embed_items(net, ds, tuple.concept_set, backward);
  const Embedded Zp = embed_items(net, ds, tuple.relevant, backward);
  const Embedded Zm = embed_items(net, ds, tuple.irrelevant, backward);
  const Index n = net.output_dim(), N = X.D.rows();

  GmmModel<double> model;
  Matrix<double> resp;
  if (closed_form(cfg)) {
    model = GmmModel<double>::from_gaussian(fit_gaussian(X.D, cfg.em.var_floor));
  } else if (cfg.relevance == RelevanceKind::gmm) {
    if (N < cfg.k) {
      res.skipped = true;
      res.skip_reason = "concept set smaller than k";
      return res;
    }
    const bool use_warm = warm && warm->k() == cfg.k && warm->dim() == n;
    const EmInit<double> cold = ColdStart{cold_seed(cfg, tuple.class_id)};
    auto fit = fit_gmm_em(X.D, cfg.k, use_warm ? EmInit<double>(WarmStart<double>{*warm}) : cold, cfg.em);
    // A stale cached model can pin a component to a floor; retry once from scratch.
    if (use_warm && floors_active(fit.model, cfg.implicit)) {
      auto fresh = fit_gmm_em(X.D, cfg.k, cold, cfg.em);
      if (!floors_active(fresh.model, cfg.implicit)) fit = std::move(fresh);
    }
    res.em_iterations = fit.trace.iterations;
    if (!fit.trace.converged) {
      res.skipped = true;
      res.skip_reason = "EM did not reach stationarity";
      res.fitted = fit.model;
      return res;
    }
    model = std::move(fit.model);
    resp = std::move(fit.resp);
  }
  if (uses_model(cfg.relevance)) res.fitted = model;

  auto relevance = [&](const Vector<double>& z) -> double {
    switch (cfg.relevance) {
      case RelevanceKind::gauss:
      case RelevanceKind::gmm: return gmm_logpdf(model, z);
      case RelevanceKind::avg: return X.D.colwise().mean().dot(z.transpose());
      case RelevanceKind::nn: return (X.D * z).maxCoeff();
    }
    return 0.0;
  };
  RelevanceSets<double> rel;
  rel.plus.resize(Zp.D.rows());
  rel.minus.resize(Zm.D.rows());
  for (Index i = 0; i < Zp.D.rows(); ++i) rel.plus(i) = relevance(Zp.D.row(i).transpose());
  for (Index i = 0; i < Zm.D.rows(); ++i) rel.minus(i) = relevance(Zm.D.row(i).transpose());
  const auto hp = build_histograms(rel, cfg.bins, range);
  res.loss = histogram_loss(hp);
  res.range = {hp.l_min, hp.l_max};
  if (!backward) return res;

  const auto hg = histogram_loss_backward(rel, cfg.bins, std::optional<std::pair<double, double>>(res.range));
  if (hg.degenerate || (hg.d_plus.cwiseAbs().maxCoeff() == 0.0 && hg.d_minus.cwiseAbs().maxCoeff() == 0.0))
    return res;

  // Upstream gradients for every embedded item.
  Matrix<double> gX = Matrix<double>::Zero(N, n);
  Matrix<double> gZp(Zp.D.rows(), n), gZm(Zm.D.rows(), n);
  const ParamLayout layout{model.k(), n};
  Vector<double> dtheta = Vector<double>::Zero(uses_model(cfg.relevance) ? layout.size() : 0);
  const Vector<double> mean = X.D.colwise().mean().transpose();

  auto visit = [&](const Matrix<double>& Z, const Vector<double>& dr, Matrix<double>& gZ) {
    for (Index i = 0; i < Z.rows(); ++i) {
      const Vector<double> z = Z.row(i).transpose();
      const double w = dr(i);
      switch (cfg.relevance) {
        case RelevanceKind::gauss:
        case RelevanceKind::gmm:
          gZ.row(i) = w * gmm_logpdf_grad_z(model, z).transpose();
          if (w != 0.0) dtheta += w * gmm_logpdf_grad_theta(model, z);
          break;
        case RelevanceKind::avg:
          gZ.row(i) = w * mean.transpose();
          gX.rowwise() += (w / static_cast<double>(N)) * z.transpose();
          break;
        case RelevanceKind::nn: {
          Index best;
          (X.D * z).maxCoeff(&best);
          gZ.row(i) = w * X.D.row(best);
          gX.row(best) += w * z.transpose();
          break;
        }
      }
    }
  };
  visit(Zp.D, hg.d_plus, gZp);
  visit(Zm.D, hg.d_minus, gZm);

  if (closed_form(cfg)) {
    gX = gaussian_backprop_fit<Matrix<double>, double>(X.D, dtheta.head(n), dtheta.segment(n, n), cfg.em.var_floor);
  } else if (cfg.relevance == RelevanceKind::gmm) {
    try {
      const ImplicitSystem<double> sys(model, X.D, resp, cfg.implicit);
      gX = sys.backprop(dtheta);
    } catch (const NumericError& e) {
      res.skipped = true;
      res.skip_reason = e.what();
      return res;
    }
  }

  GradientTape<double> local(net);
  for (Index i = 0; i < N; ++i) embed_backward(net, X.caches[static_cast<std::size_t>(i)], gX.row(i).transpose(), local);
  for (Index i = 0; i < Zp.D.rows(); ++i)
    embed_backward(net, Zp.caches[static_cast<std::size_t>(i)], gZp.row(i).transpose(), local);
  for (Index i = 0; i < Zm.D.rows(); ++i)
    embed_backward(net, Zm.caches[static_cast<std::size_t>(i)], gZm.row(i).transpose(), local);
  *tape += local;
  return res;
}

std::optional<GmmModel<double>> cached_model(const WarmStartCache& cache, int class_id) {
  const auto it = cache.find(class_id);
  if (it == cache.end()) return std::nullopt;
  return it->second;
}

}  // namespace

TupleResult tuple_forward_backward(const EmbeddingNet<double>& net, const Dataset& ds, const LearningTuple& tuple,
                                   const TrainerConfig& cfg, const WarmStartCache& cache, GradientTape<double>& tape) {
  if (!tape.matches(net)) throw DataError("tuple_forward_backward: tape does not match net");
  return run_tuple(net, ds, tuple, cfg, cached_model(cache, tuple.class_id), std::nullopt, &tape);
}

TupleResult tuple_forward_backward(const EmbeddingNet<double>& net, const Dataset& ds, const LearningTuple& tuple,
                                   const TrainerConfig& cfg, WarmStartCache& cache, GradientTape<double>& tape) {
  auto r = tuple_forward_backward(net, ds, tuple, cfg, static_cast<const WarmStartCache&>(cache), tape);
  if (r.fitted && cfg.relevance == RelevanceKind::gmm) cache[tuple.class_id] = *r.fitted;
  return r;
}

TupleResult tuple_loss(const EmbeddingNet<double>& net, const Dataset& ds, const LearningTuple& tuple,
                       const TrainerConfig& cfg, const std::optional<GmmModel<double>>& warm,
                       const std::optional<std::pair<double, double>>& range) {
  return run_tuple(net, ds, tuple, cfg, warm, range, nullptr);
}

void adam_step(EmbeddingNet<double>& net, const GradientTape<double>& grad, AdamState& s, double lr, double beta1,
               double beta2, double eps) {
  if (!grad.matches(net)) throw DataError("adam_step: gradient shape does not match net");
  if (s.m.d_weight.empty()) {
    s.m = GradientTape<double>(net);
    s.v = GradientTape<double>(net);
  }
  if (!s.m.matches(net)) throw DataError("adam_step: optimizer state shape does not match net");
  ++s.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.step));
  auto update = [&](auto& w, auto& m, auto& v, const auto& g) {
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    update(net.layers[i].weight, s.m.d_weight[i], s.v.d_weight[i], grad.d_weight[i]);
    update(net.layers[i].bias, s.m.d_bias[i], s.v.d_bias[i], grad.d_bias[i]);
  }
}

namespace {

template <typename F>
void parallel_for(int count, int threads, F&& body) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < count; i += threads) body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

TrainResult train(const Dataset& ds, const TrainerConfig& cfg, const EmbeddingNet<double>& initial) {
  cfg.validate();
  initial.validate();
  if (initial.input_dim() != ds.input_dim) throw DataError("train: net input dimension does not match dataset");
  const auto train_classes = ds.class_ids(Split::train);
  const auto val_classes = ds.class_ids(Split::val);
  {
    std::set<int> a(train_classes.begin(), train_classes.end());
    for (int c : val_classes)
      if (a.count(c)) throw DataError("train: class " + std::to_string(c) + " is in both train and val splits");
  }

  TrainResult out;
  out.net = initial;
  if (cfg.epochs == 0) return out;
  if (train_classes.size() < 2) throw DataError("train: need at least two training classes");

  EmbeddingNet<double> net = initial;
  AdamState adam;
  WarmStartCache cache;
  Rng rng(cfg.seed);
  const Method val_method = cfg.validation_method();
  long step = 0;

  auto validate_now = [&]() {
    if (val_classes.empty()) return;
    const double map = evaluate_retrieval(net, ds, val_classes, val_method, cfg.validation).map;
    json rec = {{"type", "validation"}, {"step", step}, {"map", map}};
    out.log.push_back(rec.dump());
    if (step == 0) {
      out.initial_val_map = map;
      out.best_val_map = map;
      out.net = net;
    } else if (map > out.best_val_map) {
      out.best_val_map = map;
      out.best_step = step;
      out.net = net;
    }
  };
  validate_now();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    long epoch_tuples = 0, epoch_skipped = 0;
    for (int b = 0; b < cfg.batches_per_epoch; ++b) {
      std::vector<LearningTuple> tuples;
      for (int t = 0; t < cfg.tuples_per_batch; ++t)
        tuples.push_back(sample_tuple(ds, train_classes, cfg.concept_size, cfg.relevant_size, cfg.irrelevant_size,
                                      cfg.concept_noise, rng));
      std::vector<TupleResult> results(tuples.size());
      std::vector<GradientTape<double>> tapes(tuples.size(), GradientTape<double>(net));
      // Workers read the batch-start cache; updates are applied afterwards in tuple order.
      parallel_for(static_cast<int>(tuples.size()), cfg.threads, [&](int i) {
        const auto si = static_cast<std::size_t>(i);
        results[si] = tuple_forward_backward(net, ds, tuples[si], cfg, static_cast<const WarmStartCache&>(cache), tapes[si]);
      });

      GradientTape<double> grad(net);
      int used = 0, skipped = 0;
      double loss_sum = 0.0;
      json skips = json::array();
      for (std::size_t i = 0; i < tuples.size(); ++i) {
        if (results[i].fitted && cfg.relevance == RelevanceKind::gmm) cache[tuples[i].class_id] = *results[i].fitted;
        if (results[i].skipped) {
          ++skipped;
          skips.push_back(results[i].skip_reason);
          continue;
        }
        grad += tapes[i];
        loss_sum += results[i].loss;
        ++used;
      }
      if (used > 0) {
        grad *= 1.0 / used;
        adam_step(net, grad, adam, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
      }
      ++step;
      epoch_tuples += static_cast<long>(tuples.size());
      epoch_skipped += skipped;
      out.skipped_tuples += skipped;
      json rec = {{"type", "batch"}, {"epoch", epoch},   {"batch", b},       {"step", step},
                  {"loss", used ? loss_sum / used : 0.0}, {"tuples", used}, {"skipped", skipped}};
      if (!skips.empty()) rec["skip_reasons"] = skips;
      out.log.push_back(rec.dump());
      if (cfg.validation_interval > 0 && step % cfg.validation_interval == 0) validate_now();
    }
    if (static_cast<double>(epoch_skipped) > cfg.max_skip_fraction * static_cast<double>(epoch_tuples))
      throw NumericError("train: " + std::to_string(epoch_skipped) + " of " + std::to_string(epoch_tuples) +
                         " tuples skipped in epoch " + std::to_string(epoch));
  }
  if (cfg.validation_interval == 0 || step % cfg.validation_interval != 0) validate_now();
  if (val_classes.empty()) out.net = net;
  return out;
}

}  // namespace s2m
