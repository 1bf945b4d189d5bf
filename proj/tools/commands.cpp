#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "s2m/errors.hpp"
#include "s2m/model_io.hpp"

namespace s2m::cli {

namespace fs = std::filesystem;

namespace {

// ---- enum names ----

template <typename E>
const std::vector<std::pair<E, const char*>>& enum_names();

template <>
const std::vector<std::pair<RelevanceKind, const char*>>& enum_names() {
  static const std::vector<std::pair<RelevanceKind, const char*>> v{
      {RelevanceKind::gauss, "gauss"}, {RelevanceKind::gmm, "gmm"}, {RelevanceKind::avg, "avg"}, {RelevanceKind::nn, "nn"}};
  return v;
}
template <>
const std::vector<std::pair<RankerKind, const char*>>& enum_names() {
  static const std::vector<std::pair<RankerKind, const char*>> v{
      {RankerKind::s2m, "s2m"}, {RankerKind::avg, "avg"}, {RankerKind::nn, "nn"}, {RankerKind::svm, "svm"}};
  return v;
}
template <>
const std::vector<std::pair<ModelKind, const char*>>& enum_names() {
  static const std::vector<std::pair<ModelKind, const char*>> v{
      {ModelKind::gauss, "gauss"}, {ModelKind::gmm, "gmm"}, {ModelKind::bic, "bic"}};
  return v;
}
template <>
const std::vector<std::pair<Split, const char*>>& enum_names() {
  static const std::vector<std::pair<Split, const char*>> v{
      {Split::train, "train"}, {Split::val, "val"}, {Split::test, "test"}};
  return v;
}
template <>
const std::vector<std::pair<SolveMode, const char*>>& enum_names() {
  static const std::vector<std::pair<SolveMode, const char*>> v{
      {SolveMode::automatic, "automatic"}, {SolveMode::dense, "dense"}, {SolveMode::sparse, "sparse"}};
  return v;
}

template <typename E>
const char* name_of(E e) {
  for (const auto& [v, s] : enum_names<E>())
    if (v == e) return s;
  return "?";
}

[[noreturn]] void bad(const std::string& path, const std::string& what) {
  throw UsageError("config: " + path + ": " + what);
}

// ---- reading ----

class Reader;
template <typename T>
void read(const json& j, T& v, const std::string& path);

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad(path_, "expected an object");
  }

  template <typename T>
  void operator()(const char* key, T& v) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    read(*it, v, path_ + "." + key);
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) bad(path_ + "." + item.key(), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  template <typename T>
  void operator()(const char* key, T& v);
  json out = json::object();
};

// ---- field lists ----

template <typename V>
void visit(V& v, SynthSpec& s) {
  v("num_classes", s.num_classes);
  v("items_per_class", s.items_per_class);
  v("clusters_per_class", s.clusters_per_class);
  v("latent_dim", s.latent_dim);
  v("input_dim", s.input_dim);
  v("hidden_dim", s.hidden_dim);
  v("noise_fraction", s.noise_fraction);
  v("train_classes", s.train_classes);
  v("val_classes", s.val_classes);
  v("test_classes", s.test_classes);
  v("min_component_std", s.min_component_std);
  v("max_component_std", s.max_component_std);
  v("separation", s.separation);
  v("nuisance_dim", s.nuisance_dim);
  v("nuisance_scale", s.nuisance_scale);
  v("input_noise", s.input_noise);
}

template <typename V>
void visit(V& v, NetSection& s) {
  v("hidden", s.hidden);
  v("embed_dim", s.embed_dim);
}

template <typename V>
void visit(V& v, QueryProtocol& p) {
  v("concept_size", p.concept_size);
  v("noise_fraction", p.noise_fraction);
  v("queries_per_class", p.queries_per_class);
}

template <typename V>
void visit(V& v, TrainSection& s) {
  auto& t = s.trainer;
  v("relevance", s.relevances);
  v("learning_rate", t.learning_rate);
  v("beta1", t.beta1);
  v("beta2", t.beta2);
  v("adam_eps", t.adam_eps);
  v("epochs", t.epochs);
  v("batches_per_epoch", t.batches_per_epoch);
  v("tuples_per_batch", t.tuples_per_batch);
  v("k", t.k);
  v("bins", t.bins);
  v("concept_size", t.concept_size);
  v("relevant_size", t.relevant_size);
  v("irrelevant_size", t.irrelevant_size);
  v("concept_noise", t.concept_noise);
  v("validation_interval", t.validation_interval);
  v("max_skip_fraction", t.max_skip_fraction);
  v("validation", t.validation);
}

template <typename V>
void visit(V& v, EmOptions& e) {
  v("rel_tol", e.rel_tol);
  v("max_iter", e.max_iter);
  v("var_floor", e.var_floor);
  v("weight_floor", e.weight_floor);
  v("restarts", e.restarts);
}

template <typename V>
void visit(V& v, ImplicitOptions& o) {
  v("sat_tol", o.sat_tol);
  v("use_saturation", o.use_saturation);
  v("solve", o.mode);
  v("max_condition", o.max_condition);
}

template <typename V>
void visit(V& v, SvmOptions& o) {
  v("lambda", o.lambda);
  v("epochs", o.epochs);
  v("use_bias", o.use_bias);
}

template <typename V>
void visit(V& v, MethodSection& m) {
  v("name", m.name);
  v("net", m.net);
  v("ranker", m.ranker);
  v("model", m.model);
  v("k", m.k);
  v("bic_candidates", m.bic_candidates);
  v("svm", m.svm);
}

template <typename V>
void visit(V& v, EvalSection& e) {
  v("split", e.split);
  v("concept_size", e.concept_size);
  v("noise_fraction", e.noise_fraction);
  v("queries_per_class", e.queries_per_class);
  v("csv", e.csv);
  v("csv_top", e.csv_top);
  v("methods", e.methods);
}

template <typename V>
void visit(V& v, FewShotSection& f) {
  v("split", f.split);
  v("ways", f.ways);
  v("shots", f.shots);
  v("episodes", f.episodes);
  v("probes_per_class", f.probes_per_class);
  v("net", f.net);
  v("model", f.model);
  v("k", f.k);
  v("bic_candidates", f.bic_candidates);
}

template <typename V>
void visit(V& v, FitSection& f) {
  v("model", f.model);
  v("k", f.k);
  v("bic_candidates", f.bic_candidates);
  v("input", f.input);
  v("output", f.output);
}

template <typename V>
void visit(V& v, check::EndToEndSetup& s) {
  v("relevance", s.relevance);
  v("k", s.k);
  v("bins", s.bins);
  v("concept_size", s.concept_size);
  v("relevant_size", s.relevant_size);
  v("irrelevant_size", s.irrelevant_size);
  v("hidden", s.hidden);
  v("embed_dim", s.embed_dim);
  v("h", s.h);
}

template <typename V>
void visit(V& v, GradcheckSection& g) {
  v("instances", g.instances);
  v("end_to_end", g.end_to_end);
}

template <typename V>
void visit(V& v, RunConfig& c) {
  v("seed", c.seed);
  v("threads", c.threads);
  v("out", c.out);
  v("dataset", c.dataset);
  v("synth", c.synth);
  v("net", c.net);
  v("train", c.train);
  v("em", c.em);
  v("implicit", c.implicit);
  v("eval", c.eval);
  v("fewshot", c.fewshot);
  v("fit", c.fit);
  v("gradcheck", c.gradcheck);
}

template <typename T>
concept Visitable = requires(Reader& r, T& t) { visit(r, t); };

template <typename T>
concept Named = requires(T e) { name_of(e); } && std::is_enum_v<T>;

template <typename T>
void read(const json& j, T& v, const std::string& path) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) bad(path, "expected a boolean");
    v = j.get<bool>();
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    if (!j.is_number_unsigned()) bad(path, "expected a non-negative integer");
    v = j.get<T>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) bad(path, "expected an integer");
    const auto x = j.get<std::int64_t>();
    if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max()) bad(path, "integer out of range");
    v = static_cast<T>(x);
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) bad(path, "expected a number");
    v = j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) bad(path, "expected a string");
    v = j.get<std::string>();
  } else if constexpr (std::is_enum_v<T>) {
    if (!j.is_string()) bad(path, "expected a string");
    const auto s = j.get<std::string>();
    for (const auto& [e, name] : enum_names<T>())
      if (s == name) {
        v = e;
        return;
      }
    std::string allowed;
    for (const auto& [e, name] : enum_names<T>()) allowed += (allowed.empty() ? "" : "|") + std::string(name);
    bad(path, "unknown value '" + s + "' (expected " + allowed + ")");
  } else if constexpr (Visitable<T>) {
    Reader r(j, path);
    visit(r, v);
    r.finish();
  } else {
    // std::vector; a bare string is accepted for a one-element enum list.
    using E = typename T::value_type;
    if constexpr (std::is_enum_v<E>) {
      if (j.is_string()) {
        v.assign(1, E{});
        read(j, v[0], path);
        return;
      }
    }
    if (!j.is_array()) bad(path, "expected an array");
    T out(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) read(j[i], out[i], path + "[" + std::to_string(i) + "]");
    v = std::move(out);
  }
}

template <typename T>
json write(T& v) {
  if constexpr (std::is_enum_v<T>) {
    return name_of(v);
  } else if constexpr (Visitable<T>) {
    Writer w;
    visit(w, v);
    return w.out;
  } else if constexpr (std::is_arithmetic_v<T> || std::is_same_v<T, std::string>) {
    return v;
  } else {
    json a = json::array();
    for (auto& x : v) a.push_back(write(x));
    return a;
  }
}

template <typename T>
void Writer::operator()(const char* key, T& v) {
  out[key] = write(v);
}

MethodSection method(std::string name, std::string net, RankerKind ranker, ModelKind model = ModelKind::gauss,
                     int k = 1) {
  MethodSection m;
  m.name = std::move(name);
  m.net = std::move(net);
  m.ranker = ranker;
  m.model = model;
  m.k = k;
  return m;
}

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) bad(path, what);
}

// ---- artifacts ----

fs::path out_dir(const RunConfig& cfg) {
  const fs::path p(cfg.out);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw DataError("cannot create output directory " + cfg.out + ": " + ec.message());
  return p;
}

void write_json(const fs::path& p, const json& j) { write_text_file(p.string(), j.dump(2) + "\n"); }

// Provenance copy of the resolved config, one per command.
void record_config(const RunConfig& cfg, const std::string& command) {
  write_json(out_dir(cfg) / ("config_" + command + ".json"), config_to_json(cfg));
}

std::vector<Index> net_dims(const RunConfig& cfg, Index input_dim) {
  std::vector<Index> dims{input_dim};
  dims.insert(dims.end(), cfg.net.hidden.begin(), cfg.net.hidden.end());
  dims.push_back(cfg.net.embed_dim);
  return dims;
}

bool is_relevance_name(const std::string& s) {
  for (const auto& [e, name] : enum_names<RelevanceKind>())
    if (s == name) return true;
  return false;
}

// "init" is rebuilt from the config; a relevance name refers to the net that
// cmd_train wrote for it; anything else is a path.
EmbeddingNet<double> resolve_net(const RunConfig& cfg, const std::string& ref, const Dataset& ds) {
  EmbeddingNet<double> net;
  if (ref == "init") {
    net = init_net<double>(net_dims(cfg, ds.input_dim), cfg.net_seed());
  } else {
    const std::string p = is_relevance_name(ref) ? (fs::path(cfg.out) / ("net_" + ref + ".json")).string() : ref;
    if (!fs::exists(p)) throw DataError("net '" + ref + "' not found at " + p);
    net = load_net(p);
  }
  if (net.input_dim() != ds.input_dim)
    throw DataError("net '" + ref + "' expects input dimension " + std::to_string(net.input_dim()) +
                    ", dataset has " + std::to_string(ds.input_dim));
  return net;
}

ModelSpec model_spec(const RunConfig& cfg, ModelKind kind, int k, const std::vector<int>& candidates) {
  ModelSpec s;
  s.kind = kind;
  s.k = k;
  s.bic_candidates = candidates;
  s.em = cfg.em;
  s.seed = cfg.model_seed();
  return s;
}

std::vector<int> split_classes(const Dataset& ds, Split split, const char* command) {
  auto classes = ds.class_ids(split);
  if (classes.empty())
    throw DataError(std::string(command) + ": dataset has no " + to_string(split) + " classes");
  return classes;
}

Matrix<double> read_descriptor_set(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw DataError("descriptor set " + path + ": " + e.what());
  }
  if (j.is_object()) {
    if (!j.contains("descriptors") || j.size() != 1) throw DataError("descriptor set " + path + ": expected {\"descriptors\": [[..], ..]}");
    j = j["descriptors"];
  }
  if (!j.is_array() || j.empty()) throw DataError("descriptor set " + path + ": expected a nonempty array of rows");
  const std::size_t n = j[0].is_array() ? j[0].size() : 0;
  if (n == 0) throw DataError("descriptor set " + path + ": rows must be nonempty arrays");
  Matrix<double> D(static_cast<Index>(j.size()), static_cast<Index>(n));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != n)
      throw DataError("descriptor set " + path + ": row " + std::to_string(r) + " has the wrong length");
    for (std::size_t c = 0; c < n; ++c) {
      if (!j[r][c].is_number()) throw DataError("descriptor set " + path + ": non-numeric entry in row " + std::to_string(r));
      D(static_cast<Index>(r), static_cast<Index>(c)) = j[r][c].get<double>();
    }
  }
  if (!D.allFinite()) throw DataError("descriptor set " + path + ": non-finite entry");
  return D;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace

// ---- RunConfig ----

RunConfig::RunConfig() {
  auto& t = train.trainer;
  t.learning_rate = 3e-3;
  t.epochs = 100;
  t.batches_per_epoch = 20;
  t.tuples_per_batch = 5;
  t.concept_size = 20;
  t.concept_noise = 0.2;
  em.restarts = 8;
  eval.methods = {
      method("AVG-untrained", "init", RankerKind::avg),
      method("NN-untrained", "init", RankerKind::nn),
      method("SVM-untrained", "init", RankerKind::svm),
      method("AVG-FT", "avg", RankerKind::avg),
      method("SVM-AVG-FT", "avg", RankerKind::svm),
      method("Gauss-AVG-FT", "avg", RankerKind::s2m, ModelKind::gauss),
      method("S2M-Gauss", "gauss", RankerKind::s2m, ModelKind::gauss),
      method("S2M-GMM2", "gmm", RankerKind::s2m, ModelKind::gmm, 2),
      method("S2M-GMM-BIC", "gmm", RankerKind::s2m, ModelKind::bic),
  };
}

std::string RunConfig::dataset_path() const {
  return dataset.empty() ? (fs::path(out) / "dataset.json").string() : dataset;
}

SynthSpec RunConfig::synth_spec() const {
  SynthSpec s = synth;
  s.seed = seed;
  return s;
}

TrainerConfig RunConfig::trainer_config(RelevanceKind r) const {
  TrainerConfig t = train.trainer;
  t.relevance = r;
  t.seed = seed;
  t.validation.seed = seed + 3;
  t.threads = threads;
  t.em = em;
  t.implicit = implicit;
  t.implicit.var_floor = em.var_floor;
  t.implicit.weight_floor = em.weight_floor;
  return t;
}

void RunConfig::validate() const {
  require(threads >= 1, "threads", "must be >= 1");
  require(!out.empty(), "out", "must be nonempty");
  try {
    synth_spec().validate();
  } catch (const Error& e) {
    bad("synth", e.what());
  }
  for (Index h : net.hidden) require(h >= 1, "net.hidden", "layer widths must be >= 1");
  require(net.embed_dim >= 1, "net.embed_dim", "must be >= 1");
  require(!train.relevances.empty(), "train.relevance", "must name at least one relevance");
  for (std::size_t i = 0; i < train.relevances.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      require(train.relevances[i] != train.relevances[j], "train.relevance", "duplicate entry");
  try {
    for (auto r : train.relevances) trainer_config(r).validate();
  } catch (const Error& e) {
    bad("train", e.what());
  }
  require(em.restarts >= 1, "em.restarts", "must be >= 1");
  require(em.max_iter >= 1, "em.max_iter", "must be >= 1");
  require(em.var_floor > 0, "em.var_floor", "must be positive");
  require(em.weight_floor > 0 && em.weight_floor < 1, "em.weight_floor", "must lie in (0, 1)");
  require(eval.concept_size >= 1, "eval.concept_size", "must be >= 1");
  require(eval.noise_fraction >= 0 && eval.noise_fraction < 1, "eval.noise_fraction", "must lie in [0, 1)");
  require(eval.queries_per_class >= 1, "eval.queries_per_class", "must be >= 1");
  require(eval.csv_top >= 1, "eval.csv_top", "must be >= 1");
  require(!eval.methods.empty(), "eval.methods", "must list at least one method");
  std::set<std::string> names;
  for (const auto& m : eval.methods) {
    require(!m.name.empty(), "eval.methods", "every method needs a name");
    require(names.insert(m.name).second, "eval.methods", "duplicate method name '" + m.name + "'");
    require(m.k >= 1, "eval.methods." + m.name + ".k", "must be >= 1");
    require(!m.bic_candidates.empty(), "eval.methods." + m.name + ".bic_candidates", "must be nonempty");
    require(m.svm.lambda > 0 && m.svm.epochs >= 1, "eval.methods." + m.name + ".svm", "needs lambda > 0, epochs >= 1");
  }
  require(fewshot.ways >= 2, "fewshot.ways", "must be >= 2");
  require(fewshot.shots >= 1 && fewshot.episodes >= 1 && fewshot.probes_per_class >= 1, "fewshot",
          "shots, episodes and probes_per_class must be >= 1");
  require(fewshot.k >= 1 && !fewshot.bic_candidates.empty(), "fewshot", "needs k >= 1 and bic_candidates");
  require(fit.k >= 1 && !fit.bic_candidates.empty(), "fit", "needs k >= 1 and bic_candidates");
  for (int k : fit.bic_candidates) require(k >= 1, "fit.bic_candidates", "entries must be >= 1");
  require(gradcheck.instances >= 1, "gradcheck.instances", "must be >= 1");
  require(gradcheck.end_to_end.h > 0, "gradcheck.end_to_end.h", "must be positive");
}

RunConfig parse_config(const json& j) {
  RunConfig cfg;
  read(j, cfg, "$");
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError("config: " + path + ": " + e.what());
  }
  return parse_config(j);
}

json config_to_json(const RunConfig& cfg) {
  RunConfig copy = cfg;
  return write(copy);
}

// ---- commands ----

json cmd_synth(const RunConfig& cfg) {
  record_config(cfg, "synth");
  const auto gen = generate(cfg.synth_spec());
  const auto& ds = gen.dataset;
  const std::string path = cfg.dataset_path();
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  save_dataset(ds, path);
  json rep{{"command", "synth"},
           {"dataset", path},
           {"items", ds.size()},
           {"input_dim", ds.input_dim},
           {"classes",
            {{"train", ds.class_ids(Split::train).size()},
             {"val", ds.class_ids(Split::val).size()},
             {"test", ds.class_ids(Split::test).size()}}}};
  write_json(out_dir(cfg) / "synth_report.json", rep);
  return rep;
}

json cmd_train(const RunConfig& cfg) {
  record_config(cfg, "train");
  const Dataset ds = load_dataset(cfg.dataset_path());
  const fs::path out = out_dir(cfg);
  const auto net0 = init_net<double>(net_dims(cfg, ds.input_dim), cfg.net_seed());
  save_net(net0, (out / "net_init.json").string());
  json runs = json::array();
  for (auto r : cfg.train.relevances) {
    const auto res = train(ds, cfg.trainer_config(r), net0);
    const std::string name = to_string(r);
    save_net(res.net, (out / ("net_" + name + ".json")).string());
    std::string log;
    for (const auto& line : res.log) log += line + "\n";
    write_text_file((out / ("train_" + name + ".jsonl")).string(), log);
    runs.push_back({{"relevance", name},
                    {"net", (out / ("net_" + name + ".json")).string()},
                    {"initial_val_map", res.initial_val_map},
                    {"best_val_map", res.best_val_map},
                    {"best_step", res.best_step},
                    {"skipped_tuples", res.skipped_tuples}});
  }
  json rep{{"command", "train"}, {"runs", runs}};
  write_json(out / "train_report.json", rep);
  return rep;
}

json cmd_eval(const RunConfig& cfg) {
  record_config(cfg, "eval");
  const Dataset ds = load_dataset(cfg.dataset_path());
  const auto classes = split_classes(ds, cfg.eval.split, "eval");
  const fs::path out = out_dir(cfg);

  QueryProtocol qp;
  qp.concept_size = cfg.eval.concept_size;
  qp.noise_fraction = cfg.eval.noise_fraction;
  qp.queries_per_class = cfg.eval.queries_per_class;
  qp.seed = cfg.eval_seed();
  qp.keep_lists = cfg.eval.csv;

  std::map<std::string, EmbeddingNet<double>> nets;
  json methods = json::array(), table = json::array();
  std::ostringstream ranked;
  ranked << "method,query,class,rank,item_id,score,relevant\n";
  ranked.precision(17);
  for (const auto& ms : cfg.eval.methods) {
    if (!nets.count(ms.net)) nets.emplace(ms.net, resolve_net(cfg, ms.net, ds));
    Method m;
    m.name = ms.name;
    m.ranker = ms.ranker;
    m.model = model_spec(cfg, ms.model, ms.k, ms.bic_candidates);
    m.svm = ms.svm;
    const auto res = evaluate_retrieval(nets.at(ms.net), ds, classes, m, qp);
    json aps = json::array(), qcls = json::array();
    for (std::size_t q = 0; q < res.queries.size(); ++q) {
      const auto& qr = res.queries[q];
      aps.push_back(qr.ap);
      qcls.push_back(qr.class_id);
      const std::size_t top = std::min(qr.list.size(), static_cast<std::size_t>(cfg.eval.csv_top));
      for (std::size_t i = 0; i < top; ++i)
        ranked << csv_field(ms.name) << ',' << q << ',' << qr.class_id << ',' << i + 1 << ',' << qr.list.ids[i] << ','
               << qr.list.scores[i] << ',' << (qr.list.relevant[i] ? 1 : 0) << '\n';
    }
    json entry{{"name", ms.name},
               {"net", ms.net},
               {"ranker", name_of(ms.ranker)},
               {"map", res.map},
               {"query_class", qcls},
               {"ap", aps}};
    if (ms.ranker == RankerKind::s2m) entry["model"] = m.model.label();
    methods.push_back(entry);
    table.push_back({{"method", ms.name}, {"map", res.map}});
  }
  json rep{{"command", "eval"},
           {"split", to_string(cfg.eval.split)},
           {"classes", classes},
           {"protocol",
            {{"concept_size", qp.concept_size},
             {"noise_fraction", qp.noise_fraction},
             {"queries_per_class", qp.queries_per_class},
             {"seed", qp.seed}}},
           {"table", table},
           {"methods", methods}};
  write_json(out / "eval_report.json", rep);
  if (cfg.eval.csv) {
    std::ostringstream map_csv;
    map_csv.precision(17);
    map_csv << "method,map\n";
    for (const auto& row : table) map_csv << csv_field(row["method"].get<std::string>()) << ',' << row["map"].get<double>() << '\n';
    write_text_file((out / "eval_map.csv").string(), map_csv.str());
    write_text_file((out / "eval_ranked.csv").string(), ranked.str());
  }
  return rep;
}

json cmd_fewshot(const RunConfig& cfg) {
  record_config(cfg, "fewshot");
  const Dataset ds = load_dataset(cfg.dataset_path());
  const auto classes = split_classes(ds, cfg.fewshot.split, "fewshot");
  const auto& f = cfg.fewshot;
  const auto net = resolve_net(cfg, f.net, ds);
  const auto spec = model_spec(cfg, f.model, f.k, f.bic_candidates);
  FewShotProtocol p;
  p.ways = f.ways;
  p.shots = f.shots;
  p.episodes = f.episodes;
  p.probes_per_class = f.probes_per_class;
  p.seed = cfg.fewshot_seed();
  const auto res = evaluate_few_shot(net, ds, classes, spec, p);
  json rep{{"command", "fewshot"},
           {"split", to_string(f.split)},
           {"net", f.net},
           {"model", spec.label()},
           {"ways", p.ways},
           {"shots", p.shots},
           {"episodes", p.episodes},
           {"correct", res.correct},
           {"total", res.total},
           {"accuracy", res.accuracy()}};
  write_json(out_dir(cfg) / "fewshot_report.json", rep);
  return rep;
}

json cmd_fit(const RunConfig& cfg, const std::string& set_file) {
  const std::string input = set_file.empty() ? cfg.fit.input : set_file;
  if (input.empty()) throw UsageError("fit: no descriptor set given (positional argument or fit.input)");
  record_config(cfg, "fit");
  const Matrix<double> D = read_descriptor_set(input);
  const auto spec = model_spec(cfg, cfg.fit.model, cfg.fit.k, cfg.fit.bic_candidates);
  json rep{{"command", "fit"}, {"input", input}, {"rows", D.rows()}, {"dim", D.cols()}, {"model", spec.label()}};
  GmmModel<double> model;
  if (spec.kind == ModelKind::bic) {
    std::vector<int> ks;
    for (int k : spec.bic_candidates)
      if (k <= D.rows()) ks.push_back(k);
    if (ks.empty()) throw DataError("fit: every BIC candidate exceeds the set size " + std::to_string(D.rows()));
    auto r = select_by_bic(D, ks, spec.seed, spec.em);
    json scan = json::array();
    for (std::size_t i = 0; i < r.candidates.size(); ++i)
      scan.push_back({{"k", r.candidates[i]}, {"bic", r.bic[i]}, {"loglik", r.traces[i].loglik.back()},
                      {"degenerate", static_cast<bool>(r.degenerate[i])}});
    rep["bic"] = scan;
    model = std::move(r.model);
  } else {
    if (spec.kind == ModelKind::gmm && spec.k > D.rows())
      throw DataError("fit: k=" + std::to_string(spec.k) + " exceeds the set size " + std::to_string(D.rows()));
    model = fit_concept(D, spec).model;
  }
  const std::string output = cfg.fit.output.empty() ? (out_dir(cfg) / "model.json").string() : cfg.fit.output;
  save_model(model, output);
  rep["k"] = model.k();
  rep["loglik"] = gmm_loglik(model, D);
  rep["output"] = output;
  write_json(out_dir(cfg) / "fit_report.json", rep);
  return rep;
}

json cmd_gradcheck(const RunConfig& cfg) {
  record_config(cfg, "gradcheck");
  check::GradcheckOptions opt;
  opt.instances = cfg.gradcheck.instances;
  opt.seed = cfg.seed;
  opt.end_to_end = cfg.gradcheck.end_to_end;
  const auto results = check::run_all(opt);
  json checks = json::array();
  bool all = true;
  for (const auto& r : results) {
    all = all && r.passed;
    checks.push_back({{"name", r.name},
                      {"passed", r.passed},
                      {"worst", r.worst},
                      {"tol", r.tol},
                      {"instances", r.instances},
                      {"excluded", r.excluded},
                      {"detail", r.detail}});
  }
  json rep{{"command", "gradcheck"}, {"passed", all}, {"checks", checks}};
  write_json(out_dir(cfg) / "gradcheck_report.json", rep);
  return rep;
}

// ---- entry point ----

namespace {

void print_summary(const std::string& command, const json& rep) {
  if (command == "eval") {
    for (const auto& row : rep["table"]) std::printf("%-16s mAP %.4f\n", row["method"].get<std::string>().c_str(), row["map"].get<double>());
  } else if (command == "gradcheck") {
    for (const auto& c : rep["checks"])
      std::printf("%s %-22s worst %.3e tol %.1e (%d instances)\n", c["passed"].get<bool>() ? "PASS" : "FAIL",
                  c["name"].get<std::string>().c_str(), c["worst"].get<double>(), c["tol"].get<double>(),
                  c["instances"].get<int>());
  } else if (command == "train") {
    for (const auto& r : rep["runs"])
      std::printf("%-6s val mAP %.4f -> %.4f (best step %ld, %ld tuples skipped)\n",
                  r["relevance"].get<std::string>().c_str(), r["initial_val_map"].get<double>(),
                  r["best_val_map"].get<double>(), r["best_step"].get<long>(), r["skipped_tuples"].get<long>());
  } else if (command == "fewshot") {
    std::printf("%d-way %d-shot accuracy %.4f (%d/%d)\n", rep["ways"].get<int>(), rep["shots"].get<int>(),
                rep["accuracy"].get<double>(), rep["correct"].get<int>(), rep["total"].get<int>());
  } else {
    std::printf("%s\n", rep.dump().c_str());
  }
}

int fail(ErrorKind kind, const std::string& message) {
  std::cerr << json{{"error", to_string(kind)}, {"message", message}}.dump() << std::endl;
  return static_cast<int>(kind);
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Set-to-model networks: synthetic benchmark, training and evaluation"};
  app.require_subcommand(1);
  std::string config_path, out;
  int threads = 0;
  std::uint64_t seed = 0;
  std::string set_file;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"synth", "generate the synthetic dataset"},
      {"train", "meta-train one embedding net per configured relevance"},
      {"eval", "rank test queries with every configured method and report mAP"},
      {"fewshot", "episodic few-shot classification accuracy"},
      {"fit", "fit a model (optionally BIC-selected) to one descriptor set"},
      {"gradcheck", "run every finite-difference oracle"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON run config (defaults apply when omitted)");
    sub->add_option("--out", out, "output directory (overrides the config)");
    sub->add_option("--threads", threads, "worker cap (overrides the config)")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    if (name == "fit") sub->add_option("set", set_file, "descriptor set file");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(ErrorKind::usage, e.what());
  }

  std::string command;
  for (auto* sub : app.get_subcommands()) command = sub->get_name();
  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    const auto* sub = app.get_subcommand(command);
    if (sub->count("--out")) cfg.out = out;
    if (sub->count("--threads")) cfg.threads = threads;
    if (sub->count("--seed")) cfg.seed = seed;
    cfg.validate();

    json rep;
    if (command == "synth") rep = cmd_synth(cfg);
    else if (command == "train") rep = cmd_train(cfg);
    else if (command == "eval") rep = cmd_eval(cfg);
    else if (command == "fewshot") rep = cmd_fewshot(cfg);
    else if (command == "fit") rep = cmd_fit(cfg, set_file);
    else rep = cmd_gradcheck(cfg);
    print_summary(command, rep);
    if (command == "gradcheck" && !rep["passed"].get<bool>()) return fail(ErrorKind::numeric, "gradcheck: at least one check failed");
    return 0;
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const json::exception& e) {
    return fail(ErrorKind::data, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(ErrorKind::data, e.what());
  } catch (const std::exception& e) {
    return fail(ErrorKind::numeric, e.what());
  }
}

}  // namespace s2m::cli
