#include "s2m/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"
#include "s2m/errors.hpp"
#include "s2m/model_io.hpp"

namespace s2m {

using nlohmann::json;
namespace fs = std::filesystem;

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split label '" + s + "'");
}

const ClassInfo& Dataset::class_info(int id) const {
  for (const auto& c : classes)
    if (c.id == id) return c;
  throw DataError("unknown class " + std::to_string(id));
}

std::vector<int> Dataset::class_ids(Split s) const {
  std::vector<int> out;
  for (const auto& c : classes)
    if (c.split == s) out.push_back(c.id);
  return out;
}

std::vector<Index> Dataset::rows_of_class(int id) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < item_class.size(); ++i)
    if (item_class[i] == id) out.push_back(static_cast<Index>(i));
  return out;
}

void Dataset::validate() const {
  if (input_dim <= 0) throw DataError("dataset: input_dim must be positive");
  if (features.cols() != input_dim) throw DataError("dataset: feature width does not match input_dim");
  if (static_cast<Index>(item_ids.size()) != features.rows() || static_cast<Index>(item_class.size()) != features.rows())
    throw DataError("dataset: item table and feature rows disagree");
  std::set<int> ids;
  for (const auto& c : classes)
    if (!ids.insert(c.id).second) throw DataError("dataset: class " + std::to_string(c.id) + " listed twice");
  for (int c : item_class)
    if (!ids.count(c)) throw DataError("dataset: item references unknown class " + std::to_string(c));
  std::set<std::uint64_t> seen;
  for (auto id : item_ids)
    if (!seen.insert(id).second) throw DataError("dataset: duplicate item id " + std::to_string(id));
}

void SynthSpec::validate() const {
  if (num_classes < 1 || items_per_class < 1 || clusters_per_class < 1 || latent_dim < 1 || input_dim < 1 ||
      hidden_dim < 1)
    throw DataError("synth: counts and dimensions must be positive");
  if (clusters_per_class > 3) throw DataError("synth: clusters_per_class must be in 1..3");
  if (noise_fraction < 0 || noise_fraction >= 0.5) throw DataError("synth: noise fraction must lie in [0, 0.5)");
  if (train_classes < 0 || val_classes < 0 || test_classes < 0 ||
      train_classes + val_classes + test_classes != num_classes)
    throw DataError("synth: split sizes must sum to num_classes");
  if (!(min_component_std > 0) || max_component_std < min_component_std)
    throw DataError("synth: invalid component std range");
  if (nuisance_dim < 0 || nuisance_scale < 0 || input_noise < 0) throw DataError("synth: negative noise settings");
}

GeneratedDataset generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int L = spec.latent_dim, C = spec.num_classes, K = spec.clusters_per_class;
  const int total = C * K;
  const double min_dist = spec.separation * spec.max_component_std;

  // Cluster means by rejection so that every pair sits at least min_dist apart.
  // The sampling box grows if the packing gets tight.
  Matrix<double> means(total, L);
  double box = min_dist * std::max(1.0, std::pow(static_cast<double>(total), 1.0 / L));
  for (int c = 0; c < total; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 0 && attempt % 2000 == 0) box *= 1.25;
      for (int d = 0; d < L; ++d) means(c, d) = rng.uniform(-box, box);
      bool ok = true;
      for (int p = 0; p < c && ok; ++p) ok = (means.row(c) - means.row(p)).norm() >= min_dist;
      if (ok) break;
    }
  }
  Matrix<double> stds(total, L);
  for (int c = 0; c < total; ++c)
    for (int d = 0; d < L; ++d) stds(c, d) = rng.uniform(spec.min_component_std, spec.max_component_std);

  // Fixed random two-layer nonlinearity latent -> input space.
  const double in_scale = 1.0 / (box * std::sqrt(static_cast<double>(L)));
  Matrix<double> W1(spec.hidden_dim, L), W2(spec.input_dim, spec.hidden_dim);
  Vector<double> b1(spec.hidden_dim), b2(spec.input_dim);
  for (Index i = 0; i < W1.size(); ++i) W1.data()[i] = 2.0 * rng.normal() * in_scale;
  for (Index i = 0; i < b1.size(); ++i) b1(i) = 0.5 * rng.normal();
  for (Index i = 0; i < W2.size(); ++i) W2.data()[i] = rng.normal() / std::sqrt(static_cast<double>(spec.hidden_dim));
  for (Index i = 0; i < b2.size(); ++i) b2(i) = 0.1 * rng.normal();
  Matrix<double> nuisance(spec.input_dim, spec.nuisance_dim);
  for (Index i = 0; i < nuisance.size(); ++i) nuisance.data()[i] = rng.normal() / std::sqrt(static_cast<double>(spec.input_dim));

  GeneratedDataset out;
  Dataset& ds = out.dataset;
  ds.input_dim = spec.input_dim;
  const Index N = static_cast<Index>(C) * spec.items_per_class;
  ds.features.resize(N, spec.input_dim);
  out.latents.resize(N, L);
  ds.item_ids.resize(static_cast<std::size_t>(N));
  ds.item_class.resize(static_cast<std::size_t>(N));
  out.latent_cluster.resize(static_cast<std::size_t>(N));

  Index row = 0;
  for (int c = 0; c < C; ++c) {
    for (int it = 0; it < spec.items_per_class; ++it, ++row) {
      // Balanced cluster assignment.
      const int cl = c * K + it % K;
      Vector<double> z(L);
      for (int d = 0; d < L; ++d) z(d) = means(cl, d) + stds(cl, d) * rng.normal();
      Vector<double> x = W2 * (W1 * z + b1).array().tanh().matrix() + b2;
      for (int q = 0; q < spec.nuisance_dim; ++q) x += nuisance.col(q) * (spec.nuisance_scale * rng.normal());
      if (spec.input_noise > 0)
        for (int d = 0; d < spec.input_dim; ++d) x(d) += spec.input_noise * rng.normal();
      ds.features.row(row) = x.transpose();
      out.latents.row(row) = z.transpose();
      ds.item_ids[static_cast<std::size_t>(row)] = static_cast<std::uint64_t>(row);
      ds.item_class[static_cast<std::size_t>(row)] = c;
      out.latent_cluster[static_cast<std::size_t>(row)] = cl;
    }
  }

  std::vector<int> order(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) order[static_cast<std::size_t>(c)] = c;
  rng.shuffle(order);
  ds.classes.resize(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    auto& info = ds.classes[static_cast<std::size_t>(c)];
    info.id = c;
    char name[32];
    std::snprintf(name, sizeof name, "class_%03d", c);
    info.name = name;
  }
  for (int pos = 0; pos < C; ++pos) {
    const int c = order[static_cast<std::size_t>(pos)];
    auto& info = ds.classes[static_cast<std::size_t>(c)];
    info.split = pos < spec.train_classes                      ? Split::train
                 : pos < spec.train_classes + spec.val_classes ? Split::val
                                                               : Split::test;
  }
  return out;
}

int contaminant_count(int size, double noise_fraction) {
  return static_cast<int>(std::floor(noise_fraction * size + 0.5));
}

std::vector<Index> sample_noisy_concept_set(const Dataset& ds, int class_id, int size, double noise_fraction, Rng& rng,
                                            const std::vector<int>& pool_classes) {
  if (size < 1) throw DataError("concept set size must be positive");
  if (noise_fraction < 0 || noise_fraction >= 1) throw DataError("noise fraction must lie in [0, 1)");
  const int n_cont = contaminant_count(size, noise_fraction);
  const int n_own = size - n_cont;

  std::vector<Index> own = ds.rows_of_class(class_id);
  if (static_cast<int>(own.size()) < n_own)
    throw DataError("class " + std::to_string(class_id) + " has too few items for a concept set of size " +
                    std::to_string(size));
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(size));
  // Partial Fisher-Yates: first n_own entries form the in-class sample.
  for (int i = 0; i < n_own; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.index(own.size() - static_cast<std::size_t>(i));
    std::swap(own[static_cast<std::size_t>(i)], own[j]);
    out.push_back(own[static_cast<std::size_t>(i)]);
  }

  if (n_cont > 0) {
    std::vector<int> others;
    if (pool_classes.empty()) {
      for (const auto& c : ds.classes)
        if (c.id != class_id) others.push_back(c.id);
    } else {
      for (int c : pool_classes)
        if (c != class_id) others.push_back(c);
    }
    if (others.empty()) throw DataError("no other classes available for contamination");
    std::map<int, std::vector<Index>> rows_by_class;
    for (int c : others) rows_by_class[c] = ds.rows_of_class(c);
    std::set<Index> used;
    for (int i = 0; i < n_cont; ++i) {
      for (int attempt = 0;; ++attempt) {
        if (attempt > 10000) throw DataError("could not draw distinct contaminants");
        const int c = others[rng.index(others.size())];
        const auto& rows = rows_by_class[c];
        if (rows.empty()) continue;
        const Index r = rows[rng.index(rows.size())];
        if (used.insert(r).second) {
          out.push_back(r);
          break;
        }
      }
    }
  }
  return out;
}

namespace {

void write_f64_le(std::ofstream& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int b = 0; b < 8; ++b) buf[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

double read_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return std::bit_cast<double>(bits);
}

std::string data_file_for(const std::string& manifest_path) {
  fs::path p(manifest_path);
  return p.stem().string() + ".f64";
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& manifest_path) {
  ds.validate();
  json j;
  j["format"] = "s2m-dataset";
  j["version"] = 1;
  j["input_dim"] = ds.input_dim;
  j["num_items"] = ds.size();
  j["data_file"] = data_file_for(manifest_path);
  j["encoding"] = "float64-le-row-major";
  j["classes"] = json::array();
  for (const auto& c : ds.classes) j["classes"].push_back({{"id", c.id}, {"name", c.name}, {"split", to_string(c.split)}});
  j["items"] = json::array();
  for (Index i = 0; i < ds.size(); ++i)
    j["items"].push_back({{"id", ds.item_ids[static_cast<std::size_t>(i)]}, {"class", ds.item_class[static_cast<std::size_t>(i)]}});
  write_text_file(manifest_path, j.dump(1) + "\n");

  const fs::path data = fs::path(manifest_path).parent_path() / data_file_for(manifest_path);
  std::ofstream out(data, std::ios::binary);
  if (!out) throw DataError("cannot write " + data.string());
  for (Index r = 0; r < ds.size(); ++r)
    for (Index c = 0; c < ds.input_dim; ++c) write_f64_le(out, ds.features(r, c));
  if (!out) throw DataError("write failed: " + data.string());
}

Dataset load_dataset(const std::string& manifest_path) {
  json j;
  try {
    j = json::parse(read_text_file(manifest_path));
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + manifest_path + ": " + e.what());
  }
  Dataset ds;
  std::string data_name;
  try {
    if (j.value("format", std::string{}) != "s2m-dataset") throw DataError("manifest: not an s2m-dataset file");
    if (j.value("encoding", std::string{"float64-le-row-major"}) != "float64-le-row-major")
      throw DataError("manifest: unsupported encoding");
    ds.input_dim = j.at("input_dim").get<Index>();
    const Index N = j.at("num_items").get<Index>();
    data_name = j.at("data_file").get<std::string>();
    for (const auto& c : j.at("classes")) {
      ClassInfo info;
      info.id = c.at("id").get<int>();
      info.name = c.value("name", "class_" + std::to_string(info.id));
      info.split = split_from_string(c.at("split").get<std::string>());
      ds.classes.push_back(std::move(info));
    }
    std::set<int> known;
    for (const auto& c : ds.classes) known.insert(c.id);
    for (const auto& it : j.at("items")) {
      const int cls = it.at("class").get<int>();
      if (!known.count(cls)) throw DataError("manifest: item references missing class " + std::to_string(cls));
      ds.item_ids.push_back(it.at("id").get<std::uint64_t>());
      ds.item_class.push_back(cls);
    }
    if (static_cast<Index>(ds.item_ids.size()) != N) throw DataError("manifest: num_items does not match item list");
    if (ds.input_dim <= 0) throw DataError("manifest: input_dim must be positive");
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + manifest_path + ": " + e.what());
  }

  const fs::path data = fs::path(manifest_path).parent_path() / data_name;
  const std::string bytes = read_text_file(data.string());
  const Index N = static_cast<Index>(ds.item_ids.size());
  if (static_cast<Index>(bytes.size()) != N * ds.input_dim * 8)
    throw DataError("dimension inconsistency: " + data.string() + " holds " + std::to_string(bytes.size()) +
                    " bytes, manifest implies " + std::to_string(N * ds.input_dim * 8));
  ds.features.resize(N, ds.input_dim);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (Index r = 0; r < N; ++r)
    for (Index c = 0; c < ds.input_dim; ++c, p += 8) ds.features(r, c) = read_f64_le(p);
  ds.validate();
  return ds;
}

}  // namespace s2m
