#include "s2m/model_io.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace s2m {

using nlohmann::json;

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed: " + path);
}

std::string model_to_json(const GmmModel<double>& m) {
  json j;
  j["format"] = "s2m-model";
  j["n"] = m.dim();
  j["k"] = m.k();
  j["weights"] = std::vector<double>(m.weights.data(), m.weights.data() + m.k());
  json means = json::array(), vars = json::array();
  for (Index i = 0; i < m.k(); ++i) {
    json mu = json::array(), phi = json::array();
    for (Index c = 0; c < m.dim(); ++c) {
      mu.push_back(m.means(i, c));
      phi.push_back(m.vars(i, c));
    }
    means.push_back(std::move(mu));
    vars.push_back(std::move(phi));
  }
  j["means"] = std::move(means);
  j["vars"] = std::move(vars);
  return j.dump(2);
}

GmmModel<double> model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("model file: ") + e.what());
  }
  try {
    const Index n = j.at("n").get<Index>(), k = j.at("k").get<Index>();
    if (n < 1 || k < 1) throw DataError("model file: n and k must be positive");
    GmmModel<double> m;
    const auto w = j.at("weights").get<std::vector<double>>();
    const auto mu = j.at("means").get<std::vector<std::vector<double>>>();
    const auto phi = j.at("vars").get<std::vector<std::vector<double>>>();
    if (static_cast<Index>(w.size()) != k || static_cast<Index>(mu.size()) != k || static_cast<Index>(phi.size()) != k)
      throw DataError("model file: component count does not match k");
    m.weights = Eigen::Map<const Vector<double>>(w.data(), k);
    m.means.resize(k, n);
    m.vars.resize(k, n);
    for (Index i = 0; i < k; ++i) {
      if (static_cast<Index>(mu[i].size()) != n || static_cast<Index>(phi[i].size()) != n)
        throw DataError("model file: component " + std::to_string(i) + " has wrong dimension");
      for (Index c = 0; c < n; ++c) {
        m.means(i, c) = mu[i][c];
        m.vars(i, c) = phi[i][c];
      }
    }
    if ((m.vars.array() <= 0).any()) throw DataError("model file: variances must be positive");
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("model file: ") + e.what());
  }
}

void save_model(const GmmModel<double>& m, const std::string& path) { write_text_file(path, model_to_json(m)); }

GmmModel<double> load_model(const std::string& path) { return model_from_json(read_text_file(path)); }

}  // namespace s2m
