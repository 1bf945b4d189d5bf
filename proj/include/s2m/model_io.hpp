#pragma once

#include <string>

#include "s2m/gmm_model.hpp"

namespace s2m {

// Model file: {"format": "s2m-model", "n": .., "k": .., "weights": [..],
// "means": [[..], ..], "vars": [[..], ..]} with one inner array per component.
// A single Gaussian is stored as k = 1.
std::string model_to_json(const GmmModel<double>& m);
GmmModel<double> model_from_json(const std::string& text);
void save_model(const GmmModel<double>& m, const std::string& path);
GmmModel<double> load_model(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace s2m
