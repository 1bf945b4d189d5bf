#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "s2m/rng.hpp"
#include "s2m/types.hpp"

namespace s2m {

enum class Split { train, val, test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct ClassInfo {
  int id = 0;
  std::string name;
  Split split = Split::train;
};

/// Items with raw feature vectors, their class ids, and a class-level split.
struct Dataset {
  Index input_dim = 0;
  Matrix<double> features;  // one item per row
  std::vector<std::uint64_t> item_ids;
  std::vector<int> item_class;
  std::vector<ClassInfo> classes;

  Index size() const { return features.rows(); }
  const ClassInfo& class_info(int id) const;
  std::vector<int> class_ids(Split s) const;
  std::vector<Index> rows_of_class(int id) const;

  // Throws DataError on any broken invariant.
  void validate() const;
};

struct SynthSpec {
  int num_classes = 45;
  int items_per_class = 40;
  int clusters_per_class = 2;
  int latent_dim = 8;
  int input_dim = 32;
  int hidden_dim = 32;         // width of the fixed random nonlinearity
  double noise_fraction = 0.2;  // contamination of sampled concept sets
  std::uint64_t seed = 1;
  int train_classes = 30;
  int val_classes = 5;
  int test_classes = 10;
  double min_component_std = 0.5;
  double max_component_std = 1.0;
  double separation = 6.0;       // min distance between cluster means, in units of max_component_std
  int nuisance_dim = 0;          // shared high-variance directions added in input space
  double nuisance_scale = 0.0;
  double input_noise = 0.0;      // isotropic input-space noise stddev

  void validate() const;
};

struct GeneratedDataset {
  Dataset dataset;
  Matrix<double> latents;             // latent sample per item (rows align with dataset)
  std::vector<int> latent_cluster;    // generating cluster per item
};

GeneratedDataset generate(const SynthSpec& spec);

/// Round-half-up count of contaminants for a concept set.
int contaminant_count(int size, double noise_fraction);

/// `size` distinct rows: contaminant_count(size, rho) from other classes
/// (class uniform among `pool_classes` minus `class_id`, then item uniform),
/// the rest from `class_id`. An empty pool means every other class.
std::vector<Index> sample_noisy_concept_set(const Dataset& ds, int class_id, int size, double noise_fraction, Rng& rng,
                                            const std::vector<int>& pool_classes = {});

// Manifest (JSON) plus a flat little-endian float64 row-major feature file
// stored next to it.
void save_dataset(const Dataset& ds, const std::string& manifest_path);
Dataset load_dataset(const std::string& manifest_path);

}  // namespace s2m
