#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "ibmea/training.hpp"

namespace ibmea::test {

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ibmea_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  out << text;
}

inline SyntheticSpec small_spec(int n, std::uint64_t seed, NoiseSpec noise = {}) {
  SyntheticSpec s;
  s.n_entities = n;
  s.n_relations = 6;
  s.n_attributes = 20;
  s.image_dim = 8;
  s.edge_prob = std::min(0.2, 4.0 / n);
  s.attrs_per_entity = 3;
  s.noise = noise;
  s.seed_ratio = 0.3;
  s.rng_seed = seed;
  return s;
}

/// A tiny configuration for fast unit tests.
inline TrainConfig tiny_config(std::uint64_t seed = 1) {
  TrainConfig c;
  c.epochs = 10;
  c.batch_size = 512;
  c.eval_every = 5;
  c.rng_seed = seed;
  c.model.d_g = 6;
  c.model.gat_hidden = 6;
  c.model.graph_out = 5;
  c.model.modal_hidden = 5;
  c.model.modal_out = 4;
  c.model.fusion_dim = 5;
  c.max_attributes = 20;
  c.max_relations = 10;
  c.iterative.start_epoch = 4;
  c.iterative.period = 2;
  return c;
}

inline Matrix random_matrix(Index r, Index c, std::uint64_t seed) {
  Rng rng(seed);
  return randn(r, c, rng);
}

}  // namespace ibmea::test
