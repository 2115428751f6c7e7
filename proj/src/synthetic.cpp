#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ibmea/mmkg.hpp"
#include "ibmea/rng.hpp"

namespace ibmea {

namespace {

Eigen::VectorXf random_unit(int dim, Rng& rng) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Eigen::VectorXf v(dim);
  do {
    for (int i = 0; i < dim; ++i) v(i) = normal(rng);
  } while (v.norm() == 0.0f);
  return v / v.norm();
}

void check_unit_interval(double x, const char* name) {
  if (!(x >= 0.0 && x <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0,1]");
}

std::size_t train_count(std::size_t total, double seed_ratio) {
  if (!(seed_ratio > 0.0 && seed_ratio < 1.0)) throw ConfigError("seed_ratio must lie in (0,1)");
  const auto n_train = static_cast<std::size_t>(std::llround(seed_ratio * static_cast<double>(total)));
  if (n_train == 0 || n_train >= total)
    throw ConfigError("seed_ratio " + std::to_string(seed_ratio) + " leaves an empty split for " +
                      std::to_string(total) + " pairs");
  return n_train;
}

void split_pairs(std::vector<EntityPair> gold, double seed_ratio, Rng& rng, AlignmentTask& task) {
  const std::size_t n_train = train_count(gold.size(), seed_ratio);
  std::shuffle(gold.begin(), gold.end(), rng);
  task.train_pairs.assign(gold.begin(), gold.begin() + static_cast<std::ptrdiff_t>(n_train));
  task.test_pairs.assign(gold.begin() + static_cast<std::ptrdiff_t>(n_train), gold.end());
  std::sort(task.train_pairs.begin(), task.train_pairs.end());
  std::sort(task.test_pairs.begin(), task.test_pairs.end());
  task.seed_ratio = seed_ratio;
}

}  // namespace

AlignmentTask generate_synthetic_task(const SyntheticSpec& spec) {
  if (spec.n_entities < 2) throw ConfigError("n_entities must be at least 2");
  if (spec.n_relations < 1 || spec.n_attributes < 1 || spec.image_dim < 1)
    throw ConfigError("vocabulary sizes and image_dim must be positive");
  if (spec.attrs_per_entity < 0) throw ConfigError("attrs_per_entity must be non-negative");
  check_unit_interval(spec.edge_prob, "edge_prob");
  check_unit_interval(spec.image_coverage, "image_coverage");
  check_unit_interval(spec.noise.edge_drop, "noise.edge_drop");
  check_unit_interval(spec.noise.attr_flip, "noise.attr_flip");
  check_unit_interval(spec.noise.image_noise, "noise.image_noise");
  const int n = spec.n_entities;
  train_count(static_cast<std::size_t>(n), spec.seed_ratio);

  Rng rng = make_rng(spec.rng_seed, "data");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> pick_rel(0, spec.n_relations - 1);
  std::uniform_int_distribution<int> pick_attr(0, spec.n_attributes - 1);

  AlignmentTask task;
  MMKG& g1 = task.kg1;
  g1.num_entities = n;
  g1.relation_vocab_size = spec.n_relations;
  g1.attribute_vocab_size = spec.n_attributes;
  g1.image_dim = spec.image_dim;
  for (int h = 0; h < n; ++h)
    for (int t = 0; t < n; ++t)
      if (h != t && unif(rng) < spec.edge_prob) g1.triples.push_back({h, pick_rel(rng), t});
  g1.attributes.resize(n);
  for (auto& attrs : g1.attributes) {
    for (int k = 0; k < spec.attrs_per_entity; ++k) attrs.push_back(pick_attr(rng));
    std::sort(attrs.begin(), attrs.end());
  }
  for (int e = 0; e < n; ++e)
    if (unif(rng) < spec.image_coverage) g1.image_entities.push_back(e);
  g1.image_features.resize(static_cast<Index>(g1.image_entities.size()), spec.image_dim);
  for (Index k = 0; k < g1.image_features.rows(); ++k)
    g1.image_features.row(k) = random_unit(spec.image_dim, rng).transpose();

  // kg2: relabel through a random permutation, then perturb.
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  MMKG& g2 = task.kg2;
  g2.num_entities = n;
  g2.relation_vocab_size = spec.n_relations;
  g2.attribute_vocab_size = spec.n_attributes;
  g2.image_dim = spec.image_dim;
  for (const auto& t : g1.triples)
    if (!(unif(rng) < spec.noise.edge_drop)) g2.triples.push_back({perm[t.head], t.relation, perm[t.tail]});
  std::sort(g2.triples.begin(), g2.triples.end());
  g2.attributes.resize(n);
  for (int e = 0; e < n; ++e) {
    auto& attrs = g2.attributes[perm[e]];
    for (int a : g1.attributes[e]) attrs.push_back(unif(rng) < spec.noise.attr_flip ? pick_attr(rng) : a);
    std::sort(attrs.begin(), attrs.end());
  }
  std::vector<std::pair<int, Eigen::VectorXf>> images2;
  const float lambda = static_cast<float>(spec.noise.image_noise);
  for (std::size_t k = 0; k < g1.image_entities.size(); ++k) {
    Eigen::VectorXf feat = g1.image_features.row(static_cast<Index>(k)).transpose();
    Eigen::VectorXf eps = random_unit(spec.image_dim, rng);
    images2.emplace_back(perm[g1.image_entities[k]], (1.0f - lambda) * feat + lambda * eps);
  }
  std::sort(images2.begin(), images2.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  g2.image_features.resize(static_cast<Index>(images2.size()), spec.image_dim);
  for (std::size_t k = 0; k < images2.size(); ++k) {
    g2.image_entities.push_back(images2[k].first);
    g2.image_features.row(static_cast<Index>(k)) = images2[k].second.transpose();
  }

  std::vector<EntityPair> gold;
  for (int e = 0; e < n; ++e) gold.emplace_back(e, perm[e]);
  split_pairs(std::move(gold), spec.seed_ratio, rng, task);
  task.validate();
  return task;
}

AlignmentTask generate_synthetic_task(int n_entities, int n_relations, int n_attributes, int d_v,
                                      double edge_prob, const NoiseSpec& noise, double seed_ratio,
                                      std::uint64_t rng_seed) {
  SyntheticSpec spec;
  spec.n_entities = n_entities;
  spec.n_relations = n_relations;
  spec.n_attributes = n_attributes;
  spec.image_dim = d_v;
  spec.edge_prob = edge_prob;
  spec.noise = noise;
  spec.seed_ratio = seed_ratio;
  spec.rng_seed = rng_seed;
  return generate_synthetic_task(spec);
}

AlignmentTask resplit(const AlignmentTask& task, double seed_ratio, std::uint64_t rng_seed) {
  AlignmentTask out;
  out.kg1 = task.kg1;
  out.kg2 = task.kg2;
  std::vector<EntityPair> gold(task.train_pairs);
  gold.insert(gold.end(), task.test_pairs.begin(), task.test_pairs.end());
  std::sort(gold.begin(), gold.end());
  Rng rng = make_rng(rng_seed, "split");
  split_pairs(std::move(gold), seed_ratio, rng, out);
  return out;
}

}  // namespace ibmea
