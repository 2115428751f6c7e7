#include "ibmea/mmkg.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>

#include "ibmea/rng.hpp"

namespace ibmea {

bool MMKG::has_image(int e) const { return image_row(e) >= 0; }

int MMKG::image_row(int e) const {
  auto it = std::lower_bound(image_entities.begin(), image_entities.end(), e);
  if (it == image_entities.end() || *it != e) return -1;
  return static_cast<int>(it - image_entities.begin());
}

void MMKG::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError(what); };
  if (num_entities < 0 || relation_vocab_size < 0 || attribute_vocab_size < 0)
    fail("negative size");
  for (const auto& t : triples) {
    if (t.head < 0 || t.head >= num_entities || t.tail < 0 || t.tail >= num_entities)
      fail("triple entity out of range: " + std::to_string(t.head) + " " +
           std::to_string(t.tail));
    if (t.relation < 0 || t.relation >= relation_vocab_size)
      fail("relation id out of range: " + std::to_string(t.relation));
  }
  if (static_cast<int>(attributes.size()) != num_entities)
    fail("attribute table size != num_entities");
  for (const auto& attrs : attributes)
    for (int a : attrs)
      if (a < 0 || a >= attribute_vocab_size)
        fail("attribute id out of range: " + std::to_string(a));
  if (!std::is_sorted(image_entities.begin(), image_entities.end()) ||
      std::adjacent_find(image_entities.begin(), image_entities.end()) != image_entities.end())
    fail("image entity list must be strictly ascending");
  for (int e : image_entities)
    if (e < 0 || e >= num_entities) fail("image entity out of range: " + std::to_string(e));
  if (image_features.rows() != static_cast<Index>(image_entities.size()))
    fail("image feature rows != number of imaged entities");
  if (!image_entities.empty() && image_features.cols() != image_dim)
    fail("image feature dimension mismatch");
  if (!image_features.allFinite()) fail("non-finite image feature");
}

bool MMKG::operator==(const MMKG& o) const {
  return num_entities == o.num_entities && relation_vocab_size == o.relation_vocab_size &&
         attribute_vocab_size == o.attribute_vocab_size && triples == o.triples &&
         attributes == o.attributes && image_dim == o.image_dim &&
         image_entities == o.image_entities &&
         image_features.rows() == o.image_features.rows() &&
         image_features.cols() == o.image_features.cols() && image_features == o.image_features;
}

void AlignmentTask::validate() const {
  kg1.validate();
  kg2.validate();
  auto check_split = [&](const std::vector<EntityPair>& pairs, const char* name) {
    std::vector<char> seen1(kg1.num_entities, 0), seen2(kg2.num_entities, 0);
    for (auto [a, b] : pairs) {
      if (a < 0 || a >= kg1.num_entities || b < 0 || b >= kg2.num_entities)
        throw ValidationError(std::string(name) + " pair out of range");
      if (seen1[a]++ || seen2[b]++)
        throw ValidationError(std::string(name) + " repeats an entity");
    }
  };
  check_split(train_pairs, "train");
  check_split(test_pairs, "test");
  std::vector<EntityPair> a(train_pairs), b(test_pairs);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<EntityPair> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  if (!common.empty()) throw ValidationError("train and test pairs overlap");
  if (!(seed_ratio > 0.0 && seed_ratio < 1.0)) throw ValidationError("seed_ratio outside (0,1)");
  const double total = static_cast<double>(train_pairs.size() + test_pairs.size());
  if (total > 0 && std::abs(static_cast<double>(train_pairs.size()) - seed_ratio * total) > 1.0)
    throw ValidationError("train split does not match seed_ratio");
}

bool RawModalFeatures::operator==(const RawModalFeatures& o) const {
  auto same = [](const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
  };
  return same(x_g, o.x_g) && same(x_v, o.x_v) && same(x_a, o.x_a) && same(x_r, o.x_r) &&
         adjacency == o.adjacency;
}

namespace {

std::vector<int> top_k_by_frequency(const std::map<int, long>& counts, int k) {
  std::vector<std::pair<int, long>> items(counts.begin(), counts.end());
  // map iteration is ascending by id, so a stable sort on count keeps the id tie-break.
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(items.size()) && i < k; ++i) out.push_back(items[i].first);
  return out;
}

}  // namespace

FeatureVocab build_vocab(std::span<const MMKG* const> kgs, int max_attributes,
                         int max_relations) {
  std::map<int, long> attr_counts, rel_counts;
  for (const MMKG* kg : kgs) {
    for (const auto& attrs : kg->attributes)
      for (int a : attrs) ++attr_counts[a];
    for (const auto& t : kg->triples) rel_counts[t.relation] += 2;  // head and tail incidence
  }
  return {top_k_by_frequency(attr_counts, max_attributes),
          top_k_by_frequency(rel_counts, max_relations)};
}

Adjacency build_adjacency(const MMKG& kg) {
  std::vector<EntityPair> edges;
  edges.reserve(kg.triples.size());
  for (const auto& t : kg.triples) edges.emplace_back(t.head, t.tail);
  return Adjacency::from_edges(kg.num_entities, edges);
}

Matrix impute_images(const MMKG& kg, const Adjacency& adj) {
  const int n = kg.num_entities;
  Matrix out = Matrix::Zero(n, kg.image_dim);
  std::vector<char> known(n, 0);
  for (std::size_t k = 0; k < kg.image_entities.size(); ++k) {
    const int e = kg.image_entities[k];
    out.row(e) = kg.image_features.row(static_cast<Index>(k)).cast<double>();
    known[e] = 1;
  }
  for (;;) {
    std::vector<int> newly;
    Matrix update = out;
    for (int e = 0; e < n; ++e) {
      if (known[e]) continue;
      int count = 0;
      Vector acc = Vector::Zero(kg.image_dim);
      for (int j : adj.neighbors_of(e))
        if (j != e && known[j]) {
          acc += out.row(j).transpose();
          ++count;
        }
      if (count > 0) {
        update.row(e) = (acc / count).transpose();
        newly.push_back(e);
      }
    }
    if (newly.empty()) break;
    out = std::move(update);
    for (int e : newly) known[e] = 1;
  }
  return out;
}

RawModalFeatures build_raw_features(const MMKG& kg, int d_g, std::uint64_t rng_seed,
                                    const RawFeatureOptions& opts) {
  const MMKG* kgs[] = {&kg};
  return build_raw_features(kg, d_g, rng_seed, build_vocab(kgs, opts.d_a, opts.d_r));
}

RawModalFeatures build_raw_features(const MMKG& kg, int d_g, std::uint64_t rng_seed,
                                    const FeatureVocab& vocab) {
  if (d_g <= 0) throw ConfigError("d_g must be positive");
  kg.validate();
  const int n = kg.num_entities;
  RawModalFeatures f;
  f.adjacency = build_adjacency(kg);

  Rng rng = make_rng(rng_seed, "init.node_features");
  f.x_g = randn<double>(n, d_g, rng, 1.0 / std::sqrt(static_cast<double>(d_g)));

  f.x_v = impute_images(kg, f.adjacency);

  std::map<int, int> attr_col, rel_col;
  for (std::size_t c = 0; c < vocab.attribute_columns.size(); ++c)
    attr_col[vocab.attribute_columns[c]] = static_cast<int>(c);
  for (std::size_t c = 0; c < vocab.relation_columns.size(); ++c)
    rel_col[vocab.relation_columns[c]] = static_cast<int>(c);

  f.x_a = Matrix::Zero(n, static_cast<Index>(vocab.attribute_columns.size()));
  for (int e = 0; e < n; ++e)
    for (int a : kg.attributes[e])
      if (auto it = attr_col.find(a); it != attr_col.end()) f.x_a(e, it->second) += 1.0;

  f.x_r = Matrix::Zero(n, static_cast<Index>(vocab.relation_columns.size()));
  for (const auto& t : kg.triples)
    if (auto it = rel_col.find(t.relation); it != rel_col.end()) {
      f.x_r(t.head, it->second) += 1.0;
      f.x_r(t.tail, it->second) += 1.0;
    }
  return f;
}

}  // namespace ibmea
