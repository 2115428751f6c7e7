#pragma once

// Multi-modal knowledge graphs: data model, file formats, raw modality features and the
// synthetic task generator.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "ibmea/graph.hpp"
#include "ibmea/types.hpp"

namespace ibmea {

struct Triple {
  int head = 0;
  int relation = 0;
  int tail = 0;
  auto operator<=>(const Triple&) const = default;
};

/// One multi-modal knowledge graph. Entities are dense ids 0..num_entities-1.
struct MMKG {
  int num_entities = 0;
  int relation_vocab_size = 0;
  int attribute_vocab_size = 0;
  std::vector<Triple> triples;
  /// Attribute assignments per entity, sorted; repeated ids are repeated assignments.
  std::vector<std::vector<int>> attributes;

  int image_dim = 0;
  /// Ascending ids of entities that carry an image; row k of image_features belongs to
  /// image_entities[k].
  std::vector<int> image_entities;
  MatrixF image_features;

  bool has_image(int e) const;
  /// Row of image_features for entity e, or -1.
  int image_row(int e) const;

  /// Throws ValidationError when an invariant does not hold.
  void validate() const;

  bool operator==(const MMKG& other) const;
};

struct AlignmentTask {
  MMKG kg1;
  MMKG kg2;
  std::vector<EntityPair> train_pairs;
  std::vector<EntityPair> test_pairs;
  double seed_ratio = 0.0;

  void validate() const;
  bool operator==(const AlignmentTask& other) const = default;
};

/// Column vocabularies of the bag-of-attribute and bag-of-relation features.
struct FeatureVocab {
  std::vector<int> attribute_columns;  // attribute id per column
  std::vector<int> relation_columns;   // relation id per column
};

/// Builds the top-`max_attributes` / top-`max_relations` vocabularies from the summed
/// frequencies over `kgs`. Ties are broken by ascending id.
FeatureVocab build_vocab(std::span<const MMKG* const> kgs, int max_attributes, int max_relations);

struct RawModalFeatures {
  Matrix x_g;  // n x d_g
  Matrix x_v;  // n x d_v
  Matrix x_a;  // n x |attribute vocab|
  Matrix x_r;  // n x |relation vocab|
  Adjacency adjacency;

  bool operator==(const RawModalFeatures& other) const;
};

struct RawFeatureOptions {
  int d_a = 1000;
  int d_r = 1000;
};

RawModalFeatures build_raw_features(const MMKG& kg, int d_g, std::uint64_t rng_seed,
                                    const RawFeatureOptions& opts = {});
/// Same, with an externally built vocabulary (shared between the two graphs of a task).
RawModalFeatures build_raw_features(const MMKG& kg, int d_g, std::uint64_t rng_seed,
                                    const FeatureVocab& vocab);

/// Image features for every entity: own image where present, otherwise the mean over the
/// neighbors imputed in the previous breadth-first round; zero when no image is reachable.
Matrix impute_images(const MMKG& kg, const Adjacency& adjacency);

Adjacency build_adjacency(const MMKG& kg);

// ---------------------------------------------------------------------------------------------
// Synthetic tasks

struct NoiseSpec {
  double edge_drop = 0.0;
  double attr_flip = 0.0;
  double image_noise = 0.0;
};

struct SyntheticSpec {
  int n_entities = 100;
  int n_relations = 10;
  int n_attributes = 30;
  int image_dim = 16;
  double edge_prob = 0.05;
  int attrs_per_entity = 3;
  double image_coverage = 1.0;
  NoiseSpec noise;
  double seed_ratio = 0.3;
  std::uint64_t rng_seed = 0;
};

AlignmentTask generate_synthetic_task(const SyntheticSpec& spec);

AlignmentTask generate_synthetic_task(int n_entities, int n_relations, int n_attributes, int d_v,
                                      double edge_prob, const NoiseSpec& noise, double seed_ratio,
                                      std::uint64_t rng_seed);

/// Re-splits the union of a task's gold pairs at a new seed ratio.
AlignmentTask resplit(const AlignmentTask& task, double seed_ratio, std::uint64_t rng_seed);

// ---------------------------------------------------------------------------------------------
// Files

/// Declared sizes, read from meta.json when available.
struct KgShape {
  int num_entities = 0;
  int relation_vocab_size = 0;
  int attribute_vocab_size = 0;
};

/// An empty `img_feats_path` means the graph has no images. The sidecar lives next to the
/// blob with a .json extension.
MMKG load_mmkg(const std::filesystem::path& triples_path, const std::filesystem::path& attrs_path,
               const std::filesystem::path& img_feats_path,
               const std::optional<KgShape>& declared = std::nullopt);

/// Loads a directory written by save_mmkg.
MMKG load_mmkg(const std::filesystem::path& dir);

void save_mmkg(const MMKG& kg, const std::filesystem::path& dir);

std::vector<EntityPair> load_alignment(const std::filesystem::path& path);
void save_alignment(std::span<const EntityPair> pairs, const std::filesystem::path& path);

void save_task(const AlignmentTask& task, const std::filesystem::path& dir);
AlignmentTask load_task(const std::filesystem::path& dir);

/// File names used inside an MMKG directory.
namespace files {
inline constexpr const char* kTriples = "triples.txt";
inline constexpr const char* kAttributes = "attributes.txt";
inline constexpr const char* kImages = "images.f32";
inline constexpr const char* kImageIndex = "images.json";
inline constexpr const char* kMeta = "meta.json";
inline constexpr const char* kTrain = "train.txt";
inline constexpr const char* kTest = "test.txt";
inline constexpr const char* kTask = "task.json";
}  // namespace files

}  // namespace ibmea
