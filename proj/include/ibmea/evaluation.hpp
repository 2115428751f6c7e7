#pragma once

// Similarity ranking, Hits@K / MRR, and the experiment harnesses built on top of training.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ibmea/types.hpp"
#include "json.hpp"

namespace ibmea {

enum class Direction { OneToTwo, TwoToOne, Both };
enum class CandidateSet {
  TestSide,  // counterparts of the evaluated pairs only
  All,       // every entity of the other graph
};

Direction parse_direction(std::string_view s);
CandidateSet parse_candidate_set(std::string_view s);
std::string to_string(Direction d);
std::string to_string(CandidateSet c);

struct RankingResult {
  /// 1-based rank of the gold counterpart, per evaluated pair.
  std::vector<int> ranks_12;
  std::vector<int> ranks_21;
  int candidates_12 = 0;
  int candidates_21 = 0;
  int zero_norm_rows = 0;
};

/// Ranks every gold counterpart by descending cosine similarity; ties go to the lower
/// candidate id. Zero-norm rows have similarity 0 to everything.
RankingResult rank_alignments(const Matrix& z1, const Matrix& z2, std::span<const EntityPair> pairs,
                              CandidateSet candidates = CandidateSet::TestSide);

/// Rank of `gold` within `scores` under the descending / ascending-id tie rule.
int rank_of(std::span<const double> scores, std::span<const int> candidate_ids, int gold_position);

struct MetricsReport {
  double h1 = 0.0;
  double h10 = 0.0;
  double mrr = 0.0;
  std::size_t n_pairs = 0;
  bool empty = false;  // no pairs: metrics are undefined

  // experiment metadata
  double seed_ratio = 0.0;
  double noise_rate = 0.0;
  std::string variant = "full";
  std::uint64_t rng_seed = 0;
};

MetricsReport compute_metrics(const RankingResult& r, Direction direction = Direction::Both);
/// Metrics over a subset of the ranked pairs (indices into the pair list).
MetricsReport compute_metrics(const RankingResult& r, std::span<const std::size_t> subset,
                              Direction direction = Direction::Both);

nlohmann::json to_json(const MetricsReport& m);

/// Metric identities h1 <= h10 <= 1, h1 <= mrr <= 1, all in [0,1]. Empty reports pass.
bool metrics_consistent(const MetricsReport& m);

/// Worker count for parallel ranking: IBMEA_NUM_THREADS when set, else hardware concurrency.
int num_threads();

}  // namespace ibmea
