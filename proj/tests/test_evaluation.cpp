#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <numeric>

#include "ibmea/evaluation.hpp"
#include "support.hpp"

using namespace ibmea;
using test::random_matrix;

namespace {

// Full sort with the descending-score, ascending-id order.
int brute_rank(const std::vector<double>& scores, const std::vector<int>& ids, std::size_t gold) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : ids[a] < ids[b];
  });
  return static_cast<int>(std::find(order.begin(), order.end(), gold) - order.begin()) + 1;
}

Matrix normalized(const Matrix& z) { return z.rowwise().normalized(); }

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("unique nearest is rank 1") {
  const std::vector<double> s{0.1, 0.8, 0.3};
  const std::vector<int> ids{0, 1, 2};
  CHECK(rank_of(s, ids, 1) == 1);
}

TEST_CASE("ties go to the lower id") {
  const std::vector<double> s{0.9, 0.9, 0.1};
  const std::vector<int> ids{0, 1, 2};
  CHECK(rank_of(s, ids, 1) == 2);
  CHECK(rank_of(s, ids, 0) == 1);
}

TEST_CASE("ranking matches a full-sort oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const int n = 50;
    const Matrix z1 = random_matrix(n, 6, 100 + seed), z2 = random_matrix(n, 6, 200 + seed);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<EntityPair> pairs;
    for (int i = 0; i < n; ++i) pairs.emplace_back(i, perm[i]);
    const RankingResult r = rank_alignments(z1, z2, pairs, CandidateSet::All);
    const Matrix s = normalized(z1) * normalized(z2).transpose();
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    for (int i = 0; i < n; ++i) {
      std::vector<double> row;
      for (int j = 0; j < n; ++j) row.push_back(s(i, j));
      CHECK(r.ranks_12[i] == brute_rank(row, ids, perm[i]));
      std::vector<double> col;
      for (int j = 0; j < n; ++j) col.push_back(s(j, perm[i]));
      CHECK(r.ranks_21[i] == brute_rank(col, ids, i));
    }
  }
}

TEST_CASE("test-side candidates only contain evaluated counterparts") {
  const Matrix z1 = random_matrix(10, 4, 1), z2 = random_matrix(10, 4, 2);
  const std::vector<EntityPair> pairs{{0, 3}, {4, 7}, {9, 1}};
  const RankingResult r = rank_alignments(z1, z2, pairs, CandidateSet::TestSide);
  CHECK(r.candidates_12 == 3);
  CHECK(r.candidates_21 == 3);
  for (int k : r.ranks_12) CHECK((k >= 1 && k <= 3));
}

TEST_CASE("zero-norm rows score zero against everything") {
  Matrix z1 = random_matrix(3, 4, 3), z2 = random_matrix(3, 4, 4);
  z1.row(1).setZero();
  const std::vector<EntityPair> pairs{{0, 0}, {1, 1}, {2, 2}};
  const RankingResult r = rank_alignments(z1, z2, pairs, CandidateSet::All);
  CHECK(r.zero_norm_rows == 1);
  CHECK(r.ranks_12[1] == 2);  // three-way tie at zero, id 0 goes first
}

TEST_CASE("metrics on hand examples") {
  RankingResult r;
  r.ranks_12 = {1, 1, 1};
  r.ranks_21 = {1, 1, 1};
  MetricsReport m = compute_metrics(r);
  CHECK(m.h1 == 1.0);
  CHECK(m.h10 == 1.0);
  CHECK(m.mrr == 1.0);

  r.ranks_12 = {1, 3};
  m = compute_metrics(r, Direction::OneToTwo);
  CHECK(m.h1 == 0.5);
  CHECK(m.h10 == 1.0);
  CHECK(m.mrr == doctest::Approx(2.0 / 3.0));

  r.ranks_12 = {11};
  r.candidates_12 = 11;
  m = compute_metrics(r, Direction::OneToTwo);
  CHECK(m.h10 == 0.0);
  CHECK(m.mrr == doctest::Approx(1.0 / 11.0));
}

TEST_CASE("both directions average the two") {
  RankingResult r;
  r.ranks_12 = {1, 2, 15, 4};
  r.ranks_21 = {3, 1, 1, 20};
  const MetricsReport a = compute_metrics(r, Direction::OneToTwo);
  const MetricsReport b = compute_metrics(r, Direction::TwoToOne);
  const MetricsReport both = compute_metrics(r, Direction::Both);
  CHECK(both.h1 == doctest::Approx((a.h1 + b.h1) / 2));
  CHECK(both.h10 == doctest::Approx((a.h10 + b.h10) / 2));
  CHECK(both.mrr == doctest::Approx((a.mrr + b.mrr) / 2));
  CHECK(metrics_consistent(both));
}

TEST_CASE("subsets and empty reports") {
  RankingResult r;
  r.ranks_12 = {1, 5, 20};
  r.ranks_21 = {1, 5, 20};
  const std::vector<std::size_t> sub{1};
  CHECK(compute_metrics(r, sub).h10 == 1.0);
  CHECK(compute_metrics(r, sub).h1 == 0.0);
  const std::vector<std::size_t> none;
  CHECK(compute_metrics(r, none).empty);
  CHECK(metrics_consistent(compute_metrics(r, none)));
}

TEST_CASE("names parse") {
  CHECK(parse_direction("1to2") == Direction::OneToTwo);
  CHECK(parse_direction("2to1") == Direction::TwoToOne);
  CHECK(parse_direction("both") == Direction::Both);
  CHECK(parse_candidate_set("all") == CandidateSet::All);
  CHECK_THROWS_AS(parse_direction("sideways"), ConfigError);
}

TEST_CASE("ranking is independent of the thread count") {
  const Matrix z1 = random_matrix(120, 5, 8), z2 = random_matrix(120, 5, 9);
  std::vector<EntityPair> pairs;
  for (int i = 0; i < 120; ++i) pairs.emplace_back(i, (i * 7) % 120);
  setenv("IBMEA_NUM_THREADS", "1", 1);
  const RankingResult a = rank_alignments(z1, z2, pairs, CandidateSet::All);
  setenv("IBMEA_NUM_THREADS", "7", 1);
  const RankingResult b = rank_alignments(z1, z2, pairs, CandidateSet::All);
  unsetenv("IBMEA_NUM_THREADS");
  CHECK(a.ranks_12 == b.ranks_12);
  CHECK(a.ranks_21 == b.ranks_21);
}

}
