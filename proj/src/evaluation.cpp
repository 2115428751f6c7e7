#include "ibmea/evaluation.hpp"

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <numeric>
#include <thread>

namespace ibmea {

Direction parse_direction(std::string_view s) {
  if (s == "1to2") return Direction::OneToTwo;
  if (s == "2to1") return Direction::TwoToOne;
  if (s == "both") return Direction::Both;
  throw ConfigError("unknown direction '" + std::string(s) + "' (1to2, 2to1, both)");
}

CandidateSet parse_candidate_set(std::string_view s) {
  if (s == "test") return CandidateSet::TestSide;
  if (s == "all") return CandidateSet::All;
  throw ConfigError("unknown candidate set '" + std::string(s) + "' (test, all)");
}

std::string to_string(Direction d) {
  switch (d) {
    case Direction::OneToTwo: return "1to2";
    case Direction::TwoToOne: return "2to1";
    case Direction::Both: return "both";
  }
  return "?";
}

std::string to_string(CandidateSet c) { return c == CandidateSet::All ? "all" : "test"; }

int num_threads() {
  if (const char* env = std::getenv("IBMEA_NUM_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int rank_of(std::span<const double> scores, std::span<const int> candidate_ids, int gold_position) {
  const double g = scores[gold_position];
  const int gid = candidate_ids[gold_position];
  int rank = 1;
  for (std::size_t c = 0; c < scores.size(); ++c)
    if (scores[c] > g || (scores[c] == g && candidate_ids[c] < gid)) ++rank;
  return rank;
}

namespace {

Matrix normalized_rows(const Matrix& z, int& zero_rows) {
  Matrix out = z;
  for (Index i = 0; i < z.rows(); ++i) {
    const double n = z.row(i).norm();
    if (n > 0.0)
      out.row(i) /= n;
    else {
      out.row(i).setZero();
      ++zero_rows;
    }
  }
  return out;
}

/// Ranks for queries (rows of q) against candidate rows of c; gold[i] is the candidate
/// position of query i.
std::vector<int> rank_block(const Matrix& q, const Matrix& c, std::span<const int> candidate_ids,
                            std::span<const int> gold) {
  std::vector<int> ranks(static_cast<std::size_t>(q.rows()));
  auto work = [&](Index lo, Index hi) {
    std::vector<double> scores(static_cast<std::size_t>(c.rows()));
    for (Index i = lo; i < hi; ++i) {
      Eigen::Map<Vector>(scores.data(), c.rows()).noalias() = c * q.row(i).transpose();
      ranks[i] = rank_of(scores, candidate_ids, gold[i]);
    }
  };
  const Index n = q.rows();
  const int workers = static_cast<int>(std::min<Index>(num_threads(), std::max<Index>(1, n / 64)));
  if (workers <= 1) {
    work(0, n);
    return ranks;
  }
  std::vector<std::jthread> pool;
  const Index chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const Index lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo < hi) pool.emplace_back(work, lo, hi);
  }
  pool.clear();  // join
  return ranks;
}

std::vector<int> directional_ranks(const Matrix& zq, const Matrix& zc, std::span<const EntityPair> pairs,
                                   bool forward, CandidateSet set, int& n_candidates) {
  std::vector<int> query_ids, gold_ids;
  for (auto [a, b] : pairs) {
    query_ids.push_back(forward ? a : b);
    gold_ids.push_back(forward ? b : a);
  }
  std::vector<int> cand_ids;
  if (set == CandidateSet::All) {
    cand_ids.resize(static_cast<std::size_t>(zc.rows()));
    std::iota(cand_ids.begin(), cand_ids.end(), 0);
  } else {
    cand_ids = gold_ids;
    std::sort(cand_ids.begin(), cand_ids.end());
    cand_ids.erase(std::unique(cand_ids.begin(), cand_ids.end()), cand_ids.end());
  }
  n_candidates = static_cast<int>(cand_ids.size());
  Matrix q(static_cast<Index>(query_ids.size()), zq.cols());
  for (std::size_t i = 0; i < query_ids.size(); ++i) q.row(i) = zq.row(query_ids[i]);
  Matrix c(static_cast<Index>(cand_ids.size()), zc.cols());
  for (std::size_t k = 0; k < cand_ids.size(); ++k) c.row(k) = zc.row(cand_ids[k]);
  std::vector<int> gold_pos;
  for (int g : gold_ids)
    gold_pos.push_back(static_cast<int>(std::lower_bound(cand_ids.begin(), cand_ids.end(), g) -
                                        cand_ids.begin()));
  return rank_block(q, c, cand_ids, gold_pos);
}

}  // namespace

RankingResult rank_alignments(const Matrix& z1, const Matrix& z2, std::span<const EntityPair> pairs,
                              CandidateSet candidates) {
  if (z1.cols() != z2.cols()) throw std::invalid_argument("embedding widths differ");
  for (auto [a, b] : pairs)
    if (a < 0 || a >= z1.rows() || b < 0 || b >= z2.rows())
      throw std::invalid_argument("pair outside the embedding tables");
  RankingResult r;
  const Matrix n1 = normalized_rows(z1, r.zero_norm_rows);
  const Matrix n2 = normalized_rows(z2, r.zero_norm_rows);
  if (r.zero_norm_rows > 0)
    std::cerr << "warning: " << r.zero_norm_rows << " zero-norm embedding rows ranked at similarity 0\n";
  r.ranks_12 = directional_ranks(n1, n2, pairs, true, candidates, r.candidates_12);
  r.ranks_21 = directional_ranks(n2, n1, pairs, false, candidates, r.candidates_21);
  return r;
}

namespace {

void accumulate(const std::vector<int>& ranks, std::span<const std::size_t> subset, double& h1,
                double& h10, double& mrr) {
  h1 = h10 = mrr = 0.0;
  for (std::size_t i : subset) {
    const int r = ranks[i];
    h1 += r <= 1;
    h10 += r <= 10;
    mrr += 1.0 / r;
  }
  const double n = static_cast<double>(subset.size());
  h1 /= n;
  h10 /= n;
  mrr /= n;
}

}  // namespace

MetricsReport compute_metrics(const RankingResult& r, std::span<const std::size_t> subset,
                              Direction direction) {
  MetricsReport m;
  m.n_pairs = subset.size();
  if (subset.empty()) {
    m.empty = true;
    return m;
  }
  double a1, a10, amrr, b1, b10, bmrr;
  accumulate(r.ranks_12, subset, a1, a10, amrr);
  accumulate(r.ranks_21, subset, b1, b10, bmrr);
  switch (direction) {
    case Direction::OneToTwo: m.h1 = a1, m.h10 = a10, m.mrr = amrr; break;
    case Direction::TwoToOne: m.h1 = b1, m.h10 = b10, m.mrr = bmrr; break;
    case Direction::Both:
      m.h1 = 0.5 * (a1 + b1);
      m.h10 = 0.5 * (a10 + b10);
      m.mrr = 0.5 * (amrr + bmrr);
      break;
  }
  return m;
}

MetricsReport compute_metrics(const RankingResult& r, Direction direction) {
  if (r.ranks_12.empty()) throw std::invalid_argument("no ranked pairs");
  std::vector<std::size_t> all(r.ranks_12.size());
  std::iota(all.begin(), all.end(), 0);
  return compute_metrics(r, all, direction);
}

nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json j;
  if (m.empty) {
    j["h1"] = nullptr;
    j["h10"] = nullptr;
    j["mrr"] = nullptr;
  } else {
    j["h1"] = m.h1;
    j["h10"] = m.h10;
    j["mrr"] = m.mrr;
  }
  j["n_pairs"] = m.n_pairs;
  j["seed_ratio"] = m.seed_ratio;
  j["noise_rate"] = m.noise_rate;
  j["variant"] = m.variant;
  j["rng_seed"] = m.rng_seed;
  return j;
}

bool metrics_consistent(const MetricsReport& m) {
  if (m.empty) return true;
  auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  return unit(m.h1) && unit(m.h10) && unit(m.mrr) && m.h1 <= m.h10 && m.h1 <= m.mrr;
}

}  // namespace ibmea
