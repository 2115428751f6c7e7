#include "ibmea/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>

namespace ibmea {

AlignmentTask apply_image_dropout(const AlignmentTask& task, double rate, std::uint64_t rng_seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("dropout rate must lie in [0, 1]");
  AlignmentTask out = task;
  Rng rng = make_rng(rng_seed, "image_dropout");
  std::bernoulli_distribution drop(rate);
  for (MMKG* kg : {&out.kg1, &out.kg2}) {
    auto& x = kg->image_features;
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < x.cols(); ++j)
        if (drop(rng)) x(i, j) = 0.0f;
  }
  return out;
}

MetricsReport train_and_evaluate(const AlignmentTask& task, const TrainConfig& cfg) {
  const RunResult r = run_training(task, cfg);
  return r.history.back().test;
}

NoiseMode parse_noise_mode(std::string_view s) {
  if (s == "retrain") return NoiseMode::Retrain;
  if (s == "reevaluate") return NoiseMode::Reevaluate;
  throw ConfigError("unknown noise mode '" + std::string(s) + "' (retrain, reevaluate)");
}

std::vector<MetricsReport> noise_sweep(const AlignmentTask& task, const TrainConfig& cfg,
                                       const std::vector<double>& rates, NoiseMode mode) {
  for (double r : rates)
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("dropout rate must lie in [0, 1]");
  std::optional<RunResult> clean;
  if (mode == NoiseMode::Reevaluate) clean = run_training(task, cfg);
  std::vector<MetricsReport> out;
  for (std::size_t k = 0; k < rates.size(); ++k) {
    const auto noisy =
        apply_image_dropout(task, rates[k], substream_seed(cfg.rng_seed, "noise_rate/" + std::to_string(k)));
    MetricsReport m;
    if (mode == NoiseMode::Retrain) {
      m = train_and_evaluate(noisy, cfg);
    } else {
      const TaskFeatures f = prepare_features(noisy, cfg);
      m = evaluate_state(clean->state, noisy, f, cfg).test;
    }
    m.noise_rate = rates[k];
    out.push_back(m);
  }
  return out;
}

std::vector<double> test_pair_image_similarity(const AlignmentTask& task, const TaskFeatures& f) {
  std::vector<double> out;
  for (auto [a, b] : task.test_pairs) {
    const auto u = f.kg1.x_v.row(a), v = f.kg2.x_v.row(b);
    const double n = u.norm() * v.norm();
    out.push_back(n > 0 ? u.dot(v) / n : 0.0);
  }
  return out;
}

std::vector<BucketReport> similarity_stratified_eval(const AlignmentTask& task, const TrainState& state,
                                                     const TaskFeatures& f, const TrainConfig& cfg,
                                                     std::vector<double> thresholds) {
  std::sort(thresholds.begin(), thresholds.end());
  const auto sims = test_pair_image_similarity(task, f);
  const EvalEmbeddings emb = compute_embeddings(state.params, f, cfg);
  const RankingResult ranks = rank_alignments(emb.h1.z_o, emb.h2.z_o, task.test_pairs, cfg.candidates);

  std::vector<double> edges{-1.0};
  edges.insert(edges.end(), thresholds.begin(), thresholds.end());
  edges.push_back(1.0);
  std::vector<BucketReport> out;
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
    const bool last = b + 2 == edges.size();
    std::vector<std::size_t> subset;
    for (std::size_t i = 0; i < sims.size(); ++i) {
      // first bucket is closed below, last closed above
      const bool above = sims[i] >= edges[b] || b == 0;
      const bool below = sims[i] < edges[b + 1] || last;
      if (above && below) subset.push_back(i);
    }
    BucketReport r{edges[b], edges[b + 1], compute_metrics(ranks, subset)};
    r.metrics.seed_ratio = task.seed_ratio;
    r.metrics.variant = cfg.ablation.name;
    r.metrics.rng_seed = cfg.rng_seed;
    out.push_back(r);
  }
  return out;
}

std::vector<AblationRow> ablation_suite(const AlignmentTask& task, const TrainConfig& cfg,
                                        const std::vector<std::string>& variants) {
  std::vector<TrainConfig> configs;
  TrainConfig base = cfg;
  base.ablation = AblationFlags::parse("full");
  configs.push_back(base);
  for (const auto& v : variants) {
    TrainConfig c = cfg;
    c.ablation = AblationFlags::parse(v);
    c.validate();
    configs.push_back(c);
  }
  const TaskFeatures f = prepare_features(task, cfg);
  std::vector<AblationRow> out;
  for (const auto& c : configs) {
    const RunResult r = run_training(task, f, c);
    out.push_back({c.ablation.name, r.history.back().test});
  }
  return out;
}

std::vector<MetricsReport> seed_ratio_sweep(const AlignmentTask& task, const TrainConfig& cfg,
                                            const std::vector<double>& ratios,
                                            std::uint64_t split_seed) {
  std::vector<MetricsReport> out;
  for (double ratio : ratios) {
    const AlignmentTask t = resplit(task, ratio, split_seed);
    out.push_back(train_and_evaluate(t, cfg));
  }
  return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "variant,h1,h10,mrr,n_pairs,seed\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    os << '"' << r.variant << "\",";
    if (m.empty)
      os << ",,,";
    else
      os << m.h1 << ',' << m.h10 << ',' << m.mrr << ',';
    os << m.n_pairs << ',' << m.rng_seed << '\n';
  }
  return os.str();
}

}  // namespace ibmea
