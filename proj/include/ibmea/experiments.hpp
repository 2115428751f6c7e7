#pragma once

// Analysis harnesses: image-noise robustness, similarity-stratified evaluation, ablations and
// the low-resource seed-ratio sweep.

#include <filesystem>
#include <string>
#include <vector>

#include "ibmea/training.hpp"

namespace ibmea {

/// Zeroes each image-feature coordinate of both graphs independently with probability `rate`.
AlignmentTask apply_image_dropout(const AlignmentTask& task, double rate, std::uint64_t rng_seed);

enum class NoiseMode {
  Retrain,     // train a fresh model on the noisy images of each rate
  Reevaluate,  // train once on clean images, evaluate on the noisy ones
};
NoiseMode parse_noise_mode(std::string_view s);

/// One report per dropout rate; each rate draws its dropout mask from its own stream.
std::vector<MetricsReport> noise_sweep(const AlignmentTask& task, const TrainConfig& cfg,
                                       const std::vector<double>& rates,
                                       NoiseMode mode = NoiseMode::Retrain);

struct BucketReport {
  double lo = 0.0;  // inclusive
  double hi = 0.0;  // exclusive, except for the last bucket
  MetricsReport metrics;
};

/// Cosine similarity of the (imputed) image features of each test pair.
std::vector<double> test_pair_image_similarity(const AlignmentTask& task, const TaskFeatures& f);

/// Buckets the test pairs by raw image cosine similarity at the sorted `thresholds`
/// ([-1, t1), [t1, t2), ..., [tk, 1]) and reports metrics per bucket.
std::vector<BucketReport> similarity_stratified_eval(const AlignmentTask& task, const TrainState& state,
                                                     const TaskFeatures& f, const TrainConfig& cfg,
                                                     std::vector<double> thresholds);

struct AblationRow {
  std::string variant;
  MetricsReport metrics;
};

/// The baseline ("full") row followed by one row per variant, all from the same seed/config.
std::vector<AblationRow> ablation_suite(const AlignmentTask& task, const TrainConfig& cfg,
                                        const std::vector<std::string>& variants);

/// One run per seed ratio, re-splitting the task's gold pairs with `split_seed`.
std::vector<MetricsReport> seed_ratio_sweep(const AlignmentTask& task, const TrainConfig& cfg,
                                            const std::vector<double>& ratios,
                                            std::uint64_t split_seed);

/// Final test metrics of one training run.
MetricsReport train_and_evaluate(const AlignmentTask& task, const TrainConfig& cfg);

std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace ibmea
