#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ibmea/experiments.hpp"
#include "support.hpp"

using namespace ibmea;

namespace {

TrainConfig quick(std::uint64_t seed) {
  TrainConfig c = test::tiny_config(seed);
  c.epochs = 30;
  c.eval_every = 30;
  c.iterative.enabled = false;
  return c;
}

TrainConfig wider(std::uint64_t seed) {
  TrainConfig c = quick(seed);
  c.epochs = 100;
  c.eval_every = 100;
  c.model.modal_hidden = c.model.modal_out = c.model.fusion_dim = 16;
  return c;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_error(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace

TEST_SUITE("experiments") {

TEST_CASE("image dropout") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(40, 1));
  CHECK(apply_image_dropout(task, 0.0, 3) == task);
  const AlignmentTask all = apply_image_dropout(task, 1.0, 3);
  CHECK(all.kg1.image_features.isZero());
  CHECK(all.kg2.image_features.isZero());
  const AlignmentTask half = apply_image_dropout(task, 0.5, 3);
  const double zeros = (half.kg1.image_features.array() == 0.0f).cast<double>().mean();
  CHECK(zeros > 0.35);
  CHECK(zeros < 0.65);
  CHECK(apply_image_dropout(task, 0.5, 3) == half);
  CHECK_THROWS(apply_image_dropout(task, 1.5, 3));
}

TEST_CASE("noise rate 0 matches the baseline run") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(40, 2, {0.2, 0.3, 0.3}));
  const TrainConfig cfg = quick(3);
  const auto reports = noise_sweep(task, cfg, {0.0});
  const MetricsReport base = train_and_evaluate(task, cfg);
  CHECK(reports[0].h1 == base.h1);
  CHECK(reports[0].mrr == base.mrr);
  CHECK(reports[0].noise_rate == 0.0);
  const auto re = noise_sweep(task, cfg, {0.0, 0.5}, NoiseMode::Reevaluate);
  CHECK(re[0].mrr == base.mrr);
  CHECK(parse_noise_mode("reevaluate") == NoiseMode::Reevaluate);
  CHECK_THROWS_AS(parse_noise_mode("sometimes"), ConfigError);
}

TEST_CASE("total image dropout behaves like dropping the image modality") {
  std::vector<double> dropped, removed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const AlignmentTask task = generate_synthetic_task(test::small_spec(60, seed, {0.2, 0.3, 0.3}));
    const TrainConfig cfg = quick(seed);
    dropped.push_back(noise_sweep(task, cfg, {1.0})[0].h1);
    TrainConfig no_img = cfg;
    no_img.ablation = AblationFlags::parse("w/o image");
    removed.push_back(train_and_evaluate(task, no_img).h1);
  }
  std::vector<double> diff;
  for (std::size_t i = 0; i < dropped.size(); ++i) diff.push_back(dropped[i] - removed[i]);
  const double se = std::max(std_error(diff), std::max(std_error(dropped), std_error(removed)));
  CHECK(std::abs(mean(diff)) <= 3.0 * se + 1e-12);
}

TEST_CASE("similarity buckets") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(40, 4, {0.1, 0.1, 0.0}));
  const TrainConfig cfg = quick(4);
  const TaskFeatures f = prepare_features(task, cfg);
  const RunResult run = run_training(task, f, cfg);
  const MetricsReport global = run.history.back().test;

  const auto one = similarity_stratified_eval(task, run.state, f, cfg, {-1.0});
  REQUIRE(one.size() == 2);
  CHECK(one[0].metrics.empty);
  CHECK(one[1].metrics.h1 == global.h1);
  CHECK(one[1].metrics.mrr == global.mrr);

  // zero image noise: every gold pair shares its image exactly
  const auto buckets = similarity_stratified_eval(task, run.state, f, cfg, {0.2, 0.5, 0.99});
  REQUIRE(buckets.size() == 4);
  CHECK(buckets.back().metrics.n_pairs == task.test_pairs.size());
  for (std::size_t b = 0; b + 1 < buckets.size(); ++b) CHECK(buckets[b].metrics.empty);
  for (double s : test_pair_image_similarity(task, f)) CHECK(s == doctest::Approx(1.0));
}

TEST_CASE("low-similarity bucket when images carry the signal") {
  std::vector<double> low, all;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const AlignmentTask task = generate_synthetic_task(test::small_spec(80, 10 + seed, {1.0, 1.0, 0.3}));
    const TrainConfig cfg = wider(seed);
    const TaskFeatures f = prepare_features(task, cfg);
    const RunResult run = run_training(task, f, cfg);
    auto sims = test_pair_image_similarity(task, f);
    std::nth_element(sims.begin(), sims.begin() + sims.size() / 2, sims.end());
    const auto b = similarity_stratified_eval(task, run.state, f, cfg, {sims[sims.size() / 2]});
    REQUIRE_FALSE(b[0].metrics.empty);
    low.push_back(b[0].metrics.h1);
    all.push_back(run.history.back().test.h1);
  }
  CHECK(mean(low) <= mean(all));
}

TEST_CASE("ablation suite") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(30, 5, {0.2, 0.3, 0.3}));
  const TrainConfig cfg = quick(5);
  const auto only = ablation_suite(task, cfg, {});
  REQUIRE(only.size() == 1);
  CHECK(only[0].variant == "full");
  const auto rows = ablation_suite(task, cfg, {"w/o G-IB", "w/o V-IB"});
  CHECK(rows.size() == 3);
  CHECK(rows[0].metrics.h1 == only[0].metrics.h1);
  const std::string csv = ablation_csv(rows);
  CHECK(csv.rfind("variant,h1,h10,mrr,n_pairs,seed\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK_THROWS_AS(ablation_suite(task, cfg, {"w/o G-IB", "bogus"}), ConfigError);
}

TEST_CASE("removing the only informative modality collapses accuracy") {
  // graph and attributes are pure noise across the two graphs; images carry the signal
  const AlignmentTask task = generate_synthetic_task(test::small_spec(100, 6, {1.0, 1.0, 0.0}));
  TrainConfig cfg = wider(6);
  cfg.ablation = AblationFlags::parse("w/o image");
  const double chance = 1.0 / static_cast<double>(task.test_pairs.size());
  CHECK(train_and_evaluate(task, cfg).h1 <= 5.0 * chance);
  cfg.ablation = {};
  CHECK(train_and_evaluate(task, cfg).h1 > 20.0 * chance);
}

TEST_CASE("seed-ratio sweep re-splits the gold pairs") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(40, 7, {0.2, 0.2, 0.2}));
  TrainConfig cfg = quick(7);
  cfg.epochs = 5;
  const auto r = seed_ratio_sweep(task, cfg, {0.1, 0.5}, 3);
  REQUIRE(r.size() == 2);
  CHECK(r[0].n_pairs == 36);
  CHECK(r[1].n_pairs == 20);
  CHECK(r[0].seed_ratio == doctest::Approx(0.1));
}

}
