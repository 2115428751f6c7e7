#include <doctest.h>

#include <set>

#include "ibmea/training.hpp"
#include "support.hpp"

using namespace ibmea;
using nlohmann::json;

namespace {

bool same_params(const ModelParams& a, const ModelParams& b) {
  bool same = true;
  visit_model_params([&](const std::string&, const Matrix& x, const Matrix& y) { same = same && x == y; }, a, b);
  return same;
}

std::vector<json> history_json(const RunResult& r) {
  std::vector<json> out;
  for (const auto& e : r.history) out.push_back(e.to_json());
  return out;
}

json core_config() {
  return json::parse(R"({
    "epochs": 5, "batch_size": 64, "learning_rate": 0.01, "weight_decay": 0.01,
    "beta": {"g": 0.001, "v": 0.01, "a": 0.01, "r": 0.01}, "tau": 0.1,
    "iterative": {"enabled": true, "start_epoch": 2, "period": 1, "confidence_rule": "stable-MNN"},
    "rng_seed": 3, "eval_every": 1
  })");
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("config: required keys, unknown keys and round trip") {
  const TrainConfig c = config_from_json(core_config(), {}, true);
  CHECK(c.epochs == 5);
  CHECK(c.ib.beta[Modality::Visual] == 0.01);
  CHECK(c.iterative.period == 1);

  json missing = core_config();
  missing.erase("epochs");
  try {
    config_from_json(missing, {}, true);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("epochs") != std::string::npos);
  }
  json nested = core_config();
  nested["beta"].erase("r");
  CHECK_THROWS_AS(config_from_json(nested, {}, true), ConfigError);
  json extra = core_config();
  extra["learning_rte"] = 1;
  try {
    config_from_json(extra, {}, true);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("learning_rte") != std::string::npos);
  }

  TrainConfig custom = test::tiny_config(9);
  custom.ablation = AblationFlags::parse("w/o A-IB");
  custom.use_discriminator = true;
  custom.candidates = CandidateSet::All;
  const TrainConfig back = config_from_json(to_json(custom), {}, true);
  CHECK(to_json(back) == to_json(custom));
}

TEST_CASE("config values are validated") {
  TrainConfig c = test::tiny_config();
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = test::tiny_config();
  c.learning_rate = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = test::tiny_config();
  c.iterative.period = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("ablation names") {
  for (const auto& name : AblationFlags::variant_names()) CHECK(AblationFlags::parse(name).name == name);
  const AblationFlags g = AblationFlags::parse("w/o G-IB");
  CHECK(g.disable_ib[Modality::Graph]);
  CHECK(g.included()[Modality::Graph]);
  const AblationFlags img = AblationFlags::parse("w/o image");
  CHECK_FALSE(img.included()[Modality::Visual]);
  CHECK(AblationFlags::parse("Hybrid-IB").hybrid_ib);
  CHECK_THROWS_AS(AblationFlags::parse("w/o Z-IB"), ConfigError);
}

TEST_CASE("parameter groups") {
  CHECK(param_group("x_g.kg1") == "node_features");
  CHECK(param_group("enc.gat_mu.layer1.h0.weight") == "gat_mu");
  CHECK(param_group("enc.gat_sigma.layer2.bias") == "gat_sigma");
  CHECK(param_group("enc.visual.mu.w1") == "visual");
  CHECK(param_group("fusion.query") == "fusion");
  CHECK(param_group("hybrid.sigma.bias") == "hybrid");
}

TEST_CASE("identical runs are identical") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(30, 1, {0.2, 0.3, 0.4}));
  const TrainConfig cfg = test::tiny_config(4);
  const RunResult a = run_training(task, cfg);
  const RunResult b = run_training(task, cfg);
  CHECK(history_json(a) == history_json(b));
  CHECK(same_params(a.state.params, b.state.params));
}

TEST_CASE("zero learning rate leaves parameters and loss unchanged") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(30, 2, {0.2, 0.3, 0.4}));
  TrainConfig cfg = test::tiny_config(5);
  cfg.learning_rate = 0.0;
  cfg.stochastic = false;
  cfg.iterative.enabled = false;
  cfg.epochs = 4;
  std::vector<double> losses;
  RunOptions opts;
  opts.on_step = [&](int, const LossBreakdown& l) { losses.push_back(l.total); };
  const TaskFeatures f = prepare_features(task, cfg);
  const TrainState init = init_state(f, cfg);
  const RunResult r = run_training(task, f, cfg, opts);
  CHECK(same_params(init.params, r.state.params));
  REQUIRE(losses.size() == 4);
  // pair order is still shuffled, so sums may differ in the last bits
  for (double l : losses) CHECK(l == doctest::Approx(losses.front()).epsilon(1e-12));
}

TEST_CASE("loss falls over the first 50 steps on tiny tasks") {
  int improved = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const AlignmentTask task = generate_synthetic_task(test::small_spec(20, seed));
    TrainConfig cfg = test::tiny_config(seed);
    cfg.epochs = 50;
    cfg.eval_every = 50;
    cfg.iterative.enabled = false;
    std::vector<double> losses;
    RunOptions opts;
    opts.on_step = [&](int, const LossBreakdown& l) { losses.push_back(l.total); };
    run_training(task, cfg, opts);
    REQUIRE(losses.size() == 50);
    improved += losses.back() < losses.front();
  }
  CHECK(improved >= 19);
}

TEST_CASE("zero epochs returns the initial state with one evaluation") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(20, 3));
  TrainConfig cfg = test::tiny_config(6);
  cfg.epochs = 0;
  const RunResult r = run_training(task, cfg);
  CHECK(r.history.size() == 1);
  CHECK(r.state.epoch == 0);
  CHECK(same_params(r.state.params, init_state(prepare_features(task, cfg), cfg).params));
}

TEST_CASE("disabled iteration never adds pseudo pairs") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(30, 4));
  TrainConfig cfg = test::tiny_config(7);
  cfg.iterative.enabled = false;
  const RunResult r = run_training(task, cfg);
  CHECK(r.state.pseudo_pairs.empty());
  for (const auto& e : r.history) CHECK(e.pseudo_pairs == 0);
}

TEST_CASE("mutual nearest neighbours") {
  Matrix z1(3, 2), z2(3, 2);
  z1 << 1, 0, 0, 1, 1, 1;
  z2 << 0, 1, 1, 0.1, -1, 0;
  const std::vector<int> rows{0, 1, 2};
  const auto mnn = mutual_nearest(z1, z2, rows, rows);
  std::set<EntityPair> got;
  for (const auto& p : mnn) got.emplace(p.e1, p.e2);
  // 0 <-> 1 and 1 <-> 0 are mutual; 2 prefers 1 in z2, which prefers 0 in z1
  CHECK(got == std::set<EntityPair>{{0, 1}, {1, 0}});
}

TEST_CASE("pseudo pairs need two consecutive rounds") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(40, 5));
  TrainConfig cfg = test::tiny_config(8);
  const TaskFeatures f = prepare_features(task, cfg);
  TrainState s = init_state(f, cfg);
  iterative_expand(s, task, f, cfg);
  CHECK(s.pseudo_pairs.empty());
  const auto first = s.previous_mnn;
  REQUIRE_FALSE(first.empty());
  iterative_expand(s, task, f, cfg);
  CHECK(s.pseudo_pairs.size() == first.size());  // unchanged parameters: the same pairs again

  // a pair that was mutual last round but not now is dropped
  s.previous_mnn = {{first[0].first, first[0].second}};
  const EntityPair stale{first[0].first, (first[0].second + 1) % 40};
  s.previous_mnn.push_back(stale);
  iterative_expand(s, task, f, cfg);
  for (const auto& p : s.pseudo_pairs) CHECK(EntityPair{p.e1, p.e2} != stale);
  CHECK(s.pseudo_pairs.size() == 1);
}

TEST_CASE("expansion on a converged zero-noise task") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(100, 6));
  TrainConfig cfg = test::tiny_config(9);
  cfg.model.d_g = cfg.model.gat_hidden = cfg.model.graph_out = 16;
  cfg.model.modal_hidden = cfg.model.modal_out = cfg.model.fusion_dim = 16;
  cfg.epochs = 100;
  cfg.eval_every = 100;
  cfg.iterative.enabled = false;
  const TaskFeatures f = prepare_features(task, cfg);
  RunResult r = run_training(task, f, cfg);
  cfg.iterative.enabled = true;
  iterative_expand(r.state, task, f, cfg);
  iterative_expand(r.state, task, f, cfg);
  const std::set<EntityPair> gold(task.test_pairs.begin(), task.test_pairs.end());
  int correct = 0, wrong = 0;
  for (const auto& p : r.state.pseudo_pairs) (gold.count({p.e1, p.e2}) ? correct : wrong)++;
  CHECK(wrong == 0);
  CHECK(correct >= 0.9 * static_cast<double>(gold.size()));
}

TEST_CASE("learnable node features and hybrid head only move when used") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(30, 7, {0.1, 0.1, 0.1}));
  TrainConfig cfg = test::tiny_config(10);
  cfg.epochs = 3;
  const TaskFeatures f = prepare_features(task, cfg);
  const TrainState init = init_state(f, cfg);
  const RunResult r = run_training(task, f, cfg);
  CHECK(r.state.params.node_features1 != init.params.node_features1);
  // weight decay alone shrinks the unused hybrid head
  CHECK(r.state.params.hybrid.weight.norm() < init.params.hybrid.weight.norm());
  cfg.ablation = AblationFlags::parse("Hybrid-IB");
  const RunResult h = run_training(task, f, cfg);
  CHECK(h.history.back().loss.hybrid_kl > 0.0);
  CHECK(r.history.back().loss.hybrid_kl == 0.0);
}

TEST_CASE("checkpoints round-trip and resume reproduces the trajectory") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(30, 8, {0.2, 0.2, 0.2}));
  TrainConfig cfg = test::tiny_config(11);
  cfg.epochs = 8;
  cfg.eval_every = 2;
  const TaskFeatures f = prepare_features(task, cfg);
  const RunResult full = run_training(task, f, cfg);

  RunOptions stop;
  stop.stop_after_epoch = 5;
  const RunResult part = run_training(task, f, cfg, stop);
  const auto dir = test::scratch_dir("ckpt");
  save_checkpoint(dir, part.state, cfg);
  auto [state, loaded_cfg] = load_checkpoint(dir);
  CHECK(to_json(loaded_cfg) == to_json(cfg));
  CHECK(same_params(state.params, part.state.params));
  CHECK(state.epoch == 5);

  RunOptions resume;
  resume.resume = std::move(state);
  const RunResult rest = run_training(task, f, cfg, resume);
  CHECK(same_params(rest.state.params, full.state.params));
  std::vector<json> tail;
  for (const auto& e : full.history)
    if (e.epoch > 5) tail.push_back(e.to_json());
  CHECK(history_json(rest) == tail);
}

TEST_CASE("corrupted checkpoints are rejected") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(20, 9));
  const TrainConfig cfg = test::tiny_config(12);
  const TrainState s = init_state(prepare_features(task, cfg), cfg);
  const auto dir = test::scratch_dir("ckpt_bad");
  save_checkpoint(dir, s, cfg);
  {
    std::fstream io(dir / "params.bin", std::ios::in | std::ios::out | std::ios::binary);
    io.seekp(40);
    io.put('\x7f');
  }
  CHECK_THROWS_AS(load_checkpoint(dir), ValidationError);
  save_checkpoint(dir, s, cfg);
  test::write(dir / "manifest.json", "{not json");
  CHECK_THROWS_AS(load_checkpoint(dir), ValidationError);
}

TEST_CASE("non-finite losses abort with the last good state") {
  const AlignmentTask task = generate_synthetic_task(test::small_spec(20, 10));
  TrainConfig cfg = test::tiny_config(13);
  const TaskFeatures f = prepare_features(task, cfg);
  TrainState s = init_state(f, cfg);
  s.params.fusion.query(0, 0) = std::numeric_limits<double>::quiet_NaN();
  RunOptions opts;
  opts.resume = s;
  bool aborted = false;
  opts.on_abort = [&](const TrainState&) { aborted = true; };
  try {
    run_training(task, f, cfg, opts);
    FAIL("expected a numeric error");
  } catch (const NonFiniteLoss& e) {
    CHECK_FALSE(e.terms.finite());
  }
  CHECK(aborted);
}

}
