// ibmea: synth / train / eval / ablate / sweep

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "ibmea/digest.hpp"
#include "ibmea/experiments.hpp"
#include "ibmea/training.hpp"
#include "json.hpp"

#ifndef IBMEA_VERSION
#define IBMEA_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ibmea;

namespace {

constexpr int kOk = 0, kIo = 1, kInvalid = 2, kNumeric = 3;
constexpr const char* kManifestName = "run_manifest.json";

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  json config = nullptr;
  json seeds = json::object();
  json inputs = json::object();
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void add_input(const std::string& key, const fs::path& path) {
    json digests = json::object();
    if (fs::is_directory(path)) {
      std::vector<std::string> rel;
      for (const auto& e : fs::recursive_directory_iterator(path))
        if (e.is_regular_file() && e.path().filename() != kManifestName)
          rel.push_back(fs::relative(e.path(), path).generic_string());
      std::sort(rel.begin(), rel.end());
      for (const auto& r : rel) digests[r] = sha256_file(path / r);
    } else {
      digests[path.filename().string()] = sha256_file(path);
    }
    inputs[key] = {{"path", path.string()}, {"sha256", digests}};
  }

  void write(const fs::path& dir) const {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const json j = {{"command", command},    {"argv", argv},
                    {"version", IBMEA_VERSION}, {"config", config},
                    {"seeds", seeds},        {"inputs", inputs},
                    {"outputs", outputs},    {"wall_clock_seconds", secs},
                    {"finished_at", std::time(nullptr)}};
    write_file_atomic(dir / kManifestName, j.dump(2) + "\n");
  }
};

std::vector<double> parse_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::logic_error&) {
      throw ConfigError("invalid value '" + tok + "' in " + what);
    }
  }
  if (out.empty()) throw ConfigError(what + " is empty");
  return out;
}

std::vector<std::string> parse_names(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto b = tok.find_first_not_of(' '), e = tok.find_last_not_of(' ');
    if (b != std::string::npos) out.push_back(tok.substr(b, e - b + 1));
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

std::string jsonl(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) out += r.dump() + "\n";
  return out;
}

// shortest round-trip representation
std::string num(double x) { return json(x).dump(); }

std::string fmt(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << x;
  return os.str();
}

/// Options shared by the commands that train.
struct TrainFlags {
  std::string config_path;
  std::string data;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<int> eval_every;
  std::optional<std::string> variant;
  std::optional<std::string> candidates;

  void add(CLI::App* app) {
    app->add_option("--config", config_path, "JSON training config");
    app->add_option("--data", data, "task directory written by synth")->required();
    app->add_option("--seed", seed, "rng seed (overrides the config)");
    app->add_option("--epochs", epochs, "epochs (overrides the config)");
    app->add_option("--eval-every", eval_every, "evaluation period (overrides the config)");
    app->add_option("--candidates", candidates, "candidate set: test or all");
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path, cfg, true);
    if (seed) cfg.rng_seed = *seed;
    if (epochs) cfg.epochs = *epochs;
    if (eval_every) cfg.eval_every = *eval_every;
    if (variant) cfg.ablation = AblationFlags::parse(*variant);
    if (candidates) cfg.candidates = parse_candidate_set(*candidates);
    cfg.validate();
    return cfg;
  }
};

// ---------------------------------------------------------------------------------------------

struct SynthCmd {
  SyntheticSpec spec;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--entities", spec.n_entities, "entities per graph");
    app->add_option("--relations", spec.n_relations, "relation vocabulary size");
    app->add_option("--attributes", spec.n_attributes, "attribute vocabulary size");
    app->add_option("--image-dim", spec.image_dim, "image feature width");
    app->add_option("--edge-prob", spec.edge_prob, "probability of each directed triple");
    app->add_option("--attrs-per-entity", spec.attrs_per_entity, "attribute assignments per entity");
    app->add_option("--image-coverage", spec.image_coverage, "fraction of entities with an image");
    app->add_option("--noise-edge", spec.noise.edge_drop, "triple drop probability in the second graph");
    app->add_option("--noise-attr", spec.noise.attr_flip, "attribute resampling probability");
    app->add_option("--noise-image", spec.noise.image_noise, "image mixing weight");
    app->add_option("--seed-ratio", spec.seed_ratio, "fraction of gold pairs used for training");
    app->add_option("--seed", spec.rng_seed, "rng seed");
    app->add_option("--out", out, "output directory")->required();
  }

  int run(Manifest& m) {
    const AlignmentTask task = generate_synthetic_task(spec);
    save_task(task, out);
    m.config = {{"entities", spec.n_entities},
                {"relations", spec.n_relations},
                {"attributes", spec.n_attributes},
                {"image_dim", spec.image_dim},
                {"edge_prob", spec.edge_prob},
                {"attrs_per_entity", spec.attrs_per_entity},
                {"image_coverage", spec.image_coverage},
                {"noise", {{"edge_drop", spec.noise.edge_drop}, {"attr_flip", spec.noise.attr_flip}, {"image_noise", spec.noise.image_noise}}},
                {"seed_ratio", spec.seed_ratio}};
    m.seeds = {{"data", spec.rng_seed}};
    m.outputs = {out};
    m.write(out);
    std::cout << "wrote " << task.train_pairs.size() << " train / " << task.test_pairs.size()
              << " test pairs to " << out << "\n";
    return kOk;
  }
};

struct TrainCmd {
  TrainFlags flags;
  std::string out;

  void add(CLI::App* app) {
    flags.add(app);
    app->add_option("--variant", flags.variant, "ablation variant (default full)");
    app->add_option("--out", out, "run directory")->required();
  }

  int run(Manifest& m) {
    const TrainConfig cfg = flags.resolve();
    const AlignmentTask task = load_task(flags.data);
    m.add_input("data", flags.data);
    if (!flags.config_path.empty()) m.add_input("config", flags.config_path);
    m.config = to_json(cfg);
    m.seeds = {{"rng_seed", cfg.rng_seed}};
    fs::create_directories(out);
    const fs::path dir(out);

    std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
    std::ofstream steps(dir / "loss_terms.jsonl", std::ios::trunc);
    if (!metrics || !steps) throw std::ios_base::failure("cannot write logs in " + out);
    RunOptions opts;
    opts.on_eval = [&](const EvalRecord& r) { metrics << r.to_json().dump() << "\n" << std::flush; };
    opts.on_step = [&](int epoch, const LossBreakdown& l) {
      json j = l.to_json();
      j["epoch"] = epoch;
      steps << j.dump() << "\n";
    };
    opts.on_best = [&](const TrainState& s, const EvalRecord&) { save_checkpoint(dir / "best", s, cfg); };
    opts.on_abort = [&](const TrainState& s) { save_checkpoint(dir / "abort", s, cfg); };

    RunResult result;
    try {
      result = run_training(task, cfg, opts);
    } catch (const NonFiniteLoss& e) {
      const fs::path dump = dir / "loss_dump.json";
      write_text(dump, e.terms.to_json().dump(2) + "\n");
      std::cerr << "error: " << e.what() << "; per-term losses in " << dump.string() << "\n";
      m.outputs = {(dir / "abort").string(), dump.string()};
      m.write(dir);
      return kNumeric;
    }
    save_checkpoint(dir / "final", result.state, cfg);
    m.outputs = {(dir / "metrics.jsonl").string(), (dir / "loss_terms.jsonl").string(),
                 (dir / "best").string(), (dir / "final").string()};
    m.write(dir);
    const EvalRecord& last = result.history.back();
    std::cout << "epoch " << last.epoch << "  test H@1 " << fmt(last.test.h1) << "  H@10 "
              << fmt(last.test.h10) << "  MRR " << fmt(last.test.mrr) << "  train H@1 "
              << fmt(last.train.h1) << "\n";
    return kOk;
  }
};

struct EvalCmd {
  std::string checkpoint, data, direction = "both", out;
  std::optional<std::string> candidates;

  void add(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    app->add_option("--data", data, "task directory")->required();
    app->add_option("--direction", direction, "1to2, 2to1 or both");
    app->add_option("--candidates", candidates, "candidate set: test or all");
    app->add_option("--out", out, "write the metrics JSON here as well");
  }

  int run(Manifest& m) {
    const Direction dir = parse_direction(direction);
    auto [state, cfg] = load_checkpoint(checkpoint);
    if (candidates) cfg.candidates = parse_candidate_set(*candidates);
    const AlignmentTask task = load_task(data);
    const TaskFeatures f = prepare_features(task, cfg);
    const InputDims in = f.input_dims();
    if (in.d_v != state.input_dims.d_v || in.d_a != state.input_dims.d_a || in.d_r != state.input_dims.d_r ||
        state.params.node_features1.rows() != task.kg1.num_entities ||
        state.params.node_features2.rows() != task.kg2.num_entities)
      throw ValidationError("checkpoint does not match the dataset's shape");
    const EvalRecord r = evaluate_state(state, task, f, cfg, dir);
    json j = r.to_json();
    j.erase("loss_terms");
    j["direction"] = to_string(dir);
    j["candidates"] = to_string(cfg.candidates);
    const std::string text = j.dump() + "\n";
    if (!out.empty()) {
      write_text(out, text);
      m.add_input("checkpoint", checkpoint);
      m.add_input("data", data);
      m.config = to_json(cfg);
      m.seeds = {{"rng_seed", cfg.rng_seed}};
      m.outputs = {out};
      m.write(fs::path(out).parent_path().empty() ? fs::path(".") : fs::path(out).parent_path());
    }
    std::cout << text;
    return kOk;
  }
};

struct AblateCmd {
  TrainFlags flags;
  std::string variants, out;

  void add(CLI::App* app) {
    flags.add(app);
    app->add_option("--variants", variants, "comma-separated ablation variants");
    app->add_option("--out", out, "output directory")->required();
  }

  int run(Manifest& m) {
    const TrainConfig cfg = flags.resolve();
    const auto names = parse_names(variants);
    for (const auto& n : names) AblationFlags::parse(n);
    const AlignmentTask task = load_task(flags.data);
    m.add_input("data", flags.data);
    if (!flags.config_path.empty()) m.add_input("config", flags.config_path);
    m.config = to_json(cfg);
    m.seeds = {{"rng_seed", cfg.rng_seed}};
    const auto rows = ablation_suite(task, cfg, names);
    fs::create_directories(out);
    const fs::path dir(out);
    std::vector<json> reports;
    for (const auto& r : rows) reports.push_back(to_json(r.metrics));
    write_text(dir / "ablation.csv", ablation_csv(rows));
    write_text(dir / "reports.jsonl", jsonl(reports));
    m.outputs = {(dir / "ablation.csv").string(), (dir / "reports.jsonl").string()};
    m.write(dir);
    for (const auto& r : rows)
      std::cout << std::left << std::setw(16) << r.variant << " H@1 " << fmt(r.metrics.h1) << "  H@10 "
                << fmt(r.metrics.h10) << "  MRR " << fmt(r.metrics.mrr) << "\n";
    return kOk;
  }
};

struct SweepCmd {
  TrainFlags flags;
  std::string kind, rates = "0,0.3,0.6,0.9", ratios = "0.05,0.1,0.2,0.3", thresholds = "0.2,0.5,0.8";
  std::string mode = "retrain", out;
  int seeds = 1;

  void add(CLI::App* app) {
    flags.add(app);
    app->add_option("--variant", flags.variant, "ablation variant (default full)");
    app->add_option("--kind", kind, "noise, seed-ratio or similarity")->required();
    app->add_option("--rates", rates, "image dropout rates (noise)");
    app->add_option("--ratios", ratios, "seed ratios (seed-ratio)");
    app->add_option("--thresholds", thresholds, "image cosine bucket edges (similarity)");
    app->add_option("--mode", mode, "noise harness mode: retrain or reevaluate");
    app->add_option("--seeds", seeds, "number of seeds, counted up from --seed")->check(CLI::PositiveNumber);
    app->add_option("--out", out, "output directory")->required();
  }

  int run(Manifest& m) {
    const TrainConfig base = flags.resolve();
    std::vector<double> xs;
    if (kind == "noise") xs = parse_list(rates, "--rates");
    else if (kind == "seed-ratio") xs = parse_list(ratios, "--ratios");
    else if (kind == "similarity") xs = parse_list(thresholds, "--thresholds");
    else throw ConfigError("unknown sweep kind '" + kind + "' (noise, seed-ratio, similarity)");
    const NoiseMode nmode = parse_noise_mode(mode);
    const AlignmentTask task = load_task(flags.data);
    m.add_input("data", flags.data);
    if (!flags.config_path.empty()) m.add_input("config", flags.config_path);
    m.config = to_json(base);
    m.config["sweep"] = {{"kind", kind}, {"x", xs}, {"seeds", seeds}, {"mode", mode}};
    m.seeds = {{"first", base.rng_seed}, {"count", seeds}};

    std::vector<json> reports;
    std::vector<double> series_x;
    std::vector<std::vector<MetricsReport>> per_x;
    for (int k = 0; k < seeds; ++k) {
      TrainConfig cfg = base;
      cfg.rng_seed = base.rng_seed + static_cast<std::uint64_t>(k);
      std::vector<std::pair<double, MetricsReport>> got;
      if (kind == "noise") {
        const auto r = noise_sweep(task, cfg, xs, nmode);
        for (std::size_t i = 0; i < xs.size(); ++i) got.emplace_back(xs[i], r[i]);
      } else if (kind == "seed-ratio") {
        const auto r = seed_ratio_sweep(task, cfg, xs, cfg.rng_seed);
        for (std::size_t i = 0; i < xs.size(); ++i) {
          got.emplace_back(xs[i], r[i]);
          got.back().second.seed_ratio = xs[i];
        }
      } else {
        const TaskFeatures f = prepare_features(task, cfg);
        const RunResult run = run_training(task, f, cfg);
        for (const auto& b : similarity_stratified_eval(task, run.state, f, cfg, xs))
          got.emplace_back(b.lo, b.metrics);
      }
      if (per_x.empty()) {
        for (const auto& g : got) series_x.push_back(g.first);
        per_x.resize(got.size());
      }
      for (std::size_t i = 0; i < got.size(); ++i) {
        json j = to_json(got[i].second);
        j["x"] = got[i].first;
        j["kind"] = kind;
        reports.push_back(j);
        per_x[i].push_back(got[i].second);
      }
    }

    std::ostringstream csv;
    csv << "x,mean_h1,se_h1,mean_h10,se_h10,mean_mrr,se_mrr,n\n";
    for (std::size_t i = 0; i < per_x.size(); ++i) {
      std::vector<double> h1, h10, mrr;
      for (const auto& r : per_x[i])
        if (!r.empty) h1.push_back(r.h1), h10.push_back(r.h10), mrr.push_back(r.mrr);
      auto stats = [](const std::vector<double>& v) -> std::pair<double, double> {
        if (v.empty()) return {NAN, NAN};
        double mean = 0.0;
        for (double x : v) mean += x / static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        const double se = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1) / static_cast<double>(v.size())) : 0.0;
        return {mean, se};
      };
      const auto [a, sa] = stats(h1);
      const auto [b, sb] = stats(h10);
      const auto [c, sc] = stats(mrr);
      csv << num(series_x[i]) << ',';
      if (h1.empty())
        csv << ",,,,,,";
      else
        csv << num(a) << ',' << num(sa) << ',' << num(b) << ',' << num(sb) << ',' << num(c) << ',' << num(sc) << ',';
      csv << h1.size() << "\n";
    }
    fs::create_directories(out);
    const fs::path dir(out);
    const std::string series_name = kind + "_series.csv";
    write_text(dir / "reports.jsonl", jsonl(reports));
    write_text(dir / series_name, csv.str());
    m.outputs = {(dir / "reports.jsonl").string(), (dir / series_name).string()};
    m.write(dir);
    std::cout << csv.str();
    return kOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal entity alignment with information-bottleneck regularizers"};
  app.require_subcommand(1);
  SynthCmd synth;
  TrainCmd train;
  EvalCmd eval;
  AblateCmd ablate;
  SweepCmd sweep;
  auto* c_synth = app.add_subcommand("synth", "generate a synthetic alignment task");
  auto* c_train = app.add_subcommand("train", "train a model and log metrics");
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* c_ablate = app.add_subcommand("ablate", "train ablation variants side by side");
  auto* c_sweep = app.add_subcommand("sweep", "noise, seed-ratio or similarity sweeps");
  synth.add(c_synth);
  train.add(c_train);
  eval.add(c_eval);
  ablate.add(c_ablate);
  sweep.add(c_sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  Manifest m;
  m.argv.assign(argv, argv + argc);
  try {
    if (c_synth->parsed()) return m.command = "synth", synth.run(m);
    if (c_train->parsed()) return m.command = "train", train.run(m);
    if (c_eval->parsed()) return m.command = "eval", eval.run(m);
    if (c_ablate->parsed()) return m.command = "ablate", ablate.run(m);
    if (c_sweep->parsed()) return m.command = "sweep", sweep.run(m);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kInvalid;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kInvalid;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kInvalid;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  }
  return kInvalid;
}
