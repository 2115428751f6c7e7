#include "ibmea/training.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

namespace ibmea {

using nlohmann::json;

// ---------------------------------------------------------------------------------------------
// Ablations

const std::vector<std::string>& AblationFlags::variant_names() {
  static const std::vector<std::string> names = {
      "w/o G-IB", "w/o V-IB",  "w/o A-IB",      "w/o R-IB",     "Hybrid-IB",
      "w/o graph", "w/o image", "w/o attribute", "w/o relation"};
  return names;
}

AblationFlags AblationFlags::parse(std::string_view variant) {
  AblationFlags f;
  f.name = std::string(variant);
  if (variant == "full") return f;
  for (Modality m : kModalities) {
    std::string letter(short_name(m));
    letter[0] = static_cast<char>(std::toupper(letter[0]));
    if (variant == "w/o " + letter + "-IB") {
      f.disable_ib[m] = true;
      return f;
    }
    if (variant == "w/o " + std::string(long_name(m))) {
      f.drop_modality[m] = true;
      return f;
    }
  }
  if (variant == "Hybrid-IB") {
    f.hybrid_ib = true;
    return f;
  }
  throw ConfigError("unknown ablation variant '" + std::string(variant) + "'");
}

PerModality<bool> AblationFlags::included() const {
  PerModality<bool> in;
  for (Modality m : kModalities) in[m] = !drop_modality[m];
  return in;
}

// ---------------------------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(learning_rate >= 0)) throw ConfigError("learning_rate must be non-negative");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  if (eval_every < 1) throw ConfigError("eval_every must be positive");
  if (iterative.period < 1) throw ConfigError("iterative.period must be >= 1");
  if (iterative.start_epoch < 0) throw ConfigError("iterative.start_epoch must be non-negative");
  if (iterative.confidence_rule != "stable-MNN")
    throw ConfigError("unknown iterative.confidence_rule '" + iterative.confidence_rule + "'");
  if (max_attributes < 0 || max_relations < 0) throw ConfigError("vocabulary caps must be >= 0");
  if (!(hybrid_beta >= 0)) throw ConfigError("hybrid_beta must be non-negative");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0))
    throw ConfigError("invalid adam settings");
  ib.validate();
  model.validate();
  ibmea::validate(ms);
  bool any = false;
  for (Modality m : kModalities) any = any || !ablation.drop_modality[m];
  if (!any) throw ConfigError("every modality is dropped");
}

json to_json(const TrainConfig& c) {
  json beta;
  for (Modality m : kModalities) beta[std::string(short_name(m))] = c.ib.beta[m];
  const auto& d = c.model;
  return json{
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"learning_rate", c.learning_rate},
      {"weight_decay", c.weight_decay},
      {"beta", beta},
      {"tau", c.ib.tau},
      {"iterative",
       {{"enabled", c.iterative.enabled},
        {"start_epoch", c.iterative.start_epoch},
        {"period", c.iterative.period},
        {"confidence_rule", c.iterative.confidence_rule}}},
      {"rng_seed", c.rng_seed},
      {"eval_every", c.eval_every},
      {"model",
       {{"d_g", d.d_g},
        {"gat_hidden", d.gat_hidden},
        {"gat_heads", d.gat_heads},
        {"graph_out", d.graph_out},
        {"modal_hidden", d.modal_hidden},
        {"modal_out", d.modal_out},
        {"fusion_dim", d.fusion_dim},
        {"sigma_floor", d.sigma_floor},
        {"leaky_slope", d.leaky_slope},
        {"sigma_bias_init", d.sigma_bias_init}}},
      {"max_attributes", c.max_attributes},
      {"max_relations", c.max_relations},
      {"ms",
       {{"alpha_pos", c.ms.alpha_pos},
        {"beta_neg", c.ms.beta_neg},
        {"lambda_margin", c.ms.lambda_margin},
        {"epsilon_mine", c.ms.epsilon_mine}}},
      {"use_discriminator", c.use_discriminator},
      {"hybrid_beta", c.hybrid_beta},
      {"grad_clip", c.grad_clip},
      {"adam", {{"beta1", c.adam_beta1}, {"beta2", c.adam_beta2}, {"eps", c.adam_eps}}},
      {"stochastic", c.stochastic},
      {"ablation", c.ablation.name},
      {"candidates", to_string(c.candidates)},
  };
}

namespace {

/// Reads the keys of one JSON object, rejecting unknown ones and, when `complete`, missing ones.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where("") + " must be a JSON object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + where(key) + "' has the wrong type");
    }
  }

  const json* object(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void require(std::initializer_list<const char*> keys) const {
    std::vector<std::string> missing;
    for (const char* k : keys)
      if (!j_.contains(k)) missing.push_back(where(k));
    if (!missing.empty()) {
      std::string msg = "missing required config key";
      msg += missing.size() > 1 ? "s: " : ": ";
      for (std::size_t i = 0; i < missing.size(); ++i) msg += (i ? ", " : "") + missing[i];
      throw ConfigError(msg);
    }
  }

  void finish() const {
    std::vector<std::string> unknown;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) unknown.push_back(where(it.key()));
    if (!unknown.empty()) {
      std::string msg = "unknown config key";
      msg += unknown.size() > 1 ? "s: " : ": ";
      for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", " : "") + unknown[i];
      throw ConfigError(msg);
    }
  }

  std::string where(const std::string& key) const {
    if (path_.empty()) return key.empty() ? "config" : key;
    return key.empty() ? path_ : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

TrainConfig config_from_json(const json& j, const TrainConfig& base, bool require_core) {
  TrainConfig c = base;
  ObjectReader r(j, "");
  if (require_core)
    r.require({"epochs", "batch_size", "learning_rate", "weight_decay", "beta", "tau", "iterative",
               "rng_seed", "eval_every"});
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  r.get("weight_decay", c.weight_decay);
  r.get("tau", c.ib.tau);
  r.get("rng_seed", c.rng_seed);
  r.get("eval_every", c.eval_every);
  r.get("max_attributes", c.max_attributes);
  r.get("max_relations", c.max_relations);
  r.get("use_discriminator", c.use_discriminator);
  r.get("hybrid_beta", c.hybrid_beta);
  r.get("grad_clip", c.grad_clip);
  r.get("stochastic", c.stochastic);

  if (const json* b = r.object("beta")) {
    ObjectReader br(*b, "beta");
    br.require({"g", "v", "a", "r"});
    for (Modality m : kModalities) br.get(std::string(short_name(m)), c.ib.beta[m]);
    br.finish();
  }
  if (const json* it = r.object("iterative")) {
    ObjectReader ir(*it, "iterative");
    ir.require({"enabled", "start_epoch", "period", "confidence_rule"});
    ir.get("enabled", c.iterative.enabled);
    ir.get("start_epoch", c.iterative.start_epoch);
    ir.get("period", c.iterative.period);
    ir.get("confidence_rule", c.iterative.confidence_rule);
    ir.finish();
  }
  if (const json* m = r.object("model")) {
    ObjectReader mr(*m, "model");
    auto& d = c.model;
    mr.get("d_g", d.d_g);
    mr.get("gat_hidden", d.gat_hidden);
    mr.get("gat_heads", d.gat_heads);
    mr.get("graph_out", d.graph_out);
    mr.get("modal_hidden", d.modal_hidden);
    mr.get("modal_out", d.modal_out);
    mr.get("fusion_dim", d.fusion_dim);
    mr.get("sigma_floor", d.sigma_floor);
    mr.get("leaky_slope", d.leaky_slope);
    mr.get("sigma_bias_init", d.sigma_bias_init);
    mr.finish();
  }
  if (const json* m = r.object("ms")) {
    ObjectReader mr(*m, "ms");
    mr.require({"alpha_pos", "beta_neg", "lambda_margin", "epsilon_mine"});
    mr.get("alpha_pos", c.ms.alpha_pos);
    mr.get("beta_neg", c.ms.beta_neg);
    mr.get("lambda_margin", c.ms.lambda_margin);
    mr.get("epsilon_mine", c.ms.epsilon_mine);
    mr.finish();
  }
  if (const json* a = r.object("adam")) {
    ObjectReader ar(*a, "adam");
    ar.get("beta1", c.adam_beta1);
    ar.get("beta2", c.adam_beta2);
    ar.get("eps", c.adam_eps);
    ar.finish();
  }
  std::string ablation = c.ablation.name, candidates = to_string(c.candidates);
  r.get("ablation", ablation);
  r.get("candidates", candidates);
  r.finish();
  c.ablation = AblationFlags::parse(ablation);
  c.candidates = parse_candidate_set(candidates);
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path, const TrainConfig& base,
                        bool require_core) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j, base, require_core);
}

// ---------------------------------------------------------------------------------------------
// Parameters and features

std::string param_group(const std::string& name) {
  if (name.rfind("x_g.", 0) == 0) return "node_features";
  if (name.rfind("fusion.", 0) == 0) return "fusion";
  if (name.rfind("hybrid.", 0) == 0) return "hybrid";
  for (const char* g : {"gat_mu", "gat_sigma", "visual", "attribute", "relation"})
    if (name.rfind(std::string("enc.") + g + ".", 0) == 0) return g;
  throw std::invalid_argument("unknown parameter " + name);
}

InputDims TaskFeatures::input_dims() const {
  return {static_cast<int>(kg1.x_v.cols()), static_cast<int>(kg1.x_a.cols()),
          static_cast<int>(kg1.x_r.cols())};
}

TaskFeatures prepare_features(const AlignmentTask& task, const TrainConfig& cfg) {
  TaskFeatures f;
  const MMKG* kgs[] = {&task.kg1, &task.kg2};
  f.vocab = build_vocab(kgs, cfg.max_attributes, cfg.max_relations);
  f.kg1 = build_raw_features(task.kg1, cfg.model.d_g, substream_seed(cfg.rng_seed, "kg1"), f.vocab);
  f.kg2 = build_raw_features(task.kg2, cfg.model.d_g, substream_seed(cfg.rng_seed, "kg2"), f.vocab);
  if (f.kg1.x_v.cols() != f.kg2.x_v.cols())
    throw ValidationError("image feature widths differ between the two graphs");
  return f;
}

ModelParams init_model_params(const InputDims& in, const TrainConfig& cfg, Rng& rng) {
  const auto& d = cfg.model;
  ModelParams p;
  p.encoder = init_encoder_params(d, in, rng);
  PerModality<int> widths{{d.graph_out, d.modal_out, d.modal_out, d.modal_out}};
  p.fusion = init_fusion_params(widths, d.fusion_dim, rng);
  const double limit = std::sqrt(3.0 / d.fusion_dim);
  std::uniform_real_distribution<double> u(-limit, limit);
  p.hybrid.weight.resize(d.fusion_dim, d.fusion_dim);
  for (Index k = 0; k < p.hybrid.weight.size(); ++k) p.hybrid.weight.data()[k] = u(rng);
  p.hybrid.bias = Matrix::Constant(1, d.fusion_dim, d.sigma_bias_init);
  return p;
}

namespace {

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z;
  shape_like(z, p);
  visit_model_params([](const std::string&, const Matrix& a, Matrix& b) { b = Matrix::Zero(a.rows(), a.cols()); },
                     p, z);
  return z;
}

}  // namespace

TrainState init_state(const TaskFeatures& f, const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.input_dims = f.input_dims();
  Rng rng = make_rng(cfg.rng_seed, "init");
  s.params = init_model_params(s.input_dims, cfg, rng);
  s.params.node_features1 = f.kg1.x_g;
  s.params.node_features2 = f.kg2.x_g;
  s.adam_m = zeros_like(s.params);
  s.adam_v = zeros_like(s.params);
  s.sampling_rng = make_rng(cfg.rng_seed, "sampling");
  s.batch_rng = make_rng(cfg.rng_seed, "negatives");
  return s;
}

ModelParamsT<Var> bind(Tape& tape, const ModelParams& params) {
  ModelParamsT<Var> vars;
  shape_like(vars, params);
  visit_model_params([&](const std::string&, const Matrix& m, Var& v) { v = tape.variable(m); }, params,
                     vars);
  return vars;
}

// ---------------------------------------------------------------------------------------------
// Objective

json LossBreakdown::to_json() const {
  json j;
  for (Modality m : kModalities) {
    const std::string s(short_name(m));
    j["kl1_" + s] = kl1[m];
    j["kl2_" + s] = kl2[m];
    j["align_" + s] = alignment[m];
    j["modal_" + s] = modal[m];
  }
  j["hybrid_kl"] = hybrid_kl;
  j["specific"] = specific;
  j["multi_similarity"] = multi_similarity;
  j["discriminator"] = discriminator;
  j["hybrid"] = hybrid;
  j["total"] = total;
  j["ms_skipped_anchors"] = ms_skipped_anchors;
  return j;
}

bool LossBreakdown::finite() const {
  bool ok = std::isfinite(hybrid_kl) && std::isfinite(specific) && std::isfinite(multi_similarity) &&
            std::isfinite(discriminator) && std::isfinite(hybrid) && std::isfinite(total);
  for (Modality m : kModalities)
    ok = ok && std::isfinite(kl1[m]) && std::isfinite(kl2[m]) && std::isfinite(alignment[m]) &&
         std::isfinite(modal[m]);
  return ok;
}

NoiseDraw draw_noise(const TaskFeatures& f, const TrainConfig& cfg, std::size_t batch_size, Rng& rng) {
  NoiseDraw d;
  const auto in = cfg.ablation.included();
  for (Modality m : kModalities) {
    if (!in[m]) continue;
    const Index w = m == Modality::Graph ? cfg.model.graph_out : cfg.model.modal_out;
    d.eps1[m] = randn<double>(f.kg1.x_g.rows(), w, rng);
    d.eps2[m] = randn<double>(f.kg2.x_g.rows(), w, rng);
  }
  if (cfg.ablation.hybrid_ib) {
    const auto b = static_cast<Index>(batch_size);
    d.hybrid1 = randn<double>(b, cfg.model.fusion_dim, rng);
    d.hybrid2 = randn<double>(b, cfg.model.fusion_dim, rng);
  }
  return d;
}

namespace {

const Matrix& modal_input(const RawModalFeatures& f, Modality m) {
  switch (m) {
    case Modality::Visual: return f.x_v;
    case Modality::Attribute: return f.x_a;
    default: return f.x_r;
  }
}

}  // namespace

Objective record_objective(Tape& tape, const ModelParamsT<Var>& params, const TaskFeatures& f,
                           const BatchPairs& batch, const NoiseDraw* noise, const TrainConfig& cfg) {
  batch.validate();
  const auto included = cfg.ablation.included();
  const bool sample = cfg.stochastic && noise != nullptr;

  PerModality<ModalPair> modal;
  PerModality<Var> z1, z2;
  for (Modality m : kModalities) {
    if (!included[m]) continue;
    ModalPair& p = modal[m];
    if (m == Modality::Graph) {
      p.post1 = encode_graph(f.kg1.adjacency, params.node_features1, params.encoder, cfg.model);
      p.post2 = encode_graph(f.kg2.adjacency, params.node_features2, params.encoder, cfg.model);
    } else {
      p.post1 = encode_modality(tape.constant(modal_input(f.kg1, m)), m, params.encoder, cfg.model);
      p.post2 = encode_modality(tape.constant(modal_input(f.kg2, m)), m, params.encoder, cfg.model);
    }
    p.z1 = sample ? reparameterize(p.post1, noise->eps1[m]) : p.post1.mu;
    p.z2 = sample ? reparameterize(p.post2, noise->eps2[m]) : p.post2.mu;
    z1[m] = p.z1;
    z2[m] = p.z2;
  }

  IBWeights w = cfg.ib;
  for (Modality m : kModalities)
    if (cfg.ablation.disable_ib[m] || cfg.ablation.hybrid_ib) w.beta[m] = 0.0;
  const SpecificLoss spec = total_specific_loss(modal, batch, w, included);

  Objective out;
  LossBreakdown& t = out.terms;
  for (Modality m : kModalities) {
    if (!included[m]) continue;
    const ModalLoss& l = spec.per_modality[m];
    t.kl1[m] = l.kl1.scalar();
    t.kl2[m] = l.kl2.scalar();
    t.alignment[m] = l.alignment.scalar();
    t.modal[m] = l.total.scalar();
  }
  out.specific = spec.total;

  // Fusion over the batch rows; the batch then indexes itself.
  const auto i1 = batch.first();
  const auto i2 = batch.second();
  PerModality<Var> b1, b2;
  for (Modality m : kModalities) {
    if (!included[m]) continue;
    b1[m] = ad::gather_rows(z1[m], i1);
    b2[m] = ad::gather_rows(z2[m], i2);
  }
  Var h1 = fuse(b1, params.fusion, included).z_o;
  Var h2 = fuse(b2, params.fusion, included).z_o;

  if (cfg.ablation.hybrid_ib) {
    auto head = [&](const Var& h) {
      return ad::softplus(ad::add_row(ad::matmul(h, params.hybrid.weight), params.hybrid.bias),
                          cfg.model.sigma_floor);
    };
    const Var s1 = head(h1), s2 = head(h2);
    const Var kl = ad::kl_standard_normal(h1, s1) + ad::kl_standard_normal(h2, s2);
    t.hybrid_kl = cfg.hybrid_beta * kl.scalar();
    out.specific = out.specific + ad::scale(kl, cfg.hybrid_beta);
    if (sample) {
      h1 = h1 + ad::cwise_mul(s1, tape.constant(noise->hybrid1));
      h2 = h2 + ad::cwise_mul(s2, tape.constant(noise->hybrid2));
    }
  }

  BatchPairs local;
  for (std::size_t k = 0; k < batch.positives.size(); ++k)
    local.positives.emplace_back(static_cast<int>(k), static_cast<int>(k));
  ad::MultiSimilarityStats stats;
  out.hybrid = hybrid_contrastive_loss(h1, h2, local, cfg.ms, &stats);
  t.multi_similarity = out.hybrid.scalar();
  t.ms_skipped_anchors = static_cast<int>(stats.skipped);
  if (cfg.use_discriminator) {
    const Var d = discriminator_loss(h1, h2, local);
    t.discriminator = d.scalar();
    out.hybrid = out.hybrid + d;
  }
  out.total = out.specific + out.hybrid;
  t.specific = out.specific.scalar();
  t.hybrid = out.hybrid.scalar();
  t.total = out.total.scalar();
  return out;
}

std::pair<ModelParams, LossBreakdown> objective_gradient(const ModelParams& params,
                                                         const TaskFeatures& f,
                                                         const BatchPairs& batch,
                                                         const NoiseDraw* noise,
                                                         const TrainConfig& cfg) {
  Tape tape;
  const auto vars = bind(tape, params);
  const Objective obj = record_objective(tape, vars, f, batch, noise, cfg);
  if (!obj.terms.finite()) throw NonFiniteLoss("non-finite loss", obj.terms);
  tape.backward(obj.total);
  ModelParams grads;
  shape_like(grads, params);
  visit_model_params([](const std::string&, const Var& v, Matrix& g) { g = v.grad(); }, vars, grads);
  return {std::move(grads), obj.terms};
}

LossBreakdown evaluate_objective(const ModelParams& params, const TaskFeatures& f,
                                 const BatchPairs& batch, const NoiseDraw* noise,
                                 const TrainConfig& cfg) {
  Tape tape(false);
  return record_objective(tape, bind(tape, params), f, batch, noise, cfg).terms;
}

LossBreakdown train_step(TrainState& state, const TaskFeatures& f, const BatchPairs& batch,
                         const TrainConfig& cfg) {
  NoiseDraw noise;
  if (cfg.stochastic) noise = draw_noise(f, cfg, batch.positives.size(), state.sampling_rng);
  auto [grads, terms] = objective_gradient(state.params, f, batch, cfg.stochastic ? &noise : nullptr, cfg);

  double sq = 0.0;
  visit_model_params([&](const std::string&, const Matrix& g) { sq += g.squaredNorm(); }, grads);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NonFiniteLoss("non-finite gradient", terms);
  const double clip = cfg.grad_clip > 0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;

  ++state.adam_step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.adam_step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.adam_step));
  const double lr = cfg.learning_rate;
  visit_model_params(
      [&](const std::string&, Matrix& p, Matrix& m, Matrix& v, Matrix& g) {
        if (clip != 1.0) g *= clip;
        p *= 1.0 - lr * cfg.weight_decay;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
        p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.adam_eps);
      },
      state.params, state.adam_m, state.adam_v, grads);
  return terms;
}

std::vector<BatchPairs> make_batches(TrainState& state, const AlignmentTask& task,
                                     const TrainConfig& cfg) {
  std::vector<EntityPair> pairs = task.train_pairs;
  for (const auto& p : state.pseudo_pairs) pairs.emplace_back(p.e1, p.e2);
  std::shuffle(pairs.begin(), pairs.end(), state.batch_rng);
  std::vector<BatchPairs> out;
  for (std::size_t lo = 0; lo < pairs.size(); lo += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t hi = std::min(pairs.size(), lo + static_cast<std::size_t>(cfg.batch_size));
    out.push_back(BatchPairs{{pairs.begin() + static_cast<std::ptrdiff_t>(lo),
                              pairs.begin() + static_cast<std::ptrdiff_t>(hi)}});
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Embeddings, expansion, evaluation

EvalEmbeddings compute_embeddings(const ModelParams& params, const TaskFeatures& f,
                                  const TrainConfig& cfg) {
  const auto included = cfg.ablation.included();
  EvalEmbeddings e;
  ModalEmbeddingSet z1, z2;
  for (Modality m : kModalities) {
    if (!included[m]) continue;
    if (m == Modality::Graph) {
      e.post1[m] = encode_graph(f.kg1.adjacency, params.node_features1, params.encoder, cfg.model);
      e.post2[m] = encode_graph(f.kg2.adjacency, params.node_features2, params.encoder, cfg.model);
    } else {
      e.post1[m] = encode_modality(modal_input(f.kg1, m), m, params.encoder, cfg.model);
      e.post2[m] = encode_modality(modal_input(f.kg2, m), m, params.encoder, cfg.model);
    }
    z1.z[m] = e.post1[m].mu;
    z2.z[m] = e.post2[m].mu;
  }
  e.h1 = fuse(z1, params.fusion, included);
  e.h2 = fuse(z2, params.fusion, included);
  return e;
}

std::vector<PseudoPair> mutual_nearest(const Matrix& z1, const Matrix& z2, std::span<const int> rows1,
                                       std::span<const int> rows2) {
  if (rows1.empty() || rows2.empty()) return {};
  auto gather = [](const Matrix& z, std::span<const int> rows) {
    Matrix out(static_cast<Index>(rows.size()), z.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const double n = z.row(rows[k]).norm();
      out.row(static_cast<Index>(k)) = n > 0 ? Matrix(z.row(rows[k]) / n) : Matrix::Zero(1, z.cols());
    }
    return out;
  };
  const Matrix sim = gather(z1, rows1) * gather(z2, rows2).transpose();
  // Rows are visited in ascending id order, so the first maximum wins ties.
  std::vector<Index> best1(rows1.size()), best2(rows2.size());
  for (Index i = 0; i < sim.rows(); ++i) sim.row(i).maxCoeff(&best1[i]);
  for (Index j = 0; j < sim.cols(); ++j) sim.col(j).maxCoeff(&best2[j]);
  std::vector<PseudoPair> out;
  for (Index i = 0; i < sim.rows(); ++i) {
    const Index j = best1[i];
    if (best2[j] == i) out.push_back({rows1[i], rows2[j], sim(i, j)});
  }
  return out;
}

void iterative_expand(TrainState& state, const AlignmentTask& task, const TaskFeatures& f,
                      const TrainConfig& cfg) {
  if (!cfg.iterative.enabled) return;
  std::vector<char> aligned1(task.kg1.num_entities, 0), aligned2(task.kg2.num_entities, 0);
  for (auto [a, b] : task.train_pairs) aligned1[a] = aligned2[b] = 1;
  std::vector<int> rows1, rows2;
  for (int e = 0; e < task.kg1.num_entities; ++e)
    if (!aligned1[e]) rows1.push_back(e);
  for (int e = 0; e < task.kg2.num_entities; ++e)
    if (!aligned2[e]) rows2.push_back(e);

  const EvalEmbeddings emb = compute_embeddings(state.params, f, cfg);
  const auto current = mutual_nearest(emb.h1.z_o, emb.h2.z_o, rows1, rows2);
  const std::set<EntityPair> previous(state.previous_mnn.begin(), state.previous_mnn.end());

  state.pseudo_pairs.clear();
  state.previous_mnn.clear();
  for (const auto& p : current) {
    if (previous.count({p.e1, p.e2})) state.pseudo_pairs.push_back(p);
    state.previous_mnn.emplace_back(p.e1, p.e2);
  }
}

json EvalRecord::to_json() const {
  json j = ibmea::to_json(test);
  j["epoch"] = epoch;
  j["train"] = ibmea::to_json(train);
  j["loss_terms"] = loss.to_json();
  j["pseudo_pairs"] = pseudo_pairs;
  return j;
}

EvalRecord evaluate_state(const TrainState& state, const AlignmentTask& task, const TaskFeatures& f,
                          const TrainConfig& cfg, Direction direction) {
  const EvalEmbeddings emb = compute_embeddings(state.params, f, cfg);
  EvalRecord r;
  r.epoch = state.epoch;
  r.pseudo_pairs = state.pseudo_pairs.size();
  auto tag = [&](MetricsReport m) {
    m.seed_ratio = task.seed_ratio;
    m.variant = cfg.ablation.name;
    m.rng_seed = cfg.rng_seed;
    return m;
  };
  if (task.test_pairs.empty()) {
    r.test.empty = true;
  } else {
    r.test = compute_metrics(rank_alignments(emb.h1.z_o, emb.h2.z_o, task.test_pairs, cfg.candidates),
                             direction);
  }
  r.test = tag(r.test);
  if (!task.train_pairs.empty())
    r.train = compute_metrics(
        rank_alignments(emb.h1.z_o, emb.h2.z_o, task.train_pairs, CandidateSet::TestSide), direction);
  else
    r.train.empty = true;
  r.train = tag(r.train);
  return r;
}

RunResult run_training(const AlignmentTask& task, const TrainConfig& cfg, RunOptions opts) {
  return run_training(task, prepare_features(task, cfg), cfg, std::move(opts));
}

RunResult run_training(const AlignmentTask& task, const TaskFeatures& f, const TrainConfig& cfg,
                       RunOptions opts) {
  cfg.validate();
  task.validate();
  RunResult out;
  const bool resumed = opts.resume.has_value();
  out.state = resumed ? std::move(*opts.resume) : init_state(f, cfg);
  TrainState& s = out.state;
  double best = -1.0;
  LossBreakdown last;

  auto evaluate = [&] {
    EvalRecord r = evaluate_state(s, task, f, cfg);
    r.loss = last;
    if (opts.on_eval) opts.on_eval(r);
    if (!r.test.empty && r.test.h1 > best) {
      best = r.test.h1;
      if (opts.on_best) opts.on_best(s, r);
    }
    out.history.push_back(std::move(r));
  };

  if (!resumed) evaluate();
  while (s.epoch < cfg.epochs) {
    if (opts.stop_after_epoch >= 0 && s.epoch >= opts.stop_after_epoch) break;
    for (const BatchPairs& b : make_batches(s, task, cfg)) {
      try {
        last = train_step(s, f, b, cfg);
      } catch (const NonFiniteLoss&) {
        // parameters are only touched after the finiteness checks
        if (opts.on_abort) opts.on_abort(s);
        throw;
      }
      if (opts.on_step) opts.on_step(s.epoch + 1, last);
    }
    ++s.epoch;
    const auto& it = cfg.iterative;
    if (it.enabled && s.epoch >= it.start_epoch && (s.epoch - it.start_epoch) % it.period == 0)
      iterative_expand(s, task, f, cfg);
    if (s.epoch % cfg.eval_every == 0 || s.epoch == cfg.epochs) evaluate();
  }
  return out;
}

}  // namespace ibmea
