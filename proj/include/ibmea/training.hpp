#pragma once

// Joint optimization of L_specific + L_hybrid: configuration, state, the per-batch step,
// iterative pseudo-labelling and the full training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ibmea/encoders.hpp"
#include "ibmea/evaluation.hpp"
#include "ibmea/fusion.hpp"
#include "ibmea/ib_objectives.hpp"
#include "ibmea/mmkg.hpp"
#include "json.hpp"

namespace ibmea {

/// Which regularizers and modalities a run keeps.
struct AblationFlags {
  PerModality<bool> disable_ib{};     // "w/o G-IB" etc.: beta_m forced to 0
  PerModality<bool> drop_modality{};  // "w/o graph" etc.: modality removed from loss and fusion
  bool hybrid_ib = false;             // "Hybrid-IB": one KL on a Gaussian head over z_o
  std::string name = "full";

  /// Parses "full", "w/o G-IB", "w/o V-IB", "w/o A-IB", "w/o R-IB", "Hybrid-IB", "w/o graph",
  /// "w/o image", "w/o attribute", "w/o relation".
  static AblationFlags parse(std::string_view variant);
  static const std::vector<std::string>& variant_names();

  PerModality<bool> included() const;
  bool operator==(const AblationFlags&) const = default;
};

struct IterativeConfig {
  bool enabled = true;
  int start_epoch = 100;
  int period = 50;
  std::string confidence_rule = "stable-MNN";
  bool operator==(const IterativeConfig&) const = default;
};

struct TrainConfig {
  int epochs = 1000;
  int batch_size = 7500;
  double learning_rate = 6e-3;
  double weight_decay = 1e-2;
  IBWeights ib;
  IterativeConfig iterative;
  std::uint64_t rng_seed = 0;
  int eval_every = 50;

  ModelDims model;
  int max_attributes = 1000;  // bag-of-attribute vocabulary cap (d_a)
  int max_relations = 1000;   // bag-of-relation vocabulary cap (d_r)
  MSLossConfig ms;
  bool use_discriminator = false;  // add the sigmoid-discriminator bound to L_hybrid
  double hybrid_beta = 1e-2;       // KL weight of the Hybrid-IB variant
  double grad_clip = 1.0;          // global-norm clip; <= 0 disables
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool stochastic = true;  // sample z = mu + sigma * eps during training
  AblationFlags ablation;
  CandidateSet candidates = CandidateSet::TestSide;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Overlays `j` on `base`. Unknown keys and incomplete nested objects are ConfigErrors naming
/// the offending key.
/// With `require_core`, the core keys (epochs, batch_size, learning_rate, weight_decay, beta,
/// tau, iterative, rng_seed, eval_every) must all be present.
TrainConfig config_from_json(const nlohmann::json& j, const TrainConfig& base = {},
                             bool require_core = false);
TrainConfig load_config(const std::filesystem::path& path, const TrainConfig& base = {},
                        bool require_core = true);

// ---------------------------------------------------------------------------------------------

template <typename T>
struct HybridHeadT {
  T weight, bias;  // sigma head of the Hybrid-IB variant: softplus(z_o W + b)
};

template <typename T>
struct ModelParamsT {
  T node_features1, node_features2;  // learnable x_g of each graph
  EncoderParamsT<T> encoder;
  FusionParamsT<T> fusion;
  HybridHeadT<T> hybrid;
};

using ModelParams = ModelParamsT<Matrix>;

template <typename F, typename... P>
void visit_model_params(F&& f, P&&... p) {
  f(std::string("x_g.kg1"), p.node_features1...);
  f(std::string("x_g.kg2"), p.node_features2...);
  visit_encoder_params(f, "enc", p.encoder...);
  visit_fusion_params(f, "fusion", p.fusion...);
  f(std::string("hybrid.sigma.weight"), p.hybrid.weight...);
  f(std::string("hybrid.sigma.bias"), p.hybrid.bias...);
}

template <typename T, typename U>
void shape_like(ModelParamsT<T>& dst, const ModelParamsT<U>& src) {
  shape_like(dst.encoder, src.encoder);
}

/// Parameter group of a tensor name: node_features, gat_mu, gat_sigma, visual, attribute,
/// relation, fusion, hybrid.
std::string param_group(const std::string& name);

/// Features of both graphs of a task with a shared bag-of-X vocabulary.
struct TaskFeatures {
  RawModalFeatures kg1, kg2;
  FeatureVocab vocab;
  InputDims input_dims() const;
};

TaskFeatures prepare_features(const AlignmentTask& task, const TrainConfig& cfg);

struct PseudoPair {
  int e1 = 0;
  int e2 = 0;
  double confidence = 0.0;
  bool operator==(const PseudoPair&) const = default;
};

struct TrainState {
  ModelParams params;
  ModelParams adam_m, adam_v;
  long adam_step = 0;
  int epoch = 0;
  std::vector<PseudoPair> pseudo_pairs;
  std::vector<EntityPair> previous_mnn;  // mutual nearest neighbours of the last expansion round
  Rng sampling_rng;
  Rng batch_rng;
  InputDims input_dims;
};

ModelParams init_model_params(const InputDims& in, const TrainConfig& cfg, Rng& rng);
TrainState init_state(const TaskFeatures& features, const TrainConfig& cfg);

/// Per-term scalars of one objective evaluation.
struct LossBreakdown {
  PerModality<double> kl1{}, kl2{}, alignment{}, modal{};
  double hybrid_kl = 0.0;  // Hybrid-IB variant only
  double specific = 0.0;   // sum of modal losses (+ hybrid_kl)
  double multi_similarity = 0.0;
  double discriminator = 0.0;
  double hybrid = 0.0;  // multi_similarity (+ discriminator)
  double total = 0.0;
  int ms_skipped_anchors = 0;

  nlohmann::json to_json() const;
  bool finite() const;
};

struct NonFiniteLoss : NumericError {
  NonFiniteLoss(const std::string& what, LossBreakdown terms)
      : NumericError(what), terms(std::move(terms)) {}
  LossBreakdown terms;
};

/// Noise for one reparameterized forward pass.
struct NoiseDraw {
  PerModality<Matrix> eps1, eps2;  // n x d_m per graph
  Matrix hybrid1, hybrid2;          // batch x fusion_dim (Hybrid-IB variant)
};

NoiseDraw draw_noise(const TaskFeatures& f, const TrainConfig& cfg, std::size_t batch_size, Rng& rng);

/// The recorded objective of one batch.
struct Objective {
  Var total, specific, hybrid;
  LossBreakdown terms;
};

/// Records L_overall on `tape`. `noise` may be null when cfg.stochastic is false.
Objective record_objective(Tape& tape, const ModelParamsT<Var>& params, const TaskFeatures& f,
                           const BatchPairs& batch, const NoiseDraw* noise, const TrainConfig& cfg);

ModelParamsT<Var> bind(Tape& tape, const ModelParams& params);

/// Gradient of the objective w.r.t. every parameter tensor, plus the evaluated terms.
std::pair<ModelParams, LossBreakdown> objective_gradient(const ModelParams& params,
                                                         const TaskFeatures& f,
                                                         const BatchPairs& batch,
                                                         const NoiseDraw* noise,
                                                         const TrainConfig& cfg);
LossBreakdown evaluate_objective(const ModelParams& params, const TaskFeatures& f,
                                 const BatchPairs& batch, const NoiseDraw* noise,
                                 const TrainConfig& cfg);

/// One AdamW step (decoupled weight decay) on one batch, after global-norm clipping.
LossBreakdown train_step(TrainState& state, const TaskFeatures& f, const BatchPairs& batch,
                         const TrainConfig& cfg);

/// Seed and pseudo pairs, shuffled and cut into batches of cfg.batch_size.
std::vector<BatchPairs> make_batches(TrainState& state, const AlignmentTask& task,
                                     const TrainConfig& cfg);

/// Deterministic (posterior-mean) embeddings of both graphs.
struct EvalEmbeddings {
  PerModality<GaussianEmbedding> post1, post2;
  HybridEmbedding h1, h2;
};
EvalEmbeddings compute_embeddings(const ModelParams& params, const TaskFeatures& f,
                                  const TrainConfig& cfg);

/// Stable mutual-nearest-neighbour expansion over entities outside the seed pairs.
void iterative_expand(TrainState& state, const AlignmentTask& task, const TaskFeatures& f,
                      const TrainConfig& cfg);
/// Mutual nearest neighbours between the unaligned entities of both graphs.
std::vector<PseudoPair> mutual_nearest(const Matrix& z1, const Matrix& z2,
                                       std::span<const int> rows1, std::span<const int> rows2);

struct EvalRecord {
  int epoch = 0;
  MetricsReport test;
  MetricsReport train;
  LossBreakdown loss;  // last step of the epoch (zeros before training)
  std::size_t pseudo_pairs = 0;

  nlohmann::json to_json() const;
};

EvalRecord evaluate_state(const TrainState& state, const AlignmentTask& task, const TaskFeatures& f,
                          const TrainConfig& cfg, Direction direction = Direction::Both);

struct RunOptions {
  std::function<void(const EvalRecord&)> on_eval;
  std::function<void(int epoch, const LossBreakdown&)> on_step;
  /// Called whenever test H@1 improves on the best seen so far.
  std::function<void(const TrainState&, const EvalRecord&)> on_best;
  /// Called with the last good state before a NonFiniteLoss propagates.
  std::function<void(const TrainState&)> on_abort;
  std::optional<TrainState> resume;
  int stop_after_epoch = -1;  // simulate an interruption
};

struct RunResult {
  TrainState state;
  std::vector<EvalRecord> history;
};

RunResult run_training(const AlignmentTask& task, const TrainConfig& cfg, RunOptions opts = {});
RunResult run_training(const AlignmentTask& task, const TaskFeatures& f, const TrainConfig& cfg,
                       RunOptions opts = {});

// ---------------------------------------------------------------------------------------------
// Checkpoints: params.bin (named float64 tensors) + manifest.json

void save_checkpoint(const std::filesystem::path& dir, const TrainState& state,
                     const TrainConfig& cfg);
std::pair<TrainState, TrainConfig> load_checkpoint(const std::filesystem::path& dir);

}  // namespace ibmea
