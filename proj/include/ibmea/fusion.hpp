#pragma once

// Entity-level attention fusion of the modal embeddings and the modal-hybrid contrastive
// regularizer.

#include "ibmea/autodiff.hpp"
#include "ibmea/encoders.hpp"
#include "ibmea/ib_objectives.hpp"

namespace ibmea {

template <typename T>
struct FusionParamsT {
  T query;                      // d x 1
  PerModality<T> proj_weight;   // d_m x d (applied as z_m * W)
  PerModality<T> proj_bias;     // 1 x d
};

using FusionParams = FusionParamsT<Matrix>;

template <typename F, typename... P>
void visit_fusion_params(F&& f, const std::string& prefix, P&&... p) {
  f(prefix + ".query", p.query...);
  for (Modality m : kModalities) {
    const std::string name(short_name(m));
    f(prefix + ".proj_weight." + name, p.proj_weight[m]...);
    f(prefix + ".proj_bias." + name, p.proj_bias[m]...);
  }
}

/// `modal_dims[m]` is the width of z_m.
FusionParams init_fusion_params(const PerModality<int>& modal_dims, int fusion_dim, Rng& rng);
FusionParamsT<Var> bind(Tape& tape, const FusionParams& params);

struct HybridEmbedding {
  Matrix z_o;        // n x d
  Matrix attention;  // n x 4, zero columns for excluded modalities
};

struct HybridVars {
  Var z_o;
  Var attention;  // n x (number of included modalities)
};

/// s_m = q . tanh(z_m W_m + b_m), alpha = softmax over the included modalities,
/// z_o = sum_m alpha_m (z_m W_m + b_m).
HybridVars fuse(const PerModality<Var>& z, const FusionParamsT<Var>& params,
                const PerModality<bool>& included = {{true, true, true, true}});
HybridEmbedding fuse(const ModalEmbeddingSet& z, const FusionParams& params,
                     const PerModality<bool>& included = {{true, true, true, true}});

/// Sigmoid of the inner product.
double discriminate(const Vector& z1, const Vector& z2);

using MSLossConfig = ad::MultiSimilarityParams;
void validate(const MSLossConfig& cfg);

/// Multi-similarity loss over cosine similarities of the batch's hybrid embeddings, both
/// directions averaged. Returns the batch mean.
Var hybrid_contrastive_loss(const Var& z_o1, const Var& z_o2, const BatchPairs& batch,
                            const MSLossConfig& cfg, ad::MultiSimilarityStats* stats = nullptr);
double hybrid_contrastive_loss(const HybridEmbedding& h1, const HybridEmbedding& h2,
                               const BatchPairs& batch, const MSLossConfig& cfg,
                               ad::MultiSimilarityStats* stats = nullptr);

/// Discriminator bound: -(sum_pos log D + mean-weighted sum_neg log(1 - D)) per anchor, both
/// directions averaged, D = sigmoid(z1 . z2).
Var discriminator_loss(const Var& z_o1, const Var& z_o2, const BatchPairs& batch);
double discriminator_loss(const HybridEmbedding& h1, const HybridEmbedding& h2,
                          const BatchPairs& batch);

}  // namespace ibmea
