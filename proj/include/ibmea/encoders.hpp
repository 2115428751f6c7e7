#pragma once

// Variational encoders: a two-layer multi-head graph attention network per Gaussian
// parameter for the graph modality, and FC + MLP heads for images, attributes and relations.

#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "ibmea/autodiff.hpp"
#include "ibmea/graph.hpp"
#include "ibmea/rng.hpp"
#include "ibmea/types.hpp"

namespace ibmea {

using Var = ad::Var<double>;
using Tape = ad::Tape<double>;

struct ModelDims {
  int d_g = 300;          // node feature width
  int gat_hidden = 300;   // width of the concatenated first-layer heads
  int gat_heads = 2;
  int graph_out = 300;
  int modal_hidden = 100;  // interim width after the per-modality FC layer
  int modal_out = 100;
  int fusion_dim = 100;
  double sigma_floor = 1e-6;
  double leaky_slope = 0.2;
  double sigma_bias_init = 0.0;  // initial pre-softplus bias of every sigma head

  void validate() const;
};

/// Input widths observed on the feature matrices.
struct InputDims {
  int d_v = 0;
  int d_a = 0;
  int d_r = 0;
};

// Parameter sets are templated on the element type: Matrix for stored state, Var while a
// forward pass is being recorded.

template <typename T>
struct GatHeadT {
  T weight, attn_src, attn_dst;
};
template <typename T>
struct GatLayerT {
  std::vector<GatHeadT<T>> heads;
  T bias;
};
template <typename T>
struct GatT {
  GatLayerT<T> layer1, layer2;
};
template <typename T>
struct MlpT {
  T w1, b1, w2, b2;
};
template <typename T>
struct ModalEncoderT {
  T fc_weight, fc_bias;
  MlpT<T> mu, sigma;
};
template <typename T>
struct EncoderParamsT {
  GatT<T> gat_mu, gat_sigma;
  ModalEncoderT<T> visual, attribute, relation;

  ModalEncoderT<T>& modal(Modality m) {
    return m == Modality::Visual ? visual : m == Modality::Attribute ? attribute : relation;
  }
  const ModalEncoderT<T>& modal(Modality m) const {
    return m == Modality::Visual ? visual : m == Modality::Attribute ? attribute : relation;
  }
};

using EncoderParams = EncoderParamsT<Matrix>;

namespace detail {

template <typename... P>
decltype(auto) first_of(P&&... p) {
  return std::get<0>(std::forward_as_tuple(p...));
}

template <typename F, typename... L>
void visit_gat_layer(F& f, const std::string& prefix, L&&... l) {
  const auto& l0 = first_of(l...);
  for (std::size_t h = 0; h < l0.heads.size(); ++h) {
    const std::string p = prefix + ".h" + std::to_string(h);
    f(p + ".weight", l.heads[h].weight...);
    f(p + ".attn_src", l.heads[h].attn_src...);
    f(p + ".attn_dst", l.heads[h].attn_dst...);
  }
  f(prefix + ".bias", l.bias...);
}

template <typename F, typename... G>
void visit_gat(F& f, const std::string& prefix, G&&... g) {
  visit_gat_layer(f, prefix + ".layer1", g.layer1...);
  visit_gat_layer(f, prefix + ".layer2", g.layer2...);
}

template <typename F, typename... M>
void visit_mlp(F& f, const std::string& prefix, M&&... m) {
  f(prefix + ".w1", m.w1...);
  f(prefix + ".b1", m.b1...);
  f(prefix + ".w2", m.w2...);
  f(prefix + ".b2", m.b2...);
}

template <typename F, typename... E>
void visit_modal(F& f, const std::string& prefix, E&&... e) {
  f(prefix + ".fc.weight", e.fc_weight...);
  f(prefix + ".fc.bias", e.fc_bias...);
  visit_mlp(f, prefix + ".mu", e.mu...);
  visit_mlp(f, prefix + ".sigma", e.sigma...);
}

}  // namespace detail

/// Calls f(name, member...) for every parameter tensor, walking several parameter sets of the
/// same layout in lockstep.
template <typename F, typename... E>
void visit_encoder_params(F&& f, const std::string& prefix, E&&... e) {
  detail::visit_gat(f, prefix + ".gat_mu", e.gat_mu...);
  detail::visit_gat(f, prefix + ".gat_sigma", e.gat_sigma...);
  detail::visit_modal(f, prefix + ".visual", e.visual...);
  detail::visit_modal(f, prefix + ".attribute", e.attribute...);
  detail::visit_modal(f, prefix + ".relation", e.relation...);
}

/// Glorot-uniform weights, zero biases, sigma-head output biases at dims.sigma_bias_init.
EncoderParams init_encoder_params(const ModelDims& dims, const InputDims& in, Rng& rng);

/// Makes `dst` structurally match `src` (GAT head counts).
template <typename T, typename U>
void shape_like(EncoderParamsT<T>& dst, const EncoderParamsT<U>& src) {
  for (auto [d, s] : {std::pair{&dst.gat_mu, &src.gat_mu}, std::pair{&dst.gat_sigma, &src.gat_sigma}}) {
    d->layer1.heads.resize(s->layer1.heads.size());
    d->layer2.heads.resize(s->layer2.heads.size());
  }
}

// ---------------------------------------------------------------------------------------------

/// Posterior N(mu, diag(sigma^2)) for every entity of one modality.
struct GaussianEmbedding {
  Matrix mu;
  Matrix sigma;

  void validate() const;
};

struct GaussianVars {
  Var mu;
  Var sigma;
};

/// Sampled (or mean) embeddings z_m per modality.
struct ModalEmbeddingSet {
  PerModality<Matrix> z;
};

/// One GAT stack: layer 1 concatenates head outputs and applies ELU, layer 2 averages heads.
Var gat_forward(const Adjacency& adj, const Var& x, const GatT<Var>& gat, double slope);

GaussianVars encode_graph(const Adjacency& adj, const Var& x_g, const EncoderParamsT<Var>& params,
                          const ModelDims& dims);
GaussianVars encode_modality(const Var& x_m, Modality modality,
                             const EncoderParamsT<Var>& params, const ModelDims& dims);

/// Evaluation-only wrappers over a non-recording tape.
GaussianEmbedding encode_graph(const Adjacency& adj, const Matrix& x_g, const EncoderParams& params,
                               const ModelDims& dims);
GaussianEmbedding encode_modality(const Matrix& x_m, Modality modality,
                                  const EncoderParams& params, const ModelDims& dims);

/// z = mu + sigma * eps. `eps` has the shape of mu.
Var reparameterize(const GaussianVars& g, const Matrix& eps);

/// Returns mu exactly when deterministic, else mu + sigma * eps with eps ~ N(0, I) drawn from
/// the seeded stream.
Matrix reparameterize(const GaussianEmbedding& g, std::uint64_t rng_seed, bool deterministic);

/// Binds a stored parameter set onto a tape as differentiable leaves.
EncoderParamsT<Var> bind(Tape& tape, const EncoderParams& params);

}  // namespace ibmea
