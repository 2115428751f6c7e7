#include "ibmea/fusion.hpp"

#include <cmath>
#include <random>

namespace ibmea {

FusionParams init_fusion_params(const PerModality<int>& modal_dims, int fusion_dim, Rng& rng) {
  auto glorot = [&](Index rows, Index cols) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-limit, limit);
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i) m(i, j) = u(rng);
    return m;
  };
  FusionParams p;
  p.query = glorot(fusion_dim, 1);
  for (Modality m : kModalities) {
    p.proj_weight[m] = glorot(modal_dims[m], fusion_dim);
    p.proj_bias[m] = Matrix::Zero(1, fusion_dim);
  }
  return p;
}

FusionParamsT<Var> bind(Tape& tape, const FusionParams& params) {
  FusionParamsT<Var> vars;
  visit_fusion_params([&](const std::string&, const Matrix& m, Var& v) { v = tape.variable(m); }, "fusion",
               params, vars);
  return vars;
}

HybridVars fuse(const PerModality<Var>& z, const FusionParamsT<Var>& params,
                const PerModality<bool>& included) {
  std::vector<Var> projected, scores;
  for (Modality m : kModalities) {
    if (!included[m]) continue;
    if (!z[m].valid()) throw ConfigError(std::string("missing modality ") + std::string(long_name(m)));
    if (z[m].cols() != params.proj_weight[m].rows())
      throw ConfigError(std::string("fusion width mismatch for ") + std::string(long_name(m)));
    const Var p = ad::add_row(ad::matmul(z[m], params.proj_weight[m]), params.proj_bias[m]);
    projected.push_back(p);
    scores.push_back(ad::matmul(ad::tanh(p), params.query));
  }
  if (projected.empty()) throw ConfigError("fusion needs at least one modality");
  const Var alpha = ad::row_softmax(ad::hconcat<double>(scores));
  Var z_o = ad::scale_rows(projected[0], ad::column(alpha, 0));
  for (std::size_t k = 1; k < projected.size(); ++k)
    z_o = z_o + ad::scale_rows(projected[k], ad::column(alpha, static_cast<Index>(k)));
  return {z_o, alpha};
}

HybridEmbedding fuse(const ModalEmbeddingSet& z, const FusionParams& params,
                     const PerModality<bool>& included) {
  Tape tape(false);
  PerModality<Var> vars;
  for (Modality m : kModalities)
    if (included[m]) vars[m] = tape.constant(z.z[m]);
  const auto h = fuse(vars, bind(tape, params), included);
  HybridEmbedding out;
  out.z_o = h.z_o.value();
  out.attention = Matrix::Zero(out.z_o.rows(), kNumModalities);
  Index k = 0;
  for (Modality m : kModalities)
    if (included[m]) out.attention.col(index_of(m)) = h.attention.value().col(k++);
  return out;
}

double discriminate(const Vector& z1, const Vector& z2) {
  return ad::detail::sigmoid(z1.dot(z2));
}

void validate(const MSLossConfig& cfg) {
  if (!(cfg.alpha_pos > 0) || !(cfg.beta_neg > 0) || !(cfg.epsilon_mine > 0))
    throw ConfigError("multi-similarity scales and mining margin must be positive");
  if (!(cfg.lambda_margin > 0 && cfg.lambda_margin < 1))
    throw ConfigError("multi-similarity lambda must lie in (0,1)");
}

Var hybrid_contrastive_loss(const Var& z_o1, const Var& z_o2, const BatchPairs& batch,
                            const MSLossConfig& cfg, ad::MultiSimilarityStats* stats) {
  batch.validate();
  validate(cfg);
  const auto i1 = batch.first();
  const auto i2 = batch.second();
  const Var sim = ad::matmul_nt(ad::row_normalize(ad::gather_rows(z_o1, i1)),
                                ad::row_normalize(ad::gather_rows(z_o2, i2)));
  return ad::scale(ad::multi_similarity_diag(sim, cfg, stats) +
                       ad::multi_similarity_diag(ad::transpose(sim), cfg, stats),
                   0.5);
}

double hybrid_contrastive_loss(const HybridEmbedding& h1, const HybridEmbedding& h2,
                               const BatchPairs& batch, const MSLossConfig& cfg,
                               ad::MultiSimilarityStats* stats) {
  Tape tape(false);
  return hybrid_contrastive_loss(tape.constant(h1.z_o), tape.constant(h2.z_o), batch, cfg, stats)
      .scalar();
}

Var discriminator_loss(const Var& z_o1, const Var& z_o2, const BatchPairs& batch) {
  batch.validate();
  const Var logits = ad::matmul_nt(ad::gather_rows(z_o1, batch.first()),
                                   ad::gather_rows(z_o2, batch.second()));
  return ad::scale(ad::discriminator_bce_diag(logits) +
                       ad::discriminator_bce_diag(ad::transpose(logits)),
                   0.5);
}

double discriminator_loss(const HybridEmbedding& h1, const HybridEmbedding& h2,
                          const BatchPairs& batch) {
  Tape tape(false);
  return discriminator_loss(tape.constant(h1.z_o), tape.constant(h2.z_o), batch).scalar();
}

}  // namespace ibmea
