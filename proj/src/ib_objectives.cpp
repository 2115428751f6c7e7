#include "ibmea/ib_objectives.hpp"

#include <algorithm>
#include <set>

namespace ibmea {

void IBWeights::validate() const {
  for (Modality m : kModalities)
    if (!(beta[m] >= 0.0)) throw ConfigError("beta must be non-negative");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
}

std::vector<int> BatchPairs::first() const {
  std::vector<int> out;
  for (auto [a, b] : positives) out.push_back(a);
  return out;
}

std::vector<int> BatchPairs::second() const {
  std::vector<int> out;
  for (auto [a, b] : positives) out.push_back(b);
  return out;
}

std::vector<int> BatchPairs::negatives(std::size_t k) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < positives.size(); ++i)
    if (i != k) out.push_back(positives[i].second);
  return out;
}

void BatchPairs::validate() const {
  if (positives.empty()) throw std::invalid_argument("empty batch");
  std::set<int> s1, s2;
  for (auto [a, b] : positives)
    if (!s1.insert(a).second || !s2.insert(b).second)
      throw ValidationError("batch repeats an entity");
}

Var kl_minimality(const GaussianVars& g, std::span<const int> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  return ad::kl_standard_normal(ad::gather_rows(g.mu, batch), ad::gather_rows(g.sigma, batch));
}

double kl_minimality(const GaussianEmbedding& g, std::span<const int> batch) {
  g.validate();
  Tape tape(false);
  return kl_minimality(GaussianVars{tape.constant(g.mu), tape.constant(g.sigma)}, batch).scalar();
}

Var infonce_alignment(const Var& z1, const Var& z2, const BatchPairs& batch, double tau) {
  batch.validate();
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  const auto i1 = batch.first();
  const auto i2 = batch.second();
  const Var n1 = ad::row_normalize(ad::gather_rows(z1, i1));
  const Var n2 = ad::row_normalize(ad::gather_rows(z2, i2));
  const Var logits = ad::scale(ad::matmul_nt(n1, n2), 1.0 / tau);
  return ad::scale(ad::softmax_xent_diag(logits) + ad::softmax_xent_diag(ad::transpose(logits)), 0.5);
}

double infonce_alignment(const Matrix& z1, const Matrix& z2, const BatchPairs& batch, double tau) {
  Tape tape(false);
  return infonce_alignment(tape.constant(z1), tape.constant(z2), batch, tau).scalar();
}

ModalLoss modal_specific_loss(const ModalPair& m, const BatchPairs& batch, double beta, double tau) {
  ModalLoss out;
  const auto i1 = batch.first();
  const auto i2 = batch.second();
  out.kl1 = kl_minimality(m.post1, i1);
  out.kl2 = kl_minimality(m.post2, i2);
  out.alignment = infonce_alignment(m.z1, m.z2, batch, tau);
  out.total = ad::scale(out.kl1 + out.kl2, beta) + out.alignment;
  return out;
}

SpecificLoss total_specific_loss(const PerModality<ModalPair>& modalities, const BatchPairs& batch,
                                 const IBWeights& w, const PerModality<bool>& included) {
  w.validate();
  SpecificLoss out;
  out.included = included;
  for (Modality m : kModalities) {
    if (!included[m]) continue;
    out.per_modality[m] = modal_specific_loss(modalities[m], batch, w.beta[m], w.tau);
    out.total = out.total.valid() ? out.total + out.per_modality[m].total : out.per_modality[m].total;
  }
  if (!out.total.valid()) throw ConfigError("no modality included in the specific loss");
  return out;
}

}  // namespace ibmea
