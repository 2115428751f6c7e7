#pragma once

// Modal-specific information-bottleneck objective: a KL minimality term toward the standard
// normal prior and an InfoNCE alignment term over seed pairs.

#include <span>
#include <vector>

#include "ibmea/encoders.hpp"

namespace ibmea {

struct IBWeights {
  PerModality<double> beta{{1e-3, 1e-2, 1e-2, 1e-2}};
  double tau = 0.1;

  void validate() const;
};

/// Positive pairs of one batch. Negatives are in-batch: for positive (i, j) every other
/// second-side entity of the batch is a candidate replacement for j (and symmetrically).
struct BatchPairs {
  std::vector<EntityPair> positives;

  std::vector<int> first() const;
  std::vector<int> second() const;
  /// Candidate replacements for the counterpart of positive k.
  std::vector<int> negatives(std::size_t k) const;
  /// Throws when an entity repeats on either side (a repeat would turn a gold pair into a
  /// negative).
  void validate() const;
};

/// Mean over `batch` rows of 0.5 * sum_j (mu^2 + sigma^2 - log sigma^2 - 1).
Var kl_minimality(const GaussianVars& g, std::span<const int> batch);
double kl_minimality(const GaussianEmbedding& g, std::span<const int> batch);

/// Symmetric InfoNCE over cosine similarities: row i of the batch similarity matrix has its
/// gold column at i; averaged over both directions and the batch.
Var infonce_alignment(const Var& z1, const Var& z2, const BatchPairs& batch, double tau);
double infonce_alignment(const Matrix& z1, const Matrix& z2, const BatchPairs& batch, double tau);

struct ModalLoss {
  Var kl1, kl2;    // unweighted KL of each graph's batch rows
  Var alignment;
  Var total;       // beta * (kl1 + kl2) + alignment
};

/// Embeddings of one modality over both graphs: posteriors and the sampled z.
struct ModalPair {
  GaussianVars post1, post2;
  Var z1, z2;
};

ModalLoss modal_specific_loss(const ModalPair& m, const BatchPairs& batch, double beta, double tau);

struct SpecificLoss {
  PerModality<ModalLoss> per_modality;
  PerModality<bool> included{{true, true, true, true}};
  Var total;
};

/// Sum of the modal-specific losses of the included modalities.
SpecificLoss total_specific_loss(const PerModality<ModalPair>& modalities, const BatchPairs& batch,
                                 const IBWeights& w,
                                 const PerModality<bool>& included = {{true, true, true, true}});

}  // namespace ibmea
