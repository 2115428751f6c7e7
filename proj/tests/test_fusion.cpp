#include <doctest.h>

#include <cmath>

#include "ibmea/fusion.hpp"
#include "support.hpp"

using namespace ibmea;
using test::random_matrix;

namespace {

FusionParams make_fusion(int d_in, int d, std::uint64_t seed) {
  PerModality<int> dims;
  for (Modality m : kModalities) dims[m] = d_in;
  Rng rng(seed);
  FusionParams p = init_fusion_params(dims, d, rng);
  for (Modality m : kModalities) p.proj_bias[m] = random_matrix(1, d, seed + 10 + index_of(m));
  return p;
}

ModalEmbeddingSet random_set(int n, int d, std::uint64_t seed) {
  ModalEmbeddingSet z;
  for (Modality m : kModalities) z.z[m] = random_matrix(n, d, seed + index_of(m));
  return z;
}

BatchPairs diagonal_batch(int n) {
  BatchPairs b;
  for (int i = 0; i < n; ++i) b.positives.emplace_back(i, i);
  return b;
}

HybridEmbedding hybrid(const Matrix& z) { return {z, Matrix::Zero(z.rows(), 4)}; }

Matrix unit_at(double angle) {
  Matrix z(1, 2);
  z << std::cos(angle), std::sin(angle);
  return z;
}

}  // namespace

TEST_SUITE("hybrid_fusion") {

TEST_CASE("attention matches an independent softmax over scores") {
  const FusionParams p = make_fusion(3, 4, 1);
  const ModalEmbeddingSet z = random_set(6, 3, 2);
  const HybridEmbedding h = fuse(z, p);
  Matrix scores(6, 4);
  PerModality<Matrix> proj;
  for (Modality m : kModalities) {
    proj[m] = (z.z[m] * p.proj_weight[m]).rowwise() + p.proj_bias[m].row(0);
    scores.col(index_of(m)) = proj[m].array().tanh().matrix() * p.query;
  }
  for (Index i = 0; i < 6; ++i) {
    const Eigen::RowVectorXd e = (scores.row(i).array() - scores.row(i).maxCoeff()).exp();
    const Eigen::RowVectorXd alpha = e / e.sum();
    CHECK(h.attention.row(i).isApprox(alpha, 1e-12));
    CHECK(std::abs(h.attention.row(i).sum() - 1.0) <= 1e-6);
    Eigen::RowVectorXd zo = Eigen::RowVectorXd::Zero(4);
    for (Modality m : kModalities) zo += alpha(index_of(m)) * proj[m].row(i);
    CHECK(h.z_o.row(i).isApprox(zo, 1e-12));
  }
}

TEST_CASE("equal scores give uniform attention") {
  FusionParams p = make_fusion(3, 4, 3);
  for (Modality m : kModalities) {
    p.proj_weight[m] = p.proj_weight[Modality::Graph];
    p.proj_bias[m] = p.proj_bias[Modality::Graph];
  }
  ModalEmbeddingSet z;
  const Matrix shared = random_matrix(5, 3, 4);
  for (Modality m : kModalities) z.z[m] = shared;
  const HybridEmbedding h = fuse(z, p);
  CHECK(h.attention.isApprox(Matrix::Constant(5, 4, 0.25), 1e-15));
}

TEST_CASE("softmax is invariant to a shift of all scores") {
  Matrix s(3, 4);
  s << 1, 2, 3, 4, -2, 0, 0, 5, 7, 7, 7, 7;
  Tape tape(false);
  const Matrix a = ad::row_softmax(tape.constant(s)).value();
  for (double c : {-8.0, 3.0, 64.0}) {
    const Matrix b = ad::row_softmax(tape.constant((s.array() + c).matrix())).value();
    CHECK(a == b);
  }
  const Matrix r = random_matrix(4, 4, 5);
  const Matrix ra = ad::row_softmax(tape.constant(r)).value();
  const Matrix rb = ad::row_softmax(tape.constant((r.array() + 0.37).matrix())).value();
  CHECK(ra.isApprox(rb, 1e-14));
  CHECK((ra.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-6);
}

TEST_CASE("a dominant score saturates the attention") {
  FusionParams p = make_fusion(3, 3, 6);
  for (Modality m : kModalities) {
    p.proj_weight[m] *= 0.01;
    p.proj_bias[m] = Matrix::Zero(1, 3);
    p.proj_bias[m](0, 0) = m == Modality::Attribute ? 50.0 : -50.0;
  }
  p.query = Matrix::Zero(3, 1);
  p.query(0, 0) = 20.0;  // score margin 40
  const ModalEmbeddingSet z = random_set(4, 3, 7);
  const HybridEmbedding h = fuse(z, p);
  const Matrix expected = (z.z[Modality::Attribute] * p.proj_weight[Modality::Attribute]).rowwise() +
                          p.proj_bias[Modality::Attribute].row(0);
  CHECK(h.attention.col(index_of(Modality::Attribute)).minCoeff() >= 1.0 - 1e-9);
  CHECK((h.z_o - expected).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("excluded modalities get zero attention") {
  const FusionParams p = make_fusion(3, 4, 8);
  const HybridEmbedding h = fuse(random_set(3, 3, 9), p, {{true, false, true, true}});
  CHECK(h.attention.col(index_of(Modality::Visual)).isZero());
  CHECK((h.attention.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
  CHECK_THROWS_AS(fuse(random_set(3, 3, 9), p, {{false, false, false, false}}), ConfigError);
}

TEST_CASE("discriminator") {
  Vector a(2), b(2);
  a << 1, 0;
  b << 0, 1;
  CHECK(discriminate(a, b) == 0.5);
  a << std::log(3.0), 0;
  b << 1, 0;
  CHECK(discriminate(a, b) == doctest::Approx(0.75).epsilon(1e-15));
  double last = 1.0;
  for (double s : {1.0, 5.0, 20.0, 40.0}) {
    Vector u(2), v(2);
    u << s, 0;
    v << -s, 0;
    const double d = discriminate(u, v);
    CHECK(d < last);
    last = d;
  }
  CHECK(last < 1e-300);
}

TEST_CASE("multi-similarity: lone positive at the margin") {
  const MSLossConfig cfg;
  const double loss = hybrid_contrastive_loss(hybrid(unit_at(0.0)), hybrid(unit_at(std::acos(0.5))),
                                              diagonal_batch(1), cfg);
  CHECK(loss == doctest::Approx(std::log(2.0) / cfg.alpha_pos).epsilon(1e-12));
}

TEST_CASE("multi-similarity: easy negatives are mined out") {
  Matrix z1(3, 3), z2(3, 3);
  z1.setIdentity();
  z2.setIdentity();  // positives at cosine 1, negatives at 0 < lambda - epsilon
  ad::MultiSimilarityStats stats;
  CHECK(hybrid_contrastive_loss(hybrid(z1), hybrid(z2), diagonal_batch(3), {}, &stats) == 0.0);
  CHECK(stats.skipped == stats.anchors);
}

TEST_CASE("multi-similarity decreases as the gold cosine grows") {
  Matrix z1(2, 2), z2(2, 2);
  double last = std::numeric_limits<double>::infinity();
  for (double angle : {1.4, 1.0, 0.7, 0.4, 0.1}) {
    z1 << 1, 0, 0, 1;
    z2.row(0) = unit_at(angle);
    z2.row(1) = unit_at(2.2);
    const double loss = hybrid_contrastive_loss(hybrid(z1), hybrid(z2), diagonal_batch(2), {});
    CHECK(loss <= last);
    last = loss;
  }
}

TEST_CASE("multi-similarity config is validated") {
  MSLossConfig cfg;
  cfg.lambda_margin = 1.5;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = {};
  cfg.alpha_pos = 0.0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
}

TEST_CASE("discriminator bound is finite and rewards aligned pairs") {
  const Matrix z = random_matrix(4, 3, 11);
  const double aligned = discriminator_loss(hybrid(2.0 * z), hybrid(2.0 * z), diagonal_batch(4));
  const double random = discriminator_loss(hybrid(z), hybrid(random_matrix(4, 3, 12)), diagonal_batch(4));
  CHECK(std::isfinite(aligned));
  CHECK(aligned < random);
}

}
