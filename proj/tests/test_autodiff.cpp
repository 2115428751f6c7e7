#include <doctest.h>

#include "gradcheck.hpp"
#include "support.hpp"

using namespace ibmea;
using test::max_grad_error;
using test::random_matrix;

namespace {

Var sum_sq(const Var& a) { return ad::sum(ad::cwise_mul(a, a)); }

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("elementwise and linear ops") {
  const Matrix a = random_matrix(4, 3, 1), b = random_matrix(3, 5, 2), c = random_matrix(4, 3, 3);
  const Matrix bias = random_matrix(1, 3, 4), w = random_matrix(4, 1, 5);
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::matmul(v[0], v[1])); }, {a, b}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::matmul_nt(v[0], v[1])); }, {a, c}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::transpose(v[0]) - v[1]); },
                       {a, Matrix(c.transpose())}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::add_row(v[0], v[1])); }, {a, bias}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::scale_rows(v[0], v[1])); }, {a, w}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::cwise_mul(v[0], v[1])); }, {a, c}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::tanh(v[0])); }, {a}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::elu(v[0])); }, {a}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::relu(v[0])); }, {a}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::softplus(v[0], 1e-6)); }, {a}) < 1e-6);
}

TEST_CASE("row ops") {
  const Matrix a = random_matrix(5, 4, 7);
  const std::vector<int> rows{3, 0, 3};
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::row_softmax(v[0])); }, {a}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return ad::sum(ad::cwise_mul(ad::row_normalize(v[0]), v[1])); },
                       {a, random_matrix(5, 4, 16)}) < 1e-5);
  CHECK(max_grad_error([&](Tape&, const auto& v) { return sum_sq(ad::gather_rows(v[0], rows)); }, {a}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return sum_sq(ad::column(v[0], 2)); }, {a}) < 1e-6);
  CHECK(max_grad_error(
            [](Tape&, const auto& v) {
              const Var parts[] = {v[0], v[1]};
              return sum_sq(ad::hconcat<double>(parts));
            },
            {a, random_matrix(5, 2, 8)}) < 1e-6);
}

TEST_CASE("loss kernels") {
  const Matrix mu = random_matrix(4, 3, 9);
  const Matrix sigma = (random_matrix(4, 3, 10).array().abs() + 0.3).matrix();
  CHECK(max_grad_error([](Tape&, const auto& v) { return ad::kl_standard_normal(v[0], v[1]); }, {mu, sigma}) < 1e-6);
  const Matrix logits = random_matrix(4, 6, 11);
  CHECK(max_grad_error([](Tape&, const auto& v) { return ad::softmax_xent_diag(v[0]); }, {logits}) < 1e-6);
  CHECK(max_grad_error([](Tape&, const auto& v) { return ad::discriminator_bce_diag(v[0]); }, {logits}) < 1e-6);
  const Matrix sim = (random_matrix(4, 6, 12) * 0.3).array().tanh().matrix();
  CHECK(max_grad_error([](Tape&, const auto& v) { return ad::multi_similarity_diag(v[0], {}); }, {sim}, 1e-6, 1e-4) < 1e-5);
}

TEST_CASE("zero rows normalize to zero") {
  Tape tape;
  Matrix m = random_matrix(3, 4, 17);
  m.row(1).setZero();
  const Var a = tape.variable(m);
  const Var n = ad::row_normalize(a);
  CHECK(n.value().row(1).isZero());
  CHECK(n.value().row(0).norm() == doctest::Approx(1.0));
  tape.backward(ad::sum(n));
  CHECK(a.grad().row(1).isZero());
  CHECK(a.grad().allFinite());
}

TEST_CASE("graph attention aggregation") {
  const std::vector<EntityPair> edges{{0, 1}, {1, 2}, {3, 4}, {0, 2}};
  const Adjacency adj = Adjacency::from_edges(5, edges);
  const Matrix h = random_matrix(5, 3, 13), src = random_matrix(3, 1, 14), dst = random_matrix(3, 1, 15);
  CHECK(max_grad_error([&](Tape&, const auto& v) { return sum_sq(ad::gat_aggregate(v[0], v[1], v[2], adj, 0.2)); },
                       {h, src, dst}) < 1e-6);
  const auto w = ad::gat_attention_weights<double>(h, src, dst, adj, 0.2);
  for (int i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int k = adj.offsets[i]; k < adj.offsets[i + 1]; ++k) s += w[k];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("backward needs a scalar root and resets gradients") {
  Tape tape;
  const Var a = tape.variable(random_matrix(2, 2, 1));
  CHECK_THROWS(tape.backward(a));
  const Var s = ad::sum(a);
  tape.backward(s);
  tape.backward(s);
  CHECK(a.grad().isApprox(Matrix::Ones(2, 2)));
}

TEST_CASE("non-recording tapes skip gradient bookkeeping") {
  Tape tape(false);
  const Var a = tape.variable(random_matrix(2, 2, 1));
  CHECK_FALSE(a.requires_grad());
  const Var s = ad::sum(a);
  tape.backward(s);
  CHECK(a.grad().isZero());
}

}
