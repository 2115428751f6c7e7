#include "ibmea/encoders.hpp"

#include <cmath>
#include <random>

namespace ibmea {

void ModelDims::validate() const {
  if (d_g <= 0 || gat_hidden <= 0 || gat_heads <= 0 || graph_out <= 0 || modal_hidden <= 0 ||
      modal_out <= 0 || fusion_dim <= 0)
    throw ConfigError("model dimensions must be positive");
  if (gat_hidden % gat_heads != 0) throw ConfigError("gat_hidden must be divisible by gat_heads");
  if (sigma_floor < 0) throw ConfigError("sigma_floor must be non-negative");
}

void GaussianEmbedding::validate() const {
  if (mu.rows() != sigma.rows() || mu.cols() != sigma.cols())
    throw ValidationError("mu/sigma shape mismatch");
  if (!mu.allFinite() || !sigma.allFinite()) throw NumericError("non-finite posterior");
  if (sigma.size() > 0 && !(sigma.minCoeff() > 0.0)) throw NumericError("non-positive sigma");
}

namespace {

Matrix glorot(Index rows, Index cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = u(rng);
  return m;
}

GatT<Matrix> init_gat(const ModelDims& d, Rng& rng, double out_bias) {
  GatT<Matrix> g;
  const int per_head = d.gat_hidden / d.gat_heads;
  for (int h = 0; h < d.gat_heads; ++h)
    g.layer1.heads.push_back(
        {glorot(d.d_g, per_head, rng), glorot(per_head, 1, rng), glorot(per_head, 1, rng)});
  g.layer1.bias = Matrix::Zero(1, d.gat_hidden);
  for (int h = 0; h < d.gat_heads; ++h)
    g.layer2.heads.push_back(
        {glorot(d.gat_hidden, d.graph_out, rng), glorot(d.graph_out, 1, rng), glorot(d.graph_out, 1, rng)});
  g.layer2.bias = Matrix::Constant(1, d.graph_out, out_bias);
  return g;
}

MlpT<Matrix> init_mlp(int width, int out, Rng& rng, double out_bias) {
  return {glorot(width, out, rng), Matrix::Zero(1, out), glorot(out, out, rng),
          Matrix::Constant(1, out, out_bias)};
}

ModalEncoderT<Matrix> init_modal(int in, const ModelDims& d, Rng& rng) {
  ModalEncoderT<Matrix> e;
  e.fc_weight = glorot(in, d.modal_hidden, rng);
  e.fc_bias = Matrix::Zero(1, d.modal_hidden);
  e.mu = init_mlp(d.modal_hidden, d.modal_out, rng, 0.0);
  e.sigma = init_mlp(d.modal_hidden, d.modal_out, rng, d.sigma_bias_init);
  return e;
}

Var gat_layer(const Adjacency& adj, const Var& x, const GatLayerT<Var>& layer, double slope,
              bool concat) {
  std::vector<Var> outs;
  for (const auto& head : layer.heads)
    outs.push_back(ad::gat_aggregate(ad::matmul(x, head.weight), head.attn_src, head.attn_dst, adj,
                                     slope));
  Var merged;
  if (concat) {
    merged = ad::hconcat<double>(outs);
  } else {
    merged = outs.front();
    for (std::size_t k = 1; k < outs.size(); ++k) merged = merged + outs[k];
    merged = ad::scale(merged, 1.0 / static_cast<double>(outs.size()));
  }
  return ad::add_row(merged, layer.bias);
}

Var mlp(const Var& h, const MlpT<Var>& m) {
  return ad::add_row(ad::matmul(ad::relu(ad::add_row(ad::matmul(h, m.w1), m.b1)), m.w2), m.b2);
}

}  // namespace

EncoderParams init_encoder_params(const ModelDims& dims, const InputDims& in, Rng& rng) {
  dims.validate();
  EncoderParams p;
  p.gat_mu = init_gat(dims, rng, 0.0);
  p.gat_sigma = init_gat(dims, rng, dims.sigma_bias_init);
  p.visual = init_modal(in.d_v, dims, rng);
  p.attribute = init_modal(in.d_a, dims, rng);
  p.relation = init_modal(in.d_r, dims, rng);
  return p;
}

EncoderParamsT<Var> bind(Tape& tape, const EncoderParams& params) {
  EncoderParamsT<Var> vars;
  shape_like(vars, params);
  visit_encoder_params([&](const std::string&, const Matrix& m, Var& v) { v = tape.variable(m); }, "enc",
               params, vars);
  return vars;
}

Var gat_forward(const Adjacency& adj, const Var& x, const GatT<Var>& gat, double slope) {
  const Var hidden = ad::elu(gat_layer(adj, x, gat.layer1, slope, true));
  return gat_layer(adj, hidden, gat.layer2, slope, false);
}

GaussianVars encode_graph(const Adjacency& adj, const Var& x_g, const EncoderParamsT<Var>& params,
                          const ModelDims& dims) {
  if (x_g.cols() != params.gat_mu.layer1.heads.front().weight.rows())
    throw ConfigError("node feature width does not match the graph encoder");
  return {gat_forward(adj, x_g, params.gat_mu, dims.leaky_slope),
          ad::softplus(gat_forward(adj, x_g, params.gat_sigma, dims.leaky_slope), dims.sigma_floor)};
}

GaussianVars encode_modality(const Var& x_m, Modality modality, const EncoderParamsT<Var>& params,
                             const ModelDims& dims) {
  if (modality == Modality::Graph) throw ConfigError("encode_modality takes v, a or r");
  const auto& enc = params.modal(modality);
  if (x_m.cols() != enc.fc_weight.rows())
    throw ConfigError(std::string("input width mismatch for modality ") +
                      std::string(long_name(modality)) + ": got " + std::to_string(x_m.cols()) +
                      ", encoder expects " + std::to_string(enc.fc_weight.rows()));
  const Var hidden = ad::relu(ad::add_row(ad::matmul(x_m, enc.fc_weight), enc.fc_bias));
  return {mlp(hidden, enc.mu), ad::softplus(mlp(hidden, enc.sigma), dims.sigma_floor)};
}

GaussianEmbedding encode_graph(const Adjacency& adj, const Matrix& x_g, const EncoderParams& params,
                               const ModelDims& dims) {
  Tape tape(false);
  auto vars = bind(tape, params);
  auto g = encode_graph(adj, tape.constant(x_g), vars, dims);
  return {g.mu.value(), g.sigma.value()};
}

GaussianEmbedding encode_modality(const Matrix& x_m, Modality modality,
                                  const EncoderParams& params, const ModelDims& dims) {
  Tape tape(false);
  auto vars = bind(tape, params);
  auto g = encode_modality(tape.constant(x_m), modality, vars, dims);
  return {g.mu.value(), g.sigma.value()};
}

Var reparameterize(const GaussianVars& g, const Matrix& eps) {
  if (eps.rows() != g.mu.rows() || eps.cols() != g.mu.cols())
    throw std::invalid_argument("noise shape does not match the posterior");
  return g.mu + ad::cwise_mul(g.sigma, g.mu.tape()->constant(eps));
}

Matrix reparameterize(const GaussianEmbedding& g, std::uint64_t rng_seed, bool deterministic) {
  if (deterministic) return g.mu;
  Rng rng = make_rng(rng_seed, "sampling");
  return g.mu + g.sigma.cwiseProduct(randn<double>(g.mu.rows(), g.mu.cols(), rng));
}

}  // namespace ibmea
