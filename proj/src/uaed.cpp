#include "evircod/uaed.hpp"

#include <cmath>

#include "evircod/errors.hpp"

namespace evircod::uaed {

namespace {

int square_side(int n) {
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (side * side != n) throw ConfigError("token count " + std::to_string(n) + " is not a square grid");
  return side;
}

}  // namespace

Tensor tokens_to_map(const Tensor& tokens) {
  const int B = tokens.size(0), N = tokens.size(1), D = tokens.size(2);
  const int s = square_side(N);
  return reshape(permute(tokens, {0, 2, 1}), {B, D, s, s});
}

Tensor map_to_tokens(const Tensor& map) {
  const int B = map.size(0), C = map.size(1);
  return permute(reshape(map, {B, C, map.size(2) * map.size(3)}), {0, 2, 1});
}

EvidenceHead::EvidenceHead(int channels, int hidden, nn::Rng& rng)
    : sem1_(channels, hidden, 3, 1, 1, rng),
      sem2_(hidden, 2, 3, 1, 1, rng),
      edge1_(1, hidden, 3, 1, 1, rng),
      edge2_(hidden, 2, 3, 1, 1, rng) {
  register_module("semantic1", sem1_);
  register_module("semantic2", sem2_);
  register_module("edge1", edge1_);
  register_module("edge2", edge2_);
}

Tensor EvidenceHead::forward(const Tensor& map) const {
  Tensor semantic = sem2_.forward(relu(sem1_.forward(map)));
  Tensor g = sobel_xy(mean_axes(map, {1}, true));
  Tensor magnitude = sqrt(add_scalar(sum_axes(square(g), {1}, true), 1e-12));
  Tensor edge = edge2_.forward(relu(edge1_.forward(magnitude)));
  return softplus(add(semantic, edge));
}

UncertaintyEmbedding::UncertaintyEmbedding(int hidden, int dim, nn::Rng& rng)
    : fc1_(1, hidden, rng), fc2_(hidden, dim, rng) {
  register_module("fc1", fc1_);
  register_module("fc2", fc2_);
}

Tensor UncertaintyEmbedding::forward(const Tensor& uncertainty) const {
  return fc2_.forward(relu(fc1_.forward(map_to_tokens(uncertainty))));
}

EvidenceGuidedAttention::EvidenceGuidedAttention(int query_dim, int context_dim, int dim, nn::Rng& rng)
    : q_(query_dim, dim, rng),
      k_(context_dim, dim, rng),
      v_(context_dim, dim, rng),
      w_u_(register_parameter("w_u", Tensor(Shape{1}, 0.0, true))) {
  register_module("q", q_);
  register_module("k", k_);
  register_module("v", v_);
}

Tensor EvidenceGuidedAttention::key_scale(const Tensor& context, const Tensor& confidence) const {
  const int B = context.size(0), N = context.size(1);
  if (confidence.dim() != 2 || confidence.size(0) != B || confidence.size(1) != N) {
    throw ContractViolation("confidence " + to_string(confidence.shape()) + " does not match " +
                            std::to_string(B) + " x " + std::to_string(N) + " keys");
  }
  return add_scalar(mul(w_u_, reshape(confidence, {B, 1, N})), 1.0);
}

namespace {

struct Attention {
  Tensor weights, output;
};

Attention guided(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& scale) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
  Tensor logits = mul_scalar(matmul_nt(q, k), inv);
  if (scale.defined()) logits = mul(logits, scale);
  Tensor a = softmax_last(logits);
  return {a, matmul(a, v)};
}

}  // namespace

Tensor EvidenceGuidedAttention::forward(const Tensor& query, const Tensor& context, const Tensor& confidence) const {
  return guided(q_.forward(query), k_.forward(context), v_.forward(context), key_scale(context, confidence)).output;
}

Tensor EvidenceGuidedAttention::weights(const Tensor& query, const Tensor& context, const Tensor& confidence) const {
  return guided(q_.forward(query), k_.forward(context), v_.forward(context), key_scale(context, confidence)).weights;
}

Tensor EvidenceGuidedAttention::standard(const Tensor& query, const Tensor& context) const {
  return guided(q_.forward(query), k_.forward(context), v_.forward(context), Tensor()).output;
}

GatedResidual::GatedResidual(int dim, GateActivation act, nn::Rng& rng) : act_(act), g_(2 * dim, dim, rng) {
  register_module("g", g_);
}

Tensor GatedResidual::gate(const Tensor& s, const Tensor& m) const {
  Tensor z = g_.forward(concat({s, m}, s.dim() - 1));
  return act_ == GateActivation::sigmoid ? sigmoid(z) : softmax_last(z);
}

Tensor GatedResidual::forward(const Tensor& s, const Tensor& m) const {
  if (s.shape() != m.shape()) {
    throw ShapeError("gated residual: " + to_string(s.shape()) + " vs " + to_string(m.shape()));
  }
  return add(s, mul(gate(s, m), m));
}

PredictionHead::PredictionHead(int dim, int patch, nn::Rng& rng) : patch_(patch), proj_(dim, patch * patch, rng) {
  register_module("proj", proj_);
}

Tensor PredictionHead::forward(const Tensor& tokens, int out_h, int out_w) const {
  const int B = tokens.size(0), s = square_side(tokens.size(1)), p = patch_;
  Tensor t = reshape(proj_.forward(tokens), {B, s, s, p, p});
  Tensor map = reshape(permute(t, {0, 1, 3, 2, 4}), {B, 1, s * p, s * p});
  if (s * p == out_h && s * p == out_w) return map;
  return resize_bilinear(map, out_h, out_w);
}

Uaed::Uaed(const ModelConfig& cfg, nn::Rng& rng)
    : cfg_(cfg),
      weights_{cfg.lambda_vacuity, cfg.lambda_variance},
      evidence_(cfg.embed_dim, cfg.evidence_hidden, rng),
      embedding_(cfg.uncertainty_hidden, cfg.embed_dim, rng) {
  cfg_.validate();
  const int D = cfg.embed_dim;
  register_module("evidence", evidence_);
  register_module("embedding", embedding_);
  for (int i = 0; i < 4; ++i) {
    const int context = i == 3 ? D : 2 * D;
    ega_.push_back(std::make_unique<EvidenceGuidedAttention>(D, context, D, rng));
    register_module("ega" + std::to_string(i + 1), *ega_.back());
    gates_.push_back(std::make_unique<GatedResidual>(D, cfg.gate, rng));
    register_module("gate" + std::to_string(i + 1), *gates_.back());
  }
  for (int i = 0; i < 3; ++i) {
    fuse_.push_back(std::make_unique<nn::Linear>(2 * D, D, rng));
    register_module("fuse" + std::to_string(i + 1), *fuse_.back());
  }
  for (int i = 0; i < 4; ++i) {
    heads_.push_back(std::make_unique<PredictionHead>(D, cfg.patch, rng));
    register_module("head" + std::to_string(i + 1), *heads_.back());
  }
}

DecodeState Uaed::forward(const std::vector<Tensor>& encoded, int out_h, int out_w) {
  if (encoded.size() != 4) throw ContractViolation("decoder expects four encoded scales");
  DecodeState st;
  const int B = encoded[3].size(0), N = encoded[3].size(1);
  const bool evidential = cfg_.enable_uaed;
  const bool guided = evidential && cfg_.enable_ega;

  Tensor confidence;
  if (evidential) {
    st.evidence = evidence_.forward(tokens_to_map(encoded[3]));
    st.dirichlet = evidential::complete(evidential::evidence_to_dirichlet(st.evidence), weights_);
    st.uncertainty_embedding = embedding_.forward(st.dirichlet.uncertainty);
    confidence = reshape(st.dirichlet.confidence, {B, N});
  }

  st.refined.resize(4);
  st.refined[3] = guided ? gates_[3]->forward(encoded[3], ega_[3]->forward(st.uncertainty_embedding, encoded[3], confidence))
                         : encoded[3];
  for (int i = 2; i >= 0; --i) {
    const auto ui = static_cast<std::size_t>(i);
    Tensor context = concat({encoded[ui], st.refined[ui + 1]}, 2);
    if (guided) {
      Tensor m = ega_[ui]->forward(st.uncertainty_embedding, context, confidence);
      st.refined[ui] = gates_[ui]->forward(encoded[ui], m);
    } else {
      st.refined[ui] = add(encoded[ui], fuse_[ui]->forward(context));
    }
  }
  for (std::size_t i = 0; i < 4; ++i) {
    st.logits.push_back(heads_[i]->forward(st.refined[i], out_h, out_w));
    st.predictions.push_back(sigmoid(st.logits.back()));
  }
  return st;
}

}  // namespace evircod::uaed
