#pragma once

#include <memory>
#include <vector>

#include "evircod/evidential.hpp"
#include "evircod/model_config.hpp"
#include "evircod/nn.hpp"

// Uncertainty-aware evidential decoder: evidence head on the coarsest tokens,
// uncertainty embedding, evidence-guided attention, gated residual fusion and
// the coarse-to-fine prediction cascade.
namespace evircod::uaed {

/// B x N x D tokens on a side x side grid -> B x D x side x side.
Tensor tokens_to_map(const Tensor& tokens);
/// B x C x s x s -> B x (s*s) x C.
Tensor map_to_tokens(const Tensor& map);

/// Two parallel conv branches (semantic features, Sobel magnitude of the
/// channel mean) summed and passed through softplus. Output B x 2 x s x s.
class EvidenceHead : public nn::Module {
 public:
  EvidenceHead(int channels, int hidden, nn::Rng& rng);
  Tensor forward(const Tensor& map) const;

 private:
  nn::Conv2d sem1_, sem2_, edge1_, edge2_;
};

/// Per-location MLP lifting the scalar uncertainty to a D-dim embedding.
class UncertaintyEmbedding : public nn::Module {
 public:
  UncertaintyEmbedding(int hidden, int dim, nn::Rng& rng);
  /// uncertainty: B x 1 x s x s -> B x (s*s) x D.
  Tensor forward(const Tensor& uncertainty) const;
  nn::Linear& first() { return fc1_; }
  nn::Linear& second() { return fc2_; }

 private:
  nn::Linear fc1_, fc2_;
};

/// Single-head cross-attention whose logits for key j are scaled by
/// (1 + w_u * C_j).
class EvidenceGuidedAttention : public nn::Module {
 public:
  EvidenceGuidedAttention(int query_dim, int context_dim, int dim, nn::Rng& rng);
  /// query: B x N x Dq, context: B x N x Dc, confidence: B x N (one value per key).
  Tensor forward(const Tensor& query, const Tensor& context, const Tensor& confidence) const;
  /// Attention weights B x 1 x N x N of the guided form.
  Tensor weights(const Tensor& query, const Tensor& context, const Tensor& confidence) const;
  /// The same projections without confidence modulation.
  Tensor standard(const Tensor& query, const Tensor& context) const;

  Tensor& w_u() { return w_u_; }
  nn::Linear& q() { return q_; }
  nn::Linear& k() { return k_; }
  nn::Linear& v() { return v_; }

 private:
  Tensor key_scale(const Tensor& context, const Tensor& confidence) const;

  nn::Linear q_, k_, v_;
  Tensor& w_u_;
};

/// S' = S + act(G(concat(S, M))) * M with act = sigmoid or channel softmax.
class GatedResidual : public nn::Module {
 public:
  GatedResidual(int dim, GateActivation act, nn::Rng& rng);
  Tensor forward(const Tensor& s, const Tensor& m) const;
  Tensor gate(const Tensor& s, const Tensor& m) const;
  nn::Linear& projection() { return g_; }

 private:
  GateActivation act_;
  nn::Linear g_;
};

/// Per-token linear projection to patch x patch logits, reassembled on the
/// tokenization grid and bilinearly resized to the output resolution.
class PredictionHead : public nn::Module {
 public:
  PredictionHead(int dim, int patch, nn::Rng& rng);
  Tensor forward(const Tensor& tokens, int out_h, int out_w) const;

 private:
  int patch_;
  nn::Linear proj_;
};

struct DecodeState {
  std::vector<Tensor> refined;      // S_i', index 0 = finest
  std::vector<Tensor> logits;       // pre-sigmoid maps at output resolution
  std::vector<Tensor> predictions;  // sigmoid(logits)
  Tensor evidence;                  // B x 2 x s x s (undefined when the evidential path is off)
  evidential::DirichletField dirichlet;
  Tensor uncertainty_embedding;
};

class Uaed : public nn::Module {
 public:
  Uaed(const ModelConfig& cfg, nn::Rng& rng);
  DecodeState forward(const std::vector<Tensor>& encoded, int out_h, int out_w);

  EvidenceGuidedAttention& ega(int level) { return *ega_.at(static_cast<std::size_t>(level)); }
  GatedResidual& gate(int level) { return *gates_.at(static_cast<std::size_t>(level)); }
  EvidenceHead& evidence_head() { return evidence_; }

 private:
  ModelConfig cfg_;
  evidential::UncertaintyWeights weights_;
  EvidenceHead evidence_;
  UncertaintyEmbedding embedding_;
  std::vector<std::unique_ptr<EvidenceGuidedAttention>> ega_;
  std::vector<std::unique_ptr<GatedResidual>> gates_;
  std::vector<std::unique_ptr<nn::Linear>> fuse_;
  std::vector<std::unique_ptr<PredictionHead>> heads_;
};

}  // namespace evircod::uaed
