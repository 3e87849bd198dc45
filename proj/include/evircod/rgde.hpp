#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "evircod/model_config.hpp"
#include "evircod/nn.hpp"

// Reference-guided deformable encoder: backbone stand-in, reference-driven
// channel modulation, tokenization, top-down cross-scale attention and
// deformable self-attention.
namespace evircod::rgde {

/// Four backbone levels at strides 4, 8, 16 and 32.
struct FeaturePyramid {
  std::vector<Tensor> levels;
};

/// Strided convolutional pyramid standing in for a pretrained backbone.
class Backbone : public nn::Module {
 public:
  Backbone(const std::array<int, 4>& channels, nn::Rng& rng);
  /// image: B x 3 x H x W with H, W divisible by 32.
  FeaturePyramid forward(const Tensor& image) const;

 private:
  nn::Conv2d stem1_, stem2_, refine1_, down2_, refine2_, down3_, down4_;
};

/// r' = sigmoid(CBR(r)), B x C_d x 1 x 1 with values in [0, 1].
class ReferencePrior : public nn::Module {
 public:
  ReferencePrior(int ref_channels, int model_channels, nn::Rng& rng);
  Tensor forward(const Tensor& descriptor);

 private:
  nn::ConvBnRelu cbr_;
};

/// Channel-wise cosine similarity of two B x C x 1 x 1 tensors with an
/// epsilon-stabilized denominator.
Tensor channel_cosine(const Tensor& a, const Tensor& b, double eps = 1e-8);

/// W = clip(sigmoid(GAP(f) * cos(GAP(f), r')), tau_min, 1), shape B x C_d x 1 x 1.
Tensor scale_modulation_weight(const Tensor& features, const Tensor& prior, double tau_min);

/// f * w * r' with channel broadcast over space.
Tensor modulate(const Tensor& features, const Tensor& weight, const Tensor& prior);

/// Non-overlapping patch projection of a B x C x G x G map to B x N x D tokens.
class PatchEmbed : public nn::Module {
 public:
  PatchEmbed(int in_channels, int embed_dim, int patch, nn::Rng& rng);
  Tensor forward(const Tensor& map) const;
  int patch() const { return patch_; }

 private:
  int patch_;
  nn::Conv2d proj_;
};

/// Splits B x N x D into B x H x N x D/H.
Tensor split_heads(const Tensor& x, int heads);
/// Inverse of split_heads.
Tensor merge_heads(const Tensor& x);

struct AttentionResult {
  Tensor output;   // B x H x Nq x d
  Tensor weights;  // B x H x Nq x Nk, rows sum to 1
};

/// Scaled dot-product attention on split heads. `key_scale`, when defined,
/// multiplies the logits and must broadcast to B x H x Nq x Nk.
AttentionResult attend(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& key_scale = Tensor());

/// Standard multi-head attention with separate query and key/value inputs.
class MultiHeadAttention : public nn::Module {
 public:
  MultiHeadAttention(int dim, int heads, nn::Rng& rng);
  Tensor forward(const Tensor& query, const Tensor& context) const;
  int heads() const { return heads_; }

 private:
  int heads_;
  nn::Linear q_, k_, v_, o_;
};

/// X_hat = LayerNorm(X + MHA(Q = X, K = V = X_coarser)).
class TopDownBlock : public nn::Module {
 public:
  TopDownBlock(int dim, int heads, nn::Rng& rng);
  Tensor forward(const Tensor& tokens, const Tensor& coarser) const;
  MultiHeadAttention& attention() { return mha_; }

 private:
  MultiHeadAttention mha_;
  nn::LayerNorm norm_;
};

struct DeformableOptions {
  double gamma = 0.1;
  DeformableMode mode = DeformableMode::spatial;
  /// Optional B x N per-key emphasis in [0, 1]; logits are multiplied by (1 + mask).
  Tensor semantic_mask;
};

/// Deformable multi-head self-attention over a square token grid, followed by
/// a post-norm feed-forward block.
class DeformableEncoder : public nn::Module {
 public:
  DeformableEncoder(int dim, int heads, int ffn_hidden, nn::Rng& rng);

  /// Attention sub-layer only: offsets = f(Q) in B x N x H x 2, shifted keys,
  /// output projection. Returns B x N x D.
  Tensor deformable_attention(const Tensor& tokens, const DeformableOptions& options) const;
  /// The same projections without any key shift.
  Tensor standard_attention(const Tensor& tokens) const;
  /// Offsets predicted from the projected queries, B x N x H x 2.
  Tensor offsets(const Tensor& tokens) const;

  /// Full layer: LN(x + attn(x)) then LN(. + FFN(.)).
  Tensor forward(const Tensor& tokens, const DeformableOptions& options) const;

  nn::Linear& offset_net() { return offset_; }
  nn::Linear& value_projection() { return v_; }
  int heads() const { return heads_; }

 private:
  Tensor project_out(const Tensor& heads_out) const;

  int heads_;
  nn::Linear q_, k_, v_, o_, offset_;
  nn::LayerNorm norm1_;
  nn::Linear ffn1_, ffn2_;
  nn::LayerNorm norm2_;
};

struct RgdeOutput {
  FeaturePyramid pyramid;
  Tensor prior;                  // r'
  std::vector<Tensor> weights;   // W_i per level (undefined when modulation is off)
  std::vector<Tensor> tokens;    // X_i
  std::vector<Tensor> encoded;   // S_i, all B x N x D
};

class Rgde : public nn::Module {
 public:
  Rgde(const ModelConfig& cfg, nn::Rng& rng);
  /// image: B x 3 x H x W; descriptor: B x C_r x 1 x 1.
  RgdeOutput forward(const Tensor& image, const Tensor& descriptor);

  Backbone& backbone() { return backbone_; }
  DeformableEncoder& encoder(int level) { return *encoders_.at(static_cast<std::size_t>(level)); }

 private:
  ModelConfig cfg_;
  Backbone backbone_;
  ReferencePrior prior_;
  std::vector<std::unique_ptr<nn::ConvBnRelu>> align_;
  PatchEmbed embed_;
  std::vector<std::unique_ptr<TopDownBlock>> topdown_;
  std::vector<std::unique_ptr<DeformableEncoder>> encoders_;
};

}  // namespace evircod::rgde
