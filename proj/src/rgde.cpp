#include "evircod/rgde.hpp"

#include <cmath>

#include "evircod/errors.hpp"

namespace evircod::rgde {

Backbone::Backbone(const std::array<int, 4>& c, nn::Rng& rng)
    : stem1_(3, c[0] / 2, 3, 2, 1, rng),
      stem2_(c[0] / 2, c[0], 3, 2, 1, rng),
      refine1_(c[0], c[0], 3, 1, 1, rng),
      down2_(c[0], c[1], 3, 2, 1, rng),
      refine2_(c[1], c[1], 3, 1, 1, rng),
      down3_(c[1], c[2], 3, 2, 1, rng),
      down4_(c[2], c[3], 3, 2, 1, rng) {
  register_module("stem1", stem1_);
  register_module("stem2", stem2_);
  register_module("refine1", refine1_);
  register_module("down2", down2_);
  register_module("refine2", refine2_);
  register_module("down3", down3_);
  register_module("down4", down4_);
  set_group(nn::ParamGroup::backbone);
}

FeaturePyramid Backbone::forward(const Tensor& image) const {
  if (image.dim() != 4 || image.size(1) != 3) {
    throw ShapeError("backbone expects B x 3 x H x W, got " + to_string(image.shape()));
  }
  if (image.size(2) % 32 != 0 || image.size(3) % 32 != 0) {
    throw ConfigError("backbone input " + std::to_string(image.size(2)) + "x" + std::to_string(image.size(3)) +
                      " is not divisible by 32");
  }
  FeaturePyramid p;
  Tensor x = relu(stem2_.forward(relu(stem1_.forward(image))));
  x = relu(add(x, refine1_.forward(x)));
  p.levels.push_back(x);
  x = relu(down2_.forward(x));
  x = relu(add(x, refine2_.forward(x)));
  p.levels.push_back(x);
  x = relu(down3_.forward(x));
  p.levels.push_back(x);
  x = relu(down4_.forward(x));
  p.levels.push_back(x);
  return p;
}

ReferencePrior::ReferencePrior(int ref_channels, int model_channels, nn::Rng& rng)
    : cbr_(ref_channels, model_channels, 1, rng) {
  register_module("cbr", cbr_);
}

Tensor ReferencePrior::forward(const Tensor& descriptor) { return sigmoid(cbr_.forward(descriptor)); }

Tensor channel_cosine(const Tensor& a, const Tensor& b, double eps) {
  return div(mul(a, b), add_scalar(mul(abs(a), abs(b)), eps));
}

Tensor scale_modulation_weight(const Tensor& features, const Tensor& prior, double tau_min) {
  if (features.dim() != 4 || prior.dim() != 4 || features.size(1) != prior.size(1)) {
    throw ShapeError("scale_modulation_weight: features " + to_string(features.shape()) + " vs prior " +
                     to_string(prior.shape()));
  }
  Tensor pooled = mean_axes(features, {2, 3}, true);
  return clamp(sigmoid(mul(pooled, channel_cosine(pooled, prior))), tau_min, 1.0);
}

Tensor modulate(const Tensor& features, const Tensor& weight, const Tensor& prior) {
  return mul(features, mul(weight, prior));
}

PatchEmbed::PatchEmbed(int in_channels, int embed_dim, int patch, nn::Rng& rng)
    : patch_(patch), proj_(in_channels, embed_dim, patch, patch, 0, rng) {
  register_module("proj", proj_);
}

Tensor PatchEmbed::forward(const Tensor& map) const {
  if (map.dim() != 4 || map.size(2) != map.size(3)) {
    throw ShapeError("patch_embed expects a square B x C x G x G map, got " + to_string(map.shape()));
  }
  if (map.size(2) % patch_ != 0) {
    throw ConfigError("grid " + std::to_string(map.size(2)) + " is not divisible by patch " + std::to_string(patch_));
  }
  Tensor y = proj_.forward(map);  // B x D x s x s
  const int B = y.size(0), D = y.size(1), n = y.size(2) * y.size(3);
  return permute(reshape(y, {B, D, n}), {0, 2, 1});
}

Tensor split_heads(const Tensor& x, int heads) {
  const int B = x.size(0), N = x.size(1), D = x.size(2);
  if (D % heads != 0) throw ShapeError("split_heads: width " + std::to_string(D) + " not divisible by heads");
  return permute(reshape(x, {B, N, heads, D / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const int B = x.size(0), H = x.size(1), N = x.size(2), d = x.size(3);
  return reshape(permute(x, {0, 2, 1, 3}), {B, N, H * d});
}

AttentionResult attend(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& key_scale) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
  Tensor logits = mul_scalar(matmul_nt(q, k), scale);
  if (key_scale.defined()) logits = mul(logits, key_scale);
  Tensor weights = softmax_last(logits);
  return {matmul(weights, v), weights};
}

MultiHeadAttention::MultiHeadAttention(int dim, int heads, nn::Rng& rng)
    : heads_(heads), q_(dim, dim, rng), k_(dim, dim, rng), v_(dim, dim, rng), o_(dim, dim, rng) {
  register_module("q", q_);
  register_module("k", k_);
  register_module("v", v_);
  register_module("o", o_);
}

Tensor MultiHeadAttention::forward(const Tensor& query, const Tensor& context) const {
  Tensor q = split_heads(q_.forward(query), heads_);
  Tensor k = split_heads(k_.forward(context), heads_);
  Tensor v = split_heads(v_.forward(context), heads_);
  return o_.forward(merge_heads(attend(q, k, v).output));
}

TopDownBlock::TopDownBlock(int dim, int heads, nn::Rng& rng) : mha_(dim, heads, rng), norm_(dim) {
  register_module("mha", mha_);
  register_module("norm", norm_);
}

Tensor TopDownBlock::forward(const Tensor& tokens, const Tensor& coarser) const {
  if (tokens.shape() != coarser.shape()) {
    throw ShapeError("top-down attention: " + to_string(tokens.shape()) + " vs " + to_string(coarser.shape()));
  }
  return norm_.forward(add(tokens, mha_.forward(tokens, coarser)));
}

DeformableEncoder::DeformableEncoder(int dim, int heads, int ffn_hidden, nn::Rng& rng)
    : heads_(heads),
      q_(dim, dim, rng),
      k_(dim, dim, rng),
      v_(dim, dim, rng),
      o_(dim, dim, rng),
      offset_(dim, 2 * heads, rng),
      norm1_(dim),
      ffn1_(dim, ffn_hidden, rng),
      ffn2_(ffn_hidden, dim, rng),
      norm2_(dim) {
  register_module("q", q_);
  register_module("k", k_);
  register_module("v", v_);
  register_module("o", o_);
  register_module("offset", offset_);
  register_module("norm1", norm1_);
  register_module("ffn1", ffn1_);
  register_module("ffn2", ffn2_);
  register_module("norm2", norm2_);
}

namespace {

int grid_side(int n) {
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (side * side != n) throw ConfigError("token count " + std::to_string(n) + " is not a square grid");
  return side;
}

}  // namespace

Tensor DeformableEncoder::offsets(const Tensor& tokens) const {
  const int B = tokens.size(0), N = tokens.size(1);
  return reshape(offset_.forward(q_.forward(tokens)), {B, N, heads_, 2});
}

Tensor DeformableEncoder::project_out(const Tensor& heads_out) const { return o_.forward(merge_heads(heads_out)); }

Tensor DeformableEncoder::standard_attention(const Tensor& tokens) const {
  Tensor q = split_heads(q_.forward(tokens), heads_);
  Tensor k = split_heads(k_.forward(tokens), heads_);
  Tensor v = split_heads(v_.forward(tokens), heads_);
  return project_out(attend(q, k, v).output);
}

Tensor DeformableEncoder::deformable_attention(const Tensor& tokens, const DeformableOptions& options) const {
  const int B = tokens.size(0), N = tokens.size(1);
  const int side = grid_side(N);
  Tensor qf = q_.forward(tokens);
  Tensor q = split_heads(qf, heads_);
  Tensor k = split_heads(k_.forward(tokens), heads_);
  Tensor v = split_heads(v_.forward(tokens), heads_);
  // B x N x h x 2 -> B x h x N x 2
  Tensor off = permute(reshape(offset_.forward(qf), {B, N, heads_, 2}), {0, 2, 1, 3});

  if (options.mode == DeformableMode::spatial) {
    k = sample_token_grid(k, off, side, options.gamma);
    v = sample_token_grid(v, off, side, options.gamma);
  } else {
    const int d = k.size(3);
    if (d % 2 != 0) throw ConfigError("additive deformable mode needs an even head width");
    Tensor dx = slice(off, 3, 0, 1), dy = slice(off, 3, 1, 1);
    Tensor shift = concat({mul(dx, Tensor(Shape{1, 1, 1, d / 2}, 1.0)), mul(dy, Tensor(Shape{1, 1, 1, d / 2}, 1.0))}, 3);
    k = add(k, mul_scalar(shift, options.gamma));
  }

  Tensor key_scale;
  if (options.semantic_mask.defined()) {
    const Tensor& m = options.semantic_mask;
    if (m.dim() != 2 || m.size(0) != B || m.size(1) != N) {
      throw ShapeError("semantic mask must be B x N, got " + to_string(m.shape()));
    }
    key_scale = add_scalar(reshape(m, {B, 1, 1, N}), 1.0);
  }
  return project_out(attend(q, k, v, key_scale).output);
}

Tensor DeformableEncoder::forward(const Tensor& tokens, const DeformableOptions& options) const {
  Tensor a = norm1_.forward(add(tokens, deformable_attention(tokens, options)));
  return norm2_.forward(add(a, ffn2_.forward(relu(ffn1_.forward(a)))));
}

Rgde::Rgde(const ModelConfig& cfg, nn::Rng& rng)
    : cfg_(cfg),
      backbone_(cfg.channels, rng),
      prior_(cfg.ref_channels, cfg.model_channels, rng),
      embed_(cfg.model_channels, cfg.embed_dim, cfg.patch, rng) {
  cfg_.validate();
  register_module("backbone", backbone_);
  register_module("prior", prior_);
  for (int i = 0; i < 4; ++i) {
    align_.push_back(std::make_unique<nn::ConvBnRelu>(cfg.channels[static_cast<std::size_t>(i)], cfg.model_channels, 1, rng));
    register_module("align" + std::to_string(i + 1), *align_.back());
  }
  register_module("embed", embed_);
  for (int i = 0; i < 3; ++i) {
    topdown_.push_back(std::make_unique<TopDownBlock>(cfg.embed_dim, cfg.heads, rng));
    register_module("topdown" + std::to_string(i + 1), *topdown_.back());
  }
  for (int i = 0; i < 4; ++i) {
    encoders_.push_back(std::make_unique<DeformableEncoder>(cfg.embed_dim, cfg.heads, cfg.ffn_hidden, rng));
    register_module("encoder" + std::to_string(i + 1), *encoders_.back());
  }
}

RgdeOutput Rgde::forward(const Tensor& image, const Tensor& descriptor) {
  RgdeOutput out;
  out.pyramid = backbone_.forward(image);
  if (cfg_.enable_rgde) out.prior = prior_.forward(descriptor);

  for (int i = 0; i < 4; ++i) {
    Tensor f = align_[static_cast<std::size_t>(i)]->forward(out.pyramid.levels[static_cast<std::size_t>(i)]);
    Tensor w;
    if (cfg_.enable_rgde) {
      w = scale_modulation_weight(f, out.prior, cfg_.tau_min);
      f = modulate(f, w, out.prior);
    }
    out.weights.push_back(w);
    if (f.size(2) != cfg_.grid || f.size(3) != cfg_.grid) f = resize_bilinear(f, cfg_.grid, cfg_.grid);
    out.tokens.push_back(embed_.forward(f));
  }

  DeformableOptions coarse;
  coarse.gamma = cfg_.enable_rgde ? cfg_.gamma : 0.0;
  coarse.mode = cfg_.deformable_mode;
  DeformableOptions fine = coarse;
  if (cfg_.enable_rgde && cfg_.semantic_mask) fine.semantic_mask = sigmoid(mean_axes(out.tokens[3], {2}, false));

  out.encoded.resize(4);
  for (int i = 0; i < 3; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    Tensor refined = topdown_[ui]->forward(out.tokens[ui], out.tokens[ui + 1]);
    out.encoded[ui] = encoders_[ui]->forward(refined, fine);
  }
  out.encoded[3] = encoders_[3]->forward(out.tokens[3], coarse);
  return out;
}

}  // namespace evircod::rgde
