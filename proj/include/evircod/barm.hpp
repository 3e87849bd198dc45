#pragma once

#include <vector>

#include "evircod/nn.hpp"

// Boundary-aware refinement: an image edge prior and two small branches that
// predict a per-pixel gate and a signed logit correction.
namespace evircod::barm {

/// Luminance projection of a B x 3 x H x W image, B x 1 x H x W.
Tensor grayscale(const Tensor& image);

/// Fixed Sobel features of the grayscale image with replicated borders:
/// B x 3 x H x W holding gx, gy and the gradient magnitude.
Tensor sobel_features(const Tensor& image);

/// Edge = conv3x3(sobel_features(image)), B x 1 x H x W.
class EdgePrior : public nn::Module {
 public:
  explicit EdgePrior(nn::Rng& rng);
  Tensor forward(const Tensor& image) const;
  nn::Conv2d& conv() { return conv_; }

 private:
  nn::Conv2d conv_;
};

struct RefinementTriple {
  Tensor gate;     // sigmoid(f_attn([P, Edge])) in [0, 1]
  Tensor delta;    // f_ref([P, Edge]), signed
  Tensor refined;  // sigmoid(P + gate * delta)
};

/// sigmoid(logits + gate * delta).
Tensor selective_refine(const Tensor& logits, const Tensor& gate, const Tensor& delta);

/// Two conv3x3 -> ReLU -> conv3x3 stacks over concat(logits, edge).
class DualBranch : public nn::Module {
 public:
  DualBranch(int hidden, nn::Rng& rng);
  /// Returns gate and delta; `refined` is left undefined.
  RefinementTriple branches(const Tensor& logits, const Tensor& edge) const;
  RefinementTriple forward(const Tensor& logits, const Tensor& edge) const;

  nn::Conv2d& attn_out() { return attn2_; }
  nn::Conv2d& ref_out() { return ref2_; }
  std::vector<nn::Conv2d*> ref_layers() { return {&ref1_, &ref2_}; }

 private:
  nn::Conv2d attn1_, attn2_, ref1_, ref2_;
};

/// Edge prior plus one dual branch shared across every refined scale.
class Barm : public nn::Module {
 public:
  Barm(int hidden, nn::Rng& rng);
  /// Refines each logit map (B x 1 x H x W, all at image resolution).
  std::vector<RefinementTriple> forward(const Tensor& image, const std::vector<Tensor>& logits) const;
  DualBranch& branch() { return branch_; }
  EdgePrior& edge() { return edge_; }

 private:
  EdgePrior edge_;
  DualBranch branch_;
};

}  // namespace evircod::barm
