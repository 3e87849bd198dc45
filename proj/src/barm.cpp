#include "evircod/barm.hpp"

namespace evircod::barm {

Tensor grayscale(const Tensor& image) {
  if (image.dim() != 4 || image.size(1) != 3) {
    throw ShapeError("grayscale expects B x 3 x H x W, got " + to_string(image.shape()));
  }
  Tensor w(Shape{1, 3, 1, 1}, std::vector<double>{0.299, 0.587, 0.114});
  return sum_axes(mul(image, w), {1}, true);
}

namespace {

Tensor replicate_pad1(const Tensor& x) {
  const int H = x.size(2), W = x.size(3);
  Tensor rows = concat({slice(x, 2, 0, 1), x, slice(x, 2, H - 1, 1)}, 2);
  return concat({slice(rows, 3, 0, 1), rows, slice(rows, 3, W - 1, 1)}, 3);
}

}  // namespace

Tensor sobel_features(const Tensor& image) {
  Tensor gray = grayscale(image);
  const int H = gray.size(2), W = gray.size(3);
  Tensor g = sobel_xy(replicate_pad1(gray));
  g = slice(slice(g, 2, 1, H), 3, 1, W);
  Tensor magnitude = sqrt(add_scalar(sum_axes(square(g), {1}, true), 1e-12));
  return concat({g, magnitude}, 1);
}

EdgePrior::EdgePrior(nn::Rng& rng) : conv_(3, 1, 3, 1, 1, rng) { register_module("conv", conv_); }

Tensor EdgePrior::forward(const Tensor& image) const { return conv_.forward(sobel_features(image)); }

Tensor selective_refine(const Tensor& logits, const Tensor& gate, const Tensor& delta) {
  return sigmoid(add(logits, mul(gate, delta)));
}

DualBranch::DualBranch(int hidden, nn::Rng& rng)
    : attn1_(2, hidden, 3, 1, 1, rng),
      attn2_(hidden, 1, 3, 1, 1, rng),
      ref1_(2, hidden, 3, 1, 1, rng),
      ref2_(hidden, 1, 3, 1, 1, rng) {
  register_module("attn1", attn1_);
  register_module("attn2", attn2_);
  register_module("ref1", ref1_);
  register_module("ref2", ref2_);
}

RefinementTriple DualBranch::branches(const Tensor& logits, const Tensor& edge) const {
  if (logits.shape() != edge.shape()) {
    throw ShapeError("dual branch: logits " + to_string(logits.shape()) + " vs edge " + to_string(edge.shape()));
  }
  Tensor x = concat({logits, edge}, 1);
  RefinementTriple t;
  t.gate = sigmoid(attn2_.forward(relu(attn1_.forward(x))));
  t.delta = ref2_.forward(relu(ref1_.forward(x)));
  return t;
}

RefinementTriple DualBranch::forward(const Tensor& logits, const Tensor& edge) const {
  RefinementTriple t = branches(logits, edge);
  t.refined = selective_refine(logits, t.gate, t.delta);
  return t;
}

Barm::Barm(int hidden, nn::Rng& rng) : edge_(rng), branch_(hidden, rng) {
  register_module("edge", edge_);
  register_module("branch", branch_);
}

std::vector<RefinementTriple> Barm::forward(const Tensor& image, const std::vector<Tensor>& logits) const {
  std::vector<RefinementTriple> out;
  if (logits.empty()) return out;
  Tensor edge = edge_.forward(image);
  for (const Tensor& l : logits) {
    Tensor e = edge;
    if (l.size(2) != edge.size(2) || l.size(3) != edge.size(3)) e = resize_bilinear(edge, l.size(2), l.size(3));
    out.push_back(branch_.forward(l, e));
  }
  return out;
}

}  // namespace evircod::barm
