#include "evircod/model.hpp"

#include "evircod/errors.hpp"

namespace evircod {

EviRcod::EviRcod(const ModelConfig& cfg, nn::Rng& rng)
    : cfg_(cfg),
      reference_(cfg.ref_channels, rng),
      rgde_(cfg, rng),
      uaed_(cfg, rng),
      barm_(cfg.barm_hidden, rng) {
  cfg_.validate();
  register_module("reference", reference_);
  register_module("rgde", rgde_);
  register_module("uaed", uaed_);
  register_module("barm", barm_);
}

ModelOutput EviRcod::forward(const data::Batch& batch) {
  const Tensor& image = batch.image;
  if (image.dim() != 4 || image.size(1) != 3) throw ShapeError("model expects a B x 3 x H x W image");
  const int B = image.size(0), H = image.size(2), W = image.size(3);
  ModelOutput out;
  if (cfg_.enable_rgde) {
    if (!batch.ref_images.defined()) throw ContractViolation("referring mode needs at least one reference per sample");
    out.descriptor = reference_.forward(batch.ref_images, batch.ref_masks, batch.ref_owner, B);
  }
  out.encoder = rgde_.forward(image, out.descriptor);
  out.decoder = uaed_.forward(out.encoder.encoded, H, W);
  if (cfg_.enable_barm) {
    out.refinement = barm_.forward(image, {out.decoder.logits[0], out.decoder.logits[1]});
    for (const auto& r : out.refinement) {
      const std::size_t i = out.refined_logits.size();
      out.refined_logits.push_back(add(out.decoder.logits[i], mul(r.gate, r.delta)));
    }
    out.final_logits = out.refined_logits[0];
  } else {
    out.final_logits = out.decoder.logits[0];
  }
  out.prediction = sigmoid(out.final_logits);
  return out;
}

losses::LossReport EviRcod::loss(const ModelOutput& out, const Tensor& gt, const losses::LossWeights& w) const {
  return losses::total_loss({out.decoder.logits[0], out.decoder.logits[1]}, out.refined_logits, out.decoder.dirichlet,
                            gt, w);
}

}  // namespace evircod
