#pragma once

#include <vector>

#include "evircod/barm.hpp"
#include "evircod/data.hpp"
#include "evircod/losses.hpp"
#include "evircod/model_config.hpp"
#include "evircod/rgde.hpp"
#include "evircod/uaed.hpp"

// The full referring pipeline: reference encoder -> RGDE -> UAED -> BARM.
namespace evircod {

struct ModelOutput {
  Tensor descriptor;  // B x C_r x 1 x 1 (undefined when the referring path is off)
  rgde::RgdeOutput encoder;
  uaed::DecodeState decoder;
  std::vector<barm::RefinementTriple> refinement;  // scales 1 and 2 (empty when refinement is off)
  std::vector<Tensor> refined_logits;              // logits + gate * delta for scales 1 and 2
  Tensor final_logits;                             // refined scale 1, or decoder scale 1 without refinement
  Tensor prediction;                               // sigmoid(final_logits), B x 1 x H x W
};

class EviRcod : public nn::Module {
 public:
  EviRcod(const ModelConfig& cfg, nn::Rng& rng);

  ModelOutput forward(const data::Batch& batch);
  losses::LossReport loss(const ModelOutput& out, const Tensor& gt, const losses::LossWeights& w) const;

  const ModelConfig& config() const { return cfg_; }
  data::ReferenceEncoder& reference_encoder() { return reference_; }
  rgde::Rgde& rgde() { return rgde_; }
  uaed::Uaed& uaed() { return uaed_; }
  barm::Barm& barm() { return barm_; }

 private:
  ModelConfig cfg_;
  data::ReferenceEncoder reference_;
  rgde::Rgde rgde_;
  uaed::Uaed uaed_;
  barm::Barm barm_;
};

}  // namespace evircod
