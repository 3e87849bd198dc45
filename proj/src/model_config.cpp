#include "evircod/model_config.hpp"

#include "evircod/errors.hpp"

namespace evircod {

std::string to_string(DeformableMode m) { return m == DeformableMode::spatial ? "spatial" : "additive"; }
std::string to_string(GateActivation g) { return g == GateActivation::sigmoid ? "sigmoid" : "softmax"; }

DeformableMode parse_deformable_mode(const std::string& s) {
  if (s == "spatial") return DeformableMode::spatial;
  if (s == "additive") return DeformableMode::additive;
  throw ConfigError("unknown deformable mode '" + s + "' (spatial|additive)");
}

GateActivation parse_gate_activation(const std::string& s) {
  if (s == "sigmoid") return GateActivation::sigmoid;
  if (s == "softmax") return GateActivation::softmax;
  throw ConfigError("unknown gate activation '" + s + "' (sigmoid|softmax)");
}

void ModelConfig::validate() const {
  if (image_size <= 0 || image_size % 32 != 0) {
    throw ConfigError("image_size must be a positive multiple of 32, got " + std::to_string(image_size));
  }
  for (int c : channels)
    if (c <= 0) throw ConfigError("backbone channels must be positive");
  if (channels[0] % 2 != 0) throw ConfigError("first backbone width must be even");
  if (model_channels <= 0 || ref_channels <= 0 || embed_dim <= 0) throw ConfigError("widths must be positive");
  if (grid <= 0 || patch <= 0 || grid % patch != 0) {
    throw ConfigError("grid " + std::to_string(grid) + " is not divisible by patch " + std::to_string(patch));
  }
  if (heads <= 0 || embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
  if (deformable_mode == DeformableMode::additive && (embed_dim / heads) % 2 != 0) {
    throw ConfigError("additive deformable mode needs an even head width");
  }
  if (!(tau_min > 0.0 && tau_min < 1.0)) throw ConfigError("tau_min must lie in (0, 1)");
  if (lambda_vacuity < 0.0 || lambda_variance < 0.0 || lambda_vacuity + lambda_variance / 12.0 > 1.0 + 1e-12) {
    throw ConfigError("uncertainty weights must satisfy vacuity + variance/12 <= 1");
  }
}

}  // namespace evircod
