#pragma once

#include <array>
#include <string>

namespace evircod {

/// How predicted 2-D offsets shift the keys in the deformable encoder.
enum class DeformableMode {
  spatial,   // resample keys/values at grid positions displaced by gamma * offset
  additive,  // add gamma * offset to the key features directly
};

/// Activation on the gated-residual fusion gate.
enum class GateActivation { sigmoid, softmax };

std::string to_string(DeformableMode m);
std::string to_string(GateActivation g);
DeformableMode parse_deformable_mode(const std::string& s);
GateActivation parse_gate_activation(const std::string& s);

/// Architecture hyperparameters. Defaults are the toy profile used by the
/// unit tests (16x16 tokenization grid, 4x4 patches, 16 tokens of width 64).
struct ModelConfig {
  int image_size = 64;
  std::array<int, 4> channels{16, 32, 48, 64};
  int ref_channels = 32;    // width of the reference descriptor
  int model_channels = 32;  // common channel width after alignment
  int grid = 16;            // side of the common tokenization grid
  int patch = 4;            // patch side for tokenization
  int embed_dim = 64;       // token width
  int heads = 4;
  int ffn_hidden = 128;
  double gamma = 0.1;       // deformable offset scale
  double tau_min = 0.1;     // floor of the modulation weight
  DeformableMode deformable_mode = DeformableMode::spatial;
  bool semantic_mask = true;

  int evidence_hidden = 16;
  int uncertainty_hidden = 16;
  double lambda_vacuity = 0.9;
  double lambda_variance = 1.2;
  GateActivation gate = GateActivation::sigmoid;

  int barm_hidden = 8;

  // ablation switches
  bool enable_rgde = true;
  bool enable_uaed = true;
  bool enable_ega = true;
  bool enable_barm = true;

  int token_side() const { return grid / patch; }
  int token_count() const { return token_side() * token_side(); }

  /// Throws ConfigError on inconsistent dimensions.
  void validate() const;
};

}  // namespace evircod
