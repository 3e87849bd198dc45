#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evircod/nn.hpp"

namespace evircod {

/// Binary checkpoint: versioned header, architecture fingerprint, progress,
/// canonical config text, RNG state, parameters, buffers, optimizer state and
/// a trailing FNV-1a checksum of everything before it.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint64_t fingerprint = 0;
  std::int64_t epoch = 0;  // completed epochs
  std::int64_t step = 0;   // completed optimizer steps
  std::string config_text;
  std::string rng_state;
  std::vector<std::pair<std::string, std::vector<double>>> parameters;
  std::vector<std::pair<std::string, std::vector<double>>> buffers;
  std::vector<double> optimizer;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
/// Throws DataError on a missing, truncated or corrupted file.
Checkpoint load_checkpoint(const std::string& path);

/// Copies parameter and buffer values out of / into a module. restore throws
/// ConfigError when names or sizes disagree.
void capture(const nn::Module& module, Checkpoint& ckpt);
void restore(nn::Module& module, const Checkpoint& ckpt);

}  // namespace evircod
