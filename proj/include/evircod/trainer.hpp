#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "evircod/checkpoint.hpp"
#include "evircod/model.hpp"
#include "evircod/run_config.hpp"

namespace evircod {

/// Raised when the loss becomes non-finite; diagnostics are written first.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossRow {
  std::int64_t step = 0;  // 1-based
  int epoch = 0;          // 0-based
  double lr = 0.0;
  double total = 0.0;
  std::vector<double> structural;
  std::vector<double> structural_refined;
  double evidential = 0.0;
  double nll = 0.0;
  double focal = 0.0;
};

std::string loss_csv_header();
std::string loss_csv_row(const LossRow& row);

/// Training and held-out datasets described by the config.
data::Dataset training_set(const RunConfig& cfg);
data::Dataset evaluation_set(const RunConfig& cfg);

/// Model initialised deterministically from cfg.seed with the backbone in the
/// scaled learning-rate group.
std::unique_ptr<EviRcod> build_model(const RunConfig& cfg);

struct TrainOptions {
  std::string resume_from;     // checkpoint path, empty = fresh run
  bool write_files = true;     // loss log and checkpoints under the output directory
  bool quiet = true;
  /// Replaces the configured training set (used by tests and experiments).
  const data::Dataset* dataset = nullptr;
};

struct TrainResult {
  std::unique_ptr<EviRcod> model;
  std::vector<LossRow> log;
  std::string out_dir;
  std::string log_path;
  std::string final_checkpoint;
  std::vector<std::string> warnings;
};

TrainResult train(const RunConfig& cfg, const TrainOptions& options = {});

/// Rebuilds the model stored in a checkpoint. When `expected` is given its
/// architecture fingerprint must match unless `force` is set.
std::unique_ptr<EviRcod> load_model(const Checkpoint& ckpt, const RunConfig* expected = nullptr, bool force = false);

}  // namespace evircod
