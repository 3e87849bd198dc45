#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evircod/data.hpp"
#include "evircod/losses.hpp"
#include "evircod/model_config.hpp"

// Run configuration: named profiles, the flat `[section] key = value` text
// format and its canonical form.
namespace evircod {

struct OptimConfig {
  double base_lr = 4e-3;
  double backbone_lr_scale = 0.1;
  double lr_floor = 0.0;
  int epochs = 100;          // cosine T_max
  int batch = 4;
  int checkpoint_every = 25; // epochs; 0 = only the final checkpoint
  int max_steps = 0;         // stop early after this many steps (0 = no limit)
};

enum class DataSource { synthetic, folder };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  data::SynthConfig synth;       // training set; image size follows the model
  int eval_count = 20;           // held-out set: same generator, seed + eval_seed_offset
  double eval_label_noise = 0.0;
  std::uint64_t eval_seed_offset = 1000;
  std::string train_path;        // folder source
  std::string eval_path;
  data::FolderLayout layout;
  int max_references = 2;        // per sample in a batch (0 = all)
};

struct RunConfig {
  std::string profile = "toy";
  std::uint64_t seed = 1;
  ModelConfig model;
  losses::LossWeights loss;
  OptimConfig optim;
  DataConfig data;
  std::string out_dir = "runs/default";

  /// Throws ConfigError on invalid values.
  void validate() const;
};

/// Named profiles: "toy" (desk scale, the default) and "paper" (the
/// full-resolution recipe; not meant to be trained on a CPU).
RunConfig profile_config(const std::string& name);
std::vector<std::string> profile_names();

/// Parses the text format on top of the named profile selected by a
/// top-level `profile = ...` line (default toy), then applies `overrides`
/// given as "section.key=value" (or "key=value" for top-level keys).
RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {});

/// Every key in a fixed order; parse_run_config(canonical_text(c)) == c.
std::string canonical_text(const RunConfig& c);
/// Canonical text of the model section only; two configs with the same
/// architecture share it.
std::string model_text(const RunConfig& c);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& text);
/// Fingerprint of the architecture (model section), used to match checkpoints.
std::uint64_t fingerprint(const RunConfig& c);

/// Ablation name -> config change: "rgde", "uaed", "ega", "barm", "all",
/// "deformable" (deformable offsets off), "additive" (additive offsets).
void apply_ablation(RunConfig& c, const std::string& module);
std::vector<std::string> ablation_names();

/// Output directory: EVIRCOD_OUT_DIR when set, else c.out_dir.
std::string resolve_out_dir(const RunConfig& c);

}  // namespace evircod
