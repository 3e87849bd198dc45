#include "evircod/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "evircod/errors.hpp"
#include "evircod/optim.hpp"

namespace evircod {

namespace fs = std::filesystem;

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

/// Order of samples in each epoch comes from its own stream so it is
/// independent of how many random numbers model construction consumed.
std::mt19937_64 order_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x6f72u};
  return std::mt19937_64(seq);
}

void dump_divergence(const std::string& path, const LossRow& row, const std::vector<std::string>& ids,
                     const EviRcod& model) {
  std::ofstream out(path);
  out << "non-finite loss at step " << row.step << " (epoch " << row.epoch << ")\n";
  out << "lr = " << g17(row.lr) << "\n" << loss_csv_header() << "\n" << loss_csv_row(row) << "\n";
  out << "batch:";
  for (const auto& id : ids) out << " " << id;
  out << "\n";
  for (const auto& p : model.parameters()) {
    double norm = 0.0;
    bool finite = true;
    for (double v : p.tensor->data()) {
      norm += v * v;
      finite = finite && std::isfinite(v);
    }
    out << p.name << " norm=" << g17(std::sqrt(norm)) << (finite ? "" : " NON-FINITE") << "\n";
  }
}

}  // namespace

std::string loss_csv_header() {
  return "step,epoch,lr,total,structural_1,structural_2,refined_1,refined_2,evidential,nll,focal";
}

std::string loss_csv_row(const LossRow& r) {
  auto at = [](const std::vector<double>& v, std::size_t i) { return i < v.size() ? g17(v[i]) : std::string(); };
  return std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + g17(r.lr) + "," + g17(r.total) + "," +
         at(r.structural, 0) + "," + at(r.structural, 1) + "," + at(r.structural_refined, 0) + "," +
         at(r.structural_refined, 1) + "," + g17(r.evidential) + "," + g17(r.nll) + "," + g17(r.focal);
}

data::Dataset training_set(const RunConfig& cfg) {
  if (cfg.data.source == DataSource::folder) return data::load_folder(cfg.data.train_path, cfg.data.layout);
  data::SynthConfig s = cfg.data.synth;
  s.image_size = cfg.model.image_size;
  return data::Dataset::from_samples(data::synth_generate(s, cfg.seed));
}

data::Dataset evaluation_set(const RunConfig& cfg) {
  if (cfg.data.source == DataSource::folder) {
    return data::load_folder(cfg.data.eval_path.empty() ? cfg.data.train_path : cfg.data.eval_path, cfg.data.layout);
  }
  data::SynthConfig s = cfg.data.synth;
  s.image_size = cfg.model.image_size;
  s.count = cfg.data.eval_count;
  s.label_noise = cfg.data.eval_label_noise;
  return data::Dataset::from_samples(data::synth_generate(s, cfg.seed + cfg.data.eval_seed_offset));
}

std::unique_ptr<EviRcod> build_model(const RunConfig& cfg) {
  nn::Rng rng(cfg.seed);
  auto model = std::make_unique<EviRcod>(cfg.model, rng);
  model->rgde().backbone().set_group(nn::ParamGroup::backbone);
  return model;
}

TrainResult train(const RunConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  TrainResult result;
  result.out_dir = resolve_out_dir(cfg);
  result.model = build_model(cfg);
  EviRcod& model = *result.model;

  data::Dataset owned;
  if (!options.dataset) owned = training_set(cfg);
  const data::Dataset& dataset = options.dataset ? *options.dataset : owned;
  result.warnings = dataset.warnings();
  if (dataset.empty()) throw ConfigError("training set is empty");

  optim::AdamOptions ao;
  ao.lr = cfg.optim.base_lr;
  ao.backbone_scale = cfg.optim.backbone_lr_scale;
  optim::Adam opt(model.parameters(), ao);
  std::mt19937_64 order = order_rng(cfg.seed);

  const std::string config_text = canonical_text(cfg);
  int start_epoch = 0;
  std::int64_t step = 0;
  if (!options.resume_from.empty()) {
    Checkpoint ckpt = load_checkpoint(options.resume_from);
    if (ckpt.fingerprint != fingerprint(cfg)) {
      throw ConfigError("checkpoint " + options.resume_from + " was written for a different architecture");
    }
    restore(model, ckpt);
    opt.load_state(ckpt.optimizer);
    std::istringstream(ckpt.rng_state) >> order;
    start_epoch = static_cast<int>(ckpt.epoch);
    step = ckpt.step;
  }

  std::ofstream log;
  if (options.write_files) {
    fs::create_directories(result.out_dir);
    result.log_path = (fs::path(result.out_dir) / "loss_log.csv").string();
    const bool append = !options.resume_from.empty() && fs::exists(result.log_path);
    log.open(result.log_path, append ? std::ios::app : std::ios::trunc);
    if (!append) log << loss_csv_header() << "\n";
    std::ofstream(fs::path(result.out_dir) / "config.cfg") << config_text;
  }

  auto save = [&](int epochs_done, const std::string& name) {
    Checkpoint ckpt;
    ckpt.fingerprint = fingerprint(cfg);
    ckpt.epoch = epochs_done;
    ckpt.step = step;
    ckpt.config_text = config_text;
    ckpt.rng_state = rng_text(order);
    capture(model, ckpt);
    ckpt.optimizer = opt.state();
    const std::string path = (fs::path(result.out_dir) / name).string();
    save_checkpoint(path, ckpt);
    return path;
  };

  const std::size_t n = dataset.size();
  const auto batch_size = static_cast<std::size_t>(cfg.optim.batch);
  bool stop = false;
  model.set_training(true);
  for (int epoch = start_epoch; epoch < cfg.optim.epochs && !stop; ++epoch) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), order);
    const double lr = optim::cosine_lr(cfg.optim.base_lr, cfg.optim.lr_floor, epoch, cfg.optim.epochs);
    opt.set_lr(lr);
    for (std::size_t first = 0; first < n && !stop; first += batch_size) {
      std::vector<data::Sample> samples;
      for (std::size_t k = first; k < std::min(n, first + batch_size); ++k) {
        try {
          samples.push_back(dataset.get(perm[k]));
        } catch (const DataError& e) {
          result.warnings.push_back(std::string("skipping item: ") + e.what());
        }
      }
      if (samples.empty()) continue;
      data::Batch batch = data::make_batch(samples, cfg.model.image_size, cfg.data.max_references);
      ModelOutput out = model.forward(batch);
      losses::LossReport report = model.loss(out, batch.gt, cfg.loss);

      LossRow row;
      row.step = ++step;
      row.epoch = epoch;
      row.lr = lr;
      row.total = report.total.item();
      row.structural = report.structural;
      row.structural_refined = report.structural_refined;
      row.evidential = report.evidential;
      row.nll = report.nll;
      row.focal = report.focal;
      if (!std::isfinite(row.total)) {
        const std::string path = (fs::path(result.out_dir) / "divergence.txt").string();
        fs::create_directories(result.out_dir);
        dump_divergence(path, row, batch.ids, model);
        throw TrainingDiverged("non-finite loss at step " + std::to_string(row.step) + "; diagnostics in " + path);
      }
      opt.zero_grad();
      report.total.backward();
      opt.step();

      result.log.push_back(row);
      if (log.is_open()) log << loss_csv_row(row) << "\n";
      if (!options.quiet && (row.step == 1 || row.step % 25 == 0)) {
        std::cerr << "step " << row.step << " epoch " << epoch << " lr " << lr << " loss " << row.total << "\n";
      }
      if (cfg.optim.max_steps > 0 && step >= cfg.optim.max_steps) stop = true;
    }
    if (stop) break;
    if (options.write_files && cfg.optim.checkpoint_every > 0 && (epoch + 1) % cfg.optim.checkpoint_every == 0) {
      save(epoch + 1, "checkpoint_epoch" + std::to_string(epoch + 1) + ".bin");
    }
  }
  if (options.write_files) {
    const int done = stop ? static_cast<int>(result.log.empty() ? start_epoch : result.log.back().epoch + 1)
                          : cfg.optim.epochs;
    result.final_checkpoint = save(done, "final.bin");
  }
  model.set_training(false);
  return result;
}

std::unique_ptr<EviRcod> load_model(const Checkpoint& ckpt, const RunConfig* expected, bool force) {
  if (expected && fingerprint(*expected) != ckpt.fingerprint && !force) {
    throw ConfigError("checkpoint architecture fingerprint differs from the configuration (use --force to override)");
  }
  RunConfig stored = parse_run_config(ckpt.config_text);
  if (fingerprint(stored) != ckpt.fingerprint) throw DataError("checkpoint config text does not match its fingerprint");
  auto model = build_model(stored);
  restore(*model, ckpt);
  model->set_training(false);
  return model;
}

}  // namespace evircod
