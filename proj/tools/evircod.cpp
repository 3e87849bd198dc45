#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "evircod/errors.hpp"
#include "evircod/evaluation.hpp"
#include "evircod/run_config.hpp"
#include "evircod/suites.hpp"
#include "evircod/trainer.hpp"

using namespace evircod;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::string profile;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--profile", c.profile, "Named profile (toy, paper) when no config file sets one");
  cmd->add_option("--set", c.sets, "Override a config key, e.g. --set model.gamma=0.2")->take_all();
  cmd->add_option("--out", c.out, "Output directory (default: config out_dir or EVIRCOD_OUT_DIR)");
}

void add_seed(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed")->each([&c](const std::string&) { c.seed_given = true; });
}

RunConfig resolve(const Common& c) {
  std::vector<std::string> overrides;
  if (!c.profile.empty()) overrides.push_back("profile=" + c.profile);
  overrides.insert(overrides.end(), c.sets.begin(), c.sets.end());
  if (c.seed_given) overrides.push_back("seed=" + std::to_string(c.seed));
  if (!c.out.empty()) overrides.push_back("out_dir=" + c.out);
  return c.config.empty() ? parse_run_config("", overrides) : load_run_config(c.config, overrides);
}

RunInfo run_info(const RunConfig& cfg, const std::string& checkpoint, const std::string& data) {
  char fp[17];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(fingerprint(cfg)));
  RunInfo info{{"seed", std::to_string(cfg.seed)}, {"fingerprint", fp}, {"profile", cfg.profile}};
  if (!checkpoint.empty()) info.emplace_back("checkpoint", checkpoint);
  info.emplace_back("data", data.empty() ? "held-out set of the configuration" : data);
  return info;
}

void print_report(const EvalReport& r) {
  std::cout << metrics::to_text({r.overall, r.single, r.multi});
  for (const auto& f : r.failures) std::cerr << "warning: " << f << "\n";
}

int cmd_generate(const Common& c) {
  RunConfig cfg = resolve(c);
  const std::string out = resolve_out_dir(cfg);
  data::SynthConfig train = cfg.data.synth;
  train.image_size = cfg.model.image_size;
  data::write_folder((fs::path(out) / "train").string(), data::synth_generate(train, cfg.seed), cfg.data.layout);
  data::SynthConfig held = train;
  held.count = cfg.data.eval_count;
  held.label_noise = cfg.data.eval_label_noise;
  data::write_folder((fs::path(out) / "eval").string(), data::synth_generate(held, cfg.seed + cfg.data.eval_seed_offset),
                     cfg.data.layout);
  std::cout << "wrote " << train.count << " training and " << held.count << " held-out samples to " << out << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& resume, bool verbose) {
  RunConfig cfg = resolve(c);
  TrainOptions opt;
  opt.resume_from = resume;
  opt.quiet = !verbose;
  TrainResult r = train(cfg, opt);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "steps=" << r.log.size() << "\n";
  if (!r.log.empty()) std::cout << "final_loss=" << r.log.back().total << "\n";
  std::cout << "loss_log=" << r.log_path << "\ncheckpoint=" << r.final_checkpoint << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  bool force = false;
  int bins = 10;
  std::string source = "dirichlet";
};

data::Dataset eval_dataset(const RunConfig& cfg, const EvalArgs& a) {
  data::Dataset ds = a.data.empty() ? evaluation_set(cfg) : data::load_folder(a.data, cfg.data.layout);
  for (const auto& w : ds.warnings()) std::cerr << "warning: " << w << "\n";
  return ds;
}

int cmd_eval(const Common& c, const EvalArgs& a) {
  RunConfig cfg = resolve(c);
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const bool has_config = !c.config.empty() || !c.sets.empty() || !c.profile.empty();
  if (!has_config) cfg = parse_run_config(ckpt.config_text, c.seed_given ? std::vector<std::string>{"seed=" + std::to_string(c.seed)} : std::vector<std::string>{});
  auto model = load_model(ckpt, has_config ? &cfg : nullptr, a.force);
  EvalReport r = evaluate(eval_dataset(cfg, a), model_predictor(*model, cfg.data.max_references), a.bins);
  const std::string out = resolve_out_dir(cfg);
  write_report((fs::path(out) / "eval").string(), r, run_info(cfg, a.checkpoint, a.data));
  print_report(r);
  return 0;
}

int cmd_calibrate(const Common& c, const EvalArgs& a) {
  RunConfig cfg = resolve(c);
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const bool has_config = !c.config.empty() || !c.sets.empty() || !c.profile.empty();
  if (!has_config) cfg = parse_run_config(ckpt.config_text, c.seed_given ? std::vector<std::string>{"seed=" + std::to_string(c.seed)} : std::vector<std::string>{});
  auto model = load_model(ckpt, has_config ? &cfg : nullptr, a.force);
  const auto source = a.source == "final" ? CalibrationSource::final : CalibrationSource::dirichlet;
  metrics::Calibration cal = calibration_report(eval_dataset(cfg, a), model_predictor(*model, cfg.data.max_references),
                                                a.bins, source);
  const std::string dir = (fs::path(resolve_out_dir(cfg)) / "calibration").string();
  write_calibration(dir, cal, "Reliability (" + a.source + ", seed " + std::to_string(cfg.seed) + ")",
                    run_info(cfg, a.checkpoint, a.data));
  std::cout << "ece=" << cal.ece << "\npixels=" << cal.total << "\ncsv=" << dir << "/reliability.csv\nsvg=" << dir
            << "/reliability.svg\n";
  return 0;
}

int cmd_ablate(const Common& c, const std::vector<std::string>& disable, int bins) {
  RunConfig cfg = resolve(c);
  std::string tag = "ablate";
  for (const auto& m : disable) {
    apply_ablation(cfg, m);
    tag += "_" + m;
  }
  cfg.out_dir = (fs::path(resolve_out_dir(cfg)) / tag).string();
  cfg.validate();
  std::cout << "config:\n" << model_text(cfg);
  TrainOptions opt;
  TrainResult t;
  {
    // The ablation output directory must not be redirected again by the environment.
    const char* env = std::getenv("EVIRCOD_OUT_DIR");
    std::string saved = env ? env : "";
    if (env) unsetenv("EVIRCOD_OUT_DIR");
    t = train(cfg, opt);
    if (!saved.empty()) setenv("EVIRCOD_OUT_DIR", saved.c_str(), 1);
  }
  EvalReport r = evaluate(evaluation_set(cfg), model_predictor(*t.model, cfg.data.max_references), bins);
  RunInfo info = run_info(cfg, t.final_checkpoint, "");
  std::string disabled;
  for (const auto& m : disable) disabled += (disabled.empty() ? "" : ",") + m;
  info.emplace_back("disabled", disabled);
  write_report((fs::path(cfg.out_dir) / "eval").string(), r, info);
  print_report(r);
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, int points) {
  bool ok = true;
  for (const auto& r : run_gradient_suites(seed, points)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " points=" << r.points << " max_rel_error=" << r.max_rel_error
              << " tolerance=" << r.tolerance << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referring camouflaged object detection with evidential uncertainty"};
  app.require_subcommand(1);

  Common gen, tr, ev, cal, abl;
  std::uint64_t grad_seed = 1;
  int grad_points = 100;
  std::string resume;
  bool verbose = false;
  EvalArgs eval_args, cal_args;
  std::vector<std::string> disable;
  int ablate_bins = 10;

  auto* g = app.add_subcommand("generate", "Write a synthetic dataset in the folder layout");
  add_common(g, gen);
  add_seed(g, gen);

  auto* t = app.add_subcommand("train", "Train a model");
  add_common(t, tr);
  add_seed(t, tr);
  t->add_option("--resume", resume, "Resume from a checkpoint")->check(CLI::ExistingFile);
  t->add_flag("--verbose", verbose, "Print progress to stderr");

  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint (overall, single- and multi-object splits)");
  add_common(e, ev);
  add_seed(e, ev);
  e->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--data", eval_args.data, "Dataset folder (default: the config's held-out set)");
  e->add_flag("--force", eval_args.force, "Accept a checkpoint whose architecture fingerprint differs");
  e->add_option("--bins", eval_args.bins, "Reliability bins for ECE")->check(CLI::PositiveNumber);

  auto* c = app.add_subcommand("calibrate", "Reliability diagram (CSV + SVG) and ECE of a checkpoint");
  add_common(c, cal);
  add_seed(c, cal);
  c->add_option("--checkpoint", cal_args.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  c->add_option("--data", cal_args.data, "Dataset folder (default: the config's held-out set)");
  c->add_flag("--force", cal_args.force, "Accept a checkpoint whose architecture fingerprint differs");
  c->add_option("--bins", cal_args.bins, "Number of bins")->check(CLI::PositiveNumber);
  c->add_option("--source", cal_args.source, "Probability map: dirichlet or final")
      ->check(CLI::IsMember({"dirichlet", "final"}));

  auto* a = app.add_subcommand("ablate", "Train and evaluate with modules disabled");
  add_common(a, abl);
  add_seed(a, abl);
  a->add_option("--disable", disable, "Module to disable: rgde, uaed, ega, barm, deformable, additive, all")
      ->required()
      ->check(CLI::IsMember(ablation_names()));
  a->add_option("--bins", ablate_bins, "Reliability bins for ECE")->check(CLI::PositiveNumber);

  auto* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suites");
  gc->add_option("--seed", grad_seed, "Random seed");
  gc->add_option("--points", grad_points, "Coordinates per suite")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << "error: " << err.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    std::cerr << (sub ? sub->help() : app.help());
    return 2;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr, resume, verbose);
    if (*e) return cmd_eval(ev, eval_args);
    if (*c) return cmd_calibrate(cal, cal_args);
    if (*a) return cmd_ablate(abl, disable, ablate_bins);
    if (*gc) return cmd_gradcheck(grad_seed, grad_points);
  } catch (const TrainingDiverged& err) {
    std::cerr << "training aborted: " << err.what() << "\n";
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
