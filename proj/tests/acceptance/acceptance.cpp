#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "evircod/barm.hpp"
#include "evircod/evaluation.hpp"
#include "evircod/evidential.hpp"
#include "evircod/metrics.hpp"
#include "evircod/ops.hpp"
#include "evircod/rgde.hpp"
#include "evircod/run_config.hpp"
#include "evircod/special.hpp"
#include "evircod/trainer.hpp"
#include "evircod/uaed.hpp"
#include "metric_oracles.hpp"

using namespace evircod;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (double& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Runs a command, returns its exit status and captures stdout.
int run(const std::string& cmd, std::string* out = nullptr) {
  FILE* p = popen((cmd + " 2>&1").c_str(), "r");
  if (!p) return -1;
  char buf[512];
  std::string text;
  while (std::fgets(buf, sizeof buf, p)) text += buf;
  const int status = pclose(p);
  if (out) *out = text;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<double> csv_totals(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  std::vector<double> totals;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    for (int i = 0; i < 4 && std::getline(ss, cell, ','); ++i) {
      if (i == 3) totals.push_back(std::stod(cell));
    }
  }
  return totals;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- 1
Outcome dirichlet_invariants() {
  const auto t0 = std::chrono::steady_clock::now();
  const int n = 100000;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> d(0.0, 100.0);
  std::vector<double> ev(2 * static_cast<std::size_t>(n));
  for (double& v : ev) v = d(rng);
  // Include the corners of the evidence box.
  const double corners[4][2] = {{0, 0}, {0, 100}, {100, 0}, {100, 100}};
  for (int k = 0; k < 4; ++k) ev[static_cast<std::size_t>(k)] = corners[k][0], ev[static_cast<std::size_t>(n + k)] = corners[k][1];

  evidential::UncertaintyWeights w;
  auto field = evidential::complete(evidential::evidence_to_dirichlet(Tensor(Shape{1, 2, 1, n}, ev)), w);
  std::vector<double> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % 2;
  Tensor nll = evidential::evidential_nll(field, Tensor(Shape{1, 1, 1, n}, labels));

  int bad = 0;
  double min_nll = 1e300, max_var = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(i);
    const double a0 = field.alpha.data()[j], a1 = field.alpha.data()[static_cast<std::size_t>(n) + j];
    const double S = field.strength.data()[j], P = field.prob.data()[j];
    const double vac = 2.0 / S, var = a0 * a1 / (S * S * (S + 1.0));
    const auto px = evidential::dirichlet_pixel(ev[j], ev[static_cast<std::size_t>(n) + j]);
    const bool ok = a0 >= 1.0 && a1 >= 1.0 && S >= 2.0 && P > 0.0 && P < 1.0 && vac > 0.0 && vac <= 1.0 &&
                    var > 0.0 && var <= 1.0 / 12.0 && px.vacuity > 0.0 && px.vacuity <= 1.0 && px.variance > 0.0 &&
                    px.variance <= 1.0 / 12.0 && nll.data()[j] > 0.0 &&
                    evidential::pixel_nll(px.alpha0, px.alpha1, i % 2) > 0.0;
    bad += !ok;
    min_nll = std::min(min_nll, nll.data()[j]);
    max_var = std::max(max_var, var);
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < 10.0, std::to_string(n) + " pairs, violations=" + std::to_string(bad) +
                                       ", min NLL=" + fmt("%.3g", min_nll) + ", max variance=" +
                                       fmt("%.6f", max_var) + ", " + fmt("%.2f", secs) + " s (limit 10 s)"};
}

// ---------------------------------------------------------------- 2
Outcome digamma_accuracy() {
  double worst = 0.0;
  for (double x : {0.5, 1.0, 2.0, 10.0, 100.0}) worst = std::max(worst, std::fabs(digamma(x + 1) - digamma(x) - 1.0 / x));
  const double psi1 = std::fabs(digamma(1.0) - (-0.5772156649));
  return {worst <= 1e-10 && psi1 <= 1e-10,
          "max recurrence error=" + fmt("%.3g", worst) + ", |psi(1) + 0.5772156649|=" + fmt("%.3g", psi1)};
}

// ---------------------------------------------------------------- 3
Outcome gradient_suites(const std::string& cli) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string out;
  const int code = run("\"" + cli + "\" gradcheck --seed 1 --points 100", &out);
  const double secs = seconds_since(t0);
  int pass = 0, fail = 0;
  std::stringstream ss(out);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.rfind("PASS ", 0) == 0) ++pass;
    if (line.rfind("FAIL ", 0) == 0) ++fail;
  }
  std::cout << out;
  return {code == 0 && fail == 0 && pass == 5 && secs < 120.0,
          "gradcheck exit=" + std::to_string(code) + ", suites passed=" + std::to_string(pass) + "/5, " +
              fmt("%.2f", secs) + " s (limit 120 s)"};
}

// ---------------------------------------------------------------- 4
Outcome degeneracy() {
  std::mt19937_64 rng(4);
  nn::Rng init(4);
  bool deform = true;
  rgde::DeformableEncoder enc(16, 4, 32, init);
  Tensor x = random_tensor({2, 16, 16}, rng);
  const Tensor standard = enc.standard_attention(x);
  for (DeformableMode mode : {DeformableMode::spatial, DeformableMode::additive}) {
    rgde::DeformableOptions o;
    o.gamma = 0.0;
    o.mode = mode;
    deform = deform && bit_equal(enc.deformable_attention(x, o), standard);
  }

  uaed::EvidenceGuidedAttention ega(8, 16, 8, init);
  for (double& v : ega.w_u().data_mut()) v = 0.0;
  Tensor q = random_tensor({2, 9, 8}, rng), ctx = random_tensor({2, 9, 16}, rng), c = random_tensor({2, 9}, rng, 0, 1);
  const bool ega_ok = bit_equal(ega.forward(q, ctx, c), ega.standard(q, ctx));

  barm::DualBranch branch(8, init);
  for (double& v : branch.attn_out().weight().data_mut()) v = 0.0;
  for (double& v : branch.attn_out().bias().data_mut()) v = -1e4;
  Tensor logits = random_tensor({2, 1, 12, 12}, rng, -4, 4), edge = random_tensor({2, 1, 12, 12}, rng);
  barm::RefinementTriple t = branch.forward(logits, edge);
  const Tensor sp = sigmoid(logits);
  bool gate_closed = true;
  for (double g : t.gate.data()) gate_closed = gate_closed && g == 0.0;
  const bool barm_ok =
      gate_closed && bit_equal(t.refined, sp) &&
      bit_equal(barm::selective_refine(logits, Tensor(logits.shape(), 0.0), random_tensor({2, 1, 12, 12}, rng)), sp);

  return {deform && ega_ok && barm_ok, std::string("deformable(gamma=0)==standard: ") + (deform ? "yes" : "no") +
                                           ", EGA(w_u=0)==standard: " + (ega_ok ? "yes" : "no") +
                                           ", closed gate==sigmoid(logits): " + (barm_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------- 5
Outcome metric_oracles() {
  using metrics::Plane;
  std::mt19937_64 rng(99);
  double worst_mae = 0.0, worst_wf = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Plane gt = testing::random_mask(16, 16, rng);
    Plane pred = testing::random_plane(16, 16, rng);
    if (trial % 3 == 0)
      for (std::size_t i = 0; i < pred.size(); ++i) pred.values[i] = 0.6 * gt.values[i] + 0.4 * pred.values[i];
    double direct = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) direct += std::fabs(pred.values[i] - gt.values[i]);
    worst_mae = std::max(worst_mae, std::fabs(metrics::mae(pred, gt) - direct / 256.0));
    worst_wf = std::max(worst_wf, std::fabs(metrics::weighted_f_measure(pred, gt) - testing::brute_weighted_f(pred, gt, 0.3)));
  }

  double worst_perfect = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    Plane gt = testing::random_mask(16, 16, rng);
    worst_perfect = std::max({worst_perfect, std::fabs(metrics::s_measure(gt, gt) - 1.0),
                              std::fabs(metrics::adaptive_e_measure(gt, gt) - 1.0)});
  }

  auto build = [](int correct_low, int correct_high) {
    Plane pred(1, 200), gt(1, 200);
    for (int i = 0; i < 100; ++i) {
      pred.values[static_cast<std::size_t>(i)] = 0.7;
      gt.values[static_cast<std::size_t>(i)] = i < correct_low ? 1.0 : 0.0;
      pred.values[static_cast<std::size_t>(100 + i)] = 0.9;
      gt.values[static_cast<std::size_t>(100 + i)] = i < correct_high ? 1.0 : 0.0;
    }
    return std::make_pair(pred, gt);
  };
  auto [p1, g1] = build(70, 90);
  auto [p2, g2] = build(50, 90);
  const double e1 = std::fabs(metrics::ece({p1}, {g1}, 10).ece - 0.0);
  const double e2 = std::fabs(metrics::ece({p2}, {g2}, 10).ece - 0.1);

  const bool ok = worst_mae <= 1e-6 && worst_wf <= 1e-6 && worst_perfect <= 1e-6 && e1 <= 1e-9 && e2 <= 1e-9;
  return {ok, "MAE err=" + fmt("%.2g", worst_mae) + ", wF err=" + fmt("%.2g", worst_wf) +
                  ", perfect S/E err=" + fmt("%.2g", worst_perfect) + ", ECE case errs=" + fmt("%.2g", e1) + "/" +
                  fmt("%.2g", e2)};
}

// ---------------------------------------------------------------- 6, 7
struct ToyRun {
  std::unique_ptr<EviRcod> model;
  RunConfig cfg;
  std::vector<LossRow> log;
  double seconds = 0.0;
};

ToyRun train_toy(std::uint64_t seed) {
  ToyRun r;
  r.cfg = profile_config("toy");
  r.cfg.seed = seed;
  TrainOptions o;
  o.write_files = false;
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult t = train(r.cfg, o);
  r.seconds = seconds_since(t0);
  r.model = std::move(t.model);
  r.log = std::move(t.log);
  return r;
}

Outcome overfit(const ToyRun& run) {
  std::int64_t params = 0;
  for (const auto& p : run.model->parameters()) params += p.tensor->numel();
  const data::Dataset train_set = training_set(run.cfg);
  EvalReport r = evaluate(train_set, model_predictor(*run.model, run.cfg.data.max_references));
  const double ratio = run.log.front().total / run.log.back().total;
  const bool shape_ok = params <= 300000 && run.cfg.model.image_size == 64 && run.cfg.optim.batch == 4 &&
                        train_set.size() == 20 && run.log.size() <= 500;
  const bool ok = shape_ok && r.overall.mae <= 0.05 && r.overall.weighted_f >= 0.90 && run.seconds < 600.0;
  return {ok, std::to_string(params) + " params, " + std::to_string(run.log.size()) + " steps, train MAE=" +
                  fmt("%.4f", r.overall.mae) + " (<= 0.05), wF=" + fmt("%.4f", r.overall.weighted_f) +
                  " (>= 0.90), loss step1/step" + std::to_string(run.log.size()) + "=" + fmt("%.1f", ratio) +
                  "x, " + fmt("%.0f", run.seconds) + " s (limit 600 s)"};
}

double referring_gap(const ToyRun& run, double* correct, double* shuffled) {
  data::SynthConfig s = run.cfg.data.synth;
  s.image_size = run.cfg.model.image_size;
  auto samples = data::synth_generate(s, run.cfg.seed);
  auto predictor = model_predictor(*run.model, run.cfg.data.max_references);
  *correct = evaluate(data::Dataset::from_samples(samples), predictor).overall.weighted_f;
  *shuffled = evaluate(data::Dataset::from_samples(data::shuffle_references(samples, run.cfg.seed + 17)), predictor)
                  .overall.weighted_f;
  return *correct - *shuffled;
}

// ---------------------------------------------------------------- 8
Outcome calibration_direction(int seeds, double noise) {
  int wins = 0, dirichlet_wins = 0;
  for (int s = 1; s <= seeds; ++s) {
    double e[2], d[2];
    for (int k = 0; k < 2; ++k) {
      RunConfig c = profile_config("toy");
      c.seed = static_cast<std::uint64_t>(s);
      c.data.synth.label_noise = noise;
      c.data.eval_label_noise = noise;
      c.loss.evidence_term = k == 0 ? losses::EvidenceTerm::evidential : losses::EvidenceTerm::bce;
      TrainOptions o;
      o.write_files = false;
      TrainResult t = train(c, o);
      const data::Dataset held_out = evaluation_set(c);
      const Predictor predictor = model_predictor(*t.model, c.data.max_references);
      e[k] = evaluate(held_out, predictor).overall.ece;
      d[k] = calibration_report(held_out, predictor, 10, CalibrationSource::dirichlet).ece;
    }
    wins += e[0] <= e[1];
    dirichlet_wins += d[0] <= d[1];
    std::printf("  seed %d: ECE evidential=%.4f bce=%.4f%s | Dirichlet-probability ECE evidential=%.4f bce=%.4f\n", s,
                e[0], e[1], e[0] <= e[1] ? " (evidential <= bce)" : "", d[0], d[1]);
    std::fflush(stdout);
  }
  const int need = (7 * seeds + 9) / 10;
  return {wins >= need, "evidential ECE <= BCE twin ECE in " + std::to_string(wins) + "/" + std::to_string(seeds) +
                            " runs (need " + std::to_string(need) + "); on the Dirichlet probability: " +
                            std::to_string(dirichlet_wins) + "/" + std::to_string(seeds) + " (not gated)"};
}

// ---------------------------------------------------------------- 9
Outcome determinism(const std::string& cli, const fs::path& work) {
  const fs::path cfg = work / "det.cfg";
  std::ofstream(cfg) << "profile = toy\n[optim]\nepochs = 4\ncheckpoint_every = 2\n";
  const std::string base = "\"" + cli + "\" train --config \"" + cfg.string() + "\" --seed 7 --out ";
  const fs::path a = work / "det_a", b = work / "det_b", c = work / "det_c";
  std::string log;
  const int ra = run(base + "\"" + a.string() + "\"", &log);
  const int rb = run(base + "\"" + b.string() + "\"");
  const std::string la = slurp(a / "loss_log.csv"), lb = slurp(b / "loss_log.csv");
  const bool identical = ra == 0 && rb == 0 && !la.empty() && la == lb;

  const int rc = run(base + "\"" + c.string() + "\" --resume \"" + (a / "checkpoint_epoch2.bin").string() + "\"");
  const auto full = csv_totals(a / "loss_log.csv");
  const auto resumed = csv_totals(c / "loss_log.csv");
  double diff = 1e300;
  if (rc == 0 && full.size() == 20 && resumed.size() == 10) {
    diff = 0.0;
    for (std::size_t i = 0; i < resumed.size(); ++i) diff = std::max(diff, std::fabs(resumed[i] - full[10 + i]));
  }
  if (ra != 0) std::cout << log;
  return {identical && diff <= 1e-6, std::string("two runs bit-identical: ") + (identical ? "yes" : "no") +
                                         " (" + std::to_string(full.size()) + " steps), resume max |dloss|=" +
                                         (diff < 1e300 ? fmt("%.3g", diff) : std::string("n/a")) + " (<= 1e-6)"};
}

// ---------------------------------------------------------------- 10
Outcome paper_shapes() {
  RunConfig c = profile_config("paper");
  nn::Rng rng(1);
  rgde::PatchEmbed embed(c.model.model_channels, c.model.embed_dim, c.model.patch, rng);
  Tensor tokens = embed.forward(Tensor(Shape{1, c.model.model_channels, c.model.grid, c.model.grid}, 0.1));
  const int n = c.model.token_side() * c.model.token_side();
  const bool ok = n == 484 && c.model.embed_dim == 1024 && tokens.shape() == Shape{1, 484, 1024} &&
                  c.model.image_size == 352;
  return {ok, "image " + std::to_string(c.model.image_size) + ", grid " + std::to_string(c.model.grid) + ", patch " +
                  std::to_string(c.model.patch) + " -> tokens " + to_string(tokens.shape()) + " (N=" +
                  std::to_string(n) + ", D=" + std::to_string(c.model.embed_dim) + ")"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string cli;
  std::string workdir = (fs::temp_directory_path() / "evircod_acceptance").string();
  std::vector<int> only;
  int calib_seeds = 10;
  double calib_noise = 0.15;
  app.add_option("--cli", cli, "Path of the evircod executable")->required();
  app.add_option("--workdir", workdir, "Scratch directory");
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--calib-seeds", calib_seeds, "Seeded runs for the calibration criterion");
  app.add_option("--calib-noise", calib_noise, "Boundary label-noise rate for the calibration criterion");
  CLI11_PARSE(app, argc, argv);

  unsetenv("EVIRCOD_OUT_DIR");
  fs::remove_all(workdir);
  fs::create_directories(workdir);
  const std::set<int> selected(only.begin(), only.end());
  auto want = [&](int k) { return selected.empty() || selected.count(k) > 0; };

  int failures = 0;
  auto report = [&](int k, const std::string& name, const Outcome& o) {
    std::printf("%s [%d] %s: %s\n", o.passed ? "PASS" : "FAIL", k, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failures += !o.passed;
  };
  auto guarded = [&](int k, const std::string& name, const std::function<Outcome()>& f) {
    if (!want(k)) return;
    try {
      report(k, name, f());
    } catch (const std::exception& e) {
      report(k, name, {false, std::string("exception: ") + e.what()});
    }
  };

  guarded(1, "dirichlet invariants", dirichlet_invariants);
  guarded(2, "digamma accuracy", digamma_accuracy);
  guarded(3, "gradient suites", [&] { return gradient_suites(cli); });
  guarded(4, "degeneracy identities", degeneracy);
  guarded(5, "metric oracle equivalence", metric_oracles);

  std::vector<ToyRun> toy;
  auto toy_run = [&](std::size_t i) -> ToyRun& {
    while (toy.size() <= i) toy.push_back(train_toy(toy.size() + 1));
    return toy[i];
  };
  guarded(6, "overfit", [&] { return overfit(toy_run(0)); });
  guarded(7, "referring signal", [&] {
    int pass = 0;
    std::string detail;
    for (std::size_t i = 0; i < 3; ++i) {
      double correct = 0.0, shuffled = 0.0;
      const double gap = referring_gap(toy_run(i), &correct, &shuffled);
      pass += gap >= 0.10;
      detail += (i ? "; " : "") + std::string("seed ") + std::to_string(i + 1) + ": wF " + fmt("%.3f", correct) +
                " vs shuffled " + fmt("%.3f", shuffled) + " (gap " + fmt("%.3f", gap) + ")";
    }
    return Outcome{pass >= 2, std::to_string(pass) + "/3 seeds with gap >= 0.10; " + detail};
  });
  toy.clear();
  guarded(8, "calibration direction", [&] { return calibration_direction(calib_seeds, calib_noise); });
  guarded(9, "determinism", [&] { return determinism(cli, workdir); });
  guarded(10, "paper-profile shapes", paper_shapes);

  fs::remove_all(workdir);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
