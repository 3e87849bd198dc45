#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "evircod/checkpoint.hpp"
#include "evircod/errors.hpp"
#include "evircod/evaluation.hpp"
#include "evircod/optim.hpp"
#include "evircod/run_config.hpp"
#include "evircod/suites.hpp"
#include "evircod/trainer.hpp"
#include "evircod/uaed.hpp"

using namespace evircod;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("evircod_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small and fast: 32 px images, 4 samples, batch 2.
RunConfig tiny(const fs::path& out) {
  return parse_run_config(
      "seed = 3\n"
      "[model]\nimage_size = 32\nchannels = 8, 8, 8, 8\nref_channels = 8\nmodel_channels = 8\n"
      "grid = 8\npatch = 2\nembed_dim = 8\nheads = 2\nffn_hidden = 16\n"
      "evidence_hidden = 8\nuncertainty_hidden = 8\nbarm_hidden = 4\n"
      "[optim]\nepochs = 2\nbatch = 2\ncheckpoint_every = 1\n"
      "[data]\ncount = 4\nmin_radius = 4\nmax_radius = 6\neval_count = 4\n",
      {"out_dir=" + out.string()});
}

}  // namespace

TEST_CASE("config: canonical text round trips and fingerprints the model section") {
  RunConfig c = parse_run_config("seed = 9\n[model]\ngamma = 0.25\n[optim]\nbase_lr = 0.002\n");
  CHECK(c.seed == 9);
  CHECK(c.model.gamma == doctest::Approx(0.25));
  CHECK(c.optim.base_lr == doctest::Approx(0.002));
  const std::string text = canonical_text(c);
  RunConfig back = parse_run_config(text);
  CHECK(canonical_text(back) == text);
  CHECK(fingerprint(back) == fingerprint(c));

  RunConfig other = c;
  other.optim.base_lr = 0.5;
  CHECK(fingerprint(other) == fingerprint(c));
  other.model.embed_dim += 8;
  CHECK(fingerprint(other) != fingerprint(c));
}

TEST_CASE("config: overrides, comments, errors") {
  RunConfig c = parse_run_config("# comment\n[model]\nheads = 2\n", {"model.heads=8", "seed=42", "loss.evidence_term=bce"});
  CHECK(c.model.heads == 8);
  CHECK(c.seed == 42);
  CHECK(c.loss.evidence_term == losses::EvidenceTerm::bce);
  CHECK_THROWS_AS(parse_run_config("[model]\nno_such_key = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"optim.base_lr=-1"}), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"optim.epochs=0"}), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"model.heads=abc"}), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"profile=huge"}), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("config: profiles") {
  RunConfig toy = profile_config("toy");
  CHECK(toy.model.image_size == 64);
  CHECK(toy.optim.batch == 4);
  CHECK(toy.data.synth.count * toy.optim.epochs / toy.optim.batch == 500);
  RunConfig paper = profile_config("paper");
  CHECK(paper.model.token_side() * paper.model.token_side() == 484);
  CHECK(paper.model.embed_dim == 1024);
  CHECK(paper.optim.base_lr == doctest::Approx(1e-4));
  CHECK(paper.optim.epochs == 150);
  CHECK(paper.optim.backbone_lr_scale == doctest::Approx(0.1));
  CHECK(parse_run_config("profile = paper\n").model.embed_dim == 1024);
}

TEST_CASE("config: ablations compose to the baseline topology") {
  RunConfig c = profile_config("toy");
  for (const auto& m : {"rgde", "uaed", "ega", "barm"}) apply_ablation(c, m);
  RunConfig all = profile_config("toy");
  apply_ablation(all, "all");
  CHECK(model_text(all) == model_text(c));
  CHECK_FALSE(all.model.enable_rgde);
  CHECK_FALSE(all.model.enable_uaed);
  CHECK_FALSE(all.model.enable_barm);
  CHECK_THROWS_AS(apply_ablation(c, "nothing"), ConfigError);

  RunConfig d = profile_config("toy");
  apply_ablation(d, "deformable");
  CHECK(d.model.gamma == 0.0);

  ModelConfig m = all.model;
  m.image_size = 32;
  m.channels = {8, 8, 8, 8};
  m.ref_channels = m.model_channels = 8;
  m.grid = 8;
  m.patch = 2;
  m.embed_dim = 8;
  m.heads = 2;
  m.ffn_hidden = 16;
  nn::Rng rng(1);
  EviRcod model(m, rng);
  data::SynthConfig s;
  s.image_size = 32;
  s.count = 2;
  s.min_radius = 4;
  s.max_radius = 6;
  ModelOutput out = model.forward(data::make_batch(data::synth_generate(s, 1), 32));
  CHECK_FALSE(out.descriptor.defined());
  CHECK(out.refinement.empty());
  CHECK(out.prediction.shape() == Shape{2, 1, 32, 32});
  losses::LossReport r = model.loss(out, data::make_batch(data::synth_generate(s, 1), 32).gt, all.loss);
  CHECK(r.evidential == 0.0);
  CHECK(r.structural_refined.empty());
}

TEST_CASE("config: output directory environment override") {
  RunConfig c = profile_config("toy");
  c.out_dir = "runs/x";
  unsetenv("EVIRCOD_OUT_DIR");
  CHECK(resolve_out_dir(c) == "runs/x");
  setenv("EVIRCOD_OUT_DIR", "/tmp/elsewhere", 1);
  CHECK(resolve_out_dir(c) == "/tmp/elsewhere");
  unsetenv("EVIRCOD_OUT_DIR");
}

TEST_CASE("optim: cosine endpoints") {
  CHECK(optim::cosine_lr(0.1, 0.0, 0, 100) == 0.1);
  CHECK(std::abs(optim::cosine_lr(0.1, 0.0, 100, 100)) <= 1e-15);
  CHECK(optim::cosine_lr(0.1, 0.01, 100, 100) == doctest::Approx(0.01));
  CHECK(optim::cosine_lr(0.1, 0.0, 50, 100) == doctest::Approx(0.05));
  CHECK(std::abs(optim::cosine_lr(0.1, 0.0, 150, 100)) <= 1e-15);
}

TEST_CASE("optim: adam step, backbone scale and untouched parameters") {
  nn::Rng rng(1);
  nn::Linear a(1, 1, rng), b(1, 1, rng);
  auto params = a.parameters();
  auto pb = b.parameters();
  for (auto& p : pb) p.group = nn::ParamGroup::backbone;
  params.insert(params.end(), pb.begin(), pb.end());
  std::vector<double> before;
  for (auto& p : params) before.push_back(p.tensor->data()[0]);

  optim::AdamOptions o;
  o.lr = 0.01;
  o.backbone_scale = 0.1;
  optim::Adam opt(params, o);
  // Gradient only on a's weight and b's weight.
  params[0].tensor->node()->grad = {1.0};
  params[2].tensor->node()->grad = {-2.0};
  opt.step();
  // First Adam step moves by lr * sign(g).
  CHECK(params[0].tensor->data()[0] == doctest::Approx(before[0] - 0.01).epsilon(1e-9));
  CHECK(params[2].tensor->data()[0] == doctest::Approx(before[2] + 0.001).epsilon(1e-9));
  CHECK(params[1].tensor->data()[0] == before[1]);
  CHECK(params[3].tensor->data()[0] == before[3]);

  opt.zero_grad();
  CHECK(params[0].tensor->grad().empty());
  const auto state = opt.state();
  optim::Adam copy(params, o);
  copy.load_state(state);
  CHECK(copy.state() == state);
  CHECK(copy.steps() == 1);
}

TEST_CASE("checkpoint: round trip, corruption, truncation") {
  TempDir tmp("ckpt");
  Checkpoint c;
  c.fingerprint = 0x1234abcdULL;
  c.epoch = 3;
  c.step = 15;
  c.config_text = "seed = 1\n";
  c.rng_state = "1 2 3";
  c.parameters = {{"w", {1.0, -2.5, 1e-300}}, {"b", {}}};
  c.buffers = {{"mean", {0.25}}};
  c.optimizer = {1.0, 0.5};
  const auto path = (tmp.path / "c.bin").string();
  save_checkpoint(path, c);
  Checkpoint d = load_checkpoint(path);
  CHECK(d.fingerprint == c.fingerprint);
  CHECK(d.epoch == 3);
  CHECK(d.step == 15);
  CHECK(d.config_text == c.config_text);
  CHECK(d.rng_state == c.rng_state);
  CHECK(d.parameters == c.parameters);
  CHECK(d.buffers == c.buffers);
  CHECK(d.optimizer == c.optimizer);

  std::string bytes = slurp(path);
  {
    std::string bad = bytes;
    bad[bad.size() / 2] ^= 0x5a;
    std::ofstream(path, std::ios::binary) << bad;
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
  }
  {
    std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 5);
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
  }
  {
    std::string bad = bytes;
    bad[8] = 9;  // version field
    std::ofstream(path, std::ios::binary) << bad;
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
  }
  CHECK_THROWS_AS(load_checkpoint((tmp.path / "missing.bin").string()), DataError);
}

TEST_CASE("train: smoke run writes log and checkpoints; model reloads") {
  TempDir tmp("smoke");
  unsetenv("EVIRCOD_OUT_DIR");
  RunConfig cfg = tiny(tmp.path);
  cfg.optim.epochs = 1;
  TrainResult r = train(cfg);
  CHECK(r.log.size() == 2);
  CHECK(fs::exists(r.final_checkpoint));
  CHECK(fs::exists(tmp.path / "checkpoint_epoch1.bin"));
  CHECK(fs::exists(tmp.path / "config.cfg"));
  const std::string log = slurp(r.log_path);
  CHECK(log.rfind(loss_csv_header() + "\n", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 3);
  for (const auto& row : r.log) CHECK(std::isfinite(row.total));

  Checkpoint ckpt = load_checkpoint(r.final_checkpoint);
  CHECK(ckpt.epoch == 1);
  CHECK(ckpt.step == 2);
  auto model = load_model(ckpt, &cfg);
  data::Dataset ds = evaluation_set(cfg);
  Prediction a = model_predictor(*model)(ds.get(0));
  Prediction b = model_predictor(*r.model)(ds.get(0));
  CHECK(a.final.values == b.final.values);
  CHECK(a.dirichlet.values == b.dirichlet.values);

  RunConfig other = cfg;
  other.model.heads = 4;
  CHECK_THROWS_AS(load_model(ckpt, &other), ConfigError);
  CHECK_NOTHROW(load_model(ckpt, &other, true));
}

TEST_CASE("train: identical seeds give bit-identical logs; resume reproduces the next step") {
  TempDir a("det_a"), b("det_b"), c("det_c");
  unsetenv("EVIRCOD_OUT_DIR");
  TrainResult ra = train(tiny(a.path));
  TrainResult rb = train(tiny(b.path));
  CHECK(slurp(ra.log_path) == slurp(rb.log_path));

  RunConfig seeded = tiny(c.path);
  seeded.seed = 4;
  TrainResult rc = train(seeded);
  CHECK(slurp(rc.log_path) != slurp(ra.log_path));

  TrainOptions resume;
  resume.resume_from = (a.path / "checkpoint_epoch1.bin").string();
  resume.write_files = false;
  TrainResult rr = train(tiny(a.path), resume);
  REQUIRE(rr.log.size() == 2);
  REQUIRE(ra.log.size() == 4);
  CHECK(rr.log[0].step == 3);
  CHECK(std::abs(rr.log[0].total - ra.log[2].total) <= 1e-6);
  CHECK(std::abs(rr.log[1].total - ra.log[3].total) <= 1e-6);
}

TEST_CASE("train: non-finite loss aborts with diagnostics") {
  TempDir tmp("nan");
  unsetenv("EVIRCOD_OUT_DIR");
  RunConfig cfg = tiny(tmp.path);
  cfg.optim.base_lr = 1e300;
  CHECK_THROWS_AS(train(cfg), TrainingDiverged);
  const std::string diag = slurp(tmp.path / "divergence.txt");
  CHECK(diag.find("non-finite loss at step 2") != std::string::npos);
  CHECK(diag.find(loss_csv_header()) != std::string::npos);
  CHECK(diag.find(" norm=") != std::string::npos);
}

TEST_CASE("evaluate: oracle predictions saturate, splits follow component counts") {
  data::SynthConfig s;
  s.count = 6;
  s.max_objects = 2;
  s.paired = false;
  auto samples = data::synth_generate(s, 5);
  int multi = 0;
  for (const auto& smp : samples) multi += data::count_components(smp.gt) >= 2;
  EvalReport r = evaluate(data::Dataset::from_samples(samples), oracle_predictor());
  CHECK(r.overall.count == 6);
  CHECK(r.multi.count == multi);
  CHECK(r.single.count == 6 - multi);
  CHECK(r.overall.s_measure == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.overall.adaptive_e == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(r.overall.weighted_f == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.overall.mae == 0.0);
  CHECK(r.overall.ece == 0.0);
}

TEST_CASE("evaluate: empty dataset yields an explicit zero-count report") {
  TempDir tmp("empty");
  EvalReport r = evaluate(data::Dataset{}, oracle_predictor());
  CHECK(r.overall.count == 0);
  write_report(tmp.path.string(), r);
  const std::string text = slurp(tmp.path / "report.txt");
  CHECK(text.find("count=0") != std::string::npos);
  CHECK(fs::exists(tmp.path / "report.json"));
}

TEST_CASE("calibration: perfectly calibrated stub, CSV header and SVG") {
  TempDir tmp("calib");
  // Each pixel's confidence equals the empirical accuracy of its bin.
  std::vector<data::Sample> samples(1);
  samples[0].id = "s";
  samples[0].query = data::Image(3, 10, 10, 0.5);
  samples[0].gt = data::Image(1, 10, 10, 0.0);
  for (int i = 0; i < 20; ++i) samples[0].gt.values[i] = 1.0;
  Predictor stub = [](const data::Sample& smp) {
    Prediction p;
    p.final = metrics::Plane(smp.gt.height, smp.gt.width, 0.2);
    return p;
  };
  metrics::Calibration cal =
      calibration_report(data::Dataset::from_samples(samples), stub, 10, CalibrationSource::dirichlet);
  CHECK(std::abs(cal.ece) <= 1e-12);
  write_calibration(tmp.path.string(), cal, "test");
  const std::string csv = slurp(tmp.path / "reliability.csv");
  CHECK(csv.rfind("bin_low,bin_high,mean_conf,acc,count\n", 0) == 0);
  const std::string svg = slurp(tmp.path / "reliability.svg");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("gradient suites pass") {
  for (const auto& r : run_gradient_suites(11, 100)) {
    INFO(r.name);
    CHECK(r.points >= 100);
    CHECK(r.passed);
  }
}
