#include "evircod/evaluation.hpp"

#include <filesystem>
#include <fstream>

#include "evircod/errors.hpp"
#include "json.hpp"

namespace evircod {

namespace fs = std::filesystem;

namespace {

metrics::Plane plane_of(const Tensor& map, int h, int w) {
  Tensor m = map;
  if (m.size(2) != h || m.size(3) != w) m = resize_bilinear(m, h, w);
  auto v = m.data();
  return metrics::Plane(h, w, std::vector<double>(v.begin(), v.end()));
}

metrics::Plane plane_of(const data::Image& img) { return metrics::Plane(img.height, img.width, img.values); }

}  // namespace

Predictor model_predictor(EviRcod& model, int max_references) {
  return [&model, max_references](const data::Sample& s) {
    NoGradGuard guard;
    model.set_training(false);
    data::Batch batch = data::make_batch({s}, model.config().image_size, max_references);
    ModelOutput out = model.forward(batch);
    Prediction p;
    p.final = plane_of(out.prediction, s.gt.height, s.gt.width);
    if (out.decoder.dirichlet.prob.defined()) p.dirichlet = plane_of(out.decoder.dirichlet.prob, s.gt.height, s.gt.width);
    return p;
  };
}

Predictor oracle_predictor() {
  return [](const data::Sample& s) {
    Prediction p;
    p.final = plane_of(s.gt);
    p.dirichlet = p.final;
    return p;
  };
}

EvalReport evaluate(const data::Dataset& dataset, const Predictor& predictor, int n_bins) {
  std::vector<metrics::Plane> all_p, all_g, single_p, single_g, multi_p, multi_g;
  EvalReport report;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    data::Sample s;
    try {
      s = dataset.get(i);
    } catch (const DataError& e) {
      report.failures.push_back(dataset.id(i) + ": " + e.what());
      continue;
    }
    Prediction p = predictor(s);
    metrics::Plane g = plane_of(s.gt);
    const bool multi = data::count_components(s.gt) >= 2;
    (multi ? multi_p : single_p).push_back(p.final);
    (multi ? multi_g : single_g).push_back(g);
    all_p.push_back(std::move(p.final));
    all_g.push_back(std::move(g));
  }
  report.overall = metrics::evaluate(all_p, all_g, n_bins, "overall");
  report.single = metrics::evaluate(single_p, single_g, n_bins, "single");
  report.multi = metrics::evaluate(multi_p, multi_g, n_bins, "multi");
  return report;
}

metrics::Calibration calibration_report(const data::Dataset& dataset, const Predictor& predictor, int n_bins,
                                        CalibrationSource source) {
  std::vector<metrics::Plane> preds, gts;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    data::Sample s;
    try {
      s = dataset.get(i);
    } catch (const DataError&) {
      continue;
    }
    Prediction p = predictor(s);
    const bool use_dirichlet = source == CalibrationSource::dirichlet && !p.dirichlet.values.empty();
    preds.push_back(use_dirichlet ? std::move(p.dirichlet) : std::move(p.final));
    gts.push_back(plane_of(s.gt));
  }
  return metrics::ece(preds, gts, n_bins);
}

void write_report(const std::string& dir, const EvalReport& report, const RunInfo& info) {
  fs::create_directories(dir);
  const std::vector<metrics::MetricsReport> parts{report.overall, report.single, report.multi};
  std::ofstream txt(fs::path(dir) / "report.txt");
  for (const auto& [k, v] : info) txt << "run." << k << "=" << v << "\n";
  txt << metrics::to_text(parts);
  nlohmann::json doc = nlohmann::json::parse(metrics::to_json(parts));
  nlohmann::json run = nlohmann::json::object();
  for (const auto& [k, v] : info) run[k] = v;
  doc["run"] = run;
  std::ofstream(fs::path(dir) / "report.json") << doc.dump(2) << "\n";
}

void write_calibration(const std::string& dir, const metrics::Calibration& calibration, const std::string& title,
                       const RunInfo& info) {
  fs::create_directories(dir);
  std::ofstream(fs::path(dir) / "reliability.csv") << metrics::bins_csv(calibration.bins);
  std::ofstream(fs::path(dir) / "reliability.svg") << metrics::reliability_svg(calibration, title);
  nlohmann::json doc{{"ece", calibration.ece}, {"pixels", calibration.total}, {"bins", calibration.bins.size()}};
  nlohmann::json run = nlohmann::json::object();
  for (const auto& [k, v] : info) run[k] = v;
  doc["run"] = run;
  std::ofstream(fs::path(dir) / "calibration.json") << doc.dump(2) << "\n";
}

}  // namespace evircod
