#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "evircod/data.hpp"
#include "evircod/metrics.hpp"
#include "evircod/model.hpp"

namespace evircod {

/// Probability maps produced for one sample, at the sample's gt resolution.
struct Prediction {
  metrics::Plane final;      // refined scale-1 map (the model output)
  metrics::Plane dirichlet;  // expected Dirichlet probability; empty when the evidential path is off
};

/// Anything that maps a sample to a prediction: the model, or a stub in tests.
using Predictor = std::function<Prediction(const data::Sample&)>;

/// Runs the model in inference mode one sample at a time.
Predictor model_predictor(EviRcod& model, int max_references = 0);

/// Predictor that returns the ground truth itself.
Predictor oracle_predictor();

struct EvalReport {
  metrics::MetricsReport overall;
  metrics::MetricsReport single;  // gt with one connected component
  metrics::MetricsReport multi;   // gt with two or more
  std::vector<std::string> failures;  // items that could not be read
};

/// Metrics in dataset order; the single/multi split follows the number of
/// 8-connected components of each gt mask.
EvalReport evaluate(const data::Dataset& dataset, const Predictor& predictor, int n_bins = 10);

enum class CalibrationSource { final, dirichlet };

/// Reliability bins and ECE of the chosen probability map over the dataset.
/// `dirichlet` falls back to `final` for predictions without one.
metrics::Calibration calibration_report(const data::Dataset& dataset, const Predictor& predictor, int n_bins,
                                        CalibrationSource source);

/// Provenance written alongside reports (seed, fingerprint, checkpoint ...).
using RunInfo = std::vector<std::pair<std::string, std::string>>;

/// Writes report.txt and report.json into `dir`.
void write_report(const std::string& dir, const EvalReport& report, const RunInfo& info = {});
/// Writes reliability.csv, reliability.svg and calibration.json (ECE, pixel
/// count and `info`) into `dir`.
void write_calibration(const std::string& dir, const metrics::Calibration& calibration, const std::string& title,
                       const RunInfo& info = {});

}  // namespace evircod
