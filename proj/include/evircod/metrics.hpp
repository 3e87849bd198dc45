#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Segmentation metrics (structure measure, adaptive E-measure, weighted
// F-measure, MAE) and calibration (ECE with reliability bins).
namespace evircod::metrics {

/// Row-major single-channel map.
struct Plane {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Plane() = default;
  Plane(int h, int w, double fill = 0.0) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}
  Plane(int h, int w, std::vector<double> v);

  std::size_t size() const { return values.size(); }
  double operator()(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  double& operator()(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Mean absolute error.
double mae(const Plane& pred, const Plane& gt);

/// alpha * S_object + (1 - alpha) * S_region; gt is binarized at 0.5.
double s_measure(const Plane& pred, const Plane& gt, double alpha = 0.5);

/// Enhanced-alignment score after binarizing pred at min(2 * mean(pred), 1).
double adaptive_e_measure(const Plane& pred, const Plane& gt);

/// Weighted F-measure with a 7x7 sigma-5 Gaussian dependency kernel and
/// distance-based importance; 0 for an empty gt.
double weighted_f_measure(const Plane& pred, const Plane& gt, double beta2 = 0.3);

/// For every pixel, the raster index of the nearest gt foreground pixel
/// (itself when foreground) and the Euclidean distance to it. Ties go to the
/// smallest raster index.
struct NearestForeground {
  std::vector<std::int64_t> index;
  std::vector<double> distance;
};
NearestForeground nearest_foreground(const Plane& gt);

struct ReliabilityBin {
  double low = 0.0, high = 0.0;
  double mean_conf = 0.0;
  double acc = 0.0;
  std::int64_t count = 0;
};

struct Calibration {
  double ece = 0.0;
  std::vector<ReliabilityBin> bins;
  std::int64_t total = 0;
};

/// Pixel-level calibration: confidence max(p, 1 - p), label [p >= 0.5],
/// n_bins equal-width bins over [0.5, 1]. Throws ConfigError for n_bins < 1.
Calibration ece(const std::vector<Plane>& preds, const std::vector<Plane>& gts, int n_bins = 10);

struct MetricsReport {
  std::string name;  // "overall", "single", "multi" ...
  std::int64_t count = 0;
  double s_measure = 0.0;
  double adaptive_e = 0.0;
  double weighted_f = 0.0;
  double mae = 0.0;
  double ece = 0.0;
  std::vector<ReliabilityBin> reliability_bins;
};

/// Per-image means of S, E, F and MAE plus pooled pixel ECE. An empty input
/// yields a report with count 0 and zero scores.
MetricsReport evaluate(const std::vector<Plane>& preds, const std::vector<Plane>& gts, int n_bins = 10,
                       std::string name = "overall");

// Serialization.
std::string to_text(const std::vector<MetricsReport>& reports);
std::string to_json(const std::vector<MetricsReport>& reports);
std::string bins_csv(const std::vector<ReliabilityBin>& bins);
std::string reliability_svg(const Calibration& c, const std::string& title);

}  // namespace evircod::metrics
