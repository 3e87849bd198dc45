#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "doctest.h"
#include "evircod/errors.hpp"
#include "evircod/metrics.hpp"
#include "metric_oracles.hpp"

using namespace evircod;
using namespace evircod::metrics;
using namespace evircod::testing;

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

// Reference values from the PySODMetrics package (normalize=False). Its
// E-measure divides by N - 1; ours divides by N.
struct RefCase {
  int h, w;
  std::vector<double> pred;
  std::vector<double> gt;
  double s_measure;
  double e_measure_n_minus_1;
};
const std::vector<RefCase> kReferenceCases = {
    {6, 6, {0.253, 0.738, 0.148, 0.535, 0.404, 0.958, 0.938, 0.286, 0.788, 0.397, 0.492, 0.144, 0.375, 0.351, 0.522, 0.573, 0.929, 0.435, 0.191, 0.285, 0.24, 0.457, 0.563, 0.02, 0.546, 0.996, 0.611, 0.678, 0.382, 0.988, 0.409, 0.083, 0.379, 0.291, 0.06, 0.316}, {0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}, 0.40654058581122898, 0.53764965252854313},
    {8, 8, {0.016, 0.012, 0.029, 0.356, 0.118, 0.395, 0.016, 0.294, 0.375, 0.923, 0.794, 0.379, 0.345, 0.14, 0.334, 0.132, 0.398, 0.858, 0.805, 0.176, 0.108, 0.029, 0.278, 0.394, 0.077, 0.245, 0.046, 0.09, 0.248, 0.35, 0.393, 0.068, 0.013, 0.12, 0.009, 0.387, 0.203, 0.244, 0.246, 0.14, 0.154, 0.155, 0.361, 0.148, 0.74, 0.923, 0.761, 0.334, 0.195, 0.136, 0.051, 0.111, 1, 1, 0.852, 0.196, 0.357, 0.032, 0.172, 0.11, 0.862, 0.865, 0.709, 0.237}, {0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 1, 1, 1, 0}, 0.80797227429379359, 1.0158730158730136},
    {5, 5, {0.281, 0.234, 0.459, 0.021, 0.355, 0.486, 0.142, 0.162, 0.421, 0.483, 0.209, 0.174, 0.494, 0.36, 0.016, 0.349, 0.246, 0.383, 0.07, 0.228, 0.275, 0.127, 0.053, 0.333, 0.434}, {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}, 0.72819999999999996, 1.0416666666666667},
    {4, 6, {0.588, 0.631, 0.922, 0.99, 0.747, 0.587, 0.886, 0.783, 0.659, 0.999, 0.833, 0.993, 0.583, 0.937, 0.712, 0.632, 0.532, 0.521, 0.899, 0.908, 0.843, 0.737, 0.524, 0.707}, {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1}, 0.75637499999999991, 0},
    {7, 5, {0.388, 0.427, 0.026, 0.048, 0.25, 0.024, 0.414, 0.17, 0.308, 0.306, 0.977, 0.626, 0.442, 0.397, 0.232, 0.986, 0.879, 0.206, 0.233, 0.32, 1, 0.693, 0.396, 0.261, 0.35, 0.81, 0.626, 1, 0.79, 0.667, 0.784, 0.914, 0.879, 0.916, 0.609}, {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1}, 0.7277230947942257, 0.33262565286285795},
};

}  // namespace

TEST_CASE("mae examples") {
  Plane gt(1, 4, {0, 1, 1, 0});
  CHECK(mae(gt, gt) == 0.0);
  CHECK(mae(Plane(1, 4, 0.5), gt) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(std::fabs(mae(Plane(1, 4, {0.2, 0.8, 0.6, 0.0}), gt) - 0.2) <= 1e-12);
}

TEST_CASE("mae and weighted F-measure match brute-force oracles on random 16x16 instances") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    Plane gt = random_mask(16, 16, rng);
    Plane pred = random_plane(16, 16, rng);
    if (trial % 3 == 0)
      for (std::size_t i = 0; i < pred.size(); ++i) pred.values[i] = 0.6 * gt.values[i] + 0.4 * pred.values[i];
    double direct = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) direct += std::fabs(pred.values[i] - gt.values[i]);
    CHECK(std::fabs(mae(pred, gt) - direct / 256.0) <= 1e-6);
    CHECK(std::fabs(weighted_f_measure(pred, gt) - brute_weighted_f(pred, gt, 0.3)) <= 1e-6);
  }
}

TEST_CASE("weighted F-measure edge cases") {
  std::mt19937_64 rng(3);
  Plane gt = random_mask(16, 16, rng);
  CHECK(std::fabs(weighted_f_measure(gt, gt) - 1.0) <= 1e-6);
  CHECK(std::fabs(weighted_f_measure(Plane(16, 16, 0.0), gt) - brute_weighted_f(Plane(16, 16, 0.0), gt, 0.3)) <= 1e-6);
  CHECK(weighted_f_measure(random_plane(16, 16, rng), Plane(16, 16, 0.0)) == 0.0);
}

TEST_CASE("nearest foreground search prefers the smallest raster index") {
  Plane gt(3, 3, {1, 0, 1, 0, 0, 0, 0, 0, 0});
  NearestForeground nf = nearest_foreground(gt);
  CHECK(nf.index[1] == 0);  // equidistant from 0 and 2
  CHECK(nf.index[4] == 0);
  CHECK(nf.distance[4] == doctest::Approx(std::sqrt(2.0)));
  CHECK(nf.index[2] == 2);
  CHECK(nf.distance[2] == 0.0);
}

TEST_CASE("S-measure and E-measure match the reference implementation") {
  for (const auto& c : kReferenceCases) {
    Plane pred(c.h, c.w, c.pred), gt(c.h, c.w, c.gt);
    INFO(c.h << "x" << c.w);
    CHECK(std::fabs(s_measure(pred, gt) - c.s_measure) <= 1e-9);
    const double n = static_cast<double>(c.h) * c.w;
    CHECK(std::fabs(adaptive_e_measure(pred, gt) - c.e_measure_n_minus_1 * (n - 1.0 + kEps) / n) <= 1e-9);
    CHECK(std::fabs(adaptive_e_measure(pred, gt) - brute_adaptive_e(pred, gt)) <= 1e-12);
  }
}

TEST_CASE("S-measure and E-measure on perfect and inverted predictions") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Plane gt = random_mask(16, 16, rng);
    CHECK(std::fabs(s_measure(gt, gt) - 1.0) <= 1e-6);
    CHECK(std::fabs(adaptive_e_measure(gt, gt) - 1.0) <= 1e-6);
    Plane inv = gt;
    for (double& v : inv.values) v = 1.0 - v;
    CHECK(s_measure(inv, gt) < s_measure(gt, gt));
  }
}

TEST_CASE("adaptive E-measure degrades under corruption") {
  std::mt19937_64 rng(6);
  Plane gt(16, 16);
  for (int y = 4; y < 12; ++y)
    for (int x = 3; x < 10; ++x) gt(y, x) = 1.0;
  CHECK(adaptive_e_measure(Plane(16, 16, 0.0), gt) < 0.3);
  for (int trial = 0; trial < 20; ++trial) {
    for (int k : {1, 4, 16}) {
      Plane p = gt;
      std::uniform_int_distribution<int> pick(0, 255);
      for (int j = 0; j < k; ++j) {
        const auto i = static_cast<std::size_t>(pick(rng));
        p.values[i] = 1.0 - p.values[i];
      }
      CHECK(adaptive_e_measure(p, gt) <= adaptive_e_measure(gt, gt));
    }
  }
}

TEST_CASE("ECE hand-binned cases") {
  // 100 pixels at confidence 0.7 (70 correct) and 100 at 0.9 (90 correct).
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
  Calibration c1 = ece({p1}, {g1}, 10);
  CHECK(std::fabs(c1.ece - 0.0) <= 1e-9);
  auto [p2, g2] = build(50, 90);
  Calibration c2 = ece({p2}, {g2}, 10);
  CHECK(std::fabs(c2.ece - 0.1) <= 1e-9);

  std::int64_t total = 0;
  for (const auto& b : c2.bins) total += b.count;
  CHECK(total == 200);
  CHECK(c2.total == 200);

  // Perfect hard predictions: everything in the top bin with accuracy 1.
  Plane gt(4, 4, {1, 0, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1, 0, 1, 0, 1});
  Calibration perfect = ece({gt}, {gt}, 10);
  CHECK(perfect.ece == 0.0);
  CHECK(perfect.bins.back().count == 16);
  CHECK(perfect.bins.back().acc == 1.0);
  CHECK_THROWS_AS(ece({gt}, {gt}, 0), ConfigError);
}

TEST_CASE("ECE ignores empty bins") {
  std::mt19937_64 rng(7);
  std::vector<Plane> preds, gts;
  for (int k = 0; k < 3; ++k) {
    preds.push_back(random_plane(8, 8, rng));
    gts.push_back(random_mask(8, 8, rng));
  }
  Calibration c = ece(preds, gts, 10);
  double recomputed = 0.0;
  for (const auto& b : c.bins)
    if (b.count > 0) recomputed += static_cast<double>(b.count) / static_cast<double>(c.total) * std::fabs(b.acc - b.mean_conf);
  CHECK(recomputed == doctest::Approx(c.ece).epsilon(1e-14));
  CHECK(c.total == 192);
}

TEST_CASE("metric report and serialization") {
  std::mt19937_64 rng(8);
  std::vector<Plane> gts{random_mask(16, 16, rng), random_mask(16, 16, rng)};
  MetricsReport r = evaluate(gts, gts, 10);
  CHECK(std::fabs(r.s_measure - 1.0) <= 1e-6);
  CHECK(std::fabs(r.adaptive_e - 1.0) <= 1e-6);
  CHECK(std::fabs(r.weighted_f - 1.0) <= 1e-6);
  CHECK(r.mae == 0.0);
  CHECK(r.ece == 0.0);
  MetricsReport again = evaluate(gts, gts, 10);
  CHECK(again.weighted_f == r.weighted_f);

  MetricsReport empty = evaluate({}, {}, 10, "multi");
  CHECK(empty.count == 0);
  const std::string text = to_text({r, empty});
  CHECK(text.find("multi.empty=1") != std::string::npos);
  CHECK(to_json({r}).find("\"reliability_bins\"") != std::string::npos);

  const std::string csv = bins_csv(r.reliability_bins);
  CHECK(csv.rfind("bin_low,bin_high,mean_conf,acc,count\n", 0) == 0);
  std::istringstream lines(csv);
  std::string line;
  int rows = 0;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 11);

  const std::string svg = reliability_svg(ece(gts, gts, 10), "perfect <model>");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("&lt;model&gt;") != std::string::npos);
}
