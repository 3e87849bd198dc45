#include "evircod/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "evircod/errors.hpp"
#include "json.hpp"

namespace evircod::metrics {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

void require_same(const Plane& a, const Plane& b, const char* what) {
  if (a.height != b.height || a.width != b.width || a.values.size() != b.values.size()) {
    throw std::invalid_argument(std::string(what) + ": prediction and mask sizes differ");
  }
}

std::vector<bool> binarize(const Plane& gt) {
  std::vector<bool> out(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) out[i] = gt.values[i] > 0.5;
  return out;
}

double s_object(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double sd = 0.0;
  if (x.size() > 1) {
    for (double v : x) sd += (v - mean) * (v - mean);
    sd = std::sqrt(sd / static_cast<double>(x.size() - 1));
  }
  return 2.0 * mean / (mean * mean + 1.0 + sd + kEps);
}

double object_score(const Plane& pred, const std::vector<bool>& gt) {
  std::vector<double> fg, bg;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i]) fg.push_back(pred.values[i]);
    else bg.push_back(1.0 - pred.values[i]);
  }
  const double u = static_cast<double>(fg.size()) / static_cast<double>(gt.size());
  return u * s_object(fg) + (1.0 - u) * s_object(bg);
}

double region_ssim(const Plane& pred, const std::vector<bool>& gt, int y0, int y1, int x0, int x1) {
  const int n = (y1 - y0) * (x1 - x0);
  if (n <= 0) return 0.0;
  double mx = 0.0, my = 0.0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * pred.width + x;
      mx += pred.values[i];
      my += gt[i] ? 1.0 : 0.0;
    }
  mx /= n;
  my /= n;
  double sx = 0.0, sy = 0.0, sxy = 0.0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * pred.width + x;
      const double dx = pred.values[i] - mx, dy = (gt[i] ? 1.0 : 0.0) - my;
      sx += dx * dx;
      sy += dy * dy;
      sxy += dx * dy;
    }
  const double denom = n - 1 + kEps;
  sx /= denom;
  sy /= denom;
  sxy /= denom;
  const double a = 4.0 * mx * my * sxy;
  const double b = (mx * mx + my * my) * (sx + sy);
  if (a != 0.0) return a / (b + kEps);
  return b == 0.0 ? 1.0 : 0.0;
}

double region_score(const Plane& pred, const std::vector<bool>& gt) {
  const int h = pred.height, w = pred.width;
  double sy = 0.0, sx = 0.0;
  std::int64_t n = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (gt[static_cast<std::size_t>(y) * w + x]) sy += y, sx += x, ++n;
  // Centroid rounded half-to-even, then shifted to a 1-based split point.
  double cy, cx;
  if (n == 0) {
    cy = std::nearbyint(h / 2.0);
    cx = std::nearbyint(w / 2.0);
  } else {
    cy = std::nearbyint(sy / static_cast<double>(n));
    cx = std::nearbyint(sx / static_cast<double>(n));
  }
  const int Y = static_cast<int>(cy) + 1, X = static_cast<int>(cx) + 1;
  const double area = static_cast<double>(h) * w;
  const double w_lt = static_cast<double>(X) * Y / area;
  const double w_rt = static_cast<double>(Y) * (w - X) / area;
  const double w_lb = static_cast<double>(h - Y) * X / area;
  const double w_rb = 1.0 - w_lt - w_rt - w_lb;
  return w_lt * region_ssim(pred, gt, 0, Y, 0, X) + w_rt * region_ssim(pred, gt, 0, Y, X, w) +
         w_lb * region_ssim(pred, gt, Y, h, 0, X) + w_rb * region_ssim(pred, gt, Y, h, X, w);
}

std::vector<double> gaussian7() {
  std::vector<double> k(49);
  double peak = 0.0;
  for (int y = -3; y <= 3; ++y)
    for (int x = -3; x <= 3; ++x) {
      const double v = std::exp(-(x * x + y * y) / (2.0 * 25.0));
      k[static_cast<std::size_t>((y + 3) * 7 + x + 3)] = v;
      peak = std::max(peak, v);
    }
  double total = 0.0;
  for (double& v : k) {
    if (v < kEps * peak) v = 0.0;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

}  // namespace

Plane::Plane(int h, int w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
  if (values.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w)) {
    throw std::invalid_argument("Plane: value count does not match " + std::to_string(h) + "x" + std::to_string(w));
  }
}

double mae(const Plane& pred, const Plane& gt) {
  require_same(pred, gt, "mae");
  if (pred.size() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::fabs(pred.values[i] - gt.values[i]);
  return s / static_cast<double>(pred.size());
}

double s_measure(const Plane& pred, const Plane& gt, double alpha) {
  require_same(pred, gt, "s_measure");
  const auto g = binarize(gt);
  const auto fg = std::count(g.begin(), g.end(), true);
  double mean_pred = 0.0;
  for (double v : pred.values) mean_pred += v;
  mean_pred /= static_cast<double>(pred.size());
  if (fg == 0) return 1.0 - mean_pred;
  if (fg == static_cast<std::int64_t>(g.size())) return mean_pred;
  return std::max(0.0, alpha * object_score(pred, g) + (1.0 - alpha) * region_score(pred, g));
}

double adaptive_e_measure(const Plane& pred, const Plane& gt) {
  require_same(pred, gt, "adaptive_e_measure");
  const auto g = binarize(gt);
  const double n = static_cast<double>(pred.size());
  double mean_pred = 0.0;
  for (double v : pred.values) mean_pred += v;
  mean_pred /= n;
  const double threshold = std::min(2.0 * mean_pred, 1.0);

  double fg_fg = 0, fg_bg = 0, gt_fg = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const bool p = pred.values[i] >= threshold;
    gt_fg += g[i];
    fg_fg += p && g[i];
    fg_bg += p && !g[i];
  }
  const double pred_fg = fg_fg + fg_bg, pred_bg = n - pred_fg;
  double enhanced;
  if (gt_fg == 0) {
    enhanced = pred_bg;
  } else if (gt_fg == n) {
    enhanced = pred_fg;
  } else {
    const double bg_fg = gt_fg - fg_fg, bg_bg = pred_bg - bg_fg;
    const double mp = pred_fg / n, mg = gt_fg / n;
    const double parts[4] = {fg_fg, fg_bg, bg_fg, bg_bg};
    const double pv[4] = {1 - mp, 1 - mp, -mp, -mp};
    const double gv[4] = {1 - mg, -mg, 1 - mg, -mg};
    enhanced = 0.0;
    for (int k = 0; k < 4; ++k) {
      const double align = 2.0 * pv[k] * gv[k] / (pv[k] * pv[k] + gv[k] * gv[k] + kEps);
      enhanced += (align + 1.0) * (align + 1.0) / 4.0 * parts[k];
    }
  }
  return enhanced / n;
}

NearestForeground nearest_foreground(const Plane& gt) {
  const int h = gt.height, w = gt.width;
  const auto g = binarize(gt);
  NearestForeground out;
  out.index.assign(g.size(), -1);
  out.distance.assign(g.size(), std::numeric_limits<double>::infinity());
  // Nearest foreground pixels of background pixels always lie on the
  // 4-connected foreground boundary, so only those are searched.
  std::vector<std::int64_t> boundary;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (!g[i]) continue;
      out.index[i] = static_cast<std::int64_t>(i);
      out.distance[i] = 0.0;
      const bool edge = (y > 0 && !g[i - static_cast<std::size_t>(w)]) || (y + 1 < h && !g[i + static_cast<std::size_t>(w)]) ||
                        (x > 0 && !g[i - 1]) || (x + 1 < w && !g[i + 1]);
      if (edge) boundary.push_back(static_cast<std::int64_t>(i));
    }
  if (boundary.empty()) return out;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (g[i]) continue;
      std::int64_t best = -1, best_d2 = std::numeric_limits<std::int64_t>::max();
      for (std::int64_t b : boundary) {  // raster order, strict < keeps the first tie
        const std::int64_t dy = b / w - y, dx = b % w - x;
        const std::int64_t d2 = dy * dy + dx * dx;
        if (d2 < best_d2) best_d2 = d2, best = b;
      }
      out.index[i] = best;
      out.distance[i] = std::sqrt(static_cast<double>(best_d2));
    }
  return out;
}

double weighted_f_measure(const Plane& pred, const Plane& gt, double beta2) {
  require_same(pred, gt, "weighted_f_measure");
  const auto g = binarize(gt);
  if (std::none_of(g.begin(), g.end(), [](bool b) { return b; })) return 0.0;
  const int h = pred.height, w = pred.width;
  const NearestForeground nf = nearest_foreground(gt);

  std::vector<double> E(g.size()), Et(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) E[i] = std::fabs(pred.values[i] - (g[i] ? 1.0 : 0.0));
  for (std::size_t i = 0; i < g.size(); ++i) Et[i] = g[i] ? E[i] : E[static_cast<std::size_t>(nf.index[i])];

  static const std::vector<double> K = gaussian7();
  double tp = 0.0, fp = 0.0, ew_fg = 0.0, n_fg = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      double e = E[i];
      if (g[i]) {
        double ea = 0.0;
        for (int ky = -3; ky <= 3; ++ky)
          for (int kx = -3; kx <= 3; ++kx) {
            const int yy = y + ky, xx = x + kx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            ea += K[static_cast<std::size_t>((ky + 3) * 7 + kx + 3)] * Et[static_cast<std::size_t>(yy) * w + xx];
          }
        if (ea < e) e = ea;
        ew_fg += e;
        n_fg += 1.0;
      } else {
        fp += e * (2.0 - std::exp(std::log(0.5) / 5.0 * nf.distance[i]));
      }
    }
  tp = n_fg - ew_fg;
  const double recall = 1.0 - ew_fg / n_fg;
  const double precision = tp / (tp + fp + kEps);
  return (1.0 + beta2) * recall * precision / (recall + beta2 * precision + kEps);
}

Calibration ece(const std::vector<Plane>& preds, const std::vector<Plane>& gts, int n_bins) {
  if (n_bins < 1) throw ConfigError("ECE needs at least one bin");
  if (preds.size() != gts.size()) throw std::invalid_argument("ece: prediction and mask counts differ");
  Calibration c;
  c.bins.resize(static_cast<std::size_t>(n_bins));
  const double width = 0.5 / n_bins;
  std::vector<double> conf_sum(static_cast<std::size_t>(n_bins), 0.0), correct(static_cast<std::size_t>(n_bins), 0.0);
  for (int b = 0; b < n_bins; ++b) {
    c.bins[static_cast<std::size_t>(b)].low = 0.5 + b * width;
    c.bins[static_cast<std::size_t>(b)].high = b + 1 == n_bins ? 1.0 : 0.5 + (b + 1) * width;
  }
  for (std::size_t k = 0; k < preds.size(); ++k) {
    require_same(preds[k], gts[k], "ece");
    for (std::size_t i = 0; i < preds[k].size(); ++i) {
      const double p = preds[k].values[i];
      const double conf = std::max(p, 1.0 - p);
      const bool label = p >= 0.5;
      const bool truth = gts[k].values[i] > 0.5;
      auto b = static_cast<std::size_t>(std::clamp(static_cast<int>(std::floor((conf - 0.5) / width)), 0, n_bins - 1));
      conf_sum[b] += conf;
      correct[b] += label == truth ? 1.0 : 0.0;
      ++c.bins[b].count;
      ++c.total;
    }
  }
  for (std::size_t b = 0; b < c.bins.size(); ++b) {
    auto& bin = c.bins[b];
    if (bin.count == 0) continue;
    bin.mean_conf = conf_sum[b] / static_cast<double>(bin.count);
    bin.acc = correct[b] / static_cast<double>(bin.count);
    c.ece += static_cast<double>(bin.count) / static_cast<double>(c.total) * std::fabs(bin.acc - bin.mean_conf);
  }
  return c;
}

MetricsReport evaluate(const std::vector<Plane>& preds, const std::vector<Plane>& gts, int n_bins, std::string name) {
  MetricsReport r;
  r.name = std::move(name);
  Calibration c = ece(preds, gts, n_bins);
  r.reliability_bins = c.bins;
  r.count = static_cast<std::int64_t>(preds.size());
  if (preds.empty()) return r;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    r.s_measure += s_measure(preds[k], gts[k]);
    r.adaptive_e += adaptive_e_measure(preds[k], gts[k]);
    r.weighted_f += weighted_f_measure(preds[k], gts[k]);
    r.mae += mae(preds[k], gts[k]);
  }
  const double n = static_cast<double>(preds.size());
  r.s_measure /= n;
  r.adaptive_e /= n;
  r.weighted_f /= n;
  r.mae /= n;
  r.ece = c.ece;
  return r;
}

std::string to_text(const std::vector<MetricsReport>& reports) {
  std::ostringstream os;
  os << std::setprecision(10);
  for (const auto& r : reports) {
    const std::string p = r.name + ".";
    os << p << "count=" << r.count << '\n';
    if (r.count == 0) {
      os << p << "empty=1\n";
      continue;
    }
    os << p << "s_measure=" << r.s_measure << '\n'
       << p << "adaptive_e=" << r.adaptive_e << '\n'
       << p << "weighted_f=" << r.weighted_f << '\n'
       << p << "mae=" << r.mae << '\n'
       << p << "ece=" << r.ece << '\n';
  }
  return os.str();
}

std::string to_json(const std::vector<MetricsReport>& reports) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& r : reports) {
    nlohmann::json j;
    j["count"] = r.count;
    j["empty"] = r.count == 0;
    j["s_measure"] = r.s_measure;
    j["adaptive_e"] = r.adaptive_e;
    j["weighted_f"] = r.weighted_f;
    j["mae"] = r.mae;
    j["ece"] = r.ece;
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& b : r.reliability_bins) {
      bins.push_back({{"bin_low", b.low}, {"bin_high", b.high}, {"mean_conf", b.mean_conf}, {"acc", b.acc}, {"count", b.count}});
    }
    j["reliability_bins"] = bins;
    doc[r.name] = j;
  }
  return doc.dump(2) + "\n";
}

std::string bins_csv(const std::vector<ReliabilityBin>& bins) {
  std::ostringstream os;
  os << std::setprecision(10) << "bin_low,bin_high,mean_conf,acc,count\n";
  for (const auto& b : bins) os << b.low << ',' << b.high << ',' << b.mean_conf << ',' << b.acc << ',' << b.count << '\n';
  return os.str();
}

std::string reliability_svg(const Calibration& c, const std::string& title) {
  const double W = 360, H = 360, L = 50, T = 40, side = 280;
  auto px = [&](double conf) { return L + (conf - 0.5) / 0.5 * side; };
  auto py = [&](double acc) { return T + side - acc * side; };
  auto esc = [](const std::string& s) {
    std::string o;
    for (char ch : s) {
      if (ch == '&') o += "&amp;";
      else if (ch == '<') o += "&lt;";
      else if (ch == '>') o += "&gt;";
      else o += ch;
    }
    return o;
  };
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n"
     << "  <rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
     << "  <text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
     << esc(title) << " (ECE " << std::setprecision(4) << c.ece * 100.0 << "%)</text>\n"
     << std::setprecision(2);
  for (const auto& b : c.bins) {
    if (b.count == 0) continue;
    const double x0 = px(b.low), x1 = px(b.high);
    const double top = py(b.acc);
    os << "  <rect x=\"" << x0 << "\" y=\"" << top << "\" width=\"" << (x1 - x0) << "\" height=\"" << (T + side - top)
       << "\" fill=\"#4a78b5\" stroke=\"#1f3b63\" stroke-width=\"0.5\"/>\n";
  }
  os << "  <line x1=\"" << px(0.5) << "\" y1=\"" << py(0.5) << "\" x2=\"" << px(1.0) << "\" y2=\"" << py(1.0)
     << "\" stroke=\"#c0392b\" stroke-dasharray=\"4 3\" stroke-width=\"1.5\"/>\n"
     << "  <rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << side << "\" height=\"" << side
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double v = 0.5 + 0.1 * k, a = 0.2 * k;
    os << "  <text x=\"" << px(v) << "\" y=\"" << T + side + 16 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       << "font-size=\"10\">" << v << "</text>\n"
       << "  <text x=\"" << L - 6 << "\" y=\"" << py(a) + 3 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
       << "font-size=\"10\">" << a << "</text>\n";
  }
  os << "  <text x=\"" << L + side / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"12\">confidence</text>\n"
     << "  <text x=\"14\" y=\"" << T + side / 2 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
     << "transform=\"rotate(-90 14 " << T + side / 2 << ")\">accuracy</text>\n"
     << "</svg>\n";
  return os.str();
}

}  // namespace evircod::metrics
