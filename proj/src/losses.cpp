#include "evircod/losses.hpp"

#include <algorithm>
#include <cmath>

#include "evircod/errors.hpp"
#include "evircod/ops.hpp"

namespace evircod::losses {

void LossWeights::validate() const {
  for (double v : {omega[0], omega[1], eta[0], eta[1], kappa, lambda_focal, gamma_focal, beta_bnd, mu}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
  }
  if (omega[0] + omega[1] + eta[0] + eta[1] <= 0.0) throw ConfigError("at least one structural weight must be positive");
  if (pool_k < 1 || pool_k % 2 == 0) throw ConfigError("structural pool window must be a positive odd integer");
}

namespace {

void require_mask(const Tensor& t, const char* what) {
  if (t.dim() != 4 || t.size(1) != 1) throw ShapeError(std::string(what) + " must be B x 1 x H x W, got " + to_string(t.shape()));
}

}  // namespace

Tensor boundary_weight_map(const Tensor& gt, double beta) {
  require_mask(gt, "boundary_weight_map: gt");
  Tensor g;
  {
    NoGradGuard guard;
    g = sobel_xy(gt.detach());
  }
  const int B = gt.size(0), H = gt.size(2), W = gt.size(3);
  const std::size_t plane = static_cast<std::size_t>(H) * static_cast<std::size_t>(W);
  std::vector<double> out(static_cast<std::size_t>(B) * plane, 1.0);
  auto gv = g.data();
  for (int b = 0; b < B; ++b) {
    const double* gx = gv.data() + static_cast<std::size_t>(b) * 2 * plane;
    const double* gy = gx + plane;
    std::vector<double> mag(plane);
    double peak = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      mag[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
      peak = std::max(peak, mag[i]);
    }
    if (peak <= 0.0) continue;
    double* dst = out.data() + static_cast<std::size_t>(b) * plane;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = 1.0 + beta * mag[i] / peak;
  }
  return Tensor(gt.shape(), std::move(out));
}

Tensor downsample_mask(const Tensor& gt, int out_h, int out_w) {
  require_mask(gt, "downsample_mask: gt");
  const int B = gt.size(0), H = gt.size(2), W = gt.size(3);
  if (out_h <= 0 || out_w <= 0 || H % out_h != 0 || W % out_w != 0) {
    throw ShapeError("downsample_mask: " + std::to_string(H) + "x" + std::to_string(W) + " is not an integer multiple of " +
                     std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  const int fy = H / out_h, fx = W / out_w;
  std::vector<double> out(static_cast<std::size_t>(B) * out_h * out_w);
  auto v = gt.data();
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        double s = 0.0;
        for (int dy = 0; dy < fy; ++dy)
          for (int dx = 0; dx < fx; ++dx)
            s += v[(static_cast<std::size_t>(b) * H + static_cast<std::size_t>(y * fy + dy)) * W + static_cast<std::size_t>(x * fx + dx)];
        out[(static_cast<std::size_t>(b) * out_h + y) * out_w + x] = s / (fy * fx) >= 0.5 ? 1.0 : 0.0;
      }
  return Tensor(Shape{B, 1, out_h, out_w}, std::move(out));
}

Tensor focal_map(const Tensor& prob, const Tensor& labels, double gamma) {
  // p_t = 1 - y - P + 2 y P
  Tensor pt = add(rsub_scalar(1.0, add(labels, prob)), mul_scalar(mul(labels, prob), 2.0));
  return neg(mul(pow_scalar(rsub_scalar(1.0, pt), gamma), log(pt)));
}

EvidentialTerms evidential_loss(const evidential::DirichletField& d, const Tensor& labels, const Tensor& w_bnd,
                                double lambda, double gamma_f) {
  if (labels.shape() != d.prob.shape() || w_bnd.shape() != d.prob.shape()) {
    throw ShapeError("evidential_loss: labels " + to_string(labels.shape()) + " / weights " + to_string(w_bnd.shape()) +
                     " vs field " + to_string(d.prob.shape()));
  }
  EvidentialTerms t;
  t.nll = mean(mul(w_bnd, evidential::evidential_nll(d, labels)));
  t.focal = mean(focal_map(d.prob, labels, gamma_f));
  t.total = add(t.nll, mul_scalar(t.focal, lambda));
  return t;
}

Tensor structural_weights(const Tensor& gt, double mu, int k) {
  require_mask(gt, "structural_weights: gt");
  NoGradGuard guard;
  Tensor kernel(Shape{1, 1, k, k}, 1.0 / (static_cast<double>(k) * k));
  Tensor pooled = conv2d(gt.detach(), kernel, Tensor(), 1, k / 2);
  return add_scalar(mul_scalar(abs(sub(pooled, gt.detach())), mu), 1.0).detach();
}

Tensor structural_loss(const Tensor& logits, const Tensor& gt, double mu, int k) {
  require_mask(logits, "structural_loss: logits");
  if (logits.shape() != gt.shape()) {
    throw ShapeError("structural_loss: logits " + to_string(logits.shape()) + " vs gt " + to_string(gt.shape()));
  }
  Tensor w = structural_weights(gt, mu, k);
  const std::vector<int> spatial{1, 2, 3};
  Tensor wbce = div(sum_axes(mul(w, bce_with_logits(logits, gt)), spatial, false), sum_axes(w, spatial, false));
  Tensor p = sigmoid(logits);
  Tensor inter = sum_axes(mul(mul(p, gt), w), spatial, false);
  Tensor uni = sum_axes(mul(add(p, gt), w), spatial, false);
  Tensor wiou = rsub_scalar(1.0, div(add_scalar(inter, 1.0), add_scalar(sub(uni, inter), 1.0)));
  return mean(add(wbce, wiou));
}

double LossReport::recompose(const LossWeights& w) const {
  double t = 0.0;
  for (std::size_t i = 0; i < structural.size(); ++i) t += w.omega[i] * structural[i];
  for (std::size_t i = 0; i < structural_refined.size(); ++i) t += w.eta[i] * structural_refined[i];
  return t + w.kappa * evidential;
}

LossReport total_loss(const std::vector<Tensor>& decoder_logits, const std::vector<Tensor>& refined_logits,
                      const evidential::DirichletField& dirichlet, const Tensor& gt, const LossWeights& w) {
  if (decoder_logits.size() < 2) throw ContractViolation("total_loss needs decoder maps for scales 1 and 2");
  if (!refined_logits.empty() && refined_logits.size() < 2) {
    throw ContractViolation("total_loss needs refined maps for scales 1 and 2");
  }
  LossReport r;
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < 2; ++i) {
    Tensor s = structural_loss(decoder_logits[i], gt, w.mu, w.pool_k);
    r.structural.push_back(s.item());
    total = add(total, mul_scalar(s, w.omega[i]));
  }
  for (std::size_t i = 0; i < 2 && !refined_logits.empty(); ++i) {
    Tensor s = structural_loss(refined_logits[i], gt, w.mu, w.pool_k);
    r.structural_refined.push_back(s.item());
    total = add(total, mul_scalar(s, w.eta[i]));
  }
  if (dirichlet.prob.defined()) {
    Tensor labels = downsample_mask(gt, dirichlet.prob.size(2), dirichlet.prob.size(3));
    Tensor term;
    if (w.evidence_term == EvidenceTerm::evidential) {
      EvidentialTerms e = evidential_loss(dirichlet, labels, boundary_weight_map(labels, w.beta_bnd), w.lambda_focal,
                                          w.gamma_focal);
      r.nll = e.nll.item();
      r.focal = e.focal.item();
      term = e.total;
    } else {
      const Tensor& p = dirichlet.prob;
      term = neg(mean(add(mul(labels, log(p)), mul(rsub_scalar(1.0, labels), log(rsub_scalar(1.0, p))))));
      r.nll = term.item();
    }
    r.evidential = term.item();
    total = add(total, mul_scalar(term, w.kappa));
  }
  r.total = total;
  return r;
}

}  // namespace evircod::losses
