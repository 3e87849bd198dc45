#include "evircod/evidential.hpp"

#include <cmath>

#include "evircod/errors.hpp"
#include "evircod/ops.hpp"
#include "evircod/special.hpp"

namespace evircod::evidential {

bool UncertaintyWeights::bounded() const {
  return vacuity >= 0.0 && variance >= 0.0 && vacuity + variance / 12.0 <= 1.0 + 1e-12;
}

DirichletPixel dirichlet_pixel(double e0, double e1) {
  if (e0 < 0.0 || e1 < 0.0) throw ContractViolation("evidence must be non-negative");
  DirichletPixel d{};
  d.alpha0 = e0 + 1.0;
  d.alpha1 = e1 + 1.0;
  d.strength = d.alpha0 + d.alpha1;
  d.prob = d.alpha1 / d.strength;
  d.vacuity = 2.0 / d.strength;
  d.variance = d.alpha1 * (d.strength - d.alpha1) / (d.strength * d.strength * (d.strength + 1.0));
  return d;
}

double pixel_uncertainty(const DirichletPixel& d, const UncertaintyWeights& w) {
  return w.vacuity * d.vacuity + w.variance * d.variance;
}

double pixel_nll(double alpha0, double alpha1, int y) {
  return digamma(alpha0 + alpha1) - digamma(y == 1 ? alpha1 : alpha0);
}

DirichletField evidence_to_dirichlet(const Tensor& evidence) {
  if (evidence.dim() != 4 || evidence.size(1) != 2) {
    throw ShapeError("evidence must be B x 2 x H x W, got " + to_string(evidence.shape()));
  }
  for (double e : evidence.data()) {
    if (!(e >= 0.0)) throw ContractViolation("evidence must be non-negative and finite");
  }
  DirichletField d;
  d.alpha = add_scalar(evidence, 1.0);
  d.strength = sum_axes(d.alpha, {1}, true);
  return d;
}

Tensor dirichlet_probability(const DirichletField& d) { return div(slice(d.alpha, 1, 1, 1), d.strength); }

Tensor dirichlet_uncertainty(const DirichletField& d, const UncertaintyWeights& w) {
  const Tensor& s = d.strength;
  Tensor a1 = slice(d.alpha, 1, 1, 1);
  Tensor vacuity = div(Tensor::scalar(2.0), s);
  Tensor variance = div(mul(a1, sub(s, a1)), mul(square(s), add_scalar(s, 1.0)));
  return add(mul_scalar(vacuity, w.vacuity), mul_scalar(variance, w.variance));
}

Tensor confidence_map(const Tensor& uncertainty) { return rsub_scalar(1.0, uncertainty); }

DirichletField complete(DirichletField d, const UncertaintyWeights& w) {
  d.prob = dirichlet_probability(d);
  d.uncertainty = dirichlet_uncertainty(d, w);
  d.confidence = confidence_map(d.uncertainty);
  return d;
}

Tensor evidential_nll(const DirichletField& d, const Tensor& labels) {
  if (labels.shape() != d.strength.shape()) {
    throw ShapeError("labels " + to_string(labels.shape()) + " vs field " + to_string(d.strength.shape()));
  }
  Tensor psi_bg = digamma(slice(d.alpha, 1, 0, 1));
  Tensor psi_fg = digamma(slice(d.alpha, 1, 1, 1));
  Tensor psi_y = add(mul(labels, psi_fg), mul(rsub_scalar(1.0, labels), psi_bg));
  return sub(digamma(d.strength), psi_y);
}

}  // namespace evircod::evidential
