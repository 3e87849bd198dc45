#pragma once

#include "evircod/tensor.hpp"

// Two-class Dirichlet evidence math. Evidence fields are B x 2 x H x W with
// channel 0 = background and channel 1 = target; derived maps are B x 1 x H x W.
namespace evircod::evidential {

/// Mixing weights for the vacuity and variance parts of the uncertainty.
/// U stays within [0, 1] whenever vacuity + variance / 12 <= 1.
struct UncertaintyWeights {
  double vacuity = 0.9;
  double variance = 1.2;

  bool bounded() const;
};

struct DirichletField {
  Tensor alpha;        // evidence + 1
  Tensor strength;     // alpha0 + alpha1
  Tensor prob;         // alpha1 / strength
  Tensor uncertainty;  // weighted vacuity + variance
  Tensor confidence;   // 1 - uncertainty
};

// Per-pixel scalar forms, used by tests and the metrics-side oracles.
struct DirichletPixel {
  double alpha0, alpha1, strength, prob, vacuity, variance;
};
DirichletPixel dirichlet_pixel(double e0, double e1);
double pixel_uncertainty(const DirichletPixel& d, const UncertaintyWeights& w);
/// psi(S) - psi(alpha_y) for label y in {0, 1}.
double pixel_nll(double alpha0, double alpha1, int y);

/// alpha = E + 1 and S = alpha0 + alpha1. Throws ContractViolation on negative evidence.
DirichletField evidence_to_dirichlet(const Tensor& evidence);
Tensor dirichlet_probability(const DirichletField& d);
Tensor dirichlet_uncertainty(const DirichletField& d, const UncertaintyWeights& w);
Tensor confidence_map(const Tensor& uncertainty);
/// Fills prob, uncertainty and confidence on a field built by evidence_to_dirichlet.
DirichletField complete(DirichletField d, const UncertaintyWeights& w);

/// Per-pixel psi(S) - psi(alpha_y); labels are a B x 1 x H x W map of {0, 1}.
Tensor evidential_nll(const DirichletField& d, const Tensor& labels);

}  // namespace evircod::evidential
