#pragma once

#include <array>
#include <vector>

#include "evircod/evidential.hpp"
#include "evircod/tensor.hpp"

// Joint hybrid loss: structural terms on the decoder and refined maps plus the
// boundary-weighted evidential term with a focal regularizer.
namespace evircod::losses {

/// What supervises the Dirichlet field.
enum class EvidenceTerm {
  evidential,  // boundary-weighted psi(S) - psi(alpha_y) plus focal
  bce,         // plain binary cross-entropy on the Dirichlet mean (calibration baseline)
};

struct LossWeights {
  std::array<double, 2> omega{1.0, 0.5};  // decoder scales 1 and 2
  std::array<double, 2> eta{1.0, 0.5};    // refined scales 1 and 2
  double kappa = 0.5;                     // evidential term
  double lambda_focal = 0.1;
  double gamma_focal = 2.0;
  double beta_bnd = 4.0;
  double mu = 5.0;   // structural pixel-weight amplitude
  int pool_k = 15;   // structural pixel-weight window (odd)
  EvidenceTerm evidence_term = EvidenceTerm::evidential;

  /// Throws ConfigError on negative weights or an even window.
  void validate() const;
};

/// 1 + beta * |Sobel(gt)| / max|Sobel(gt)| per image (zero padding); all ones
/// where the mask has no edges. gt: B x 1 x H x W in {0, 1}.
Tensor boundary_weight_map(const Tensor& gt, double beta);

/// Area-averages gt down to out_h x out_w (integer factor) and thresholds at 0.5.
Tensor downsample_mask(const Tensor& gt, int out_h, int out_w);

/// -(1 - p_t)^gamma log p_t per pixel with p_t = P if y = 1 else 1 - P.
Tensor focal_map(const Tensor& prob, const Tensor& labels, double gamma);

struct EvidentialTerms {
  Tensor nll;    // mean of w_bnd * (psi(S) - psi(alpha_y))
  Tensor focal;  // mean focal
  Tensor total;  // nll + lambda * focal
};

/// labels and w_bnd are at the Dirichlet field's resolution.
EvidentialTerms evidential_loss(const evidential::DirichletField& d, const Tensor& labels, const Tensor& w_bnd,
                                double lambda, double gamma_f);

/// Pixel-position-aware weights 1 + mu * |avgpool_k(gt) - gt| (zero padded, count includes padding).
Tensor structural_weights(const Tensor& gt, double mu, int k);

/// Weighted BCE + weighted IoU on logits, averaged over the batch.
Tensor structural_loss(const Tensor& logits, const Tensor& gt, double mu, int k);

struct LossReport {
  Tensor total;
  std::vector<double> structural;          // per decoder scale
  std::vector<double> structural_refined;  // per refined scale
  double evidential = 0.0;                 // kappa-free evidential total (nll + lambda * focal, or BCE)
  double nll = 0.0;
  double focal = 0.0;

  /// Sum of weighted components, for the recomposition identity.
  double recompose(const LossWeights& w) const;
};

/// decoder_logits and refined_logits hold the scale-1 and scale-2 maps at
/// gt resolution; refined_logits may be empty (refinement off) and dirichlet
/// may be undefined (evidential path off).
LossReport total_loss(const std::vector<Tensor>& decoder_logits, const std::vector<Tensor>& refined_logits,
                      const evidential::DirichletField& dirichlet, const Tensor& gt, const LossWeights& w);

}  // namespace evircod::losses
