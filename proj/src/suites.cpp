#include "evircod/suites.hpp"

#include <algorithm>

#include "evircod/barm.hpp"
#include "evircod/evidential.hpp"
#include "evircod/losses.hpp"
#include "evircod/rgde.hpp"
#include "evircod/uaed.hpp"

namespace evircod {

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi, bool grad) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (double& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), grad);
}

Tensor random_mask(Shape shape, std::mt19937_64& rng) {
  Tensor t = random_tensor(std::move(shape), rng, 0.0, 1.0, false);
  for (double& v : t.data_mut()) v = v > 0.6 ? 1.0 : 0.0;
  return t;
}

GradCheckOptions options_for(int points) { return {points, 1e-5, 1e-4, 1e-6}; }

GradCheckResult evidential_suite(std::mt19937_64& rng, int points) {
  Tensor evidence = random_tensor({2, 2, 8, 8}, rng, 0.05, 20.0, true);
  Tensor labels = random_mask({2, 1, 8, 8}, rng);
  Tensor w_bnd = losses::boundary_weight_map(labels, 4.0);
  auto objective = [&] {
    auto d = evidential::complete(evidential::evidence_to_dirichlet(evidence), {});
    return losses::evidential_loss(d, labels, w_bnd, 0.1, 2.0).total;
  };
  return check_gradients("evidential_loss/evidence", objective, {evidence}, rng, options_for(points));
}

GradCheckResult ega_projection_suite(std::mt19937_64& rng, int points) {
  nn::Rng init(rng());
  uaed::EvidenceGuidedAttention ega(6, 12, 8, init);
  ega.w_u().data_mut()[0] = 0.7;
  Tensor q = random_tensor({2, 9, 6}, rng, -1, 1, false);
  Tensor ctx = random_tensor({2, 9, 12}, rng, -1, 1, false);
  Tensor c = random_tensor({2, 9}, rng, 0, 1, false);
  Tensor probe = random_tensor({2, 9, 8}, rng, -1, 1, false);
  std::vector<Tensor> inputs{ega.q().weight(), ega.q().bias(), ega.k().weight(),
                             ega.k().bias(),   ega.v().weight(), ega.v().bias()};
  return check_gradients("ega/qkv", [&] { return sum(mul(ega.forward(q, ctx, c), probe)); }, inputs, rng,
                         options_for(points));
}

/// w_u is a scalar, so its derivative is checked at `points` random values of w_u.
GradCheckResult ega_wu_suite(std::mt19937_64& rng, int points) {
  nn::Rng init(rng());
  uaed::EvidenceGuidedAttention ega(6, 12, 8, init);
  Tensor q = random_tensor({2, 9, 6}, rng, -1, 1, false);
  Tensor ctx = random_tensor({2, 9, 12}, rng, -1, 1, false);
  Tensor c = random_tensor({2, 9}, rng, 0, 1, false);
  Tensor probe = random_tensor({2, 9, 8}, rng, -1, 1, false);
  std::uniform_real_distribution<double> wu(-2.0, 2.0);
  GradCheckResult total{"ega/w_u", 0, 0.0, 1e-4, true};
  for (int i = 0; i < points; ++i) {
    ega.w_u().data_mut()[0] = wu(rng);
    auto r = check_gradients("ega/w_u", [&] { return sum(mul(ega.forward(q, ctx, c), probe)); }, {ega.w_u()}, rng,
                             options_for(1));
    total.points += r.points;
    total.max_rel_error = std::max(total.max_rel_error, r.max_rel_error);
    total.passed = total.passed && r.passed;
  }
  return total;
}

GradCheckResult modulation_suite(std::mt19937_64& rng, int points) {
  Tensor f = random_tensor({2, 8, 4, 4}, rng, -2, 2, true);
  Tensor r = random_tensor({2, 8, 1, 1}, rng, 0.1, 1, true);
  Tensor probe = random_tensor({2, 8, 4, 4}, rng, -1, 1, false);
  auto objective = [&] {
    return sum(mul(rgde::modulate(f, rgde::scale_modulation_weight(f, r, 0.05), r), probe));
  };
  return check_gradients("modulate/inputs", objective, {f, r}, rng, options_for(points));
}

GradCheckResult refinement_suite(std::mt19937_64& rng, int points) {
  nn::Rng init(rng());
  barm::DualBranch branch(4, init);
  Tensor logits = random_tensor({1, 1, 8, 8}, rng, -2, 2, false);
  Tensor edge = random_tensor({1, 1, 8, 8}, rng, -1, 1, false);
  Tensor probe = random_tensor({1, 1, 8, 8}, rng, -1, 1, false);
  std::vector<Tensor> inputs;
  for (nn::Conv2d* c : branch.ref_layers()) {
    inputs.push_back(c->weight());
    inputs.push_back(c->bias());
  }
  return check_gradients("selective_refine/ref_branch",
                         [&] { return sum(mul(branch.forward(logits, edge).refined, probe)); }, inputs, rng,
                         options_for(points));
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suites(std::uint64_t seed, int points) {
  std::mt19937_64 rng(seed);
  return {evidential_suite(rng, points), ega_wu_suite(rng, points), ega_projection_suite(rng, points),
          modulation_suite(rng, points), refinement_suite(rng, points)};
}

}  // namespace evircod
