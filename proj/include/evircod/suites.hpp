#pragma once

#include <cstdint>
#include <vector>

#include "evircod/gradcheck.hpp"

namespace evircod {

/// Finite-difference suites: evidential loss w.r.t. evidence, evidence-guided
/// attention w.r.t. w_u and its Q/K/V projections, reference modulation w.r.t.
/// its inputs, and selective refinement w.r.t. the refinement branch.
/// Each checks at least `points` coordinates (step 1e-5, relative error 1e-4).
std::vector<GradCheckResult> run_gradient_suites(std::uint64_t seed, int points = 100);

}  // namespace evircod
