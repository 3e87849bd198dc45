#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "evircod/tensor.hpp"

namespace evircod {

struct GradCheckResult {
  std::string name;
  int points = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  int points = 100;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Gradients smaller than this are compared on an absolute scale.
  double magnitude_floor = 1e-6;
};

/// Compares the autodiff gradient of a scalar-valued `objective` against
/// central finite differences at randomly drawn coordinates of `inputs`.
/// The objective must rebuild its graph from the inputs' current values on
/// every call.
GradCheckResult check_gradients(std::string name, const std::function<Tensor()>& objective,
                                std::vector<Tensor> inputs, std::mt19937_64& rng,
                                const GradCheckOptions& options = {});

}  // namespace evircod
