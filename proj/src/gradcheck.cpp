#include "evircod/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace evircod {

GradCheckResult check_gradients(std::string name, const std::function<Tensor()>& objective,
                                std::vector<Tensor> inputs, std::mt19937_64& rng,
                                const GradCheckOptions& options) {
  GradCheckResult result;
  result.name = std::move(name);
  result.tolerance = options.tolerance;

  std::int64_t total = 0;
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
    total += t.numel();
  }
  if (total == 0) return result;

  Tensor out = objective();
  out.backward();
  std::vector<std::vector<double>> analytic;
  for (Tensor& t : inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(static_cast<std::size_t>(t.numel()), 0.0);
  }

  std::uniform_int_distribution<std::int64_t> pick(0, total - 1);
  double worst = 0.0;
  for (int p = 0; p < options.points; ++p) {
    std::int64_t flat = pick(rng);
    std::size_t which = 0;
    while (flat >= inputs[which].numel()) flat -= inputs[which].numel(), ++which;
    auto values = inputs[which].data_mut();
    const double saved = values[flat];
    double plus, minus;
    {
      NoGradGuard guard;
      values[flat] = saved + options.step;
      plus = objective().item();
      values[flat] = saved - options.step;
      minus = objective().item();
      values[flat] = saved;
    }
    const double numeric = (plus - minus) / (2.0 * options.step);
    const double a = analytic[which][static_cast<std::size_t>(flat)];
    const double denom = std::max({std::fabs(a), std::fabs(numeric), options.magnitude_floor});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  for (Tensor& t : inputs) t.zero_grad();
  result.points = options.points;
  result.max_rel_error = worst;
  result.passed = worst <= options.tolerance;
  return result;
}

}  // namespace evircod
