#include "evircod/special.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace evircod {

namespace {
constexpr double kShiftThreshold = 6.0;
}

double digamma(double x) {
  if (!(x > 0.0)) throw std::domain_error("digamma: argument must be positive, got " + std::to_string(x));
  double acc = 0.0;
  while (x < kShiftThreshold) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // Bernoulli terms B_2k / (2k x^2k), k = 1..7
  const double series =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 -
                              inv2 * (1.0 / 240.0 -
                                      inv2 * (1.0 / 132.0 -
                                              inv2 * (691.0 / 32760.0 - inv2 * (1.0 / 12.0)))))));
  return acc + std::log(x) - 0.5 * inv - series;
}

double trigamma(double x) {
  if (!(x > 0.0)) throw std::domain_error("trigamma: argument must be positive, got " + std::to_string(x));
  double acc = 0.0;
  while (x < kShiftThreshold) {
    acc += 1.0 / (x * x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  const double series =
      inv + 0.5 * inv2 +
      inv * inv2 *
          (1.0 / 6.0 -
           inv2 * (1.0 / 30.0 -
                   inv2 * (1.0 / 42.0 -
                           inv2 * (1.0 / 30.0 -
                                   inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * (7.0 / 6.0)))))));
  return acc + series;
}

}  // namespace evircod
