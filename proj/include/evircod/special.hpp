#pragma once

namespace evircod {

/// psi(x) = d/dx ln Gamma(x) for x > 0. Shifts x upward with the recurrence
/// psi(x) = psi(x + 1) - 1/x until x >= 6, then sums the asymptotic series.
/// Throws std::domain_error for x <= 0 or NaN.
double digamma(double x);

/// psi'(x) for x > 0, same shift-then-series scheme as digamma().
double trigamma(double x);

}  // namespace evircod
