#pragma once

namespace kivi {

/// Digamma ψ(x) for x > 0: recurrence up to x >= 6, then the asymptotic
/// Bernoulli series. Absolute error below 1e-12 on (0, inf).
double digamma(double x);

/// Trigamma ψ'(x) for x > 0, same scheme as digamma.
double trigamma(double x);

/// log Γ(x) for x > 0.
double log_gamma(double x);

inline constexpr double kEulerGamma = 0.57721566490153286060651209008240243;
inline constexpr double kLog2Pi = 1.83787706640934548356065947281123527;

}  // namespace kivi
