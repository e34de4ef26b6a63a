#include "kivi/special.hpp"

#include <cmath>
#include <string>

#include "kivi/tensor.hpp"

namespace kivi {

namespace {

constexpr double kLift = 10.0;

void require_positive(double x, const char* fn) {
    if (!(x > 0.0)) throw DomainError(std::string(fn) + ": argument must be positive, got " + std::to_string(x));
}

}  // namespace

double digamma(double x) {
    require_positive(x, "digamma");
    double shift = 0.0;
    while (x < kLift) {
        shift -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    // B_2k / (2k) coefficients.
    const double series =
        inv2 * (1.0 / 12 -
                inv2 * (1.0 / 120 -
                        inv2 * (1.0 / 252 -
                                inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12.0))))));
    return shift + std::log(x) - 0.5 * inv - series;
}

double trigamma(double x) {
    require_positive(x, "trigamma");
    double shift = 0.0;
    while (x < kLift) {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    const double series =
        inv * inv2 *
        (1.0 / 6 -
         inv2 * (1.0 / 30 - inv2 * (1.0 / 42 - inv2 * (1.0 / 30 - inv2 * (5.0 / 66 - inv2 * (691.0 / 2730 - inv2 * 7.0 / 6))))));
    return shift + inv + 0.5 * inv2 + series;
}

double log_gamma(double x) {
    require_positive(x, "log_gamma");
    return std::lgamma(x);
}

}  // namespace kivi
