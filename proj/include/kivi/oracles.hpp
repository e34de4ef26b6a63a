#pragma once

// Ground-truth machinery used to verify the estimators: closed-form Gaussian
// KL, trapezoid-rule KL in 1-D, an extended-precision uLSIF solver that does
// not use the simplified closed form, and Hamiltonian Monte Carlo.

#include <Eigen/Core>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "kivi/kernel_dre.hpp"
#include "kivi/rng.hpp"

namespace kivi::oracles {

/// KL(N(mu1, diag s1^2) || N(mu2, diag s2^2)).
double analytic_gaussian_kl(std::span<const double> mu1, std::span<const double> s1, std::span<const double> mu2,
                            std::span<const double> s2);

struct Grid {
    double lo = -1.0;
    double hi = 1.0;
    std::size_t points = (1u << 15) + 1;

    double step() const { return (hi - lo) / static_cast<double>(points - 1); }
    double at(std::size_t i) const { return lo + step() * static_cast<double>(i); }
};

/// mean +- 12 std with 2^15 + 1 nodes.
Grid default_grid(double mean, double std);

using Density1d = std::function<double(double)>;

/// Trapezoid rule for ∫ q log(q/p). Throws DomainError where q > 0 and p <= 0.
double quadrature_kl_1d(const Density1d& q, const Density1d& p, const Grid& grid);

/// Trapezoid rule for ∫ f.
double trapezoid(const Density1d& f, const Grid& grid);

struct SingularSystem : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UlsifSolution {
    dre::Vector alpha;  // one per denominator sample
    dre::Vector beta;   // one per numerator sample
};

/// Minimizes the expanded uLSIF objective by solving the full
/// (n_den + n_num)-dimensional stationarity system in 100-digit arithmetic.
/// The full system is severely ill-conditioned for low-dimensional samples,
/// hence the extended precision.
UlsifSolution brute_force_ulsif(const dre::Matrix& num_samples, const dre::Matrix& den_samples, double sigma,
                                double lambda);

struct HmcConfig {
    std::size_t chains = 100;
    std::size_t iterations = 200;
    std::size_t leapfrog_steps = 10;
    double initial_step_size = 1e-3;
    double target_accept = 0.8;
    std::optional<std::size_t> burn_in;  // default: iterations / 2
    double step_jitter = 0.2;            // each trajectory uses step * U[1 - j, 1 + j]

    // Dual-averaging constants.
    double gamma = 0.05;
    double t0 = 10.0;
    double kappa = 0.75;

    void validate() const;
    std::size_t effective_burn_in() const { return burn_in ? *burn_in : iterations / 2; }
};

/// Returns log p(z) and writes its gradient into `grad`.
using LogDensityFn = std::function<double(std::span<const double> z, std::span<double> grad)>;

struct HmcResult {
    dre::Matrix samples;  // (chains * kept) x d, chain-major
    double accept_rate = 0.0;  // post-burn-in, all chains
    std::size_t divergences = 0;
    double step_size = 0.0;  // adapted, shared by all chains
};

/// Energy change above which a trajectory counts as divergent.
inline constexpr double kDivergenceThreshold = 1000.0;

/// Runs chains in lockstep, each on its own split of `rng`. Chains start from
/// `initial` if given (one row per chain), otherwise from N(0, I). The step
/// size is shared and adapted during burn-in.
HmcResult hmc_sample(const LogDensityFn& log_density, std::size_t dim, const HmcConfig& config, const Rng& rng,
                     const std::optional<dre::Matrix>& initial = std::nullopt);

/// One leapfrog trajectory of `steps` steps; position and momentum updated in
/// place. Returns log p at the final position.
double leapfrog(const LogDensityFn& log_density, std::span<double> position, std::span<double> momentum,
                double step_size, std::size_t steps);

}  // namespace kivi::oracles
