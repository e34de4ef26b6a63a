#include "kivi/oracles.hpp"

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <boost/multiprecision/eigen.hpp>
#include <cmath>
#include <string>

#include "kivi/tensor.hpp"

namespace kivi::oracles {

double analytic_gaussian_kl(std::span<const double> mu1, std::span<const double> s1, std::span<const double> mu2,
                            std::span<const double> s2) {
    const std::size_t d = mu1.size();
    if (s1.size() != d || mu2.size() != d || s2.size() != d) throw ShapeError("analytic_gaussian_kl: length mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        if (!(s1[i] > 0.0) || !(s2[i] > 0.0)) throw DomainError("analytic_gaussian_kl: stds must be positive");
        const double ratio = s1[i] / s2[i];
        const double diff = (mu2[i] - mu1[i]) / s2[i];
        kl += ratio * ratio + diff * diff - 1.0 - 2.0 * std::log(ratio);
    }
    return 0.5 * kl;
}

Grid default_grid(double mean, double std) { return Grid{mean - 12.0 * std, mean + 12.0 * std, (1u << 15) + 1}; }

double trapezoid(const Density1d& f, const Grid& grid) {
    if (grid.points < 2 || !(grid.hi > grid.lo)) throw std::invalid_argument("trapezoid: degenerate grid");
    double total = 0.0;
    for (std::size_t i = 0; i < grid.points; ++i) {
        const double w = (i == 0 || i + 1 == grid.points) ? 0.5 : 1.0;
        total += w * f(grid.at(i));
    }
    return total * grid.step();
}

double quadrature_kl_1d(const Density1d& q, const Density1d& p, const Grid& grid) {
    return trapezoid(
        [&](double z) {
            const double qz = q(z);
            if (qz <= 0.0) return 0.0;
            const double pz = p(z);
            if (!(pz > 0.0)) throw DomainError("quadrature_kl_1d: p vanishes on the support of q at " + std::to_string(z));
            return qz * (std::log(qz) - std::log(pz));
        },
        grid);
}

namespace {

using Real = boost::multiprecision::cpp_bin_float_100;
using RealMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
using RealVector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

RealMatrix exact_gram(const dre::Matrix& a, const dre::Matrix& b, const Real& sigma) {
    RealMatrix k(a.rows(), b.rows());
    const Real denom = 2 * sigma * sigma;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.rows(); ++j) {
            Real sq = 0;
            for (Eigen::Index c = 0; c < a.cols(); ++c) {
                const Real diff = Real(a(i, c)) - Real(b(j, c));
                sq += diff * diff;
            }
            k(i, j) = exp(-sq / denom);
        }
    }
    return k;
}

// Gaussian elimination with partial pivoting.
RealVector solve(RealMatrix a, RealVector b) {
    const Eigen::Index n = a.rows();
    Real largest = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) largest = std::max(largest, Real(abs(a(i, j))));
    const Real tiny = largest * Real("1e-90");
    for (Eigen::Index col = 0; col < n; ++col) {
        Eigen::Index pivot = col;
        for (Eigen::Index r = col + 1; r < n; ++r)
            if (abs(a(r, col)) > abs(a(pivot, col))) pivot = r;
        if (abs(a(pivot, col)) <= tiny) throw SingularSystem("brute_force_ulsif: singular stationarity system");
        if (pivot != col) {
            a.row(pivot).swap(a.row(col));
            std::swap(b(pivot), b(col));
        }
        for (Eigen::Index r = col + 1; r < n; ++r) {
            const Real factor = a(r, col) / a(col, col);
            if (factor == 0) continue;
            for (Eigen::Index c = col; c < n; ++c) a(r, c) -= factor * a(col, c);
            b(r) -= factor * b(col);
        }
    }
    RealVector x(n);
    for (Eigen::Index r = n - 1; r >= 0; --r) {
        Real acc = b(r);
        for (Eigen::Index c = r + 1; c < n; ++c) acc -= a(r, c) * x(c);
        x(r) = acc / a(r, r);
    }
    return x;
}

}  // namespace

UlsifSolution brute_force_ulsif(const dre::Matrix& num_samples, const dre::Matrix& den_samples, double sigma,
                                double lambda) {
    if (num_samples.cols() != den_samples.cols()) throw ShapeError("brute_force_ulsif: dimension mismatch");
    if (num_samples.rows() == 0 || den_samples.rows() == 0) throw std::invalid_argument("brute_force_ulsif: empty set");
    if (!(sigma > 0.0)) throw std::invalid_argument("brute_force_ulsif: bandwidth must be positive");
    if (!(lambda > 0.0)) throw SingularSystem("brute_force_ulsif: the stationarity system is singular for lambda <= 0");

    const Eigen::Index np = den_samples.rows();
    const Eigen::Index nq = num_samples.rows();
    const Real s(sigma), lam(lambda), inv_np = Real(1) / Real(np), inv_nq = Real(1) / Real(nq);
    const RealMatrix kp = exact_gram(den_samples, den_samples, s);
    const RealMatrix kq = exact_gram(num_samples, num_samples, s);
    const RealMatrix kpq = exact_gram(den_samples, num_samples, s);

    // Rows from setting dL/dalpha and dL/dbeta to zero:
    //   (Kp Kpq / np + lam Kpq) b + Kp (Kp / np + lam I) a = Kpq 1 / nq
    //   (Kpq' Kpq / np + lam Kq) b + Kpq' (Kp / np + lam I) a = Kq 1 / nq
    RealMatrix shifted = kp * inv_np;
    for (Eigen::Index i = 0; i < np; ++i) shifted(i, i) += lam;

    RealMatrix system(np + nq, np + nq);
    system.topLeftCorner(np, np) = kp * shifted;
    system.topRightCorner(np, nq) = kp * kpq * inv_np + kpq * lam;
    system.bottomLeftCorner(nq, np) = kpq.transpose() * shifted;
    system.bottomRightCorner(nq, nq) = kpq.transpose() * kpq * inv_np + kq * lam;

    RealVector rhs(np + nq);
    rhs.head(np) = kpq.rowwise().sum() * inv_nq;
    rhs.tail(nq) = kq.rowwise().sum() * inv_nq;

    const RealVector x = solve(system, rhs);
    UlsifSolution out;
    out.alpha.resize(np);
    out.beta.resize(nq);
    for (Eigen::Index i = 0; i < np; ++i) out.alpha(i) = static_cast<double>(x(i));
    for (Eigen::Index j = 0; j < nq; ++j) out.beta(j) = static_cast<double>(x(np + j));
    return out;
}

void HmcConfig::validate() const {
    if (chains == 0 || iterations == 0 || leapfrog_steps == 0) {
        throw std::invalid_argument("hmc config: chains, iterations and leapfrog steps must be at least 1");
    }
    if (!(initial_step_size > 0.0)) throw std::invalid_argument("hmc config: step size must be positive");
    if (!(target_accept > 0.0 && target_accept < 1.0)) {
        throw std::invalid_argument("hmc config: target acceptance must lie in (0, 1)");
    }
    if (!(step_jitter >= 0.0 && step_jitter < 1.0)) throw std::invalid_argument("hmc config: jitter must lie in [0, 1)");
    if (effective_burn_in() >= iterations) throw std::invalid_argument("hmc config: burn-in leaves no samples");
}

double leapfrog(const LogDensityFn& log_density, std::span<double> position, std::span<double> momentum,
                double step_size, std::size_t steps) {
    std::vector<double> grad(position.size());
    double logp = log_density(position, grad);
    for (std::size_t i = 0; i < momentum.size(); ++i) momentum[i] += 0.5 * step_size * grad[i];
    for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t i = 0; i < position.size(); ++i) position[i] += step_size * momentum[i];
        logp = log_density(position, grad);
        const double scale = (s + 1 == steps) ? 0.5 : 1.0;
        for (std::size_t i = 0; i < momentum.size(); ++i) momentum[i] += scale * step_size * grad[i];
    }
    return logp;
}

HmcResult hmc_sample(const LogDensityFn& log_density, std::size_t dim, const HmcConfig& config, const Rng& rng,
                     const std::optional<dre::Matrix>& initial) {
    config.validate();
    if (initial && (static_cast<std::size_t>(initial->rows()) != config.chains ||
                    static_cast<std::size_t>(initial->cols()) != dim)) {
        throw ShapeError("hmc_sample: initial positions must be chains x dim");
    }
    const std::size_t chains = config.chains;
    const std::size_t burn = config.effective_burn_in();
    const std::size_t kept = config.iterations - burn;

    HmcResult result;
    result.samples.resize(static_cast<Eigen::Index>(chains * kept), static_cast<Eigen::Index>(dim));
    std::size_t accepted = 0;

    std::vector<Rng> streams;
    streams.reserve(chains);
    std::vector<std::vector<double>> z(chains, std::vector<double>(dim));
    std::vector<double> logp(chains);
    std::vector<double> proposal(dim), momentum(dim), grad(dim);
    for (std::size_t c = 0; c < chains; ++c) {
        streams.push_back(rng.split(c));
        for (std::size_t i = 0; i < dim; ++i)
            z[c][i] = initial ? (*initial)(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i))
                              : streams[c].normal();
        logp[c] = log_density(z[c], grad);
    }

    // One step size shared by all chains, adapted on the chain-averaged
    // acceptance probability.
    double log_step = std::log(config.initial_step_size);
    const double mu = std::log(10.0 * config.initial_step_size);
    double h_bar = 0.0, log_step_bar = log_step;

    for (std::size_t it = 0; it < config.iterations; ++it) {
        const bool adapting = it < burn;
        const double base_step = std::exp(adapting ? log_step : log_step_bar);
        double accept_sum = 0.0;
        for (std::size_t c = 0; c < chains; ++c) {
            Rng& chain_rng = streams[c];
            const double step =
                config.step_jitter > 0.0
                    ? base_step * chain_rng.uniform(1.0 - config.step_jitter, 1.0 + config.step_jitter)
                    : base_step;
            double kinetic0 = 0.0;
            for (std::size_t i = 0; i < dim; ++i) {
                momentum[i] = chain_rng.normal();
                kinetic0 += 0.5 * momentum[i] * momentum[i];
            }
            proposal = z[c];
            double logp_new;
            double accept_prob;
            {
                FiniteCheckSuspend suspend;
                logp_new = leapfrog(log_density, proposal, momentum, step, config.leapfrog_steps);
                double kinetic1 = 0.0;
                for (double m : momentum) kinetic1 += 0.5 * m * m;
                const double energy_change = (-logp_new + kinetic1) - (-logp[c] + kinetic0);
                if (!std::isfinite(energy_change) || energy_change > kDivergenceThreshold) {
                    ++result.divergences;
                    accept_prob = 0.0;
                } else {
                    accept_prob = std::min(1.0, std::exp(-energy_change));
                }
            }
            accept_sum += accept_prob;
            if (chain_rng.uniform() < accept_prob) {
                z[c] = proposal;
                logp[c] = logp_new;
                if (!adapting) ++accepted;
            }
            if (!adapting) {
                const auto row = static_cast<Eigen::Index>(c * kept + (it - burn));
                for (std::size_t i = 0; i < dim; ++i) result.samples(row, static_cast<Eigen::Index>(i)) = z[c][i];
            }
        }
        if (adapting) {
            const double m = static_cast<double>(it + 1);
            const double w = 1.0 / (m + config.t0);
            const double mean_accept = accept_sum / static_cast<double>(chains);
            h_bar = (1.0 - w) * h_bar + w * (config.target_accept - mean_accept);
            log_step = mu - std::sqrt(m) / config.gamma * h_bar;
            const double eta = std::pow(m, -config.kappa);
            log_step_bar = eta * log_step + (1.0 - eta) * log_step_bar;
        }
    }
    result.step_size = std::exp(log_step_bar);
    result.accept_rate = static_cast<double>(accepted) / static_cast<double>(chains * kept);
    return result;
}

}  // namespace kivi::oracles
