#pragma once

// Closed-form RKHS density-ratio estimation with an RBF kernel.
//
// Given numerator samples (density n) and denominator samples (density d),
// fit_ratio returns r(z) ~ n(z)/d(z) as
//
//   r(z) = sum_i alpha_i k(den_i, z) + sum_j beta_j k(num_j, z)
//
// minimizing the squared loss 1/2 E_d[(r - n/d)^2] plus (lambda/2)||r||_H^2.
// The minimizer has beta = 1/(lambda n_num) and
//   alpha = -1/(lambda n_den n_num) (K_den/n_den + lambda I)^{-1} K_den,num 1.
// For KL(q||p) estimation with the reverse trick the numerator is p and the
// denominator is q.

#include <Eigen/Core>
#include <optional>
#include <stdexcept>

#include "kivi/tensor.hpp"

namespace kivi::dre {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct DegenerateSamples : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// The regularized Gram system could not be factorized (lambda too small for
/// the sample geometry).
struct FactorizationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct KernelConfig {
    std::optional<double> bandwidth;  // absent: median heuristic over both sample sets
    double lambda = 1e-3;
    double clip = 1e-8;

    void validate() const;
};

struct RatioModel {
    Matrix den_centers;  // n_den x d
    Matrix num_centers;  // n_num x d
    Vector alpha;        // n_den
    Vector beta;         // n_num
    double bandwidth = 1.0;
    double lambda = 1e-3;
    double clip = 1e-8;

    std::size_t dim() const noexcept { return static_cast<std::size_t>(den_centers.cols()); }
};

Matrix to_matrix(const Tensor& samples);

/// Squared distances via ||a||^2 + ||b||^2 - 2 a.b, floored at zero.
Matrix squared_distances(const Matrix& a, const Matrix& b);

/// Median of the n(n-1)/2 pairwise Euclidean distances (mean of the two middle
/// order statistics for an even count). A zero median falls back to the
/// smallest positive distance; identical samples throw DegenerateSamples.
double median_bandwidth(const Matrix& samples);
double median_bandwidth(const Matrix& a, const Matrix& b);

/// K[i, j] = exp(-||a_i - b_j||^2 / (2 sigma^2)).
Matrix rbf_gram(const Matrix& a, const Matrix& b, double sigma);
/// Gram matrix of a set with itself: exactly symmetric with unit diagonal.
Matrix rbf_gram(const Matrix& a, double sigma);

RatioModel fit_ratio(const Matrix& num_samples, const Matrix& den_samples, const KernelConfig& config);
inline RatioModel fit_ratio(const Tensor& num_samples, const Tensor& den_samples, const KernelConfig& config) {
    return fit_ratio(to_matrix(num_samples), to_matrix(den_samples), config);
}

/// Clipped ratio values at constant points.
Vector evaluate_ratio(const RatioModel& model, const Matrix& points);
/// Clipped ratio values, differentiable w.r.t. `points` only. The model's
/// centers and coefficients act as constants.
Tensor evaluate_ratio(const RatioModel& model, const Tensor& points);

/// Expanded empirical objective (constant dropped) for coefficients over the
/// given centers: 1/(2 n_den) ||K_den a + K_dn b||^2 - 1/n_num (a'K_dn 1 + b'K_num 1)
/// + lambda/2 (a'K_den a + b'K_num b + 2 a'K_dn b).
double empirical_objective(const Vector& alpha, const Vector& beta, const Matrix& num_samples,
                           const Matrix& den_samples, double sigma, double lambda);

struct ObjectiveGradient {
    Vector d_alpha;
    Vector d_beta;
    /// Largest entry magnitude among the terms summed into the gradient; the
    /// scale against which a stationarity residual is judged.
    double term_scale = 0.0;
};

ObjectiveGradient objective_gradient(const Vector& alpha, const Vector& beta, const Matrix& num_samples,
                                     const Matrix& den_samples, double sigma, double lambda);

}  // namespace kivi::dre
