#include "kivi/kernel_dre.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace kivi::dre {

namespace {

void require_same_dim(const Matrix& a, const Matrix& b, const char* what) {
    if (a.cols() != b.cols()) {
        throw ShapeError(std::string(what) + ": dimension mismatch (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.cols()) + ")");
    }
}

void require_positive_sigma(double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("rbf kernel: bandwidth must be positive");
}

double median_of(std::vector<double>& values) {
    const std::size_t n = values.size();
    const auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
    std::nth_element(values.begin(), mid, values.end());
    const double upper = *mid;
    if (n % 2 == 1) return upper;
    const double lower = *std::max_element(values.begin(), mid);
    return 0.5 * (lower + upper);
}

double bandwidth_from_distances(std::vector<double>& distances) {
    const double median = median_of(distances);
    if (median > 0.0) return median;
    double smallest = std::numeric_limits<double>::infinity();
    for (double d : distances)
        if (d > 0.0) smallest = std::min(smallest, d);
    if (!std::isfinite(smallest)) throw DegenerateSamples("median bandwidth: all samples are identical");
    return smallest;
}

std::vector<double> upper_distances(const Matrix& sq) {
    const auto n = sq.rows();
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) out.push_back(std::sqrt(sq(i, j)));
    return out;
}

Matrix stack(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a;
    out.bottomRows(b.rows()) = b;
    return out;
}

}  // namespace

void KernelConfig::validate() const {
    if (bandwidth && !(*bandwidth > 0.0)) throw std::invalid_argument("kernel config: bandwidth must be positive");
    if (!(lambda > 0.0)) throw std::invalid_argument("kernel config: lambda must be positive");
    if (!(clip > 0.0)) throw std::invalid_argument("kernel config: clip must be positive");
}

Matrix to_matrix(const Tensor& samples) {
    if (samples.rank() != 2) throw ShapeError("samples must be an n x d matrix, got " + shape_string(samples.shape()));
    Matrix out(samples.dim(0), samples.dim(1));
    std::copy(samples.values().begin(), samples.values().end(), out.data());
    return out;
}

Matrix squared_distances(const Matrix& a, const Matrix& b) {
    require_same_dim(a, b, "squared_distances");
    const Vector na = a.rowwise().squaredNorm();
    const Vector nb = b.rowwise().squaredNorm();
    Matrix d = -2.0 * a * b.transpose();
    d.colwise() += na;
    d.rowwise() += nb.transpose();
    return d.cwiseMax(0.0);
}

double median_bandwidth(const Matrix& samples) {
    if (samples.rows() < 2) throw std::invalid_argument("median bandwidth: need at least two samples");
    auto distances = upper_distances(squared_distances(samples, samples));
    return bandwidth_from_distances(distances);
}

double median_bandwidth(const Matrix& a, const Matrix& b) {
    require_same_dim(a, b, "median bandwidth");
    return median_bandwidth(stack(a, b));
}

Matrix rbf_gram(const Matrix& a, const Matrix& b, double sigma) {
    require_positive_sigma(sigma);
    const double scale = -1.0 / (2.0 * sigma * sigma);
    return (squared_distances(a, b) * scale).array().exp().matrix();
}

Matrix rbf_gram(const Matrix& a, double sigma) {
    require_positive_sigma(sigma);
    const double scale = -1.0 / (2.0 * sigma * sigma);
    const Matrix sq = squared_distances(a, a);
    const auto n = a.rows();
    Matrix k(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        k(i, i) = 1.0;
        for (Eigen::Index j = i + 1; j < n; ++j) k(i, j) = k(j, i) = std::exp(sq(i, j) * scale);
    }
    return k;
}

RatioModel fit_ratio(const Matrix& num_samples, const Matrix& den_samples, const KernelConfig& config) {
    config.validate();
    if (num_samples.rows() == 0 || den_samples.rows() == 0) throw std::invalid_argument("fit_ratio: empty sample set");
    require_same_dim(num_samples, den_samples, "fit_ratio");

    const double sigma = config.bandwidth ? *config.bandwidth : median_bandwidth(num_samples, den_samples);
    const auto n_den = static_cast<double>(den_samples.rows());
    const auto n_num = static_cast<double>(num_samples.rows());

    Matrix system = rbf_gram(den_samples, sigma) / n_den;
    system.diagonal().array() += config.lambda;
    const Vector rhs = rbf_gram(den_samples, num_samples, sigma).rowwise().sum();

    Eigen::LLT<Matrix> llt(system);
    if (llt.info() != Eigen::Success) {
        throw FactorizationError("fit_ratio: regularized Gram matrix is not positive definite (lambda = " +
                                 std::to_string(config.lambda) + ")");
    }

    RatioModel model;
    model.den_centers = den_samples;
    model.num_centers = num_samples;
    model.alpha = llt.solve(rhs) * (-1.0 / (config.lambda * n_den * n_num));
    model.beta = Vector::Constant(num_samples.rows(), 1.0 / (config.lambda * n_num));
    model.bandwidth = sigma;
    model.lambda = config.lambda;
    model.clip = config.clip;
    return model;
}

Vector evaluate_ratio(const RatioModel& model, const Matrix& points) {
    require_same_dim(points, model.den_centers, "evaluate_ratio");
    const Vector raw = rbf_gram(points, model.den_centers, model.bandwidth) * model.alpha +
                       rbf_gram(points, model.num_centers, model.bandwidth) * model.beta;
    return raw.cwiseMax(model.clip);
}

Tensor evaluate_ratio(const RatioModel& model, const Tensor& points) {
    const Matrix z = to_matrix(points);
    require_same_dim(z, model.den_centers, "evaluate_ratio");
    const Matrix k_den = rbf_gram(z, model.den_centers, model.bandwidth);
    const Matrix k_num = rbf_gram(z, model.num_centers, model.bandwidth);
    const Vector raw = k_den * model.alpha + k_num * model.beta;

    const auto m = static_cast<std::size_t>(z.rows());
    std::vector<double> values(m);
    for (std::size_t i = 0; i < m; ++i) values[i] = std::max(raw[static_cast<Eigen::Index>(i)], model.clip);

    if (!points.requires_grad()) return Tensor::vector(std::move(values));
    // Backward may run after the caller's model is gone.
    auto owned = std::make_shared<RatioModel>(model);
    return Tensor::from_op("evaluate_ratio", {m}, std::move(values), {points},
                           [owned, k_den, k_num, z, raw](const detail::Node&, std::span<const double> g,
                                                         detail::GradSink& sink) {
                               // d r(z_i)/d z_i = sum_c w_c k(c, z_i) (c - z_i) / sigma^2
                               const RatioModel& mdl = *owned;
                               auto gz = sink.parent_grad(0);
                               const double inv_s2 = 1.0 / (mdl.bandwidth * mdl.bandwidth);
                               const Matrix weighted_den = k_den * mdl.alpha.asDiagonal();
                               const Matrix weighted_num = k_num * mdl.beta.asDiagonal();
                               const Matrix pull = weighted_den * mdl.den_centers + weighted_num * mdl.num_centers;
                               const Vector mass = weighted_den.rowwise().sum() + weighted_num.rowwise().sum();
                               const auto d = z.cols();
                               for (Eigen::Index i = 0; i < z.rows(); ++i) {
                                   if (raw[i] < mdl.clip) continue;
                                   const double gi = g[static_cast<std::size_t>(i)] * inv_s2;
                                   for (Eigen::Index j = 0; j < d; ++j)
                                       gz[static_cast<std::size_t>(i * d + j)] +=
                                           gi * (pull(i, j) - mass[i] * z(i, j));
                               }
                           });
}

double empirical_objective(const Vector& alpha, const Vector& beta, const Matrix& num_samples,
                           const Matrix& den_samples, double sigma, double lambda) {
    require_same_dim(num_samples, den_samples, "empirical_objective");
    if (alpha.size() != den_samples.rows() || beta.size() != num_samples.rows()) {
        throw ShapeError("empirical_objective: coefficient lengths do not match sample counts");
    }
    const auto n_den = static_cast<double>(den_samples.rows());
    const auto n_num = static_cast<double>(num_samples.rows());
    const Matrix k_den = rbf_gram(den_samples, sigma);
    const Matrix k_num = rbf_gram(num_samples, sigma);
    const Matrix k_dn = rbf_gram(den_samples, num_samples, sigma);

    const Vector k_den_a = k_den * alpha;
    const Vector k_dn_b = k_dn * beta;
    const double fit = (k_den_a.squaredNorm() + k_dn_b.squaredNorm() + 2.0 * k_den_a.dot(k_dn_b)) / (2.0 * n_den);
    const double linear = (alpha.dot(k_dn.rowwise().sum()) + beta.dot(k_num.rowwise().sum())) / n_num;
    const double penalty = 0.5 * lambda * (alpha.dot(k_den_a) + beta.dot(k_num * beta) + 2.0 * alpha.dot(k_dn_b));
    return fit - linear + penalty;
}

ObjectiveGradient objective_gradient(const Vector& alpha, const Vector& beta, const Matrix& num_samples,
                                     const Matrix& den_samples, double sigma, double lambda) {
    require_same_dim(num_samples, den_samples, "objective_gradient");
    const auto n_den = static_cast<double>(den_samples.rows());
    const auto n_num = static_cast<double>(num_samples.rows());
    const Matrix k_den = rbf_gram(den_samples, sigma);
    const Matrix k_num = rbf_gram(num_samples, sigma);
    const Matrix k_dn = rbf_gram(den_samples, num_samples, sigma);

    const Vector fitted = k_den * alpha + k_dn * beta;  // r at the denominator samples
    const Vector t1a = k_den * fitted / n_den;
    const Vector t2a = k_dn.rowwise().sum() / n_num;
    const Vector t3a = lambda * fitted;
    const Vector t1b = k_dn.transpose() * fitted / n_den;
    const Vector t2b = k_num.rowwise().sum() / n_num;
    const Vector t3b = lambda * (k_dn.transpose() * alpha + k_num * beta);

    ObjectiveGradient out;
    out.d_alpha = t1a - t2a + t3a;
    out.d_beta = t1b - t2b + t3b;
    for (const Vector* t : {&t1a, &t2a, &t3a, &t1b, &t2b, &t3b})
        out.term_scale = std::max(out.term_scale, t->cwiseAbs().maxCoeff());
    return out;
}

}  // namespace kivi::dre
