#include "kivi/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "kivi/special.hpp"

namespace kivi::models {

namespace {

Tensor as_constant(const Vector& v) { return Tensor::vector(std::vector<double>(v.data(), v.data() + v.size())); }

Tensor as_constant(const Matrix& m) {
    return Tensor::matrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                          std::vector<double>(m.data(), m.data() + m.size()));
}

void require_points(const Tensor& z, std::size_t d, const char* what) {
    if (z.rank() != 2 || z.dim(1) != d) {
        throw ShapeError(std::string(what) + ": expected [n, " + std::to_string(d) + "] points, got " +
                         shape_string(z.shape()));
    }
}

Tensor standard_normal_log_density(const Tensor& z) {
    const double c = 0.5 * static_cast<double>(z.dim(1)) * kLog2Pi;
    return -0.5 * sum(square(z), 1) - c;
}

Matrix standard_normal_matrix(std::size_t n, std::size_t d, Rng& rng) {
    Matrix m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

bool empty_batch(const DataBatch* batch) { return batch == nullptr || batch->size() == 0; }

}  // namespace

Tensor TargetModel::log_joint(const Tensor& z, const DataBatch* batch) const {
    return log_likelihood(z, batch) + log_prior(z);
}

oracles::LogDensityFn TargetModel::log_joint_fn(const DataBatch* batch) const {
    return [this, batch](std::span<const double> z, std::span<double> grad) {
        Tensor point = Tensor::parameter({1, z.size()}, std::vector<double>(z.begin(), z.end()));
        const Tensor value = sum(log_joint(point, batch));
        const auto grads = backward(value);
        const auto g = grads.values(point);
        std::copy(g.begin(), g.end(), grad.begin());
        return value.item();
    };
}

Tensor log_sum_exp(const std::vector<Tensor>& terms) {
    if (terms.empty()) throw std::invalid_argument("log_sum_exp: no terms");
    std::vector<double> peak(terms.front().size(), -std::numeric_limits<double>::infinity());
    for (const auto& t : terms) {
        if (t.shape() != terms.front().shape()) throw ShapeError("log_sum_exp: shape mismatch");
        for (std::size_t i = 0; i < peak.size(); ++i) peak[i] = std::max(peak[i], t[i]);
    }
    const Tensor m = Tensor::constant(terms.front().shape(), std::move(peak));
    Tensor total = exp(terms.front() - m);
    for (std::size_t k = 1; k < terms.size(); ++k) total = total + exp(terms[k] - m);
    return m + log(total);
}

Tensor normal_log_density(const Tensor& x, double mean, double std) {
    return -0.5 * square((x - mean) / std) - std::log(std) - 0.5 * kLog2Pi;
}

// ---------------------------------------------------------------------- GMM

GaussianMixtureTarget::GaussianMixtureTarget(std::vector<double> means, std::vector<double> stds,
                                             std::vector<double> weights)
    : means_(std::move(means)), stds_(std::move(stds)), weights_(std::move(weights)) {
    if (means_.empty() || means_.size() != stds_.size() || means_.size() != weights_.size()) {
        throw std::invalid_argument("gaussian mixture: means, stds and weights must have equal non-zero length");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < means_.size(); ++k) {
        if (!(stds_[k] > 0.0)) throw std::invalid_argument("gaussian mixture: stds must be positive");
        if (!(weights_[k] > 0.0)) throw std::invalid_argument("gaussian mixture: weights must be positive");
        total += weights_[k];
    }
    if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("gaussian mixture: weights must sum to 1");
}

GaussianMixtureTarget GaussianMixtureTarget::symmetric() { return {{-3.0, 3.0}, {1.0, 1.0}, {0.5, 0.5}}; }

Tensor GaussianMixtureTarget::log_likelihood(const Tensor& z, const DataBatch*) const {
    require_points(z, 1, "gmm log_likelihood");
    return Tensor::zeros({z.dim(0)});
}

Tensor GaussianMixtureTarget::log_prior(const Tensor& z) const {
    require_points(z, 1, "gmm log_prior");
    const Tensor flat = reshape(z, {z.dim(0)});
    std::vector<Tensor> terms;
    for (std::size_t k = 0; k < means_.size(); ++k)
        terms.push_back(normal_log_density(flat, means_[k], stds_[k]) + std::log(weights_[k]));
    return log_sum_exp(terms);
}

Matrix GaussianMixtureTarget::sample_prior(std::size_t n, Rng& rng) const {
    std::discrete_distribution<std::size_t> pick(weights_.begin(), weights_.end());
    Matrix out(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = pick(rng.engine());
        out(static_cast<Eigen::Index>(i), 0) = means_[k] + stds_[k] * rng.normal();
    }
    return out;
}

double GaussianMixtureTarget::density(double z) const {
    double p = 0.0;
    for (std::size_t k = 0; k < means_.size(); ++k) {
        const double u = (z - means_[k]) / stds_[k];
        p += weights_[k] * std::exp(-0.5 * u * u - 0.5 * kLog2Pi) / stds_[k];
    }
    return p;
}

// ---------------------------------------------------------------------- BLR

BlrModel::BlrModel(Matrix x, Vector y) : x_(std::move(x)) {
    if (x_.rows() != y.size()) throw ShapeError("blr: X and Y row counts differ");
    for (double v : y)
        if (v != 0.0 && v != 1.0) throw std::invalid_argument("blr: labels must be 0 or 1");
    data_.x = x_;
    data_.y = std::move(y);
}

BlrModel BlrModel::synthetic(std::size_t n, std::size_t d, Rng& rng, BlrLabels labels) {
    Matrix x(n, d);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-5.0, 5.0);
    Vector w(d);
    for (auto& v : w) v = rng.normal();
    Vector y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = x.row(static_cast<Eigen::Index>(i)).dot(w);
        if (labels == BlrLabels::predicted) {
            y(static_cast<Eigen::Index>(i)) = a > 0.0 ? 1.0 : 0.0;
        } else {
            y(static_cast<Eigen::Index>(i)) = rng.uniform() < 1.0 / (1.0 + std::exp(-a)) ? 1.0 : 0.0;
        }
    }
    BlrModel model(std::move(x), std::move(y));
    model.true_weight_ = w;
    return model;
}

Tensor BlrModel::log_likelihood(const Tensor& z, const DataBatch* batch) const {
    require_points(z, latent_dim(), "blr log_likelihood");
    if (empty_batch(batch)) return Tensor::zeros({z.dim(0)});
    if (static_cast<std::size_t>(batch->x.cols()) != latent_dim()) throw ShapeError("blr: batch feature mismatch");
    const Tensor logits = matmul(z, as_constant(Matrix(batch->x.transpose())));  // [n, B]
    return sum(as_constant(batch->y) * logits - softplus(logits), 1) * batch->scale;
}

Tensor BlrModel::log_prior(const Tensor& z) const {
    require_points(z, latent_dim(), "blr log_prior");
    return standard_normal_log_density(z);
}

Matrix BlrModel::sample_prior(std::size_t n, Rng& rng) const { return standard_normal_matrix(n, latent_dim(), rng); }

// ----------------------------------------------------------- Gaussian mean

GaussianMeanModel::GaussianMeanModel(Vector observations, double noise_std, double prior_std)
    : noise_std_(noise_std), prior_std_(prior_std) {
    if (!(noise_std > 0.0) || !(prior_std > 0.0)) throw std::invalid_argument("gaussian mean: stds must be positive");
    data_.x = Matrix(observations.size(), 1);
    data_.x.col(0) = observations;
    data_.y = std::move(observations);
}

Tensor GaussianMeanModel::log_likelihood(const Tensor& z, const DataBatch* batch) const {
    require_points(z, 1, "gaussian mean log_likelihood");
    if (empty_batch(batch)) return Tensor::zeros({z.dim(0)});
    const std::size_t b = batch->size();
    const Tensor spread = matmul(z, Tensor::full({1, b}, 1.0));  // [n, B]
    const Tensor resid = spread - as_constant(batch->y);
    return sum(normal_log_density(resid, 0.0, noise_std_), 1) * batch->scale;
}

Tensor GaussianMeanModel::log_prior(const Tensor& z) const {
    require_points(z, 1, "gaussian mean log_prior");
    return reshape(normal_log_density(z, 0.0, prior_std_), {z.dim(0)});
}

Matrix GaussianMeanModel::sample_prior(std::size_t n, Rng& rng) const {
    return standard_normal_matrix(n, 1, rng) * prior_std_;
}

double GaussianMeanModel::posterior_mean() const {
    const double precision = 1.0 / (prior_std_ * prior_std_) + static_cast<double>(data_.size()) / (noise_std_ * noise_std_);
    return data_.y.sum() / (noise_std_ * noise_std_) / precision;
}

double GaussianMeanModel::posterior_std() const {
    const double precision = 1.0 / (prior_std_ * prior_std_) + static_cast<double>(data_.size()) / (noise_std_ * noise_std_);
    return 1.0 / std::sqrt(precision);
}

// -------------------------------------------------------------------- Gamma

double gamma_kl(double a, double b, double a0, double b0) {
    if (!(a > 0.0) || !(b > 0.0) || !(a0 > 0.0) || !(b0 > 0.0)) {
        throw DomainError("gamma_kl: shape and rate must be positive");
    }
    return (a - a0) * digamma(a) - log_gamma(a) + log_gamma(a0) + a0 * (std::log(b) - std::log(b0)) +
           a * (b0 - b) / b;
}

Tensor gamma_kl(const Tensor& a, const Tensor& b, double a0, double b0) {
    return (a - a0) * digamma(a) - lgamma(a) + log_gamma(a0) + a0 * (log(b) - std::log(b0)) + a * (b0 - b) / b;
}

Tensor gamma_expected_log_lik(const Tensor& residual_sq, const Tensor& a, const Tensor& b) {
    return 0.5 * (digamma(a) - log(b) - (a / b) * residual_sq - kLog2Pi);
}

// ---------------------------------------------------------------------- BNN

BnnRegressionModel::BnnRegressionModel(std::vector<std::size_t> layers, DataBatch train)
    : layers_(std::move(layers)), train_(std::move(train)) {
    if (layers_.size() < 2) throw std::invalid_argument("bnn: need input and output sizes");
    if (layers_.back() != 1) throw std::invalid_argument("bnn: regression output must be 1-D");
    for (auto s : layers_)
        if (s == 0) throw std::invalid_argument("bnn: layer sizes must be positive");
    if (train_.size() > 0 && static_cast<std::size_t>(train_.x.cols()) != layers_.front()) {
        throw ShapeError("bnn: training features do not match the input size");
    }
    log_a_ = Tensor::parameter({1}, {std::log(6.0)});
    log_b_ = Tensor::parameter({1}, {std::log(6.0)});
}

std::vector<std::size_t> BnnRegressionModel::block_sizes() const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) out.push_back((layers_[l] + 1) * layers_[l + 1]);
    return out;
}

std::size_t BnnRegressionModel::latent_dim() const {
    const auto b = block_sizes();
    return std::accumulate(b.begin(), b.end(), std::size_t{0});
}

double BnnRegressionModel::a() const { return std::exp(log_a_.item()); }
double BnnRegressionModel::b() const { return std::exp(log_b_.item()); }

Tensor BnnRegressionModel::forward(const Tensor& w, const Matrix& x) const {
    require_points(w, latent_dim(), "bnn forward");
    if (static_cast<std::size_t>(x.cols()) != layers_.front()) throw ShapeError("bnn forward: feature mismatch");
    const std::size_t n = w.dim(0), rows = static_cast<std::size_t>(x.rows());
    Matrix x_aug(rows, x.cols() + 1);
    x_aug << x, Matrix::Ones(rows, 1);
    std::optional<Tensor> h;
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
        const std::size_t in = layers_[l], out = layers_[l + 1];
        const std::size_t size = (in + 1) * out;
        const Tensor block = reshape(slice(w, 1, offset, offset + size), {n, in + 1, out});
        offset += size;
        Tensor pre = h ? batched_matmul(concat({*h, Tensor::full({n, rows, 1}, 1.0)}, 2), block)
                       : batched_matmul(as_constant(x_aug), block);
        h = (l + 2 < layers_.size()) ? relu(pre) : pre;
    }
    return reshape(*h, {n, rows});
}

Tensor BnnRegressionModel::log_likelihood(const Tensor& w, const DataBatch* batch) const {
    if (empty_batch(batch)) {
        require_points(w, latent_dim(), "bnn log_likelihood");
        return Tensor::zeros({w.dim(0)});
    }
    const Tensor resid_sq = square(forward(w, batch->x) - as_constant(batch->y));
    return sum(gamma_expected_log_lik(resid_sq, exp(log_a_), exp(log_b_)), 1) * batch->scale;
}

Tensor BnnRegressionModel::log_prior(const Tensor& w) const {
    require_points(w, latent_dim(), "bnn log_prior");
    return standard_normal_log_density(w);
}

Matrix BnnRegressionModel::sample_prior(std::size_t n, Rng& rng) const {
    return standard_normal_matrix(n, latent_dim(), rng);
}

Tensor BnnRegressionModel::extra_kl() const { return sum(gamma_kl(exp(log_a_), exp(log_b_))); }

// -------------------------------------------------------------- prediction

double log_mean_exp(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("log_mean_exp: empty input");
    const double m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s / static_cast<double>(v.size()));
}

Standardizer Standardizer::fit(const DataBatch& data) {
    if (data.size() < 2) throw std::invalid_argument("standardizer: need at least two rows");
    Standardizer s;
    const auto n = static_cast<double>(data.size());
    s.x_mean = data.x.colwise().mean().transpose();
    s.x_std = ((data.x.rowwise() - s.x_mean.transpose()).array().square().colwise().sum() / n).sqrt().transpose();
    for (auto& v : s.x_std)
        if (!(v > 0.0)) v = 1.0;
    s.y_mean = data.y.mean();
    s.y_std = std::sqrt((data.y.array() - s.y_mean).square().sum() / n);
    if (!(s.y_std > 0.0)) s.y_std = 1.0;
    return s;
}

DataBatch Standardizer::apply(const DataBatch& data) const {
    DataBatch out;
    out.x = (data.x.rowwise() - x_mean.transpose()).array().rowwise() / x_std.transpose().array();
    out.y = (data.y.array() - y_mean) / y_std;
    out.scale = data.scale;
    return out;
}

Prediction predict(const BnnRegressionModel& model, const post::Posterior& posterior, const DataBatch& test,
                   const Standardizer& standardizer, std::size_t n, Rng& rng) {
    if (n == 0) throw std::invalid_argument("predict: need at least one sample");
    const post::Sample s = posterior.sample(n, rng);
    const Tensor y_hat = model.forward(s.z.detach(), test.x);  // [n, B]
    const std::size_t m = test.size();
    const double a = model.a(), b = model.b();
    std::gamma_distribution<double> precision(a, 1.0 / b);
    std::vector<double> lambda(n);
    for (double& l : lambda) l = precision(rng.engine());

    Prediction out;
    out.mean.resize(static_cast<Eigen::Index>(m));
    out.variance.resize(static_cast<Eigen::Index>(m));
    const double ys = standardizer.y_std, ym = standardizer.y_mean;
    double sq_err = 0.0, ll = 0.0;
    std::vector<double> per_sample(n);
    for (std::size_t j = 0; j < m; ++j) {
        double mu = 0.0, mu2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = y_hat[i * m + j] * ys + ym;
            mu += v;
            mu2 += v * v;
        }
        mu /= static_cast<double>(n);
        const double spread = std::max(0.0, mu2 / static_cast<double>(n) - mu * mu);
        out.mean(static_cast<Eigen::Index>(j)) = mu;
        out.variance(static_cast<Eigen::Index>(j)) = spread + ys * ys * b / a;

        const double y = test.y(static_cast<Eigen::Index>(j)) * ys + ym;
        sq_err += (y - mu) * (y - mu);
        for (std::size_t i = 0; i < n; ++i) {
            const double var = ys * ys / lambda[i];
            const double r = y - (y_hat[i * m + j] * ys + ym);
            per_sample[i] = -0.5 * (std::log(var) + kLog2Pi + r * r / var);
        }
        ll += log_mean_exp(per_sample);
    }
    out.rmse = std::sqrt(sq_err / static_cast<double>(m));
    out.test_ll = ll / static_cast<double>(m);
    return out;
}

// ------------------------------------------------------------------- data

DataBatch load_csv(const std::string& path, bool has_header) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        if (has_header && rows.empty() && line_no == 1) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            while (end && (*end == ' ' || *end == '\t')) ++end;
            if (end == cell.c_str() || (end && *end != '\0')) {
                throw std::runtime_error(path + ":" + std::to_string(line_no) + ": not a number: '" + cell + "'");
            }
            row.push_back(v);
        }
        if (row.size() < 2) throw std::runtime_error(path + ":" + std::to_string(line_no) + ": need at least 2 columns");
        if (!rows.empty() && row.size() != rows.front().size()) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": column count differs from first row");
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error("dataset '" + path + "' has no rows");
    const std::size_t cols = rows.front().size();
    DataBatch out;
    out.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols - 1));
    out.y.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t c = 0; c + 1 < cols; ++c)
            out.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
        out.y(static_cast<Eigen::Index>(i)) = rows[i].back();
    }
    return out;
}

DataBatch minibatch(const DataBatch& data, const std::vector<std::size_t>& order, std::size_t begin,
                    std::size_t end) {
    if (begin >= end || end > order.size()) throw std::invalid_argument("minibatch: bad range");
    DataBatch out;
    const auto count = static_cast<Eigen::Index>(end - begin);
    out.x.resize(count, data.x.cols());
    out.y.resize(count);
    for (Eigen::Index i = 0; i < count; ++i) {
        const auto src = static_cast<Eigen::Index>(order[begin + static_cast<std::size_t>(i)]);
        out.x.row(i) = data.x.row(src);
        out.y(i) = data.y(src);
    }
    out.scale = data.scale * static_cast<double>(data.size()) / static_cast<double>(count);
    return out;
}

Split train_test_split(const DataBatch& data, double train_fraction, Rng& rng) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("split: fraction must be in (0, 1)");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    const auto n_train = static_cast<std::size_t>(std::round(train_fraction * static_cast<double>(data.size())));
    if (n_train == 0 || n_train == data.size()) throw std::invalid_argument("split: too few rows");
    Split s{minibatch(data, order, 0, n_train), minibatch(data, order, n_train, data.size())};
    s.train.scale = 1.0;
    s.test.scale = 1.0;
    return s;
}

DataBatch make_sine_data(std::size_t n, double noise_std, Rng& rng) {
    DataBatch out;
    out.x.resize(static_cast<Eigen::Index>(n), 1);
    out.y.resize(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
        out.x(i, 0) = rng.uniform(-3.0, 3.0);
        out.y(i) = std::sin(out.x(i, 0)) + noise_std * rng.normal();
    }
    return out;
}

// -------------------------------------------------------- amortized decoder

AmortizedDecoderModel::AmortizedDecoderModel(std::size_t latent_dim, std::vector<std::size_t> hidden,
                                             std::size_t data_dim, OutputDistribution output, Rng& init_rng)
    : latent_dim_(latent_dim), data_dim_(data_dim), output_(output) {
    if (latent_dim == 0 || data_dim == 0) throw std::invalid_argument("decoder: dimensions must be positive");
    std::size_t in = latent_dim;
    for (auto h : hidden) {
        layers_.emplace_back(in, h, post::Activation::relu, init_rng);
        in = h;
    }
    layers_.emplace_back(in, data_dim, post::Activation::identity, init_rng);
}

Tensor AmortizedDecoderModel::decode(const Tensor& z) const {
    require_points(z, latent_dim_, "decoder");
    Tensor h = z;
    for (const auto& l : layers_) h = l(h);
    return h;
}

Tensor AmortizedDecoderModel::log_likelihood(const Tensor& z, const Matrix& x) const {
    if (static_cast<std::size_t>(x.cols()) != data_dim_ || static_cast<std::size_t>(x.rows()) != z.dim(0)) {
        throw ShapeError("decoder log_likelihood: x must be [m, D] aligned with z");
    }
    const Tensor out = decode(z);
    const Tensor xs = as_constant(x);
    if (output_ == OutputDistribution::bernoulli) return sum(xs * out - softplus(out), 1);
    return sum(normal_log_density(xs - out, 0.0, 1.0), 1);
}

Tensor AmortizedDecoderModel::log_prior(const Tensor& z) const {
    require_points(z, latent_dim_, "decoder log_prior");
    return standard_normal_log_density(z);
}

std::vector<Tensor> AmortizedDecoderModel::parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers_) {
        out.push_back(l.weight);
        out.push_back(l.bias);
    }
    return out;
}

}  // namespace kivi::models
