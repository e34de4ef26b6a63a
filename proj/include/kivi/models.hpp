#pragma once

// Target models. Each exposes a per-sample log-likelihood, a tractable prior
// (log-density and sampler) and optional trainable parameters of its own.
// KIVI consumes the likelihood plus prior samples; the explicit prior
// log-density serves the tractable baselines and HMC.

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "kivi/kernel_dre.hpp"
#include "kivi/oracles.hpp"
#include "kivi/posteriors.hpp"

namespace kivi::models {

using dre::Matrix;
using dre::Vector;

struct DataBatch {
    Matrix x;  // [B, features]
    Vector y;  // [B]; unused by models without targets
    /// Multiplier turning the batch sum into a full-data estimate (N / B).
    double scale = 1.0;

    std::size_t size() const { return static_cast<std::size_t>(x.rows()); }
};

class TargetModel {
public:
    virtual ~TargetModel() = default;
    virtual std::string kind() const = 0;
    virtual std::size_t latent_dim() const = 0;
    /// log p(data | z) per row of z [n, d], shape [n]. A null or empty batch
    /// contributes zero.
    virtual Tensor log_likelihood(const Tensor& z, const DataBatch* batch) const = 0;
    /// log p(z) per row, shape [n].
    virtual Tensor log_prior(const Tensor& z) const = 0;
    virtual Matrix sample_prior(std::size_t n, Rng& rng) const = 0;
    /// Trainable model-side parameters (none by default).
    virtual std::vector<Tensor> parameters() const { return {}; }
    /// Closed-form KL terms for model-side variational factors (scalar).
    virtual Tensor extra_kl() const { return Tensor::scalar(0.0); }

    Tensor log_joint(const Tensor& z, const DataBatch* batch) const;
    /// log p(data, z) and its gradient at a single point, for HMC.
    oracles::LogDensityFn log_joint_fn(const DataBatch* batch) const;
};

/// log sum_k exp(terms_k), elementwise over equally shaped tensors.
Tensor log_sum_exp(const std::vector<Tensor>& terms);

/// Log-density of N(mean, std^2) per element.
Tensor normal_log_density(const Tensor& x, double mean, double std);

/// 1-D Gaussian mixture used as the distribution to approximate: the
/// likelihood is empty and the mixture is the prior, so the ELBO is -KL(q||p).
class GaussianMixtureTarget final : public TargetModel {
public:
    GaussianMixtureTarget(std::vector<double> means, std::vector<double> stds, std::vector<double> weights);
    /// Equal-weight unit-variance components at -3 and 3.
    static GaussianMixtureTarget symmetric();

    std::string kind() const override { return "gmm1d"; }
    std::size_t latent_dim() const override { return 1; }
    Tensor log_likelihood(const Tensor& z, const DataBatch* batch) const override;
    Tensor log_prior(const Tensor& z) const override;
    Matrix sample_prior(std::size_t n, Rng& rng) const override;

    double density(double z) const;
    const std::vector<double>& means() const { return means_; }

private:
    std::vector<double> means_, stds_, weights_;
};

/// How synthetic logistic-regression labels are produced from a prior weight.
enum class BlrLabels {
    predicted,  // y = 1[w'x > 0]
    sampled,    // y ~ Bernoulli(sigmoid(w'x))
};

/// y_i ~ Bernoulli(sigmoid(w'x_i)), w ~ N(0, I).
class BlrModel final : public TargetModel {
public:
    BlrModel(Matrix x, Vector y);
    /// Inputs U[-5, 5]^d with labels from a prior-drawn weight.
    static BlrModel synthetic(std::size_t n, std::size_t d, Rng& rng, BlrLabels labels = BlrLabels::sampled);

    std::string kind() const override { return "blr2d"; }
    std::size_t latent_dim() const override { return static_cast<std::size_t>(x_.cols()); }
    Tensor log_likelihood(const Tensor& z, const DataBatch* batch) const override;
    Tensor log_prior(const Tensor& z) const override;
    Matrix sample_prior(std::size_t n, Rng& rng) const override;

    const DataBatch& data() const { return data_; }
    const Vector& true_weight() const { return true_weight_; }

private:
    Matrix x_;
    DataBatch data_;
    Vector true_weight_;
};

/// x_i ~ N(z, noise_std^2), z ~ N(0, prior_std^2) in 1-D; closed-form posterior.
class GaussianMeanModel final : public TargetModel {
public:
    GaussianMeanModel(Vector observations, double noise_std, double prior_std);

    std::string kind() const override { return "gaussian_mean"; }
    std::size_t latent_dim() const override { return 1; }
    Tensor log_likelihood(const Tensor& z, const DataBatch* batch) const override;
    Tensor log_prior(const Tensor& z) const override;
    Matrix sample_prior(std::size_t n, Rng& rng) const override;

    const DataBatch& data() const { return data_; }
    double posterior_mean() const;
    double posterior_std() const;

private:
    DataBatch data_;
    double noise_std_, prior_std_;
};

/// KL(Gamma(a, b) || Gamma(a0, b0)), shape-rate.
double gamma_kl(double a, double b, double a0 = 6.0, double b0 = 6.0);
Tensor gamma_kl(const Tensor& a, const Tensor& b, double a0 = 6.0, double b0 = 6.0);

/// One-hidden-layer-or-deeper regression net with weights W ~ N(0, I)
/// (bias rows included), output noise precision lambda with q(lambda) =
/// Gamma(a, b) against a Gamma(6, 6) prior.
class BnnRegressionModel final : public TargetModel {
public:
    /// `layers` = {inputs, hidden..., outputs}; outputs must be 1.
    BnnRegressionModel(std::vector<std::size_t> layers, DataBatch train);

    std::string kind() const override { return "bnn_regression"; }
    std::size_t latent_dim() const override;
    /// Expected log-likelihood under q(lambda), scaled by the batch scale.
    Tensor log_likelihood(const Tensor& w, const DataBatch* batch) const override;
    Tensor log_prior(const Tensor& w) const override;
    Matrix sample_prior(std::size_t n, Rng& rng) const override;
    std::vector<Tensor> parameters() const override { return {log_a_, log_b_}; }
    Tensor extra_kl() const override;

    /// Network outputs [n, B] for weight samples [n, d] and inputs [B, in].
    Tensor forward(const Tensor& w, const Matrix& x) const;

    /// Flat sizes of each weight matrix ((in + 1) x out, row-major).
    std::vector<std::size_t> block_sizes() const;
    const std::vector<std::size_t>& layer_sizes() const { return layers_; }
    const DataBatch& train() const { return train_; }
    double a() const;
    double b() const;
    Tensor& log_a() { return log_a_; }
    Tensor& log_b() { return log_b_; }

private:
    std::vector<std::size_t> layers_;
    DataBatch train_;
    Tensor log_a_, log_b_;
};

/// Per-datapoint expected Gaussian log-likelihood under q(lambda) = Gamma(a, b):
/// 1/2 (psi(a) - log b - (a/b)(y - y_hat)^2 - log 2 pi).
Tensor gamma_expected_log_lik(const Tensor& residual_sq, const Tensor& a, const Tensor& b);

struct Standardizer {
    Vector x_mean, x_std;
    double y_mean = 0.0, y_std = 1.0;

    static Standardizer fit(const DataBatch& data);
    DataBatch apply(const DataBatch& data) const;
};

struct Prediction {
    Vector mean;      // original units
    Vector variance;  // original units
    double rmse = 0.0;
    double test_ll = 0.0;  // mean per-point predictive log-likelihood
};

/// Monte Carlo predictive over n weight samples and matching lambda draws.
/// `test` is in standardized units; metrics are reported in original units.
Prediction predict(const BnnRegressionModel& model, const post::Posterior& posterior, const DataBatch& test,
                   const Standardizer& standardizer, std::size_t n, Rng& rng);

/// log (1/n) sum exp(v).
double log_mean_exp(const std::vector<double>& v);

/// Features in all columns but the last, target in the last.
DataBatch load_csv(const std::string& path, bool has_header);

struct Split {
    DataBatch train, test;
};
/// Seeded shuffle, then the first `train_fraction` of rows for training.
Split train_test_split(const DataBatch& data, double train_fraction, Rng& rng);

/// y = sin(x) + eps, x ~ U[-3, 3], eps ~ N(0, noise_std^2).
DataBatch make_sine_data(std::size_t n, double noise_std, Rng& rng);

/// Rows [begin, end) of a dataset, with scale = total / (end - begin).
DataBatch minibatch(const DataBatch& data, const std::vector<std::size_t>& order, std::size_t begin,
                    std::size_t end);

enum class OutputDistribution { bernoulli, gaussian };

/// z ~ N(0, I), x ~ P(f(z)) with an MLP decoder; Bernoulli outputs go
/// through a sigmoid, Gaussian outputs have unit variance.
class AmortizedDecoderModel {
public:
    AmortizedDecoderModel(std::size_t latent_dim, std::vector<std::size_t> hidden, std::size_t data_dim,
                          OutputDistribution output, Rng& init_rng);

    std::size_t latent_dim() const { return latent_dim_; }
    std::size_t data_dim() const { return data_dim_; }
    /// log p(x_r | z_r) for aligned rows z [m, k] and x [m, D]; shape [m].
    Tensor log_likelihood(const Tensor& z, const Matrix& x) const;
    Tensor log_prior(const Tensor& z) const;
    Tensor decode(const Tensor& z) const;  // logits or means [m, D]
    std::vector<Tensor> parameters() const;
    OutputDistribution output() const { return output_; }

private:
    std::size_t latent_dim_, data_dim_;
    OutputDistribution output_;
    std::vector<post::Dense> layers_;
};

}  // namespace kivi::models
