#pragma once

// Variational posteriors. Implicit families (noise networks, MMNN) only
// sample; tractable families (mean-field Gaussian, planar flow) also report
// the log-density of each sample. All samples are reparameterized: for a
// fixed rng state they are differentiable functions of the parameters.

#include <memory>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "kivi/ops.hpp"

namespace kivi::post {

struct Sample {
    Tensor z;                            // [n, d]
    std::optional<Tensor> log_density;  // [n], tractable families only
};

class Posterior {
public:
    virtual ~Posterior() = default;
    virtual std::size_t dim() const = 0;
    virtual std::string kind() const = 0;
    virtual Sample sample(std::size_t n, Rng& rng) const = 0;
    /// Trainable leaves, in a fixed order.
    virtual std::vector<Tensor> parameters() const = 0;

    std::size_t parameter_count() const;
};

enum class Activation { relu, tanh, identity };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);
Tensor activate(const Tensor& x, Activation a);

/// Fully-connected layer, weights ~ N(0, 1/fan_in), zero bias.
struct Dense {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
    Activation activation = Activation::identity;

    Dense(std::size_t in, std::size_t out, Activation act, Rng& rng);
    Tensor operator()(const Tensor& x) const;
};

struct LayerSpec {
    std::size_t width = 0;
    Activation activation = Activation::relu;
};

struct NoiseNetConfig {
    std::size_t noise_dim = 1;
    /// Hidden layers followed by the output layer; the output layer's
    /// activation is normally identity.
    std::vector<LayerSpec> layers;
    /// Inject N(0, diag exp(log_var)) noise after this layer (0-based). The
    /// noise width equals the layer's width; log-variances start at 0.
    std::optional<std::size_t> noise_after;

    void validate() const;
    std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().width; }
};

/// Standard normal input noise pushed through an MLP.
class NoiseNetPosterior final : public Posterior {
public:
    NoiseNetPosterior(NoiseNetConfig config, Rng& init_rng);

    std::size_t dim() const override { return config_.output_dim(); }
    std::string kind() const override { return "noise_net"; }
    Sample sample(std::size_t n, Rng& rng) const override;
    std::vector<Tensor> parameters() const override;

    /// Network output for given input noise [n, noise_dim] and, if injected,
    /// mid-network standard-normal noise [n, width].
    Tensor forward(const Tensor& input_noise, const std::optional<Tensor>& mid_noise) const;

    const NoiseNetConfig& config() const { return config_; }
    std::vector<Dense>& layers() { return layers_; }
    const std::optional<Tensor>& mid_log_var() const { return mid_log_var_; }

private:
    NoiseNetConfig config_;
    std::vector<Dense> layers_;
    std::optional<Tensor> mid_log_var_;
};

struct MatrixShape {
    std::size_t rows = 0;
    std::size_t cols = 0;
};

struct MmnnConfig {
    MatrixShape input;                 // M0 x N0 standard normal noise
    std::vector<MatrixShape> layers;   // output shape of each layer; the last is the sample shape

    void validate() const;
};

struct MmnnLayer {
    Tensor a_left;   // [M_out, M_in]
    Tensor b_left;   // [M_out, N_in]
    Tensor a_right;  // [N_in, N_out]
    Tensor b_right;  // [M_out, N_out]
};

/// Parameters of one layer mapping M0 x N0 to M x N.
constexpr std::size_t mmnn_layer_parameter_count(MatrixShape in, MatrixShape out) {
    return out.rows * in.rows + out.rows * in.cols + in.cols * out.cols + out.rows * out.cols;
}

/// Per layer: X <- A_l X + B_l, then X <- X A_r + B_r, relu on all but the
/// last layer. Input [n, M0, N0] or [M0, N0]; output [n, M, N] or [M, N].
Tensor mmnn_forward(const std::vector<MmnnLayer>& layers, const Tensor& x);

/// Matrix-multiplication network over matrix-shaped noise; samples are the
/// flattened (row-major) output matrices.
class MmnnPosterior final : public Posterior {
public:
    MmnnPosterior(MmnnConfig config, Rng& init_rng);

    std::size_t dim() const override;
    std::string kind() const override { return "mmnn"; }
    Sample sample(std::size_t n, Rng& rng) const override;
    std::vector<Tensor> parameters() const override;

    const std::vector<MmnnLayer>& layers() const { return layers_; }
    const MmnnConfig& config() const { return config_; }

private:
    MmnnConfig config_;
    std::vector<MmnnLayer> layers_;
};

/// N(mu, diag exp(log_std)^2).
class MeanFieldGaussian final : public Posterior {
public:
    explicit MeanFieldGaussian(std::size_t dim, double init_log_std = 0.0);
    MeanFieldGaussian(std::vector<double> mean, std::vector<double> log_std);

    std::size_t dim() const override { return mean_.size(); }
    std::string kind() const override { return "mean_field"; }
    Sample sample(std::size_t n, Rng& rng) const override;
    std::vector<Tensor> parameters() const override { return {mean_, log_std_}; }

    /// Log-density at arbitrary points [n, d].
    Tensor log_density(const Tensor& z) const;

    const Tensor& mean() const { return mean_; }
    const Tensor& log_std() const { return log_std_; }

private:
    Tensor mean_;
    Tensor log_std_;
};

struct PlanarLayer {
    Tensor u;  // [d]
    Tensor w;  // [d]
    Tensor b;  // [1]
};

/// u adjusted so that u'w > -1, which keeps the layer invertible. u is left
/// unchanged whenever u'w >= 0.
Tensor planar_u_hat(const Tensor& u, const Tensor& w);

/// log|1 + u'w h'(w'z + b)| per row of z [n, d], h = tanh. `u` is used as
/// given (already adjusted).
Tensor planar_log_det(const Tensor& u, const Tensor& w, const Tensor& b, const Tensor& z);

/// Mean-field base pushed through K planar layers z <- z + u_hat tanh(w'z + b).
class PlanarFlowPosterior final : public Posterior {
public:
    PlanarFlowPosterior(std::size_t dim, std::size_t flow_layers, Rng& init_rng);

    std::size_t dim() const override { return base_.dim(); }
    std::string kind() const override { return "planar_flow"; }
    Sample sample(std::size_t n, Rng& rng) const override;
    std::vector<Tensor> parameters() const override;

    struct Transformed {
        Tensor z;        // [n, d]
        Tensor log_det;  // [n], summed over layers
    };
    Transformed transform(const Tensor& z0) const;

    MeanFieldGaussian& base() { return base_; }
    const MeanFieldGaussian& base() const { return base_; }
    std::vector<PlanarLayer>& layers() { return layers_; }

private:
    MeanFieldGaussian base_;
    std::vector<PlanarLayer> layers_;
};

/// Independent blocks sampled separately and concatenated along the
/// feature axis (e.g. one block per network weight matrix).
class FactorizedPosterior final : public Posterior {
public:
    explicit FactorizedPosterior(std::vector<std::shared_ptr<Posterior>> blocks);

    std::size_t dim() const override;
    std::string kind() const override { return "factorized"; }
    Sample sample(std::size_t n, Rng& rng) const override;
    std::vector<Tensor> parameters() const override;

    const std::vector<std::shared_ptr<Posterior>>& blocks() const { return blocks_; }
    std::vector<std::size_t> block_dims() const;

private:
    std::vector<std::shared_ptr<Posterior>> blocks_;
};

/// Conditional sampler q(z | x) shared across datapoints.
class AmortizedPosterior {
public:
    virtual ~AmortizedPosterior() = default;
    virtual std::size_t dim() const = 0;
    virtual std::size_t data_dim() const = 0;
    virtual std::string kind() const = 0;
    /// n draws for each row of x [B, D]; result rows are ordered b * n + s.
    virtual Sample sample(const Tensor& x, std::size_t n, Rng& rng) const = 0;
    virtual std::vector<Tensor> parameters() const = 0;
};

/// [B * n, B] selector that repeats each row of a [B, k] tensor n times.
Tensor repeat_rows(const Tensor& x, std::size_t n);

/// MLP producing the mean and log-std of a diagonal Gaussian per datapoint.
class GaussianEncoder final : public AmortizedPosterior {
public:
    GaussianEncoder(std::size_t data_dim, std::vector<std::size_t> hidden, std::size_t latent_dim, Rng& init_rng);

    std::size_t dim() const override { return latent_dim_; }
    std::size_t data_dim() const override { return data_dim_; }
    std::string kind() const override { return "gaussian_encoder"; }
    Sample sample(const Tensor& x, std::size_t n, Rng& rng) const override;
    std::vector<Tensor> parameters() const override;

    struct Moments {
        Tensor mean;     // [B, k]
        Tensor log_std;  // [B, k]
    };
    Moments moments(const Tensor& x) const;

private:
    std::size_t data_dim_, latent_dim_;
    std::vector<Dense> layers_;  // last layer emits 2k values
};

/// MLP over the datapoint concatenated with standard normal noise.
class ImplicitEncoder final : public AmortizedPosterior {
public:
    ImplicitEncoder(std::size_t data_dim, std::size_t noise_dim, std::vector<std::size_t> hidden,
                    std::size_t latent_dim, Rng& init_rng);

    std::size_t dim() const override { return latent_dim_; }
    std::size_t data_dim() const override { return data_dim_; }
    std::string kind() const override { return "implicit_encoder"; }
    Sample sample(const Tensor& x, std::size_t n, Rng& rng) const override;
    std::vector<Tensor> parameters() const override;

private:
    std::size_t data_dim_, noise_dim_, latent_dim_;
    std::vector<Dense> layers_;
};

/// Parameter snapshot: shapes plus hex-encoded doubles (lossless).
nlohmann::json save_checkpoint(const Posterior& posterior);
/// Overwrites the parameters of a posterior of the same structure.
void load_checkpoint(Posterior& posterior, const nlohmann::json& checkpoint);

std::string encode_double(double v);
double decode_double(const std::string& text);

}  // namespace kivi::post
