#include "kivi/posteriors.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>

#include "kivi/special.hpp"

namespace kivi::post {

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, double std, Rng& rng) {
    std::vector<double> v(rows * cols);
    for (double& x : v) x = std * rng.normal();
    return Tensor::parameter({rows, cols}, std::move(v));
}

}  // namespace

std::size_t Posterior::parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += p.size();
    return total;
}

Activation parse_activation(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    if (name == "identity" || name == "linear") return Activation::identity;
    throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "identity";
}

Tensor activate(const Tensor& x, Activation a) {
    switch (a) {
        case Activation::relu: return relu(x);
        case Activation::tanh: return tanh(x);
        case Activation::identity: return x;
    }
    return x;
}

Dense::Dense(std::size_t in, std::size_t out, Activation act, Rng& rng)
    : weight(random_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
      bias(Tensor::parameter({out}, std::vector<double>(out, 0.0))),
      activation(act) {}

Tensor Dense::operator()(const Tensor& x) const { return activate(matmul(x, weight) + bias, activation); }

// ---------------------------------------------------------------- noise net

void NoiseNetConfig::validate() const {
    if (noise_dim == 0) throw std::invalid_argument("noise net: noise_dim must be at least 1");
    if (layers.empty()) throw std::invalid_argument("noise net: needs at least an output layer");
    for (const auto& l : layers)
        if (l.width == 0) throw std::invalid_argument("noise net: layer widths must be at least 1");
    if (noise_after && *noise_after + 1 >= layers.size()) {
        throw std::invalid_argument("noise net: mid-network noise must precede the output layer");
    }
}

NoiseNetPosterior::NoiseNetPosterior(NoiseNetConfig config, Rng& init_rng) : config_(std::move(config)) {
    config_.validate();
    std::size_t in = config_.noise_dim;
    for (const auto& spec : config_.layers) {
        layers_.emplace_back(in, spec.width, spec.activation, init_rng);
        in = spec.width;
    }
    if (config_.noise_after) {
        const std::size_t width = config_.layers[*config_.noise_after].width;
        mid_log_var_ = Tensor::parameter({width}, std::vector<double>(width, 0.0));
    }
}

Tensor NoiseNetPosterior::forward(const Tensor& input_noise, const std::optional<Tensor>& mid_noise) const {
    Tensor h = input_noise;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        h = layers_[i](h);
        if (config_.noise_after && *config_.noise_after == i) {
            if (!mid_noise) throw std::invalid_argument("noise net: mid-network noise required");
            h = h + (*mid_noise) * exp(0.5 * (*mid_log_var_));
        }
    }
    return h;
}

Sample NoiseNetPosterior::sample(std::size_t n, Rng& rng) const {
    if (n == 0) throw std::invalid_argument("sample: n must be at least 1");
    const Tensor eps = standard_normal({n, config_.noise_dim}, rng);
    std::optional<Tensor> mid;
    if (config_.noise_after) mid = standard_normal({n, config_.layers[*config_.noise_after].width}, rng);
    return {forward(eps, mid), std::nullopt};
}

std::vector<Tensor> NoiseNetPosterior::parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers_) {
        out.push_back(l.weight);
        out.push_back(l.bias);
    }
    if (mid_log_var_) out.push_back(*mid_log_var_);
    return out;
}

// --------------------------------------------------------------------- MMNN

void MmnnConfig::validate() const {
    if (input.rows == 0 || input.cols == 0) throw std::invalid_argument("mmnn: input shape must be non-empty");
    if (layers.empty()) throw std::invalid_argument("mmnn: needs at least one layer");
    for (const auto& l : layers)
        if (l.rows == 0 || l.cols == 0) throw std::invalid_argument("mmnn: layer shapes must be non-empty");
}

Tensor mmnn_forward(const std::vector<MmnnLayer>& layers, const Tensor& x) {
    if (x.rank() != 2 && x.rank() != 3) throw ShapeError("mmnn_forward: input must be [M, N] or [n, M, N]");
    const bool single = x.rank() == 2;
    Tensor h = single ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (l.a_left.dim(1) != h.dim(1) || l.a_right.dim(0) != h.dim(2)) {
            throw ShapeError("mmnn_forward: layer " + std::to_string(i) + " expects " +
                             std::to_string(l.a_left.dim(1)) + " x " + std::to_string(l.a_right.dim(0)) +
                             " input, got " + shape_string(h.shape()));
        }
        h = batched_matmul(l.a_left, h) + l.b_left;
        h = batched_matmul(h, l.a_right) + l.b_right;
        if (i + 1 < layers.size()) h = relu(h);
    }
    return single ? reshape(h, {h.dim(1), h.dim(2)}) : h;
}

MmnnPosterior::MmnnPosterior(MmnnConfig config, Rng& init_rng) : config_(std::move(config)) {
    config_.validate();
    MatrixShape in = config_.input;
    for (const auto& out : config_.layers) {
        MmnnLayer l{random_matrix(out.rows, in.rows, 1.0 / std::sqrt(static_cast<double>(in.rows)), init_rng),
                    Tensor::parameter({out.rows, in.cols}, std::vector<double>(out.rows * in.cols, 0.0)),
                    random_matrix(in.cols, out.cols, 1.0 / std::sqrt(static_cast<double>(in.cols)), init_rng),
                    Tensor::parameter({out.rows, out.cols}, std::vector<double>(out.rows * out.cols, 0.0))};
        const std::size_t count = l.a_left.size() + l.b_left.size() + l.a_right.size() + l.b_right.size();
        if (count != mmnn_layer_parameter_count(in, out)) throw std::logic_error("mmnn: parameter count mismatch");
        layers_.push_back(std::move(l));
        in = out;
    }
}

std::size_t MmnnPosterior::dim() const { return config_.layers.back().rows * config_.layers.back().cols; }

Sample MmnnPosterior::sample(std::size_t n, Rng& rng) const {
    if (n == 0) throw std::invalid_argument("sample: n must be at least 1");
    const Tensor x = standard_normal({n, config_.input.rows, config_.input.cols}, rng);
    return {reshape(mmnn_forward(layers_, x), {n, dim()}), std::nullopt};
}

std::vector<Tensor> MmnnPosterior::parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers_) {
        out.push_back(l.a_left);
        out.push_back(l.b_left);
        out.push_back(l.a_right);
        out.push_back(l.b_right);
    }
    return out;
}

// --------------------------------------------------------------- mean field

MeanFieldGaussian::MeanFieldGaussian(std::size_t dim, double init_log_std)
    : MeanFieldGaussian(std::vector<double>(dim, 0.0), std::vector<double>(dim, init_log_std)) {}

MeanFieldGaussian::MeanFieldGaussian(std::vector<double> mean, std::vector<double> log_std) {
    if (mean.empty() || mean.size() != log_std.size()) {
        throw std::invalid_argument("mean field: mean and log_std must have the same non-zero length");
    }
    const std::size_t d = mean.size();
    mean_ = Tensor::parameter({d}, std::move(mean));
    log_std_ = Tensor::parameter({d}, std::move(log_std));
}

Sample MeanFieldGaussian::sample(std::size_t n, Rng& rng) const {
    if (n == 0) throw std::invalid_argument("sample: n must be at least 1");
    const Tensor z = gaussian_sample({n, dim()}, mean_, exp(log_std_), rng);
    return {z, log_density(z)};
}

Tensor MeanFieldGaussian::log_density(const Tensor& z) const {
    if (z.rank() != 2 || z.dim(1) != dim()) throw ShapeError("mean field log_density: expected [n, d] points");
    const Tensor u = (z - mean_) * exp(-log_std_);
    const double c = 0.5 * static_cast<double>(dim()) * kLog2Pi;
    return -0.5 * sum(square(u), 1) - sum(log_std_) - c;
}

// -------------------------------------------------------------- planar flow

Tensor planar_u_hat(const Tensor& u, const Tensor& w) {
    // g(x) = x for x >= 0, (1 - 1e-6) expm1(x) below; g > -1 everywhere.
    const Tensor wu = sum(w * u);
    const Tensor g = relu(wu) + (1.0 - 1e-6) * (exp(-relu(-wu)) - 1.0);
    return u + ((g - wu) / (sum(square(w)) + 1e-300)) * w;
}

Tensor planar_log_det(const Tensor& u, const Tensor& w, const Tensor& b, const Tensor& z) {
    const std::size_t d = w.size();
    if (z.rank() != 2 || z.dim(1) != d || u.size() != d) throw ShapeError("planar_log_det: shape mismatch");
    const Tensor a = matmul(z, reshape(w, {d, 1})) + b;       // [n, 1]
    const Tensor slope = 1.0 - square(tanh(a));              // h'(a)
    const Tensor psi = 1.0 + slope * sum(u * w);
    return reshape(log(psi), {z.dim(0)});
}

PlanarFlowPosterior::PlanarFlowPosterior(std::size_t dim, std::size_t flow_layers, Rng& init_rng) : base_(dim) {
    for (std::size_t k = 0; k < flow_layers; ++k) {
        std::vector<double> w(dim);
        for (double& x : w) x = init_rng.normal() / std::sqrt(static_cast<double>(dim));
        layers_.push_back({Tensor::parameter({dim}, std::vector<double>(dim, 0.0)), Tensor::parameter({dim}, w),
                           Tensor::parameter({1}, {0.0})});
    }
}

PlanarFlowPosterior::Transformed PlanarFlowPosterior::transform(const Tensor& z0) const {
    const std::size_t n = z0.dim(0), d = dim();
    Tensor z = z0;
    Tensor log_det = Tensor::zeros({n});
    for (const auto& l : layers_) {
        const Tensor u_hat = planar_u_hat(l.u, l.w);
        log_det = log_det + planar_log_det(u_hat, l.w, l.b, z);
        const Tensor a = matmul(z, reshape(l.w, {d, 1})) + l.b;
        z = z + matmul(tanh(a), reshape(u_hat, {1, d}));
    }
    return {z, log_det};
}

Sample PlanarFlowPosterior::sample(std::size_t n, Rng& rng) const {
    const Sample base = base_.sample(n, rng);
    auto t = transform(base.z);
    return {t.z, *base.log_density - t.log_det};
}

std::vector<Tensor> PlanarFlowPosterior::parameters() const {
    std::vector<Tensor> out = base_.parameters();
    for (const auto& l : layers_) {
        out.push_back(l.u);
        out.push_back(l.w);
        out.push_back(l.b);
    }
    return out;
}

// --------------------------------------------------------------- factorized

FactorizedPosterior::FactorizedPosterior(std::vector<std::shared_ptr<Posterior>> blocks)
    : blocks_(std::move(blocks)) {
    if (blocks_.empty()) throw std::invalid_argument("factorized posterior: needs at least one block");
    for (const auto& b : blocks_)
        if (!b) throw std::invalid_argument("factorized posterior: null block");
}

std::size_t FactorizedPosterior::dim() const {
    std::size_t d = 0;
    for (const auto& b : blocks_) d += b->dim();
    return d;
}

std::vector<std::size_t> FactorizedPosterior::block_dims() const {
    std::vector<std::size_t> out;
    for (const auto& b : blocks_) out.push_back(b->dim());
    return out;
}

Sample FactorizedPosterior::sample(std::size_t n, Rng& rng) const {
    std::vector<Tensor> parts;
    std::optional<Tensor> log_density = Tensor::zeros({n});
    for (const auto& b : blocks_) {
        Sample s = b->sample(n, rng);
        parts.push_back(s.z);
        if (log_density && s.log_density)
            log_density = *log_density + *s.log_density;
        else
            log_density.reset();
    }
    return {parts.size() == 1 ? parts.front() : concat(parts, 1), log_density};
}

std::vector<Tensor> FactorizedPosterior::parameters() const {
    std::vector<Tensor> out;
    for (const auto& b : blocks_) {
        auto p = b->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

// ---------------------------------------------------------------- amortized

Tensor repeat_rows(const Tensor& x, std::size_t n) {
    if (x.rank() != 2) throw ShapeError("repeat_rows: expected a matrix, got " + shape_string(x.shape()));
    if (n == 1) return x;
    const std::size_t b = x.dim(0);
    std::vector<double> select(b * n * b, 0.0);
    for (std::size_t r = 0; r < b * n; ++r) select[r * b + r / n] = 1.0;
    return matmul(Tensor::matrix(b * n, b, std::move(select)), x);
}

namespace {

std::vector<Dense> make_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, Rng& rng) {
    std::vector<Dense> layers;
    for (auto h : hidden) {
        if (h == 0) throw std::invalid_argument("encoder: hidden widths must be positive");
        layers.emplace_back(in, h, Activation::relu, rng);
        in = h;
    }
    layers.emplace_back(in, out, Activation::identity, rng);
    return layers;
}

std::vector<Tensor> mlp_parameters(const std::vector<Dense>& layers) {
    std::vector<Tensor> out;
    for (const auto& l : layers) {
        out.push_back(l.weight);
        out.push_back(l.bias);
    }
    return out;
}

void require_data(const Tensor& x, std::size_t d, std::size_t n) {
    if (x.rank() != 2 || x.dim(1) != d) {
        throw ShapeError("encoder: expected data [B, " + std::to_string(d) + "], got " + shape_string(x.shape()));
    }
    if (x.dim(0) == 0 || n == 0) throw std::invalid_argument("encoder: need at least one datapoint and one draw");
}

}  // namespace

GaussianEncoder::GaussianEncoder(std::size_t data_dim, std::vector<std::size_t> hidden, std::size_t latent_dim,
                                 Rng& init_rng)
    : data_dim_(data_dim), latent_dim_(latent_dim) {
    if (data_dim == 0 || latent_dim == 0) throw std::invalid_argument("encoder: dimensions must be positive");
    layers_ = make_mlp(data_dim, hidden, 2 * latent_dim, init_rng);
}

GaussianEncoder::Moments GaussianEncoder::moments(const Tensor& x) const {
    require_data(x, data_dim_, 1);
    Tensor h = x;
    for (const auto& l : layers_) h = l(h);
    return {slice(h, 1, 0, latent_dim_), slice(h, 1, latent_dim_, 2 * latent_dim_)};
}

Sample GaussianEncoder::sample(const Tensor& x, std::size_t n, Rng& rng) const {
    require_data(x, data_dim_, n);
    const Moments m = moments(x);
    const Tensor mean = repeat_rows(m.mean, n);
    const Tensor log_std = repeat_rows(m.log_std, n);
    const Tensor eps = standard_normal(mean.shape(), rng);
    const Tensor z = mean + eps * exp(log_std);
    const double c = 0.5 * static_cast<double>(latent_dim_) * kLog2Pi;
    const Tensor log_q = -0.5 * sum(square(eps), 1) - sum(log_std, 1) - c;
    return {z, log_q};
}

std::vector<Tensor> GaussianEncoder::parameters() const { return mlp_parameters(layers_); }

ImplicitEncoder::ImplicitEncoder(std::size_t data_dim, std::size_t noise_dim, std::vector<std::size_t> hidden,
                                 std::size_t latent_dim, Rng& init_rng)
    : data_dim_(data_dim), noise_dim_(noise_dim), latent_dim_(latent_dim) {
    if (data_dim == 0 || noise_dim == 0 || latent_dim == 0) {
        throw std::invalid_argument("encoder: dimensions must be positive");
    }
    layers_ = make_mlp(data_dim + noise_dim, hidden, latent_dim, init_rng);
}

Sample ImplicitEncoder::sample(const Tensor& x, std::size_t n, Rng& rng) const {
    require_data(x, data_dim_, n);
    const Tensor rep = repeat_rows(x, n);
    Tensor h = concat({rep, standard_normal({rep.dim(0), noise_dim_}, rng)}, 1);
    for (const auto& l : layers_) h = l(h);
    return {h, std::nullopt};
}

std::vector<Tensor> ImplicitEncoder::parameters() const { return mlp_parameters(layers_); }

// --------------------------------------------------------------- checkpoint

std::string encode_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

double decode_double(const std::string& text) {
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (end == text.c_str() || *end != '\0') throw std::invalid_argument("checkpoint: bad number '" + text + "'");
    return v;
}

nlohmann::json save_checkpoint(const Posterior& posterior) {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : posterior.parameters()) {
        nlohmann::json values = nlohmann::json::array();
        for (double v : p.values()) values.push_back(encode_double(v));
        params.push_back({{"shape", p.shape()}, {"values", std::move(values)}});
    }
    return {{"format", "kivi.checkpoint/1"}, {"kind", posterior.kind()}, {"parameters", std::move(params)}};
}

void load_checkpoint(Posterior& posterior, const nlohmann::json& checkpoint) {
    if (checkpoint.value("format", "") != "kivi.checkpoint/1") throw std::invalid_argument("checkpoint: unknown format");
    if (checkpoint.at("kind").get<std::string>() != posterior.kind()) {
        throw std::invalid_argument("checkpoint: kind mismatch (" + checkpoint.at("kind").get<std::string>() +
                                    " vs " + posterior.kind() + ")");
    }
    auto params = posterior.parameters();
    const auto& stored = checkpoint.at("parameters");
    if (stored.size() != params.size()) throw std::invalid_argument("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (stored[i].at("shape").get<Shape>() != params[i].shape()) {
            throw ShapeError("checkpoint: parameter " + std::to_string(i) + " has shape " +
                             shape_string(stored[i].at("shape").get<Shape>()) + ", expected " +
                             shape_string(params[i].shape()));
        }
        auto dst = params[i].mutable_values();
        const auto& values = stored[i].at("values");
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = decode_double(values[j].get<std::string>());
    }
}

}  // namespace kivi::post
