#include "kivi/vi_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "kivi/special.hpp"

namespace kivi::vi {

ScheduleKind parse_schedule(const std::string& name) {
    if (name == "constant") return ScheduleKind::constant;
    if (name == "step_decay") return ScheduleKind::step_decay;
    if (name == "anneal") return ScheduleKind::anneal;
    throw std::invalid_argument("unknown schedule '" + name + "' (expected constant, step_decay or anneal)");
}

std::string to_string(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::constant: return "constant";
        case ScheduleKind::step_decay: return "step_decay";
        case ScheduleKind::anneal: return "anneal";
    }
    return "constant";
}

double Schedule::factor(std::size_t epoch) const {
    if (epoch == 0) throw std::invalid_argument("schedule: epochs are 1-based");
    switch (kind) {
        case ScheduleKind::constant: return 1.0;
        case ScheduleKind::step_decay: return std::pow(ratio, static_cast<double>((epoch - 1) / every));
        case ScheduleKind::anneal: return 100.0 / (100.0 + static_cast<double>(epoch) - 1.0);
    }
    return 1.0;
}

void OptimizerConfig::validate() const {
    if (name != "adam") throw std::invalid_argument("optimizer: unknown name '" + name + "' (expected adam)");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw std::invalid_argument("optimizer: learning_rate must be finite and non-negative");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("optimizer: betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw std::invalid_argument("optimizer: epsilon must be positive");
    if (schedule.kind == ScheduleKind::step_decay) {
        if (schedule.every == 0) throw std::invalid_argument("optimizer: schedule.every must be at least 1");
        if (!(schedule.ratio > 0.0)) throw std::invalid_argument("optimizer: schedule.ratio must be positive");
    }
}

void KiviConfig::validate() const {
    if (n_p == 0) throw std::invalid_argument("kivi: n_p must be at least 1");
    if (n_q == 0) throw std::invalid_argument("kivi: n_q must be at least 1");
    if (M == 0) throw std::invalid_argument("kivi: M must be at least 1");
    kernel.validate();
    optimizer.validate();
    if (!(optimizer.learning_rate > 0.0)) throw std::invalid_argument("kivi: learning_rate must be positive");
}

// --------------------------------------------------------------------- KL

Tensor kl_from_ratio(const dre::RatioModel& ratio, const Tensor& z_q, bool reverse_trick) {
    const Tensor log_r = mean(log(dre::evaluate_ratio(ratio, z_q)));
    return reverse_trick ? -log_r : log_r;
}

KlEstimate estimate_kl(const Tensor& z_q, const Matrix& z_p, const dre::KernelConfig& kernel, bool reverse_trick) {
    const Matrix q = dre::to_matrix(z_q);
    dre::RatioModel ratio = reverse_trick ? dre::fit_ratio(z_p, q, kernel) : dre::fit_ratio(q, z_p, kernel);
    Tensor value = kl_from_ratio(ratio, z_q, reverse_trick);
    return {std::move(value), std::move(ratio)};
}

Tensor estimate_kl(const post::Posterior& q, const models::TargetModel& model, const KiviConfig& config, Rng& rng) {
    const Tensor z_q = q.sample(config.n_q, rng).z;
    const Matrix z_p = model.sample_prior(config.n_p, rng);
    return estimate_kl(z_q, z_p, config.kernel, config.reverse_trick).value;
}

StepResult elbo_step(const models::TargetModel& model, const post::Posterior& posterior, const DataBatch* batch,
                     const KiviConfig& config, Rng& rng) {
    if (posterior.dim() != model.latent_dim()) {
        throw ShapeError("elbo: posterior dimension " + std::to_string(posterior.dim()) +
                         " does not match model latent dimension " + std::to_string(model.latent_dim()));
    }
    const std::size_t draws = std::max(config.n_q, config.M);
    const post::Sample s = posterior.sample(draws, rng);
    const Tensor z_lik = config.M == draws ? s.z : slice(s.z, 0, 0, config.M);
    const Tensor z_kl = config.n_q == draws ? s.z : slice(s.z, 0, 0, config.n_q);

    const Tensor reconstruction = mean(model.log_likelihood(z_lik, batch));
    Tensor kl;
    if (config.kl_estimator == KlEstimator::sample_density) {
        if (!s.log_density) throw std::invalid_argument("elbo: sample_density KL needs a tractable posterior");
        const Tensor log_q = config.n_q == draws ? *s.log_density : slice(*s.log_density, 0, 0, config.n_q);
        kl = mean(log_q - model.log_prior(z_kl));
    } else if (config.kl_per_block) {
        const auto* factorized = dynamic_cast<const post::FactorizedPosterior*>(&posterior);
        if (!factorized) throw std::invalid_argument("elbo: per-block KL needs a factorized posterior");
        const Matrix z_p = model.sample_prior(config.n_p, rng);
        kl = Tensor::scalar(0.0);
        std::size_t offset = 0;
        for (const std::size_t width : factorized->block_dims()) {
            const Matrix block_p = z_p.middleCols(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(width));
            kl = kl + estimate_kl(slice(z_kl, 1, offset, offset + width), block_p, config.kernel,
                                  config.reverse_trick).value;
            offset += width;
        }
    } else {
        kl = estimate_kl(z_kl, model.sample_prior(config.n_p, rng), config.kernel, config.reverse_trick).value;
    }
    kl = kl + model.extra_kl();
    Tensor objective = reconstruction - kl;
    return {ElboEstimate::from_terms(reconstruction.item(), kl.item()), std::move(objective)};
}

// ------------------------------------------------------- adaptive contrast

namespace {

Matrix repeat_matrix_rows(const Matrix& x, std::size_t n) {
    Matrix out(x.rows() * static_cast<Eigen::Index>(n), x.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) = x.row(r / static_cast<Eigen::Index>(n));
    return out;
}

Matrix standard_normal_matrix(std::size_t n, std::size_t d, Rng& rng) {
    Matrix m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

}  // namespace

StepResult adaptive_contrast_step(const models::AmortizedDecoderModel& model,
                                  const post::AmortizedPosterior& posterior, const Matrix& x, double scale,
                                  const KiviConfig& config, Rng& rng) {
    const std::size_t n = config.n_q, k = posterior.dim();
    if (k != model.latent_dim()) throw ShapeError("adaptive contrast: posterior and model latent sizes differ");
    if (n < 2) throw DegenerateBatch("adaptive contrast: need at least two draws per datapoint");
    const auto batch = static_cast<std::size_t>(x.rows());
    const Tensor xs = Tensor::matrix(batch, static_cast<std::size_t>(x.cols()),
                                     std::vector<double>(x.data(), x.data() + x.size()));
    const Tensor z = posterior.sample(xs, n, rng).z;
    const Tensor log_joint = model.log_likelihood(z, repeat_matrix_rows(x, n)) + model.log_prior(z);

    Tensor first = Tensor::scalar(0.0), kl = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        const Tensor zb = slice(z, 0, b * n, (b + 1) * n);
        const Matrix values = dre::to_matrix(zb);
        const Eigen::RowVectorXd mu = values.colwise().mean();
        Eigen::RowVectorXd sd =
            ((values.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(n - 1)).sqrt();
        for (Eigen::Index j = 0; j < sd.size(); ++j) {
            if (sd[j] == 0.0) {
                throw DegenerateBatch("adaptive contrast: zero sample spread in latent dimension " +
                                      std::to_string(j) + " for datapoint " + std::to_string(b));
            }
            sd[j] = std::max(sd[j], 1e-6);
        }
        const Tensor mu_t = Tensor::vector(std::vector<double>(mu.data(), mu.data() + k));
        const Tensor sd_t = Tensor::vector(std::vector<double>(sd.data(), sd.data() + k));
        const Tensor z_hat = (zb - mu_t) / sd_t;
        const double log_norm = sd.array().log().sum() + 0.5 * static_cast<double>(k) * kLog2Pi;
        const Tensor log_r = -0.5 * sum(square(z_hat), 1) - log_norm;
        first = first + mean(slice(log_joint, 0, b * n, (b + 1) * n) - log_r);
        kl = kl + estimate_kl(z_hat, standard_normal_matrix(config.n_p, k, rng), config.kernel, config.reverse_trick)
                      .value;
    }
    first = first * scale;
    kl = kl * scale;
    Tensor objective = first - kl;
    return {ElboEstimate::from_terms(first.item(), kl.item()), std::move(objective)};
}

StepResult amortized_elbo_step(const models::AmortizedDecoderModel& model,
                               const post::AmortizedPosterior& posterior, const Matrix& x, double scale,
                               std::size_t draws, Rng& rng) {
    if (draws == 0) throw std::invalid_argument("amortized elbo: need at least one draw");
    const auto batch = static_cast<std::size_t>(x.rows());
    const Tensor xs = Tensor::matrix(batch, static_cast<std::size_t>(x.cols()),
                                     std::vector<double>(x.data(), x.data() + x.size()));
    const post::Sample s = posterior.sample(xs, draws, rng);
    if (!s.log_density) throw std::invalid_argument("amortized elbo: posterior has no tractable density");
    const double per = scale * static_cast<double>(batch);
    const Tensor reconstruction = mean(model.log_likelihood(s.z, repeat_matrix_rows(x, draws))) * per;
    const Tensor kl = mean(*s.log_density - model.log_prior(s.z)) * per;
    Tensor objective = reconstruction - kl;
    return {ElboEstimate::from_terms(reconstruction.item(), kl.item()), std::move(objective)};
}

// -------------------------------------------------------------- optimizer

Adam::Adam(std::vector<Tensor> params, OptimizerConfig config) : params_(std::move(params)), config_(config) {
    config_.validate();
    for (const auto& p : params_) {
        if (!p.is_leaf() || !p.requires_grad()) throw std::invalid_argument("adam: parameters must be leaves");
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void Adam::ascend(const Gradients& grads, double learning_rate) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!grads.contains(params_[i])) continue;
        const auto g = grads.values(params_[i]);
        auto p = params_[i].mutable_values();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
            p[j] += learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.epsilon);
        }
    }
}

// ------------------------------------------------------------------ trace

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void Trace::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write trace '" + path + "'");
    out << "iteration,elbo,kl,reconstruction\n";
    for (const auto& r : rows) {
        out << r.iteration << ',' << format_double(r.elbo) << ',' << format_double(r.kl) << ','
            << format_double(r.reconstruction) << '\n';
    }
}

void Trace::write_timing_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write timing '" + path + "'");
    out << "iteration,wall-time-ms\n";
    for (const auto& r : rows) out << r.iteration << ',' << format_double(r.wall_ms) << '\n';
}

Trace Trace::read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trace '" + path + "'");
    std::string line;
    std::getline(in, line);
    if (line.rfind("iteration,elbo,kl,reconstruction", 0) != 0) throw std::runtime_error(path + ": not a trace file");
    Trace t;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        TraceRow r;
        char c1, c2, c3;
        std::istringstream ss(line);
        if (!(ss >> r.iteration >> c1 >> r.elbo >> c2 >> r.kl >> c3 >> r.reconstruction)) {
            throw std::runtime_error(path + ": malformed row '" + line + "'");
        }
        t.rows.push_back(r);
    }
    return t;
}

NonFiniteLoss::NonFiniteLoss(std::size_t it, Trace tr)
    : std::runtime_error("non-finite loss at iteration " + std::to_string(it)), iteration(it), trace(std::move(tr)) {}

Trace optimize(const LoopConfig& config, const StepFn& step, std::vector<Tensor> params) {
    if (config.steps_per_epoch == 0) throw std::invalid_argument("optimize: steps_per_epoch must be at least 1");
    for (const auto& p : params)
        for (double v : p.values())
            if (!std::isfinite(v)) throw std::invalid_argument("optimize: initial parameters must be finite");
    Adam adam(std::move(params), config.optimizer);
    Trace trace;
    trace.rows.reserve(config.iterations);
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t it = 0; it < config.iterations; ++it) {
        StepResult result;
        Gradients grads;
        try {
            result = step(it);
            if (!std::isfinite(result.objective.item())) throw NonFiniteLoss(it, trace);
            grads = backward(result.objective);
        } catch (const NumericError&) {
            throw NonFiniteLoss(it, trace);
        }
        for (const auto& p : adam.parameters()) {
            if (!grads.contains(p)) continue;
            for (double g : grads.values(p))
                if (!std::isfinite(g)) throw NonFiniteLoss(it, trace);
        }
        const double factor = config.optimizer.schedule.factor(it / config.steps_per_epoch + 1);
        adam.ascend(grads, config.optimizer.learning_rate * factor);
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        const auto& e = result.estimate;
        trace.rows.push_back({it, e.elbo, e.kl, e.reconstruction, ms});
        if (config.on_step) config.on_step(trace.rows.back());
    }
    return trace;
}

}  // namespace kivi::vi
