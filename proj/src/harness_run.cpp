#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <numeric>
#include <ostream>

#include "kivi/harness.hpp"
#include "kivi/ops.hpp"

namespace kivi::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using dre::Matrix;
using dre::Vector;

namespace {

using Clock = std::chrono::steady_clock;

constexpr double kLog2Pi = 1.8378770664093454836;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor to_tensor(const Matrix& m) {
    return Tensor::matrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                          std::vector<double>(m.data(), m.data() + m.size()));
}

Matrix standard_normal_matrix(std::size_t n, std::size_t d, Rng& rng) {
    Matrix m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

json matrix_json(const Matrix& m) {
    json out = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        out.push_back(row);
    }
    return out;
}

json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

/// N(0, I) with no data: the ELBO is -KL(q || N(0, I)).
class StandardNormalTarget final : public models::TargetModel {
public:
    explicit StandardNormalTarget(std::size_t dim) : dim_(dim) {}
    std::string kind() const override { return "kl_only"; }
    std::size_t latent_dim() const override { return dim_; }
    Tensor log_likelihood(const Tensor& z, const models::DataBatch*) const override {
        return Tensor::zeros({z.dim(0)});
    }
    Tensor log_prior(const Tensor& z) const override {
        return -0.5 * sum(square(z), 1) - 0.5 * static_cast<double>(dim_) * kLog2Pi;
    }
    Matrix sample_prior(std::size_t n, Rng& rng) const override { return standard_normal_matrix(n, dim_, rng); }

private:
    std::size_t dim_;
};

// ------------------------------------------------------------- posteriors

std::vector<post::LayerSpec> with_output(const std::vector<post::LayerSpec>& hidden, std::size_t width) {
    auto layers = hidden;
    layers.push_back({width, post::Activation::identity});
    return layers;
}

std::unique_ptr<post::Posterior> mean_field(std::size_t dim, double init_log_std, bool random_mean, Rng& init) {
    std::vector<double> mean(dim, 0.0);
    if (random_mean) {
        for (auto& m : mean) m = init.normal();
    }
    return std::make_unique<post::MeanFieldGaussian>(std::move(mean), std::vector<double>(dim, init_log_std));
}

/// Implicit family for a block of `rows x cols` weights (rows = 1 for plain
/// vectors).
std::shared_ptr<post::Posterior> implicit_block(const PosteriorSpec& spec, std::size_t rows, std::size_t cols,
                                                Rng& init) {
    if (spec.kind == "mmnn") {
        post::MmnnConfig mc;
        mc.input = spec.mmnn_input;
        mc.layers = spec.mmnn_hidden;
        mc.layers.push_back({rows, cols});
        return std::make_shared<post::MmnnPosterior>(mc, init);
    }
    post::NoiseNetConfig nc;
    nc.noise_dim = spec.noise_dim;
    nc.layers = with_output(spec.hidden, rows * cols);
    nc.noise_after = spec.noise_after;
    return std::make_shared<post::NoiseNetPosterior>(nc, init);
}

std::unique_ptr<post::Posterior> make_posterior(const PosteriorSpec& spec, std::size_t dim, Rng& init) {
    if (spec.kind == "mean_field") return mean_field(dim, spec.init_log_std, spec.random_mean, init);
    if (spec.kind == "planar_flow") return std::make_unique<post::PlanarFlowPosterior>(dim, spec.flow_length, init);
    if (spec.kind == "mmnn") {
        post::MmnnConfig mc;
        mc.input = spec.mmnn_input;
        mc.layers = spec.mmnn_hidden;
        mc.layers.push_back({1, dim});
        return std::make_unique<post::MmnnPosterior>(mc, init);
    }
    post::NoiseNetConfig nc;
    nc.noise_dim = spec.noise_dim;
    nc.layers = with_output(spec.hidden, dim);
    nc.noise_after = spec.noise_after;
    return std::make_unique<post::NoiseNetPosterior>(nc, init);
}

/// One implicit block per weight matrix.
std::unique_ptr<post::Posterior> make_bnn_posterior(const PosteriorSpec& spec, const models::BnnRegressionModel& model,
                                                    Rng& init) {
    if (spec.kind == "mean_field" || spec.kind == "planar_flow") return make_posterior(spec, model.latent_dim(), init);
    std::vector<std::shared_ptr<post::Posterior>> blocks;
    const auto& sizes = model.layer_sizes();
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) blocks.push_back(implicit_block(spec, sizes[l] + 1, sizes[l + 1], init));
    return std::make_unique<post::FactorizedPosterior>(std::move(blocks));
}

// ------------------------------------------------------------------- runs

struct Context {
    const ExperimentConfig& config;
    fs::path dir;
    std::ostream* log;
    json metrics = json::object();
    json files = {{"samples", json::object()}, {"traces", json::object()}};
    json timing = json::object();

    void say(const std::string& line) const {
        if (log) *log << line << std::endl;
    }
    Rng stream(const char* key) const { return Rng(config.seed).split(key); }
};

std::string suffixed(const std::string& stem, const std::string& method, const std::string& ext) {
    return method == "kivi" ? stem + ext : stem + "_" + method + ext;
}

void write_trace(Context& ctx, const std::string& method, const vi::Trace& trace) {
    const std::string trace_file = suffixed("trace", method, ".csv");
    const std::string timing_file = suffixed("timing", method, ".csv");
    trace.write_csv((ctx.dir / trace_file).string());
    trace.write_timing_csv((ctx.dir / timing_file).string());
    ctx.files["traces"][method] = {{"trace", trace_file}, {"timing", timing_file}};
}

void write_samples(Context& ctx, const std::string& method, const Matrix& samples) {
    const std::string file = suffixed("samples", method, ".csv");
    write_samples_csv(ctx.dir / file, samples);
    ctx.files["samples"][method] = file;
}

json trace_summary(const vi::Trace& trace) {
    if (trace.rows.empty()) return json::object();
    const std::size_t tail = std::max<std::size_t>(1, trace.rows.size() / 10);
    double elbo = 0.0, kl = 0.0;
    for (std::size_t i = trace.rows.size() - tail; i < trace.rows.size(); ++i) {
        elbo += trace.rows[i].elbo;
        kl += trace.rows[i].kl;
    }
    return {{"steps", trace.rows.size()},
            {"elbo_tail_mean", elbo / static_cast<double>(tail)},
            {"kl_tail_mean", kl / static_cast<double>(tail)},
            {"final_elbo", trace.rows.back().elbo}};
}

/// Runs the loop, recording trace files; a non-finite step still leaves the
/// partial trace on disk.
vi::Trace train(Context& ctx, const std::string& method, std::size_t steps, std::size_t steps_per_epoch,
                const vi::OptimizerConfig& optimizer, const vi::StepFn& step, std::vector<Tensor> params) {
    vi::LoopConfig loop;
    loop.iterations = steps;
    loop.steps_per_epoch = steps_per_epoch;
    loop.optimizer = optimizer;
    const std::size_t every = std::max<std::size_t>(1, steps / 10);
    loop.on_step = [&](const vi::TraceRow& r) {
        if ((r.iteration + 1) % every == 0) {
            char line[160];
            std::snprintf(line, sizeof line, "[%s] step %zu/%zu elbo %.4g kl %.4g", method.c_str(), r.iteration + 1,
                          steps, r.elbo, r.kl);
            ctx.say(line);
        }
    };
    const auto t0 = Clock::now();
    try {
        vi::Trace trace = vi::optimize(loop, step, std::move(params));
        ctx.timing[method] = {{"train_seconds", seconds_since(t0)}};
        write_trace(ctx, method, trace);
        return trace;
    } catch (const vi::NonFiniteLoss& e) {
        write_trace(ctx, method, e.trace);
        throw;
    }
}

/// Full-batch steps, or shuffled minibatches when batch_size > 0 and data is
/// present (kivi.iterations then counts epochs).
vi::Trace train_global(Context& ctx, const std::string& method, const models::TargetModel& model,
                       const post::Posterior& q, const vi::KiviConfig& kc, const models::DataBatch* data,
                       std::size_t epochs, std::vector<Tensor> params) {
    const Rng base = ctx.stream("train");
    const std::size_t n = data ? data->size() : 0;
    if (kc.batch_size == 0 || n == 0) {
        const vi::StepFn step = [&](std::size_t it) {
            Rng rng = base.split(it);
            return vi::elbo_step(model, q, data, kc, rng);
        };
        return train(ctx, method, epochs, 1, kc.optimizer, step, std::move(params));
    }
    const std::size_t batch = std::min(kc.batch_size, n);
    const std::size_t per_epoch = (n + batch - 1) / batch;
    std::vector<std::size_t> order(n);
    models::DataBatch current;
    const vi::StepFn step = [&](std::size_t it) {
        const std::size_t epoch = it / per_epoch, k = it % per_epoch;
        if (k == 0) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            Rng shuffle = base.split("shuffle").split(epoch);
            std::shuffle(order.begin(), order.end(), shuffle.engine());
        }
        current = models::minibatch(*data, order, k * batch, std::min(n, (k + 1) * batch));
        Rng rng = base.split(it);
        return vi::elbo_step(model, q, &current, kc, rng);
    };
    return train(ctx, method, epochs * per_epoch, per_epoch, kc.optimizer, step, std::move(params));
}

vi::KiviConfig baseline_config(const ExperimentConfig& c, const BaselineSpec& b) {
    vi::KiviConfig kc = c.kivi;
    kc.kl_estimator = vi::KlEstimator::sample_density;
    kc.n_q = kc.M = b.samples;
    if (b.learning_rate) kc.optimizer.learning_rate = *b.learning_rate;
    return kc;
}

std::vector<Tensor> joined(std::vector<Tensor> a, const std::vector<Tensor>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

Matrix final_samples(const Context& ctx, const post::Posterior& q) {
    Rng rng = ctx.stream("final");
    return dre::to_matrix(q.sample(ctx.config.final_samples, rng).z);
}

json cloud_metrics(const Matrix& samples) {
    const SampleSummary s = summarize(samples);
    json out = {{"mean", vector_json(s.mean)}, {"cov", matrix_json(s.cov)}};
    if (samples.cols() == 2) {
        out["corr"] = s.corr(0, 1);
    } else {
        out["corr"] = matrix_json(s.corr);
    }
    return out;
}

// Trains KIVI and the enabled tractable baselines on one global-latent model.
// `make_model` builds a fresh model per method (BNNs carry trainable noise
// parameters). Returns final samples per method, KIVI first.
struct MethodResult {
    std::string name;
    std::unique_ptr<models::TargetModel> model;
    std::unique_ptr<post::Posterior> posterior;
    Matrix samples;
};

template <class MakeModel, class MakePosterior>
std::vector<MethodResult> run_methods(Context& ctx, MakeModel make_model, MakePosterior make_kivi_posterior,
                                      const models::DataBatch* data) {
    const auto& c = ctx.config;
    std::vector<MethodResult> out;
    auto finish = [&](MethodResult r, const vi::Trace& trace) {
        r.samples = final_samples(ctx, *r.posterior);
        write_samples(ctx, r.name, r.samples);
        ctx.metrics[r.name] = trace_summary(trace);
        out.push_back(std::move(r));
    };
    {
        MethodResult r{"kivi", make_model(), nullptr, {}};
        Rng init = ctx.stream("init");
        r.posterior = make_kivi_posterior(*r.model, init);
        const auto trace = train_global(ctx, "kivi", *r.model, *r.posterior, c.kivi, data, c.kivi.iterations,
                                        joined(r.posterior->parameters(), r.model->parameters()));
        finish(std::move(r), trace);
    }
    for (const auto* spec : {&c.mean_field, &c.planar_flow}) {
        if (!spec->enabled) continue;
        const std::string name = spec == &c.mean_field ? "mean_field" : "planar_flow";
        MethodResult r{name, make_model(), nullptr, {}};
        Rng init = ctx.stream("init");
        const std::size_t dim = r.model->latent_dim();
        if (spec == &c.mean_field) {
            r.posterior = mean_field(dim, spec->init_log_std, spec->random_mean, init);
        } else {
            r.posterior = std::make_unique<post::PlanarFlowPosterior>(dim, spec->flow_length, init);
        }
        const vi::KiviConfig kc = baseline_config(c, *spec);
        const auto trace = train_global(ctx, name, *r.model, *r.posterior, kc, data,
                                        spec->iterations.value_or(c.kivi.iterations),
                                        joined(r.posterior->parameters(), r.model->parameters()));
        finish(std::move(r), trace);
    }
    return out;
}

std::optional<Matrix> run_hmc(Context& ctx, const models::TargetModel& model, const models::DataBatch* data) {
    if (!ctx.config.hmc.enabled) return std::nullopt;
    ctx.say("[hmc] sampling");
    const auto t0 = Clock::now();
    const auto result =
        oracles::hmc_sample(model.log_joint_fn(data), model.latent_dim(), ctx.config.hmc.config, ctx.stream("hmc"));
    ctx.timing["hmc"] = {{"train_seconds", seconds_since(t0)}};
    write_samples(ctx, "hmc", result.samples);
    ctx.metrics["hmc"] = {{"accept_rate", result.accept_rate},
                          {"divergences", result.divergences},
                          {"step_size", result.step_size},
                          {"draws", result.samples.rows()}};
    return result.samples;
}

// ---------------------------------------------------------------- kinds

void run_gmm(Context& ctx) {
    const auto& spec = ctx.config.gmm;
    auto make_model = [&] { return std::make_unique<models::GaussianMixtureTarget>(spec.means, spec.stds, spec.weights); };
    auto results = run_methods(
        ctx, make_model, [&](const models::TargetModel& m, Rng& init) { return make_posterior(ctx.config.posterior, m.latent_dim(), init); },
        nullptr);
    std::vector<std::pair<std::string, Matrix>> clouds;
    for (auto& r : results) clouds.emplace_back(r.name, r.samples);
    if (auto h = run_hmc(ctx, *make_model(), nullptr)) clouds.emplace_back("hmc", *h);

    for (const auto& [name, z] : clouds) {
        const std::size_t k = spec.means.size();
        std::vector<double> within(k, 0.0), basin(k, 0.0);
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            std::size_t nearest = 0;
            for (std::size_t j = 0; j < k; ++j) {
                const double dist = std::abs(z(i, 0) - spec.means[j]);
                if (dist <= spec.mode_radius) within[j] += 1.0;
                if (dist < std::abs(z(i, 0) - spec.means[nearest])) nearest = j;
            }
            basin[nearest] += 1.0;
        }
        for (std::size_t j = 0; j < k; ++j) {
            within[j] /= static_cast<double>(z.rows());
            basin[j] /= static_cast<double>(z.rows());
        }
        const SampleSummary s = summarize(z);
        auto& m = ctx.metrics[name];
        m["mode_mass"] = within;
        m["basin_mass"] = basin;
        m["single_mode_mass"] = *std::max_element(basin.begin(), basin.end());
        m["sample_mean"] = s.mean(0);
        m["sample_std"] = std::sqrt(s.cov(0, 0));
    }
}

void run_blr(Context& ctx) {
    const auto& spec = ctx.config.blr;
    Rng data_rng = ctx.stream("data");
    const auto labels = spec.labels == "predicted" ? models::BlrLabels::predicted : models::BlrLabels::sampled;
    const models::BlrModel base = models::BlrModel::synthetic(spec.n, spec.dim, data_rng, labels);
    auto make_model = [&] { return std::make_unique<models::BlrModel>(base); };
    auto results = run_methods(
        ctx, make_model, [&](const models::TargetModel& m, Rng& init) { return make_posterior(ctx.config.posterior, m.latent_dim(), init); },
        &base.data());
    const auto hmc = run_hmc(ctx, base, &base.data());

    ctx.metrics["true_weight"] = vector_json(base.true_weight());
    for (const auto& r : results) ctx.metrics[r.name].update(cloud_metrics(r.samples));
    if (hmc) {
        ctx.metrics["hmc"].update(cloud_metrics(*hmc));
        if (spec.dim == 2) {
            const double reference = ctx.metrics["hmc"]["corr"].get<double>();
            for (const auto& r : results) {
                const double corr = ctx.metrics[r.name]["corr"].get<double>();
                ctx.metrics[r.name]["corr_vs_hmc"] = {{"same_sign", (corr > 0.0) == (reference > 0.0)},
                                                      {"abs_diff", std::abs(corr - reference)}};
            }
        }
    }
}

void run_kl_only(Context& ctx) {
    const std::size_t dim = ctx.config.kl_only.dim;
    auto make_model = [&] { return std::make_unique<StandardNormalTarget>(dim); };
    auto results = run_methods(
        ctx, make_model, [&](const models::TargetModel& m, Rng& init) { return make_posterior(ctx.config.posterior, m.latent_dim(), init); },
        nullptr);
    ctx.metrics["reverse_trick"] = ctx.config.kivi.reverse_trick;
    for (const auto& r : results) {
        const SampleSummary s = summarize(r.samples);
        auto& m = ctx.metrics[r.name];
        m.update(cloud_metrics(r.samples));
        m["mean_norm"] = s.mean.norm();
        m["cov_distance"] = (s.cov - Matrix::Identity(s.cov.rows(), s.cov.cols())).norm();
    }
}

void write_predictions(const Context& ctx, const std::string& method, const models::DataBatch& test,
                       const models::Prediction& p, json& files) {
    const std::string file = suffixed("predictions", method, ".csv");
    std::ofstream out(ctx.dir / file);
    if (!out) throw std::runtime_error("cannot write " + (ctx.dir / file).string());
    for (Eigen::Index c = 0; c < test.x.cols(); ++c) out << 'x' << c << ',';
    out << "y,mean,variance\n";
    char buf[32];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << buf;
    };
    for (Eigen::Index i = 0; i < test.x.rows(); ++i) {
        for (Eigen::Index c = 0; c < test.x.cols(); ++c) {
            put(test.x(i, c));
            out << ',';
        }
        put(test.y(i));
        out << ',';
        put(p.mean(i));
        out << ',';
        put(p.variance(i));
        out << '\n';
    }
    files["predictions"][method] = file;
}

void run_bnn(Context& ctx) {
    const auto& c = ctx.config;
    const auto& spec = c.bnn;
    models::DataBatch train, test;
    if (c.dataset) {
        const models::DataBatch all = models::load_csv(*c.dataset, spec.has_header);
        Rng split_rng = ctx.stream("split");
        auto split = models::train_test_split(all, spec.train_fraction, split_rng);
        train = std::move(split.train);
        test = std::move(split.test);
    } else {
        Rng data_rng = ctx.stream("data");
        train = models::make_sine_data(spec.n_train, spec.noise_std, data_rng);
        test = models::make_sine_data(spec.n_test, spec.noise_std, data_rng);
    }
    const auto standardizer = models::Standardizer::fit(train);
    const models::DataBatch train_std = standardizer.apply(train);
    const models::DataBatch test_std = standardizer.apply(test);
    std::vector<std::size_t> layers{static_cast<std::size_t>(train.x.cols())};
    layers.insert(layers.end(), spec.hidden.begin(), spec.hidden.end());
    layers.push_back(1);

    auto make_model = [&] { return std::make_unique<models::BnnRegressionModel>(layers, train_std); };
    auto results = run_methods(
        ctx, make_model,
        [&](const models::TargetModel& m, Rng& init) {
            return make_bnn_posterior(c.posterior, static_cast<const models::BnnRegressionModel&>(m), init);
        },
        &train_std);
    ctx.metrics["n_train"] = train.size();
    ctx.metrics["n_test"] = test.size();
    for (const auto& r : results) {
        const auto& model = static_cast<const models::BnnRegressionModel&>(*r.model);
        Rng rng = ctx.stream("predict");
        const auto p = models::predict(model, *r.posterior, test_std, standardizer, spec.predict_samples, rng);
        auto& m = ctx.metrics[r.name];
        m["rmse"] = p.rmse;
        m["test_ll"] = p.test_ll;
        m["noise_std"] = standardizer.y_std * std::sqrt(model.b() / model.a());
        m["gamma_a"] = model.a();
        m["gamma_b"] = model.b();
        write_predictions(ctx, r.name, test, p, ctx.files);
    }
}

// --------------------------------------------------------------- amortized

std::unique_ptr<post::AmortizedPosterior> make_encoder(const PosteriorSpec& spec, std::size_t data_dim,
                                                       std::size_t latent_dim, Rng& init) {
    std::vector<std::size_t> hidden;
    for (const auto& l : spec.hidden) hidden.push_back(l.width);
    if (spec.kind == "gaussian_encoder") {
        return std::make_unique<post::GaussianEncoder>(data_dim, hidden, latent_dim, init);
    }
    return std::make_unique<post::ImplicitEncoder>(data_dim, spec.noise_dim, hidden, latent_dim, init);
}

void run_amortized(Context& ctx) {
    const auto& c = ctx.config;
    const auto& spec = c.amortized;
    const auto output = spec.output == "gaussian" ? models::OutputDistribution::gaussian : models::OutputDistribution::bernoulli;

    Rng data_rng = ctx.stream("data");
    const models::AmortizedDecoderModel truth(spec.latent_dim, spec.decoder_hidden, spec.data_dim, output, data_rng);
    const Matrix z_true = standard_normal_matrix(spec.n_data, spec.latent_dim, data_rng);
    const Matrix decoded = dre::to_matrix(truth.decode(to_tensor(z_true)));
    Matrix x(decoded.rows(), decoded.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double v = decoded.data()[i];
        x.data()[i] = output == models::OutputDistribution::bernoulli
                          ? (data_rng.uniform() < 1.0 / (1.0 + std::exp(-v)) ? 1.0 : 0.0)
                          : v + data_rng.normal();
    }
    const std::size_t n = spec.n_data;
    const std::size_t batch = c.kivi.batch_size == 0 ? n : std::min(c.kivi.batch_size, n);
    const std::size_t per_epoch = (n + batch - 1) / batch;

    auto train_method = [&](const std::string& name, const models::AmortizedDecoderModel& decoder,
                            const post::AmortizedPosterior& encoder, std::size_t epochs,
                            const vi::OptimizerConfig& optimizer, auto objective) {
        const Rng base = ctx.stream("train");
        std::vector<std::size_t> order(n);
        const vi::StepFn step = [&](std::size_t it) {
            const std::size_t epoch = it / per_epoch, k = it % per_epoch;
            if (k == 0) {
                std::iota(order.begin(), order.end(), std::size_t{0});
                Rng shuffle = base.split("shuffle").split(epoch);
                std::shuffle(order.begin(), order.end(), shuffle.engine());
            }
            const std::size_t begin = k * batch, end = std::min(n, (k + 1) * batch);
            Matrix xb(end - begin, x.cols());
            for (std::size_t i = begin; i < end; ++i) xb.row(static_cast<Eigen::Index>(i - begin)) = x.row(static_cast<Eigen::Index>(order[i]));
            Rng rng = base.split(it);
            return objective(xb, static_cast<double>(n) / static_cast<double>(end - begin), rng);
        };
        return train(ctx, name, epochs * per_epoch, per_epoch, optimizer, step,
                     joined(encoder.parameters(), decoder.parameters()));
    };
    auto dump = [&](const std::string& name, const post::AmortizedPosterior& encoder) {
        Rng rng = ctx.stream("final");
        const Matrix first = x.topRows(1);
        write_samples(ctx, name, dre::to_matrix(encoder.sample(to_tensor(first), c.final_samples, rng).z));
    };

    Rng init = ctx.stream("init");
    const models::AmortizedDecoderModel decoder(spec.latent_dim, spec.decoder_hidden, spec.data_dim, output, init);
    const auto encoder = make_encoder(c.posterior, spec.data_dim, spec.latent_dim, init);
    const auto trace = train_method("kivi", decoder, *encoder, c.kivi.iterations, c.kivi.optimizer,
                                    [&](const Matrix& xb, double scale, Rng& rng) {
                                        return vi::adaptive_contrast_step(decoder, *encoder, xb, scale, c.kivi, rng);
                                    });
    ctx.metrics["kivi"] = trace_summary(trace);
    dump("kivi", *encoder);

    // Adaptive Contrast against the plain ELBO at the trained parameters.
    if (c.posterior.kind == "gaussian_encoder") {
        const Matrix xe = x.topRows(static_cast<Eigen::Index>(std::min(spec.eval_points, n)));
        std::vector<double> ac, plain;
        const Rng eval = ctx.stream("identity");
        for (std::size_t r = 0; r < spec.eval_runs; ++r) {
            Rng ra = eval.split(2 * r), rp = eval.split(2 * r + 1);
            ac.push_back(vi::adaptive_contrast_step(decoder, *encoder, xe, 1.0, c.kivi, ra).estimate.elbo);
            plain.push_back(vi::amortized_elbo_step(decoder, *encoder, xe, 1.0, c.kivi.n_q, rp).estimate.elbo);
        }
        auto mean_var = [](const std::vector<double>& v) {
            const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            double s = 0.0;
            for (double e : v) s += (e - m) * (e - m);
            return std::pair{m, s / static_cast<double>(v.size() - 1)};
        };
        const auto [ma, va] = mean_var(ac);
        const auto [mp, vp] = mean_var(plain);
        const double runs = static_cast<double>(spec.eval_runs);
        ctx.metrics["identity"] = {{"adaptive_contrast", ma},
                                   {"plain_elbo", mp},
                                   {"difference", ma - mp},
                                   {"standard_error", std::sqrt(va / runs + vp / runs)}};
    }

    if (c.mean_field.enabled) {
        Rng mf_init = ctx.stream("init");
        const models::AmortizedDecoderModel mf_decoder(spec.latent_dim, spec.decoder_hidden, spec.data_dim, output, mf_init);
        std::vector<std::size_t> hidden;
        for (const auto& l : c.posterior.hidden) hidden.push_back(l.width);
        const post::GaussianEncoder mf_encoder(spec.data_dim, hidden, spec.latent_dim, mf_init);
        vi::OptimizerConfig optimizer = c.kivi.optimizer;
        if (c.mean_field.learning_rate) optimizer.learning_rate = *c.mean_field.learning_rate;
        const auto mf_trace = train_method(
            "mean_field", mf_decoder, mf_encoder, c.mean_field.iterations.value_or(c.kivi.iterations), optimizer,
            [&](const Matrix& xb, double scale, Rng& rng) {
                return vi::amortized_elbo_step(mf_decoder, mf_encoder, xb, scale, c.mean_field.samples, rng);
            });
        ctx.metrics["mean_field"] = trace_summary(mf_trace);
        dump("mean_field", mf_encoder);
    }
}

// -------------------------------------------------------------- estimator

void run_bench(Context& ctx) {
    const auto& c = ctx.config;
    const auto& spec = c.bench;
    json cells = json::array();
    double max_rel = 0.0, sum_rel = 0.0, zero_abs = 0.0;
    std::size_t rel_cells = 0, index = 0;
    const Rng base = ctx.stream("bench");
    const std::string file = "bench.csv";
    std::ofstream out(ctx.dir / file);
    if (!out) throw std::runtime_error("cannot write " + (ctx.dir / file).string());
    out << "dim,mu,sigma,analytic,estimate,standard_error,abs_error,rel_error\n";
    for (const std::size_t d : spec.dims) {
        for (const double mu : spec.means) {
            for (const double sigma : spec.stds) {
                std::vector<double> values;
                for (std::size_t r = 0; r < spec.refits; ++r) {
                    Rng rng = base.split(index).split(r);
                    Matrix zq = standard_normal_matrix(c.kivi.n_q, d, rng);
                    zq = (zq.array() * sigma + mu).matrix();
                    const Matrix zp = standard_normal_matrix(c.kivi.n_p, d, rng);
                    values.push_back(vi::estimate_kl(to_tensor(zq), zp, c.kivi.kernel, c.kivi.reverse_trick).value.item());
                }
                ++index;
                const double m = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
                double var = 0.0;
                for (double v : values) var += (v - m) * (v - m);
                const double se = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1) /
                                                                 static_cast<double>(values.size()))
                                                     : 0.0;
                const double analytic =
                    static_cast<double>(d) * (0.5 * (sigma * sigma + mu * mu - 1.0) - std::log(sigma));
                const double abs_err = std::abs(m - analytic);
                json cell = {{"dim", d},           {"mu", mu},     {"sigma", sigma}, {"analytic", analytic},
                             {"estimate", m},      {"standard_error", se}, {"abs_error", abs_err}};
                char line[256];
                if (analytic > 1e-12) {
                    const double rel = abs_err / analytic;
                    cell["rel_error"] = rel;
                    max_rel = std::max(max_rel, rel);
                    sum_rel += rel;
                    ++rel_cells;
                    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", d, mu, sigma,
                                  analytic, m, se, abs_err, rel);
                } else {
                    cell["rel_error"] = nullptr;
                    zero_abs = std::max(zero_abs, abs_err);
                    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,\n", d, mu, sigma,
                                  analytic, m, se, abs_err);
                }
                out << line;
                cells.push_back(cell);
            }
        }
    }
    ctx.files["table"] = file;
    ctx.metrics["cells"] = cells;
    ctx.metrics["max_rel_error"] = max_rel;
    ctx.metrics["mean_rel_error"] = rel_cells ? sum_rel / static_cast<double>(rel_cells) : 0.0;
    ctx.metrics["zero_kl_max_abs_error"] = zero_abs;
}

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_json(const fs::path& path, const json& doc) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

}  // namespace

RunReport run(const ExperimentConfig& config, const RunOptions& options) {
    config.validate();
    const fs::path dir = resolve_output_dir(config);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw ConfigError("output_dir", "cannot create '" + dir.string() + "'");

    Context ctx{config, dir, options.log};
    const std::string started = utc_timestamp();
    const auto t0 = Clock::now();
    write_json(dir / "config.json", to_json(config));
    ctx.files["config"] = "config.json";
    switch (config.kind) {
        case ExperimentKind::gmm1d: run_gmm(ctx); break;
        case ExperimentKind::blr2d: run_blr(ctx); break;
        case ExperimentKind::kl_only: run_kl_only(ctx); break;
        case ExperimentKind::bnn_regression: run_bnn(ctx); break;
        case ExperimentKind::amortized_ac: run_amortized(ctx); break;
        case ExperimentKind::estimator_bench: run_bench(ctx); break;
    }
    ctx.timing["started"] = started;
    ctx.timing["total_seconds"] = seconds_since(t0);

    RunReport report;
    report.directory = dir;
    report.document = {{"schema", kReportSchema},
                       {"kind", to_string(config.kind)},
                       {"seed", config.seed},
                       {"config", to_json(config)},
                       {"metrics", ctx.metrics},
                       {"files", ctx.files}};
    report.timing = ctx.timing;
    write_json(report.metrics_path(), report.document);
    json full = report.document;
    full["timing"] = report.timing;
    write_json(report.report_path(), full);
    return report;
}

}  // namespace kivi::harness
