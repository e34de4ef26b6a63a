#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "fd_check.hpp"
#include "kivi/oracles.hpp"
#include "kivi/special.hpp"
#include "kivi/vi_core.hpp"

using namespace kivi;
using namespace kivi::vi;
using kivi::testing::check_gradients;

namespace {

Matrix normal_matrix(std::size_t n, std::size_t d, Rng& rng) {
    Matrix m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

double analytic_kl(const post::MeanFieldGaussian& q) {
    std::vector<double> mu(q.mean().values().begin(), q.mean().values().end());
    std::vector<double> sd;
    for (double l : q.log_std().values()) sd.push_back(std::exp(l));
    const std::vector<double> zero(mu.size(), 0.0), one(mu.size(), 1.0);
    return oracles::analytic_gaussian_kl(mu, sd, zero, one);
}

// Ratio model evaluated with differentiable ops; alpha, beta and centers
// enter only as constants.
Tensor ratio_by_ops(const dre::RatioModel& m, const Tensor& z) {
    auto kernel_sum = [&](const Matrix& centers, const dre::Vector& w) {
        Tensor total = Tensor::zeros({z.dim(0)});
        for (Eigen::Index c = 0; c < centers.rows(); ++c) {
            const Tensor center = Tensor::vector(std::vector<double>(centers.row(c).data(),
                                                                     centers.row(c).data() + centers.cols()));
            const Tensor k = exp(sum(square(z - center), 1) * (-0.5 / (m.bandwidth * m.bandwidth)));
            total = total + k * w[c];
        }
        return total;
    };
    return kernel_sum(m.den_centers, m.alpha) + kernel_sum(m.num_centers, m.beta);
}

dre::KernelConfig estimator_kernel() {
    dre::KernelConfig k;
    k.lambda = 0.01;
    return k;
}

}  // namespace

TEST_CASE("config validation") {
    KiviConfig c;
    CHECK_NOTHROW(c.validate());
    c.n_p = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = KiviConfig{};
    c.optimizer.learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = KiviConfig{};
    c.optimizer.name = "sgd";
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK_THROWS_AS(parse_schedule("cosine"), std::invalid_argument);
}

TEST_CASE("learning-rate schedules") {
    Schedule s;
    CHECK(s.factor(1) == 1.0);
    CHECK(s.factor(500) == 1.0);
    s.kind = ScheduleKind::step_decay;
    s.every = 100;
    s.ratio = 0.5;
    CHECK(s.factor(100) == 1.0);
    CHECK(s.factor(101) == 0.5);
    CHECK(s.factor(250) == 0.25);
    s.kind = ScheduleKind::anneal;
    CHECK(s.factor(1) == 1.0);
    CHECK(s.factor(101) == doctest::Approx(0.5));
    CHECK_THROWS(s.factor(0));
}

TEST_CASE("KL estimate is near zero when q equals p") {
    const post::MeanFieldGaussian q(2);
    double total = 0.0;
    for (std::uint64_t r = 0; r < 50; ++r) {
        Rng rng = Rng(100).split(r);
        const Tensor zq = q.sample(200, rng).z;
        const Matrix zp = normal_matrix(200, 2, rng);
        total += estimate_kl(zq, zp, estimator_kernel()).value.item();
    }
    MESSAGE("mean estimate " << total / 50);
    CHECK(std::abs(total / 50) <= 0.1);
}

TEST_CASE("reverse and forward estimators agree in sign on separated distributions") {
    post::MeanFieldGaussian q({1.5, 0.0}, {std::log(0.7), 0.0});
    Rng rng(7);
    const Tensor zq = q.sample(200, rng).z;
    const Matrix zp = normal_matrix(200, 2, rng);
    CHECK(estimate_kl(zq, zp, dre::KernelConfig{}, true).value.item() > 0.3);
    CHECK(estimate_kl(zq, zp, dre::KernelConfig{}, false).value.item() > 0.3);
}

TEST_CASE("detach contract: fitted coefficients carry no gradient path") {
    post::MeanFieldGaussian q({0.4, -0.3}, {std::log(0.8), std::log(1.1)});
    Rng rng(11);
    const Matrix zp = normal_matrix(100, 2, rng);
    auto params = q.parameters();

    Rng draw(12);
    const Tensor zq = q.sample(100, draw).z;
    const KlEstimate est = estimate_kl(zq, zp, dre::KernelConfig{});

    dre::RatioModel perturbed = est.ratio;
    Rng noise(13);
    for (auto& a : perturbed.alpha) a += 1e-3 * noise.normal();
    for (auto& b : perturbed.beta) b += 1e-3 * noise.normal();

    // Same perturbation baked into a freshly built model.
    dre::RatioModel baked;
    baked.den_centers = est.ratio.den_centers;
    baked.num_centers = est.ratio.num_centers;
    baked.alpha = dre::Vector(perturbed.alpha);
    baked.beta = dre::Vector(perturbed.beta);
    baked.bandwidth = est.ratio.bandwidth;
    baked.lambda = est.ratio.lambda;
    baked.clip = est.ratio.clip;

    const Tensor kl_fit = kl_from_ratio(est.ratio, zq);
    const Tensor kl_pert = kl_from_ratio(perturbed, zq);
    const Tensor kl_baked = kl_from_ratio(baked, zq);
    CHECK(kl_fit.item() != kl_pert.item());

    const Gradients g_pert = backward(kl_pert);
    const Gradients g_baked = backward(kl_baked);
    for (const auto& p : params) {
        const auto a = g_pert.values(p);
        const auto b = g_baked.values(p);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }

    // And both agree with autodiff through an op-built kernel sum with
    // constant coefficients.
    const Tensor by_ops = -mean(log(clamp_min(ratio_by_ops(perturbed, zq), perturbed.clip)));
    CHECK(by_ops.item() == doctest::Approx(kl_pert.item()).epsilon(1e-12));
    const Gradients g_ops = backward(by_ops);
    for (const auto& p : params) {
        const auto a = g_pert.values(p);
        const auto b = g_ops.values(p);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-10));
    }
}

TEST_CASE("KL estimate gradients match finite differences through the evaluation points") {
    post::MeanFieldGaussian q({0.2, 0.5}, {0.1, -0.2});
    Rng rng(17);
    const Matrix zp = normal_matrix(80, 2, rng);
    Rng draw(18);
    const Tensor zq0 = q.sample(80, draw).z;
    const dre::RatioModel fixed = estimate_kl(zq0, zp, dre::KernelConfig{}).ratio;
    const auto check = check_gradients(
        [&] {
            Rng r(18);
            return kl_from_ratio(fixed, q.sample(80, r).z);
        },
        q.parameters());
    CHECK(check.max_rel_error < 1e-5);
}

TEST_CASE("KL gradient descends the analytic KL") {
    post::MeanFieldGaussian q({1.0, -0.8}, {std::log(1.6), std::log(0.6)});
    int decreases = 0;
    double previous = analytic_kl(q);
    const double start = previous;
    for (std::uint64_t step = 0; step < 50; ++step) {
        Rng rng = Rng(21).split(step);
        const Tensor zq = q.sample(200, rng).z;
        const Tensor kl = estimate_kl(zq, normal_matrix(200, 2, rng), estimator_kernel()).value;
        const Gradients g = backward(kl);
        for (Tensor p : q.parameters()) {
            auto v = p.mutable_values();
            const auto gv = g.values(p);
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.01 * gv[i];
        }
        const double now = analytic_kl(q);
        if (now < previous) ++decreases;
        previous = now;
    }
    MESSAGE("decreasing steps " << decreases << ", KL " << start << " -> " << previous);
    CHECK(decreases >= 45);
}

TEST_CASE("empty batch gives ELBO equal to minus KL") {
    const models::GaussianMeanModel model(dre::Vector::Constant(5, 1.0), 1.0, 1.0);
    post::MeanFieldGaussian q(1);
    KiviConfig cfg;
    Rng rng(3);
    const models::DataBatch empty;
    const StepResult r = elbo_step(model, q, &empty, cfg, rng);
    CHECK(r.estimate.reconstruction == 0.0);
    CHECK(r.estimate.elbo == -r.estimate.kl);
    CHECK(r.objective.item() == doctest::Approx(r.estimate.elbo).epsilon(1e-15));
}

TEST_CASE("per-block KL sums one estimate per posterior block") {
    Rng data_rng(5);
    const auto model = models::BlrModel::synthetic(10, 3, data_rng);
    auto first = std::make_shared<post::MeanFieldGaussian>(std::vector<double>{0.5}, std::vector<double>{-0.2});
    auto second = std::make_shared<post::MeanFieldGaussian>(std::vector<double>{0.1, -0.3}, std::vector<double>{0.1, 0.0});
    const post::FactorizedPosterior q({first, second});
    KiviConfig cfg;
    cfg.kernel.lambda = 0.01;
    cfg.kl_per_block = true;
    const models::DataBatch empty;

    Rng rng(11), replay(11);
    const StepResult r = elbo_step(model, q, &empty, cfg, rng);
    const Tensor z = q.sample(cfg.n_q, replay).z;
    const Matrix z_p = model.sample_prior(cfg.n_p, replay);
    const double expected =
        estimate_kl(slice(z, 1, 0, 1), z_p.leftCols(1), cfg.kernel).value.item() +
        estimate_kl(slice(z, 1, 1, 3), z_p.rightCols(2), cfg.kernel).value.item();
    CHECK(r.estimate.kl == doctest::Approx(expected).epsilon(1e-12));

    const post::MeanFieldGaussian joint(3);
    CHECK_THROWS_AS(elbo_step(model, joint, &empty, cfg, rng), std::invalid_argument);
}

TEST_CASE("ELBO estimate fields satisfy the identity exactly") {
    const models::GaussianMeanModel model(dre::Vector::LinSpaced(6, -1.0, 2.0), 1.0, 1.0);
    post::MeanFieldGaussian q(1);
    KiviConfig cfg;
    cfg.n_q = 50;
    cfg.M = 70;
    for (std::uint64_t s = 0; s < 10; ++s) {
        Rng rng(s);
        const auto e = elbo_step(model, q, &model.data(), cfg, rng).estimate;
        CHECK(e.elbo == e.reconstruction - e.kl);
    }
    CHECK(ElboEstimate::from_terms(0.1, 0.3).elbo == 0.1 - 0.3);
}

TEST_CASE("sample-density ELBO matches the closed form for a Gaussian posterior") {
    Rng data_rng(5);
    dre::Vector obs(8);
    for (auto& v : obs) v = 1.0 + data_rng.normal();
    const models::GaussianMeanModel model(obs, 1.0, 1.0);
    post::MeanFieldGaussian q(std::vector<double>{0.3}, std::vector<double>{std::log(0.5)});
    KiviConfig cfg;
    cfg.kl_estimator = KlEstimator::sample_density;
    cfg.n_q = cfg.M = 20000;
    Rng rng(6);
    const auto e = elbo_step(model, q, &model.data(), cfg, rng).estimate;
    // E_q log N(x|z,1) = sum -1/2 log 2pi - 1/2((x - m)^2 + s^2); KL(N(m,s)||N(0,1))
    const double m = 0.3, s = 0.5;
    double expect_rec = 0.0;
    for (double x : obs) expect_rec += -0.5 * kLog2Pi - 0.5 * ((x - m) * (x - m) + s * s);
    const double expect_kl = 0.5 * (s * s + m * m - 1.0) - std::log(s);
    CHECK(e.reconstruction == doctest::Approx(expect_rec).epsilon(0.01));
    CHECK(e.kl == doctest::Approx(expect_kl).epsilon(0.02));
}

TEST_CASE("elbo rejects mismatched dimensions") {
    const models::GaussianMeanModel model(dre::Vector::Constant(3, 0.0), 1.0, 1.0);
    post::MeanFieldGaussian q(2);
    Rng rng(1);
    CHECK_THROWS_AS(elbo_step(model, q, &model.data(), KiviConfig{}, rng), ShapeError);
}

TEST_CASE("KIVI recovers a conjugate Gaussian posterior" * doctest::may_fail()) {
    Rng data_rng(8);
    dre::Vector obs(20);
    for (auto& v : obs) v = 1.0 + data_rng.normal();
    const models::GaussianMeanModel model(obs, 1.0, 1.0);
    Rng init(9);
    post::NoiseNetConfig nc;
    nc.noise_dim = 1;
    nc.layers = {{10, post::Activation::relu}, {10, post::Activation::relu}, {1, post::Activation::identity}};
    post::NoiseNetPosterior q(nc, init);
    KiviConfig cfg;
    cfg.n_p = cfg.n_q = cfg.M = 100;
    cfg.kernel.lambda = 0.01;
    cfg.optimizer.learning_rate = 0.01;
    cfg.optimizer.schedule = {ScheduleKind::step_decay, 400, 0.5};
    LoopConfig loop;
    loop.iterations = 2000;
    loop.optimizer = cfg.optimizer;
    const Rng base(10);
    optimize(
        loop,
        [&](std::size_t it) {
            Rng rng = base.split(it);
            return elbo_step(model, q, &model.data(), cfg, rng);
        },
        q.parameters());
    Rng final_rng(11);
    const Matrix z = dre::to_matrix(q.sample(5000, final_rng).z);
    const double mean = z.mean();
    const double sd = std::sqrt((z.array() - mean).square().sum() / 4999.0);
    MESSAGE("mean " << mean << " vs " << model.posterior_mean() << ", std " << sd << " vs " << model.posterior_std());
    CHECK(std::abs(mean - model.posterior_mean()) <= 0.1 * std::abs(model.posterior_mean()));
    CHECK(std::abs(sd - model.posterior_std()) <= 0.1 * model.posterior_std());
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    const models::GaussianMeanModel model(dre::Vector::Constant(4, 2.0), 1.0, 1.0);
    post::MeanFieldGaussian q(std::vector<double>{0.1}, std::vector<double>{-0.2});
    KiviConfig cfg;
    cfg.n_p = cfg.n_q = cfg.M = 30;
    LoopConfig loop;
    loop.iterations = 25;
    loop.optimizer.learning_rate = 0.0;
    const Trace t = optimize(
        loop,
        [&](std::size_t it) {
            Rng rng(it);
            return elbo_step(model, q, &model.data(), cfg, rng);
        },
        q.parameters());
    CHECK(t.rows.size() == 25);
    CHECK(q.mean().item() == 0.1);
    CHECK(q.log_std().item() == -0.2);
}

TEST_CASE("non-finite loss aborts with the trace so far") {
    Tensor p = Tensor::parameter({1}, {1.0});
    LoopConfig loop;
    loop.iterations = 10;
    try {
        optimize(
            loop,
            [&](std::size_t it) {
                const double bad = it == 4 ? std::nan("") : 1.0;
                Tensor obj = p * bad;
                return StepResult{ElboEstimate::from_terms(obj.item(), 0.0), obj};
            },
            {p});
        FAIL("expected an abort");
    } catch (const NonFiniteLoss& e) {
        CHECK(e.iteration == 4);
        CHECK(e.trace.rows.size() == 4);
    }
}

TEST_CASE("seeded training is bitwise reproducible and the trace round-trips") {
    const models::GaussianMeanModel model(dre::Vector::LinSpaced(5, 0.0, 2.0), 1.0, 1.0);
    auto run = [&] {
        Rng init(4);
        post::NoiseNetConfig nc;
        nc.layers = {{8, post::Activation::relu}, {1, post::Activation::identity}};
        post::NoiseNetPosterior q(nc, init);
        KiviConfig cfg;
        cfg.n_p = cfg.n_q = cfg.M = 40;
        LoopConfig loop;
        loop.iterations = 30;
        const Rng base(5);
        return optimize(
            loop,
            [&](std::size_t it) {
                Rng rng = base.split(it);
                return elbo_step(model, q, &model.data(), cfg, rng);
            },
            q.parameters());
    };
    const Trace a = run(), b = run();
    REQUIRE(a.rows.size() == 30);
    const auto dir = std::filesystem::temp_directory_path();
    a.write_csv((dir / "kivi_trace_a.csv").string());
    b.write_csv((dir / "kivi_trace_b.csv").string());
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream f(p);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    CHECK(slurp(dir / "kivi_trace_a.csv") == slurp(dir / "kivi_trace_b.csv"));
    const Trace back = Trace::read_csv((dir / "kivi_trace_a.csv").string());
    REQUIRE(back.rows.size() == 30);
    for (std::size_t i = 0; i < 30; ++i) {
        CHECK(back.rows[i].elbo == a.rows[i].elbo);
        CHECK(back.rows[i].kl == a.rows[i].kl);
    }
    std::filesystem::remove(dir / "kivi_trace_a.csv");
    std::filesystem::remove(dir / "kivi_trace_b.csv");
}

TEST_CASE("adam takes a bias-corrected first step of size lr") {
    Tensor p = Tensor::parameter({2}, {0.0, 0.0});
    Adam adam({p}, OptimizerConfig{});
    const Tensor obj = sum(p * Tensor::vector({3.0, -0.5}));
    adam.ascend(backward(obj), 0.01);
    CHECK(p[0] == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(p[1] == doctest::Approx(-0.01).epsilon(1e-6));
}

TEST_CASE("adaptive contrast: standardized Gaussian samples give KL near zero") {
    Rng init(51);
    post::GaussianEncoder enc(3, {4}, 2, init);
    const Tensor x = Tensor::matrix(1, 3, {0.2, -0.1, 0.4});
    double total = 0.0;
    for (std::uint64_t r = 0; r < 20; ++r) {
        Rng rng = Rng(52).split(r);
        const Tensor z = enc.sample(x, 200, rng).z;
        const Matrix v = dre::to_matrix(z);
        const Eigen::RowVectorXd mu = v.colwise().mean();
        const Eigen::RowVectorXd sd = ((v.rowwise() - mu).array().square().colwise().sum() / 199.0).sqrt();
        const Matrix zh = (v.rowwise() - mu).array().rowwise() / sd.array();
        total += estimate_kl(Tensor::matrix(200, 2, std::vector<double>(zh.data(), zh.data() + zh.size())),
                             normal_matrix(200, 2, rng), estimator_kernel())
                     .value.item();
    }
    MESSAGE("mean standardized KL " << total / 20);
    CHECK(std::abs(total / 20) <= 0.15);
}

TEST_CASE("adaptive contrast agrees with the plain ELBO for a Gaussian encoder" * doctest::may_fail()) {
    Rng init(61);
    const models::AmortizedDecoderModel model(2, {6}, 4, models::OutputDistribution::bernoulli, init);
    post::GaussianEncoder enc(4, {5}, 2, init);
    Matrix x(1, 4);
    x << 1, 0, 1, 1;
    KiviConfig cfg;
    cfg.n_p = cfg.n_q = 200;
    cfg.kernel = estimator_kernel();
    std::vector<double> diff;
    for (std::uint64_t r = 0; r < 50; ++r) {
        Rng a = Rng(62).split(r), b = Rng(63).split(r);
        const double ac = adaptive_contrast_step(model, enc, x, 1.0, cfg, a).estimate.elbo;
        const double plain = amortized_elbo_step(model, enc, x, 1.0, 200, b).estimate.elbo;
        diff.push_back(ac - plain);
    }
    const double m = std::accumulate(diff.begin(), diff.end(), 0.0) / 50.0;
    double ss = 0.0;
    for (double d : diff) ss += (d - m) * (d - m);
    const double se = std::sqrt(ss / 49.0 / 50.0);
    MESSAGE("AC - plain " << m << " (se " << se << ")");
    CHECK(std::abs(m) <= 3.0 * se);
}

TEST_CASE("adaptive contrast rejects a single draw per datapoint") {
    Rng init(71);
    const models::AmortizedDecoderModel model(2, {}, 3, models::OutputDistribution::gaussian, init);
    post::ImplicitEncoder enc(3, 2, {4}, 2, init);
    KiviConfig cfg;
    cfg.n_q = 1;
    Rng rng(72);
    CHECK_THROWS_AS(adaptive_contrast_step(model, enc, Matrix::Zero(2, 3), 1.0, cfg, rng), DegenerateBatch);
}

TEST_CASE("adaptive contrast gradients reach encoder and decoder") {
    Rng init(81);
    const models::AmortizedDecoderModel model(2, {4}, 3, models::OutputDistribution::gaussian, init);
    post::ImplicitEncoder enc(3, 2, {5}, 2, init);
    Matrix x(2, 3);
    x << 0.1, 0.5, -0.3, 1.0, -1.0, 0.2;
    KiviConfig cfg;
    cfg.n_p = cfg.n_q = 30;
    Rng rng(82);
    const StepResult r = adaptive_contrast_step(model, enc, x, 2.0, cfg, rng);
    CHECK(r.estimate.elbo == r.estimate.reconstruction - r.estimate.kl);
    const Gradients g = backward(r.objective);
    for (const auto& p : enc.parameters()) CHECK(g.contains(p));
    for (const auto& p : model.parameters()) CHECK(g.contains(p));
}
