#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "fd_check.hpp"
#include "kivi/models.hpp"
#include "kivi/special.hpp"

using namespace kivi;
using namespace kivi::models;
using kivi::testing::check_gradients;

namespace {

Tensor points(std::vector<double> v, std::size_t d) {
    const std::size_t n = v.size() / d;
    return Tensor::matrix(n, d, std::move(v));
}

double gamma_log_density(double x, double a, double b) {
    return a * std::log(b) - std::lgamma(a) + (a - 1.0) * std::log(x) - b * x;
}

// KL by integrating over u = log(lambda).
double gamma_kl_quadrature(double a, double b) {
    const double lo = -40.0, hi = 10.0;
    const std::size_t n = 400001;
    const double h = (hi - lo) / static_cast<double>(n - 1);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double u = lo + h * static_cast<double>(i);
        const double x = std::exp(u);
        const double lq = gamma_log_density(x, a, b);
        const double f = std::exp(lq + u) * (lq - gamma_log_density(x, 6.0, 6.0));
        total += (i == 0 || i + 1 == n) ? 0.5 * f : f;
    }
    return total * h;
}

}  // namespace

TEST_CASE("symmetric mixture density is symmetric and normalised") {
    const auto gmm = GaussianMixtureTarget::symmetric();
    for (double z : {0.3, 1.0, 2.5, 3.0, 7.0}) CHECK(gmm.density(z) == doctest::Approx(gmm.density(-z)).epsilon(1e-14));
    double mass = 0.0;
    const double h = 1e-3;
    for (int i = -15000; i <= 15000; ++i) {
        const double w = (i == -15000 || i == 15000) ? 0.5 : 1.0;
        mass += w * gmm.density(i * h);
    }
    CHECK(mass * h == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("mixture log-prior matches the density and is zero-likelihood") {
    const auto gmm = GaussianMixtureTarget::symmetric();
    const Tensor z = points({-3.0, 0.0, 1.7, 40.0}, 1);
    const Tensor lp = gmm.log_prior(z);
    for (std::size_t i = 0; i < 3; ++i) CHECK(lp[i] == doctest::Approx(std::log(gmm.density(z[i]))).epsilon(1e-13));
    // far tail stays finite through the log-sum-exp
    CHECK(lp[3] == doctest::Approx(-0.5 * 37.0 * 37.0 - 0.5 * kLog2Pi + std::log(0.5)).epsilon(1e-12));
    const Tensor ll = gmm.log_likelihood(z, nullptr);
    for (std::size_t i = 0; i < 4; ++i) CHECK(ll[i] == 0.0);
}

TEST_CASE("mixture samples split evenly between modes") {
    const auto gmm = GaussianMixtureTarget::symmetric();
    Rng rng(3);
    const Matrix s = gmm.sample_prior(20000, rng);
    const double right = (s.array() > 0.0).cast<double>().mean();
    CHECK(right == doctest::Approx(0.5).epsilon(0.03));
    CHECK(s.array().abs().mean() == doctest::Approx(3.0).epsilon(0.02));
}

TEST_CASE("mixture rejects bad weights") {
    CHECK_THROWS_AS(GaussianMixtureTarget({0.0}, {1.0}, {0.5}), std::invalid_argument);
    CHECK_THROWS_AS(GaussianMixtureTarget({0.0, 1.0}, {1.0, 0.0}, {0.5, 0.5}), std::invalid_argument);
    CHECK_THROWS_AS(GaussianMixtureTarget({0.0}, {1.0, 1.0}, {1.0}), std::invalid_argument);
}

TEST_CASE("logistic likelihood at zero weight is N log 1/2") {
    Rng rng(5);
    const auto blr = BlrModel::synthetic(100, 2, rng);
    const Tensor ll = blr.log_likelihood(Tensor::zeros({3, 2}), &blr.data());
    for (std::size_t i = 0; i < 3; ++i) CHECK(ll[i] == doctest::Approx(100.0 * std::log(0.5)).epsilon(1e-13));
}

TEST_CASE("logistic likelihood matches a direct sum") {
    Rng rng(6);
    const auto blr = BlrModel::synthetic(40, 2, rng);
    const Tensor z = points({0.4, -1.2, 2.0, 0.1}, 2);
    const Tensor ll = blr.log_likelihood(z, &blr.data());
    for (std::size_t r = 0; r < 2; ++r) {
        double expect = 0.0;
        for (Eigen::Index i = 0; i < 40; ++i) {
            const double a = blr.data().x(i, 0) * z.at(r, 0) + blr.data().x(i, 1) * z.at(r, 1);
            const double p = 1.0 / (1.0 + std::exp(-a));
            expect += blr.data().y(i) > 0.5 ? std::log(p) : std::log1p(-p);
        }
        CHECK(ll[r] == doctest::Approx(expect).epsilon(1e-10));
    }
}

TEST_CASE("synthetic logistic data is reproducible and in range") {
    Rng a(9), b(9);
    const auto m1 = BlrModel::synthetic(50, 2, a);
    const auto m2 = BlrModel::synthetic(50, 2, b);
    CHECK(m1.data().x == m2.data().x);
    CHECK(m1.data().y == m2.data().y);
    CHECK(m1.data().x.maxCoeff() <= 5.0);
    CHECK(m1.data().x.minCoeff() >= -5.0);
    CHECK(m1.true_weight().size() == 2);
}

TEST_CASE("log-joint gradients match finite differences") {
    Rng rng(7);
    const auto blr = BlrModel::synthetic(30, 2, rng);
    Tensor z = Tensor::parameter({4, 2}, {0.1, -0.3, 1.0, 0.5, -2.0, 0.2, 0.0, 0.7});
    CHECK(check_gradients([&] { return sum(blr.log_joint(z, &blr.data())); }, {z}).max_rel_error < 1e-6);

    const auto gmm = GaussianMixtureTarget::symmetric();
    Tensor y = Tensor::parameter({5, 1}, {-4.0, -1.0, 0.0, 0.5, 3.3});
    CHECK(check_gradients([&] { return sum(gmm.log_prior(y)); }, {y}).max_rel_error < 1e-7);
}

TEST_CASE("log-joint callback returns value and gradient") {
    const GaussianMeanModel m(Vector::Constant(4, 1.0), 1.0, 1.0);
    auto fn = m.log_joint_fn(&m.data());
    std::vector<double> z{0.5}, g(1);
    const double v = fn(z, g);
    // 4 obs at 1, prior N(0,1): d/dz = 4(1 - z) - z
    CHECK(g[0] == doctest::Approx(4.0 * 0.5 - 0.5).epsilon(1e-13));
    CHECK(v == doctest::Approx(-2.5 * kLog2Pi - 0.5 * (4 * 0.25 + 0.25)).epsilon(1e-13));
}

TEST_CASE("conjugate Gaussian posterior") {
    Vector obs(3);
    obs << 1.0, 2.0, 3.0;
    const GaussianMeanModel m(obs, 2.0, 1.0);
    // precision 1 + 3/4, mean (6/4)/(7/4)
    CHECK(m.posterior_mean() == doctest::Approx(6.0 / 7.0).epsilon(1e-14));
    CHECK(m.posterior_std() == doctest::Approx(std::sqrt(4.0 / 7.0)).epsilon(1e-14));
}

TEST_CASE("gamma KL is zero at the prior and matches quadrature") {
    CHECK(std::abs(gamma_kl(6.0, 6.0)) < 1e-13);
    for (double a : {1.0, 2.5, 6.0, 11.0, 20.0})
        for (double b : {1.0, 3.0, 6.0, 14.0, 20.0}) {
            INFO("a=" << a << " b=" << b);
            CHECK(std::abs(gamma_kl(a, b) - gamma_kl_quadrature(a, b)) < 1e-4);
        }
    CHECK_THROWS_AS(gamma_kl(0.0, 1.0), DomainError);
}

TEST_CASE("tensor gamma KL agrees and has correct gradients") {
    Tensor a = Tensor::parameter({1}, {3.2});
    Tensor b = Tensor::parameter({1}, {7.5});
    CHECK(gamma_kl(a, b).item() == doctest::Approx(gamma_kl(3.2, 7.5)).epsilon(1e-13));
    CHECK(check_gradients([&] { return sum(gamma_kl(a, b)); }, {a, b}).max_rel_error < 1e-7);
}

TEST_CASE("expected Gaussian log-likelihood under a gamma precision") {
    // Monte Carlo over lambda ~ Gamma(a, rate b)
    const double a = 4.0, b = 2.0, r2 = 0.7;
    Rng rng(11);
    std::gamma_distribution<double> g(a, 1.0 / b);
    const int n = 200000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double lam = g(rng.engine());
        const double v = 0.5 * (std::log(lam) - lam * r2 - kLog2Pi);
        s += v;
        s2 += v * v;
    }
    const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
    const double got = gamma_expected_log_lik(Tensor::scalar(r2), Tensor::scalar(a), Tensor::scalar(b)).item();
    CHECK(std::abs(got - mean) < 4.0 * se);
}

TEST_CASE("digamma reference values") {
    CHECK(digamma(1.0) == doctest::Approx(-0.57721566490153286).epsilon(1e-14));
    CHECK(digamma(6.0) == doctest::Approx(-0.57721566490153286 + 1.0 + 0.5 + 1.0 / 3 + 0.25 + 0.2).epsilon(1e-14));
    for (double x : {0.3, 1.7, 9.2}) CHECK(digamma(x + 1.0) - digamma(x) == doctest::Approx(1.0 / x).epsilon(1e-12));
}

TEST_CASE("network forward with identity-like weights") {
    // 1 -> 2 -> 1: hidden = relu(x * [1, -1]), output = h0 + h1 = |x|
    const BnnRegressionModel m({1, 2, 1}, DataBatch{});
    CHECK(m.latent_dim() == 2 * 2 + 3 * 1);
    CHECK(m.block_sizes() == std::vector<std::size_t>{4, 3});
    const Tensor w = points({1.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.5}, 7);
    Matrix x(3, 1);
    x << -2.0, 0.0, 3.0;
    const Tensor y = m.forward(w, x);
    REQUIRE(y.shape() == Shape{1, 3});
    CHECK(y[0] == doctest::Approx(2.5));
    CHECK(y[1] == doctest::Approx(0.5));
    CHECK(y[2] == doctest::Approx(3.5));
}

TEST_CASE("network likelihood and gradients") {
    Rng rng(13);
    const DataBatch data = make_sine_data(12, 0.1, rng);
    BnnRegressionModel m({1, 5, 3, 1}, data);
    CHECK(m.a() == doctest::Approx(6.0));
    CHECK(m.b() == doctest::Approx(6.0));
    CHECK(std::abs(m.extra_kl().item()) < 1e-13);
    Tensor w = Tensor::parameter({3, m.latent_dim()}, std::vector<double>(3 * m.latent_dim()));
    for (double& v : w.mutable_values()) v = 0.5 * rng.normal();
    Tensor la = m.log_a(), lb = m.log_b();
    la.mutable_values()[0] = 0.3;
    const auto check = check_gradients([&] { return sum(m.log_joint(w, &m.train())) + m.extra_kl(); }, {w, la, lb});
    CHECK(check.max_rel_error < 1e-5);

    // direct evaluation of the expected log-likelihood for one sample
    const Tensor out = m.forward(w, data.x);
    const Tensor ll = m.log_likelihood(w, &data);
    double expect = 0.0;
    const double a = m.a(), b = m.b();
    for (std::size_t j = 0; j < 12; ++j) {
        const double r = out.at(1, j) - data.y(static_cast<Eigen::Index>(j));
        expect += 0.5 * (digamma(a) - std::log(b) - a / b * r * r - kLog2Pi);
    }
    CHECK(ll[1] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("minibatch scale restores the full-data sum in expectation") {
    Rng rng(17);
    const DataBatch data = make_sine_data(40, 0.1, rng);
    std::vector<std::size_t> order(40);
    std::iota(order.begin(), order.end(), 0);
    const BnnRegressionModel m({1, 4, 1}, data);
    const Tensor w = Tensor::constant({1, m.latent_dim()}, std::vector<double>(m.latent_dim(), 0.3));
    const double full = m.log_likelihood(w, &data).item();
    double total = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
        const DataBatch mb = minibatch(data, order, 10 * k, 10 * (k + 1));
        CHECK(mb.scale == doctest::Approx(4.0));
        total += m.log_likelihood(w, &mb).item();
    }
    CHECK(total / 4.0 == doctest::Approx(full).epsilon(1e-12));
    CHECK_THROWS_AS(minibatch(data, order, 5, 5), std::invalid_argument);
}

TEST_CASE("log-mean-exp") {
    CHECK(log_mean_exp({0.0, 0.0}) == doctest::Approx(0.0));
    CHECK(log_mean_exp({1000.0, 1000.0 + std::log(3.0)}) == doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-14));
    CHECK(log_mean_exp({-1.0, 2.0, 0.5}) ==
          doctest::Approx(std::log((std::exp(-1.0) + std::exp(2.0) + std::exp(0.5)) / 3.0)).epsilon(1e-14));
}

TEST_CASE("prediction with a point-mass posterior") {
    Rng rng(19);
    const DataBatch raw = make_sine_data(30, 0.1, rng);
    const Standardizer st = Standardizer::fit(raw);
    const DataBatch data = st.apply(raw);
    const BnnRegressionModel m({1, 3, 1}, data);
    // zero std mean-field: every sample is the mean
    post::MeanFieldGaussian q(std::vector<double>(m.latent_dim(), 0.2), std::vector<double>(m.latent_dim(), -40.0));
    const Prediction p = predict(m, q, data, st, 64, rng);
    const Tensor out = m.forward(reshape(q.mean().detach(), {1, m.latent_dim()}), data.x);
    double sq = 0.0;
    for (std::size_t j = 0; j < 30; ++j) {
        const double mu = out[j] * st.y_std + st.y_mean;
        CHECK(p.mean(static_cast<Eigen::Index>(j)) == doctest::Approx(mu).epsilon(1e-10));
        CHECK(p.variance(static_cast<Eigen::Index>(j)) == doctest::Approx(st.y_std * st.y_std).epsilon(1e-6));
        sq += std::pow(raw.y(static_cast<Eigen::Index>(j)) - mu, 2);
    }
    CHECK(p.rmse == doctest::Approx(std::sqrt(sq / 30)).epsilon(1e-10));
    CHECK(std::isfinite(p.test_ll));
}

TEST_CASE("standardizer, csv and split") {
    const auto path = std::filesystem::temp_directory_path() / "kivi_models_test.csv";
    {
        std::ofstream f(path);
        f << "a,b,y\n1,2,3\n2,4,5\n3,6,7\n\n4,8,10\n";
    }
    const DataBatch d = load_csv(path.string(), true);
    REQUIRE(d.size() == 4);
    CHECK(d.x.cols() == 2);
    CHECK(d.y(3) == 10.0);
    const Standardizer st = Standardizer::fit(d);
    const DataBatch s = st.apply(d);
    CHECK(std::abs(s.x.col(0).mean()) < 1e-14);
    CHECK(std::sqrt(s.x.col(1).array().square().mean()) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(std::abs(s.y.mean()) < 1e-14);

    Rng rng(23);
    const Split sp = train_test_split(d, 0.5, rng);
    CHECK(sp.train.size() == 2);
    CHECK(sp.test.size() == 2);
    CHECK(sp.train.scale == 1.0);
    CHECK(sp.train.y.sum() + sp.test.y.sum() == doctest::Approx(d.y.sum()));

    {
        std::ofstream f(path);
        f << "1,2\n3,x\n";
    }
    CHECK_THROWS_AS(load_csv(path.string(), false), std::runtime_error);
    {
        std::ofstream f(path);
        f << "1,2\n3,4,5\n";
    }
    CHECK_THROWS_AS(load_csv(path.string(), false), std::runtime_error);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_csv(path.string(), false), std::runtime_error);
}

TEST_CASE("decoder likelihoods") {
    Rng rng(29);
    AmortizedDecoderModel bern(2, {4}, 3, OutputDistribution::bernoulli, rng);
    const Tensor z = points({0.1, 0.2, -0.5, 1.0}, 2);
    Matrix x(2, 3);
    x << 1, 0, 1, 0, 0, 1;
    const Tensor logits = bern.decode(z);
    const Tensor ll = bern.log_likelihood(z, x);
    for (std::size_t r = 0; r < 2; ++r) {
        double expect = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            const double p = 1.0 / (1.0 + std::exp(-logits.at(r, c)));
            expect += x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) > 0.5 ? std::log(p) : std::log1p(-p);
        }
        CHECK(ll[r] == doctest::Approx(expect).epsilon(1e-12));
    }
    auto params = bern.parameters();
    CHECK(params.size() == 4);
    CHECK(check_gradients([&] { return sum(bern.log_likelihood(z, x)); }, params).max_rel_error < 1e-6);

    AmortizedDecoderModel gauss(2, {}, 3, OutputDistribution::gaussian, rng);
    const Tensor mu = gauss.decode(z);
    const Tensor lg = gauss.log_likelihood(z, x);
    double expect = -1.5 * kLog2Pi;
    for (std::size_t c = 0; c < 3; ++c) expect -= 0.5 * std::pow(x(0, static_cast<Eigen::Index>(c)) - mu.at(0, c), 2);
    CHECK(lg[0] == doctest::Approx(expect).epsilon(1e-12));
    CHECK_THROWS_AS(gauss.log_likelihood(z, Matrix(3, 3)), ShapeError);
}
