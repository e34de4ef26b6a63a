#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fd_check.hpp"
#include "kivi/kernel_dre.hpp"
#include "kivi/ops.hpp"
#include "kivi/oracles.hpp"

using namespace kivi;
using namespace kivi::dre;

namespace {

Matrix gaussian_samples(std::size_t n, std::size_t d, double mean, double std, Rng& rng) {
    Matrix m(n, d);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = mean + std * rng.normal();
    return m;
}

Matrix column(std::initializer_list<double> values) {
    Matrix m(values.size(), 1);
    Eigen::Index i = 0;
    for (double v : values) m(i++, 0) = v;
    return m;
}

// Exhaustive pairwise median using direct coordinate differences and a full sort.
double brute_force_median(const Matrix& x) {
    std::vector<double> d;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = i + 1; j < x.rows(); ++j) d.push_back((x.row(i) - x.row(j)).norm());
    std::sort(d.begin(), d.end());
    const std::size_t n = d.size();
    return n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
}

}  // namespace

TEST_CASE("median bandwidth") {
    CHECK(median_bandwidth(column({0.0, 2.0})) == 2.0);
    CHECK(median_bandwidth(column({0.0, 1.0, 3.0})) == doctest::Approx(2.0).epsilon(1e-15));

    Rng rng(17);
    const Matrix x = gaussian_samples(100, 5, 0.0, 1.0, rng);
    CHECK(median_bandwidth(x) == doctest::Approx(brute_force_median(x)).epsilon(1e-13));

    SUBCASE("union of two sets") {
        const Matrix a = gaussian_samples(30, 2, 0.0, 1.0, rng);
        const Matrix b = gaussian_samples(40, 2, 1.0, 2.0, rng);
        Matrix both(70, 2);
        both << a, b;
        CHECK(median_bandwidth(a, b) == median_bandwidth(both));
    }
    SUBCASE("zero median falls back to the smallest positive distance") {
        CHECK(median_bandwidth(column({0.0, 0.0, 0.0, 0.0, 1.5})) == doctest::Approx(1.5).epsilon(1e-15));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(median_bandwidth(column({1.0, 1.0, 1.0})), DegenerateSamples);
        CHECK_THROWS_AS(median_bandwidth(column({1.0})), std::invalid_argument);
    }
}

TEST_CASE("rbf gram") {
    Rng rng(4);
    const Matrix a = gaussian_samples(12, 3, 0.0, 2.0, rng);
    const Matrix k = rbf_gram(a, 0.7);
    CHECK((k - k.transpose()).cwiseAbs().maxCoeff() == 0.0);
    for (Eigen::Index i = 0; i < 12; ++i) CHECK(k(i, i) == 1.0);
    CHECK(k.minCoeff() > 0.0);
    CHECK(k.maxCoeff() <= 1.0);

    // cross form agrees with the symmetric form
    CHECK((rbf_gram(a, a, 0.7) - k).cwiseAbs().maxCoeff() < 1e-13);

    const double sigma = 1.3;
    CHECK(rbf_gram(column({0.0}), column({sigma * std::sqrt(2.0)}), sigma)(0, 0) ==
          doctest::Approx(std::exp(-1.0)).epsilon(1e-14));
    CHECK(rbf_gram(column({0.4}), column({0.4}), sigma)(0, 0) == 1.0);
    CHECK_THROWS_AS(rbf_gram(a, gaussian_samples(3, 2, 0, 1, rng), 1.0), ShapeError);
}

TEST_CASE("fit_ratio beta coefficients") {
    Rng rng(8);
    KernelConfig cfg;
    cfg.lambda = 0.1;
    auto model = fit_ratio(gaussian_samples(10, 2, 0, 1, rng), gaussian_samples(15, 2, 0, 1, rng), cfg);
    for (Eigen::Index j = 0; j < model.beta.size(); ++j) CHECK(model.beta(j) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(model.alpha.size() == 15);

    cfg.lambda = 0.001;
    model = fit_ratio(gaussian_samples(100, 3, 0, 1, rng), gaussian_samples(100, 3, 0, 1, rng), cfg);
    CHECK(model.beta.minCoeff() == doctest::Approx(10.0).epsilon(1e-14));
    CHECK(model.beta.maxCoeff() == doctest::Approx(10.0).epsilon(1e-14));
}

TEST_CASE("fit_ratio agrees with the brute-force minimizer") {
    Rng rng(21);
    KernelConfig cfg;
    cfg.lambda = 0.05;
    const Matrix num = gaussian_samples(20, 1, 0.0, 1.0, rng);
    const Matrix den = gaussian_samples(20, 1, 0.5, 1.2, rng);
    const auto model = fit_ratio(num, den, cfg);
    const auto oracle = oracles::brute_force_ulsif(num, den, model.bandwidth, cfg.lambda);
    CHECK((model.alpha - oracle.alpha).cwiseAbs().maxCoeff() <= 1e-5);
    CHECK((model.beta - oracle.beta).cwiseAbs().maxCoeff() <= 1e-5);
}

TEST_CASE("fit_ratio agrees with the brute-force minimizer across seeds and dimensions") {
    double worst = 0.0;
    for (int seed = 0; seed < 50; ++seed) {
        for (std::size_t d : {1u, 2u, 5u}) {
            Rng rng(1000 + seed);
            KernelConfig cfg;
            cfg.lambda = 0.01;
            const Matrix num = gaussian_samples(20, d, 0.0, 1.0, rng);
            const Matrix den = gaussian_samples(20, d, 0.3, 1.1, rng);
            const auto model = fit_ratio(num, den, cfg);
            const auto oracle = oracles::brute_force_ulsif(num, den, model.bandwidth, cfg.lambda);
            worst = std::max({worst, (model.alpha - oracle.alpha).cwiseAbs().maxCoeff(),
                              (model.beta - oracle.beta).cwiseAbs().maxCoeff()});
        }
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("closed form is stationary and optimal for the empirical objective") {
    Rng rng(33);
    for (std::size_t d : {1u, 2u, 5u}) {
        const Matrix num = gaussian_samples(20, d, 0.0, 1.0, rng);
        const Matrix den = gaussian_samples(25, d, 0.3, 0.9, rng);
        KernelConfig cfg;
        cfg.lambda = 0.01;
        const auto model = fit_ratio(num, den, cfg);
        const auto grad = objective_gradient(model.alpha, model.beta, num, den, model.bandwidth, cfg.lambda);
        const double residual =
            std::max(grad.d_alpha.cwiseAbs().maxCoeff(), grad.d_beta.cwiseAbs().maxCoeff()) / grad.term_scale;
        CAPTURE(d);
        CHECK(residual <= 1e-8);

        const double best = empirical_objective(model.alpha, model.beta, num, den, model.bandwidth, cfg.lambda);
        for (int trial = 0; trial < 100; ++trial) {
            Vector da(model.alpha.size()), db(model.beta.size());
            for (auto& v : da) v = rng.normal();
            for (auto& v : db) v = rng.normal();
            const double norm = std::sqrt(da.squaredNorm() + db.squaredNorm());
            da *= 1e-3 / norm;
            db *= 1e-3 / norm;
            CHECK(empirical_objective(model.alpha + da, model.beta + db, num, den, model.bandwidth, cfg.lambda) >=
                  best);
        }
    }
}

TEST_CASE("empirical objective at zero coefficients") {
    Rng rng(2);
    const Matrix num = gaussian_samples(6, 2, 0, 1, rng);
    const Matrix den = gaussian_samples(7, 2, 0, 1, rng);
    CHECK(empirical_objective(Vector::Zero(7), Vector::Zero(6), num, den, 1.0, 0.1) == 0.0);
    CHECK_THROWS_AS(empirical_objective(Vector::Zero(6), Vector::Zero(6), num, den, 1.0, 0.1), ShapeError);
}

TEST_CASE("identical sample sets give a ratio near one") {
    // True ratio is identically 1. Tolerance from a seed-averaged run.
    double total_dev = 0.0;
    const int seeds = 10;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(100 + s);
        const Matrix x = gaussian_samples(60, 1, 0.0, 1.0, rng);
        KernelConfig cfg;
        cfg.lambda = 0.01;
        const auto model = fit_ratio(x, x, cfg);
        const Vector r = evaluate_ratio(model, x);
        total_dev += (r.array() - 1.0).abs().mean();
    }
    CHECK(total_dev / seeds <= 0.15);
}

TEST_CASE("points far from all centers hit the clip floor") {
    Rng rng(6);
    KernelConfig cfg;
    cfg.clip = 1e-16;
    const auto model = fit_ratio(gaussian_samples(30, 2, 0, 1, rng), gaussian_samples(30, 2, 0, 1, rng), cfg);
    Matrix far(1, 2);
    far << 80.0, -80.0;
    CHECK(evaluate_ratio(model, far)(0) == 1e-16);
}

TEST_CASE("ratio of two shifted Gaussians" * doctest::may_fail()) {
    Rng rng(12);
    const Matrix num = gaussian_samples(500, 1, 0.0, 1.0, rng);
    const Matrix den = gaussian_samples(500, 1, 0.5, 1.0, rng);
    KernelConfig cfg;
    cfg.lambda = 0.01;
    const auto model = fit_ratio(num, den, cfg);
    Matrix grid(41, 1);
    for (Eigen::Index i = 0; i < 41; ++i) grid(i, 0) = -2.0 + 0.1 * static_cast<double>(i);
    const Vector r = evaluate_ratio(model, grid);
    double err = 0.0;
    for (Eigen::Index i = 0; i < 41; ++i) {
        const double z = grid(i, 0);
        err += std::abs(r(i) - std::exp(-0.5 * z * z + 0.5 * (z - 0.5) * (z - 0.5)));
    }
    MESSAGE("mean abs error vs analytic ratio: " << err / 41.0);
    CHECK(err / 41.0 <= 0.1);
}

TEST_CASE("clipped evaluations never fall below the floor") {
    Rng rng(44);
    for (int t = 0; t < 10; ++t) {
        KernelConfig cfg;
        cfg.lambda = 1e-4;
        const auto model =
            fit_ratio(gaussian_samples(40, 2, 0, 1, rng), gaussian_samples(40, 2, 1.5, 0.5, rng), cfg);
        const Vector r = evaluate_ratio(model, gaussian_samples(200, 2, 0.5, 2.0, rng));
        CHECK(r.minCoeff() >= cfg.clip);
    }
}

TEST_CASE("tensor evaluation: same values, gradient w.r.t. points only") {
    Rng rng(5);
    const Matrix num = gaussian_samples(25, 2, 0, 1, rng);
    const Matrix den = gaussian_samples(25, 2, 0.4, 0.8, rng);
    const auto model = fit_ratio(num, den, KernelConfig{});
    const Matrix pts = gaussian_samples(9, 2, 0.2, 1.0, rng);
    Tensor z = Tensor::parameter({9, 2}, std::vector<double>(pts.data(), pts.data() + pts.size()));
    const Tensor r = evaluate_ratio(model, z);
    const Vector expected = evaluate_ratio(model, pts);
    for (std::size_t i = 0; i < 9; ++i) CHECK(r[i] == doctest::Approx(expected(i)).epsilon(1e-14));

    const auto check = kivi::testing::check_gradients([&] { return mean(log(evaluate_ratio(model, z))); }, {z});
    CHECK(check.max_rel_error <= 1e-5);
}

TEST_CASE("median heuristic is scale equivariant and leaves the Gram unchanged") {
    Rng rng(71);
    const Matrix x = gaussian_samples(40, 3, 0.0, 1.0, rng);
    for (double s : {0.01, 3.0, 250.0}) {
        const Matrix scaled = x * s;
        const double sigma = median_bandwidth(x);
        const double sigma_s = median_bandwidth(scaled);
        CHECK(sigma_s == doctest::Approx(s * sigma).epsilon(1e-12));
        CHECK((rbf_gram(scaled, sigma_s) - rbf_gram(x, sigma)).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("fit_ratio errors") {
    Rng rng(1);
    const Matrix a = gaussian_samples(5, 2, 0, 1, rng);
    KernelConfig cfg;
    CHECK_THROWS_AS(fit_ratio(a, Matrix(0, 2), cfg), std::invalid_argument);
    CHECK_THROWS_AS(fit_ratio(a, gaussian_samples(5, 3, 0, 1, rng), cfg), ShapeError);
    cfg.lambda = 0.0;
    CHECK_THROWS_AS(fit_ratio(a, a, cfg), std::invalid_argument);
    cfg.lambda = 0.1;
    cfg.bandwidth = -1.0;
    CHECK_THROWS_AS(fit_ratio(a, a, cfg), std::invalid_argument);
    Matrix pts(1, 3);
    pts.setZero();
    cfg.bandwidth.reset();
    CHECK_THROWS_AS(evaluate_ratio(fit_ratio(a, a, cfg), pts), ShapeError);
}

TEST_CASE("factorization failure is reported") {
    // duplicated denominator samples and a vanishing regularizer make the
    // system numerically singular
    Matrix den(6, 1);
    den << 0.0, 0.0, 0.0, 1.0, 1.0, 1.0;
    KernelConfig cfg;
    cfg.lambda = 1e-300;
    cfg.bandwidth = 1e-3;
    bool threw = false;
    try {
        const auto model = fit_ratio(column({0.5}), den, cfg);
        CHECK(model.alpha.allFinite());
    } catch (const FactorizationError&) {
        threw = true;
    }
    CHECK(threw);
}
