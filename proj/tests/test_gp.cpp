#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pwrmpc/gp.hpp"

using namespace pwrmpc;

namespace {

Mat col(std::initializer_list<double> v) {
    Mat X(static_cast<int>(v.size()), 1);
    int i = 0;
    for (double x : v) X(i++, 0) = x;
    return X;
}

Vec vec(std::initializer_list<double> v) {
    Vec y(static_cast<int>(v.size()));
    int i = 0;
    for (double x : v) y[i++] = x;
    return y;
}

KernelHyperparams unit_hyper(double sn2) {
    KernelHyperparams hp;
    hp.signal_variance = 1.0;
    hp.lengthscales = vec({1.0});
    hp.noise_variance = sn2;
    return hp;
}

}  // namespace

TEST_CASE("two-sample posterior matches hand-inverted 2x2 system", "[gp]") {
    // Oracle: explicit adjugate inverse of K + sn^2 I, no Cholesky involved.
    const double k01 = std::exp(-0.5);
    const double sn2 = 0.01;
    const double a = 1.0 + sn2, b = k01;
    const double det = a * a - b * b;
    const double inv00 = a / det, inv01 = -b / det;

    const double ks = std::exp(-0.5 * 0.25);  // k(0.5, 0) = k(0.5, 1)
    const double y0 = 1.0, y1 = -1.0;
    // mean = ks^T Kn^{-1} y, symmetric query point
    const double w0 = inv00 * y0 + inv01 * y1;
    const double w1 = inv01 * y0 + inv00 * y1;
    const double oracle_mean = ks * (w0 + w1);
    const double q = ks * ks * (inv00 + inv01) * 2.0;
    const double oracle_var = 1.0 - q;

    GpModel m(col({0.0, 1.0}), vec({1.0, -1.0}), unit_hyper(sn2));
    const auto p = m.predict(vec({0.5}));
    REQUIRE(p.mean == Catch::Approx(oracle_mean).margin(1e-12));
    REQUIRE(p.variance == Catch::Approx(oracle_var).epsilon(1e-12));
}

TEST_CASE("noise-free interpolation at a training point", "[gp]") {
    GpModel m(col({0.0, 1.0, 2.0}), vec({0.3, -0.2, 0.9}), unit_hyper(0.0));
    const auto p = m.predict(vec({1.0}));
    REQUIRE(std::abs(p.mean - (-0.2)) < 1e-7);
    REQUIRE(p.variance >= 0.0);
    REQUIRE(p.variance < 1e-8);
}

TEST_CASE("noisy model keeps positive variance below signal variance at data", "[gp]") {
    GpModel m(col({0.0, 1.0, 2.0}), vec({0.3, -0.2, 0.9}), unit_hyper(0.05));
    const auto p = m.predict(vec({1.0}));
    REQUIRE(p.variance > 0.0);
    REQUIRE(p.variance <= 1.0);
}

TEST_CASE("prior reversion far from the data", "[gp]") {
    GpModel m(col({0.0, 1.0}), vec({1.0, -1.0}), unit_hyper(0.01));
    const auto p = m.predict(vec({60.0}));
    REQUIRE(std::abs(p.mean) < 1e-12);
    REQUIRE(p.variance == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("batch prediction equals one-at-a-time", "[gp]") {
    Rng rng(7);
    Mat X(40, 1);
    Vec y(40);
    for (int i = 0; i < 40; ++i) {
        X(i, 0) = rng.uniform(-3.0, 3.0);
        y[i] = std::sin(X(i, 0)) + 0.1 * rng.gaussian();
    }
    GpModel m(X, y, unit_hyper(0.01));
    Mat Q(100, 1);
    for (int i = 0; i < 100; ++i) Q(i, 0) = -4.0 + 8.0 * i / 99.0;
    const auto batch = predict_batch(m, Q);
    for (int i = 0; i < 100; ++i) {
        const auto p = m.predict(Q.row(i));
        REQUIRE(batch[i].mean == p.mean);
        REQUIRE(batch[i].variance == p.variance);
    }
}

TEST_CASE("posterior variance never exceeds prior variance", "[gp]") {
    Rng rng(11);
    Mat X(60, 1);
    Vec y(60);
    for (int i = 0; i < 60; ++i) {
        X(i, 0) = rng.uniform(0.0, 4.0);
        y[i] = 0.4 * std::sin(1.5 * X(i, 0)) + 0.447 * rng.gaussian();
    }
    const GpModel m = fit_gp(X, y);
    for (int i = 0; i < 200; ++i) {
        const auto p = m.predict(vec({rng.uniform(-2.0, 6.0)}));
        REQUIRE(p.variance >= 0.0);
        REQUIRE(p.variance <= m.hyper().signal_variance + m.hyper().noise_variance + 1e-12);
    }
}

TEST_CASE("fitted hyperparameters beat a coarse independent grid", "[gp]") {
    Rng rng(3);
    Mat X(50, 1);
    Vec y(50);
    for (int i = 0; i < 50; ++i) {
        X(i, 0) = rng.uniform(0.0, 4.0);
        y[i] = std::sin(X(i, 0)) + 0.2 * rng.gaussian();
    }
    const GpModel m = fit_gp(X, y);
    const double best = m.log_marginal();
    for (double sf : {0.05, 0.5, 1.0, 5.0})
        for (double l : {0.1, 0.5, 1.0, 2.0})
            for (double sn : {0.005, 0.05, 0.5}) {
                KernelHyperparams hp;
                hp.signal_variance = sf;
                hp.lengthscales = vec({l});
                hp.noise_variance = sn;
                REQUIRE(best >= log_marginal_likelihood(X, y, hp) - 1e-9);
            }
}

TEST_CASE("duplicate inputs with zero noise exercise the jitter ladder", "[gp]") {
    GpModel m(col({1.0, 1.0, 2.0}), vec({0.5, 0.5, -0.1}), unit_hyper(0.0));
    REQUIRE(m.jitter_used() > 0.0);
    const auto p = m.predict(vec({1.0}));
    REQUIRE(std::abs(p.mean - 0.5) < 1e-4);
}

TEST_CASE("empty sample list is rejected", "[gp]") {
    REQUIRE_THROWS_AS(fit_gp(Mat(0, 1), Vec(0)), std::invalid_argument);
}

TEST_CASE("hybrid bank predicts per-mode and validates mode ids", "[gp]") {
    // Mode 1 trained on constant +1, mode 2 on constant -1.
    auto make = [&](double target) {
        Mat X(5, 1);
        Vec y(5);
        for (int i = 0; i < 5; ++i) {
            X(i, 0) = i;
            y[i] = target;
        }
        return GpModel(X, y, unit_hyper(1e-6));
    };
    HybridResidualModel bank({{make(1.0)}, {make(-1.0)}});
    Vec mean, var;
    bank.predict_hybrid(1, vec({2.0}), mean, var);
    REQUIRE(mean[0] == Catch::Approx(1.0).margin(1e-3));
    bank.predict_hybrid(2, vec({2.0}), mean, var);
    REQUIRE(mean[0] == Catch::Approx(-1.0).margin(1e-3));

    // n_d = 1: identical to predicting on the underlying GP
    const auto p = bank.gp(2, 0).predict(vec({2.0}));
    bank.predict_hybrid(2, vec({2.0}), mean, var);
    REQUIRE(mean[0] == p.mean);
    REQUIRE(var[0] == p.variance);

    REQUIRE_THROWS_AS(bank.predict_hybrid(0, vec({2.0}), mean, var), std::invalid_argument);
    REQUIRE_THROWS_AS(bank.predict_hybrid(3, vec({2.0}), mean, var), std::invalid_argument);
}

TEST_CASE("gradient of the posterior mean matches finite differences", "[gp]") {
    Rng rng(5);
    Mat X(30, 2);
    Vec y(30);
    for (int i = 0; i < 30; ++i) {
        X(i, 0) = rng.uniform(-2.0, 2.0);
        X(i, 1) = rng.uniform(-2.0, 2.0);
        y[i] = std::sin(X(i, 0)) * std::cos(X(i, 1));
    }
    KernelHyperparams hp;
    hp.signal_variance = 1.0;
    hp.lengthscales = vec({0.8, 1.3});
    hp.noise_variance = 1e-4;
    GpModel m(X, y, hp);

    const Vec q = vec({0.3, -0.7});
    Vec grad;
    m.predict_with_gradient(q, grad);
    const double h = 1e-6;
    for (int d = 0; d < 2; ++d) {
        Vec qp = q, qm = q;
        qp[d] += h;
        qm[d] -= h;
        const double fd = (m.predict(qp).mean - m.predict(qm).mean) / (2.0 * h);
        REQUIRE(grad[d] == Catch::Approx(fd).margin(1e-6));
    }
}

TEST_CASE("serialization round-trips bit-exactly", "[gp]") {
    Rng rng(9);
    Mat X(25, 1);
    Vec y(25);
    for (int i = 0; i < 25; ++i) {
        X(i, 0) = rng.uniform(0.0, 3.0);
        y[i] = std::cos(X(i, 0)) + 0.05 * rng.gaussian();
    }
    const GpModel m = fit_gp(X, y);
    const auto j = to_json(m);
    const std::string text = j.dump();
    const GpModel r = gp_from_json(nlohmann::json::parse(text));
    for (double q : {-1.0, 0.0, 0.77, 2.5, 4.0}) {
        const auto a = m.predict(vec({q}));
        const auto b = r.predict(vec({q}));
        REQUIRE(a.mean == b.mean);
        REQUIRE(a.variance == b.variance);
    }
}

TEST_CASE("refit from serialized hyperparameters skips search and reproduces predictions", "[gp]") {
    Rng rng(13);
    Mat X(40, 1);
    Vec y(40);
    for (int i = 0; i < 40; ++i) {
        X(i, 0) = rng.uniform(0.0, 4.0);
        y[i] = 0.4 * std::sin(1.5 * X(i, 0)) + 0.1 * rng.gaussian();
    }
    const GpModel fitted = fit_gp(X, y);
    const auto hp = hyperparams_from_json(to_json(fitted.hyper()));
    const GpModel refit = fit_gp(X, y, hp);
    for (double q : {0.0, 1.1, 2.3, 3.9}) {
        REQUIRE(fitted.predict(vec({q})).mean == refit.predict(vec({q})).mean);
        REQUIRE(fitted.predict(vec({q})).variance == refit.predict(vec({q})).variance);
    }
}
