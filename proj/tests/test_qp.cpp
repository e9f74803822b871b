#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "pwrmpc/qp.hpp"

using namespace pwrmpc;

namespace {

Mat random_pd(int n, Rng& rng) {
    Mat L = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) L(i, j) = rng.gaussian();
        L(i, i) = 0.5 + std::abs(L(i, i));
    }
    return L * L.transpose();
}

}  // namespace

TEST_CASE("inactive constraints leave the unconstrained minimum", "[qp]") {
    Rng rng(1);
    for (int t = 0; t < 10; ++t) {
        const int n = 3;
        const Mat H = random_pd(n, rng);
        Vec g(n);
        for (int i = 0; i < n; ++i) g[i] = rng.gaussian();
        // Far-away box can never bind.
        Mat C(2 * n, n);
        Vec d(2 * n);
        C.topRows(n) = Mat::Identity(n, n);
        C.bottomRows(n) = -Mat::Identity(n, n);
        d.setConstant(1e6);
        const QpResult res = solve_qp(H, g, C, d);
        REQUIRE(res.status == QpStatus::optimal);
        const Vec expect = H.ldlt().solve(-g);
        REQUIRE((res.x - expect).cwiseAbs().maxCoeff() < 1e-10);
        REQUIRE(res.multipliers.cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("single binding face reproduces the hand-solved projection", "[qp]") {
    // min 1/2 ||x||^2 subject to x1 <= -1: optimum (-1, 0), multiplier 1.
    const Mat H = Mat::Identity(2, 2);
    const Vec g = Vec::Zero(2);
    Mat C(1, 2);
    C << 1.0, 0.0;
    Vec d(1);
    d << -1.0;
    const QpResult res = solve_qp(H, g, C, d);
    REQUIRE(res.status == QpStatus::optimal);
    REQUIRE(res.x[0] == Catch::Approx(-1.0).margin(1e-12));
    REQUIRE(res.x[1] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(res.multipliers[0] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(res.objective == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("box-constrained solutions match a dense grid search", "[qp]") {
    Rng rng(7);
    for (int t = 0; t < 20; ++t) {
        const Mat H = random_pd(2, rng);
        Vec g(2);
        g << 2.0 * rng.gaussian(), 2.0 * rng.gaussian();
        Mat C(4, 2);
        C << 1, 0, -1, 0, 0, 1, 0, -1;
        const Vec d = Vec::Ones(4);
        const QpResult res = solve_qp(H, g, C, d);
        REQUIRE(res.status == QpStatus::optimal);
        REQUIRE((C * res.x - d).maxCoeff() < 1e-8);

        double best = 1e100;
        const int G = 200;
        for (int i = 0; i <= G; ++i) {
            for (int j = 0; j <= G; ++j) {
                Vec x(2);
                x << -1.0 + 2.0 * i / G, -1.0 + 2.0 * j / G;
                best = std::min(best, 0.5 * x.dot(H * x) + g.dot(x));
            }
        }
        // The solver must not be worse, and the grid cannot beat it by more
        // than its own resolution allows.
        REQUIRE(res.objective <= best + 1e-10);
        REQUIRE(best - res.objective < 1e-2);
    }
}

TEST_CASE("optimal results satisfy the first-order conditions", "[qp]") {
    Rng rng(42);
    for (int t = 0; t < 30; ++t) {
        const int n = 4, p = 6;
        const Mat H = random_pd(n, rng);
        Vec g(n);
        for (int i = 0; i < n; ++i) g[i] = 2.0 * rng.gaussian();
        Mat C(p, n);
        Vec d(p);
        for (int i = 0; i < p; ++i) {
            for (int j = 0; j < n; ++j) C(i, j) = rng.gaussian();
            d[i] = rng.uniform(0.2, 1.5);  // origin strictly feasible
        }
        const QpResult res = solve_qp(H, g, C, d);
        REQUIRE(res.status == QpStatus::optimal);

        const Vec stat = H * res.x + g + C.transpose() * res.multipliers;
        const double scale = 1.0 + g.cwiseAbs().maxCoeff();
        REQUIRE(stat.cwiseAbs().maxCoeff() < 1e-7 * scale);
        REQUIRE((C * res.x - d).maxCoeff() < 1e-7);
        REQUIRE(res.multipliers.minCoeff() > -1e-10);
        for (int i = 0; i < p; ++i) {
            const double s = C.row(i).dot(res.x) - d[i];
            REQUIRE(std::abs(res.multipliers[i] * s) < 1e-6);
        }
    }
}

TEST_CASE("contradictory half-spaces are reported infeasible", "[qp]") {
    const Mat H = Mat::Identity(1, 1);
    const Vec g = Vec::Zero(1);
    Mat C(2, 1);
    C << 1.0, -1.0;
    Vec d(2);
    d << -1.0, -1.0;  // x <= -1 and x >= 1
    const QpResult res = solve_qp(H, g, C, d);
    REQUIRE(res.status == QpStatus::infeasible);
}

TEST_CASE("identical inputs solve identically", "[qp]") {
    Rng rng(9);
    const Mat H = random_pd(3, rng);
    Vec g(3);
    g << 1.0, -2.0, 0.5;
    Mat C(3, 3);
    C << 1, 1, 0, 0, -1, 1, 1, 0, -1;
    Vec d(3);
    d << 0.5, 0.25, 0.1;
    const QpResult a = solve_qp(H, g, C, d);
    const QpResult b = solve_qp(H, g, C, d);
    REQUIRE(a.status == b.status);
    REQUIRE(a.iterations == b.iterations);
    for (int i = 0; i < 3; ++i) {
        REQUIRE(a.x[i] == b.x[i]);
        REQUIRE(a.multipliers[i] == b.multipliers[i]);
    }
}

TEST_CASE("iteration caps and indefinite matrices are rejected cleanly", "[qp]") {
    Mat H(2, 2);
    H << 1.0, 0.0, 0.0, -1.0;
    REQUIRE_THROWS_AS(solve_qp(H, Vec::Zero(2), Mat::Zero(0, 2), Vec(0)), std::invalid_argument);

    // A feasible problem with a one-iteration budget cannot finish its
    // active-set exchanges.
    Rng rng(3);
    const Mat Hp = random_pd(3, rng);
    Vec g(3);
    g << 5.0, -4.0, 3.0;
    Mat C(6, 3);
    C.topRows(3) = Mat::Identity(3, 3);
    C.bottomRows(3) = -Mat::Identity(3, 3);
    const Vec d = Vec::Constant(6, 1e-3);
    const QpResult res = solve_qp(Hp, g, C, d, 1);
    REQUIRE(res.status == QpStatus::max_iter);
}
