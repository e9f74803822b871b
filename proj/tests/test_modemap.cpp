#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "pwrmpc/gp.hpp"
#include "pwrmpc/modemap.hpp"
#include "pwrmpc/normal.hpp"
#include "pwrmpc/siren.hpp"

using namespace pwrmpc;

namespace {

Vec v1(double a) {
    Vec v(1);
    v << a;
    return v;
}

FeatureScaler unit_scaler(int dim) {
    FeatureScaler s;
    s.lo = Vec::Constant(dim, -1.0);
    s.hi = Vec::Constant(dim, 1.0);
    return s;
}

// Posterior of a single-sample GP, written out from the 1x1 linear system.
void single_sample_posterior(const KernelHyperparams& hp, double x0, double y0, double q,
                             double& mean, double& latent_var) {
    const double k00 = hp.signal_variance;
    const double kq = hp.signal_variance * std::exp(-0.5 * (q - x0) * (q - x0) /
                                                    (hp.lengthscales[0] * hp.lengthscales[0]));
    mean = kq * y0 / (k00 + hp.noise_variance);
    latent_var = hp.signal_variance - kq * kq / (k00 + hp.noise_variance);
}

// Two-mode world on the line: the residual jumps from +0.5 to -0.5 at x = 0.
struct LineWorld {
    FeatureSplit split;
    std::function<Vec(const Vec&, const Vec&)> nominal;
    HybridResidualModel model;

    static double true_residual(double x) { return x < 0.0 ? 0.5 : -0.5; }

    static LineWorld make() {
        FeatureSplit split = FeatureSplit::from_state_indices({0}, {0}, 1, 1);
        auto nominal = [](const Vec& x, const Vec& u) { return Vec(x + u); };
        KernelHyperparams hp;
        hp.signal_variance = 0.25;
        hp.lengthscales = v1(0.5);
        hp.noise_variance = 4e-4;
        Rng rng(11);
        auto bank_for = [&](double level) {
            const int n = 25;
            Mat X(n, 1);
            Vec y(n);
            for (int i = 0; i < n; ++i) {
                X(i, 0) = -1.0 + 2.0 * i / (n - 1);
                y[i] = level + rng.gaussian(0.0, 0.02);
            }
            return GpModel(X, y, hp);
        };
        std::vector<std::vector<GpModel>> banks;
        banks.push_back({bank_for(0.5)});
        banks.push_back({bank_for(-0.5)});
        return LineWorld{split, nominal, HybridResidualModel(std::move(banks))};
    }

    // Build a trajectory visiting the given x positions with consistent inputs
    // so that the observed residuals equal the true residual plus noise.
    void trajectory(const std::vector<double>& xs_line, double noise_std, unsigned seed,
                    std::vector<Vec>& xs, std::vector<Vec>& us) const {
        Rng rng(seed);
        xs.clear();
        us.clear();
        for (double x : xs_line) xs.push_back(v1(x));
        for (size_t k = 0; k + 1 < xs_line.size(); ++k) {
            const double d = true_residual(xs_line[k]) + rng.gaussian(0.0, noise_std);
            us.push_back(v1(xs_line[k + 1] - xs_line[k] - d));
        }
    }
};

}  // namespace

TEST_CASE("cold-start classifier emits near-uniform probabilities", "[siren]") {
    ModeClassifier c(2, 3, unit_scaler(2), 42);
    Rng rng(1);
    for (int t = 0; t < 50; ++t) {
        Vec y(2);
        y << rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0);
        const Vec p = c.probabilities(y);
        REQUIRE(p.size() == 3);
        REQUIRE(p.sum() == Catch::Approx(1.0).margin(1e-12));
        for (int m = 0; m < 3; ++m) REQUIRE(std::abs(p[m] - 1.0 / 3.0) < 0.1);
    }
}

TEST_CASE("same seed gives identical classifiers", "[siren]") {
    ModeClassifier a(2, 3, unit_scaler(2), 99);
    ModeClassifier b(2, 3, unit_scaler(2), 99);
    Vec y(2);
    y << 0.3, -0.7;
    const Vec pa = a.probabilities(y);
    const Vec pb = b.probabilities(y);
    for (int m = 0; m < 3; ++m) REQUIRE(pa[m] == pb[m]);
}

TEST_CASE("hard labels break ties toward the lowest mode id", "[siren]") {
    // Hand-built network with all-zero weights: logits collapse to the output
    // bias, so the label is read straight off b3.
    auto zero_net = [](std::vector<double> b3) {
        nlohmann::json j = {{"schema_version", 1}, {"input_dim", 1},   {"modes", 3},
                            {"hidden", 2},         {"scaler_lo", {-1.0}}, {"scaler_hi", {1.0}}};
        j["W1"] = std::vector<std::vector<double>>(2, std::vector<double>(1, 0.0));
        j["b1"] = std::vector<double>(2, 0.0);
        j["W2"] = std::vector<std::vector<double>>(2, std::vector<double>(2, 0.0));
        j["b2"] = std::vector<double>(2, 0.0);
        j["W3"] = std::vector<std::vector<double>>(3, std::vector<double>(2, 0.0));
        j["b3"] = b3;
        return ModeClassifier::from_json(j);
    };
    REQUIRE(zero_net({0.0, 0.0, 0.0}).hard_label(v1(0.2)) == 1);
    REQUIRE(zero_net({0.1, 0.7, 0.7}).hard_label(v1(0.2)) == 2);
    REQUIRE(zero_net({0.1, 0.2, 0.9}).hard_label(v1(0.2)) == 3);
}

TEST_CASE("training separates a labelled half-line exactly", "[siren]") {
    ModeClassifier c(1, 2, unit_scaler(1), 3);
    const int n = 60;
    Mat X(n, 1), Y(n, 2);
    for (int i = 0; i < n; ++i) {
        const double x = -0.95 + 1.9 * i / (n - 1);
        X(i, 0) = x;
        Y(i, 0) = x < 0.0 ? 1.0 : 0.0;
        Y(i, 1) = x < 0.0 ? 0.0 : 1.0;
    }
    const double final_loss = c.train(X, Y, 2000, 1e-3);
    REQUIRE(std::isfinite(final_loss));
    int correct = 0;
    for (int i = 0; i < n; ++i)
        if (c.hard_label(v1(X(i, 0))) == (X(i, 0) < 0.0 ? 1 : 2)) ++correct;
    REQUIRE(correct == n);
}

TEST_CASE("training keeps the best iterate and never worsens the loss", "[siren]") {
    ModeClassifier c(1, 2, unit_scaler(1), 5);
    Mat X(4, 1), Y(4, 2);
    X << -0.8, -0.2, 0.2, 0.8;
    Y << 1, 0, 1, 0, 0, 1, 0, 1;
    auto ce = [&](const ModeClassifier& cl) {
        double loss = 0.0;
        for (int i = 0; i < 4; ++i) {
            const Vec p = cl.probabilities(v1(X(i, 0)));
            for (int m = 0; m < 2; ++m)
                if (Y(i, m) > 0.0) loss -= Y(i, m) * std::log(p[m]);
        }
        return loss / 4.0;
    };
    const double before = ce(c);
    const double reported = c.train(X, Y, 50, 1e-2);
    const double after = ce(c);
    REQUIRE(after <= before + 1e-12);
    REQUIRE(after == Catch::Approx(reported).margin(1e-12));

    // Zero epochs only evaluates; the weights stay put.
    ModeClassifier d(1, 2, unit_scaler(1), 5);
    const Vec p0 = d.probabilities(v1(0.3));
    d.train(X, Y, 0, 1e-2);
    const Vec p1 = d.probabilities(v1(0.3));
    for (int m = 0; m < 2; ++m) REQUIRE(p0[m] == p1[m]);
}

TEST_CASE("classifier serialization round-trips bit-exactly", "[siren]") {
    ModeClassifier c(2, 3, unit_scaler(2), 17);
    Mat X(6, 2), Y(6, 3);
    Rng rng(4);
    for (int i = 0; i < 6; ++i) {
        X(i, 0) = rng.uniform(-1.0, 1.0);
        X(i, 1) = rng.uniform(-1.0, 1.0);
        Y.row(i).setZero();
        Y(i, i % 3) = 1.0;
    }
    c.train(X, Y, 100, 1e-3);
    const ModeClassifier back = ModeClassifier::from_json(c.to_json());
    Vec q(2);
    q << 0.11, -0.42;
    const Vec pa = c.probabilities(q);
    const Vec pb = back.probabilities(q);
    for (int m = 0; m < 3; ++m) REQUIRE(pa[m] == pb[m]);
}

TEST_CASE("kernel density of a single coincident point", "[modemap]") {
    PriorDensityStore store(unit_scaler(2));
    Vec q(2);
    q << 0.4, -0.3;
    store.append_points({q});
    const double h = 0.25;
    REQUIRE(store.density(q, h) == Catch::Approx(1.0 / (h * std::sqrt(2.0 * M_PI))).epsilon(1e-12));
}

TEST_CASE("kernel density matches a brute-force evaluation", "[modemap]") {
    FeatureScaler sc;
    sc.lo = Vec(2);
    sc.hi = Vec(2);
    sc.lo << 0.0, -2.0;
    sc.hi << 4.0, 2.0;
    PriorDensityStore store(sc);
    Rng rng(8);
    std::vector<Vec> pts;
    for (int i = 0; i < 200; ++i) {
        Vec p(2);
        p << rng.uniform(0.0, 4.0), rng.uniform(-2.0, 2.0);
        pts.push_back(p);
    }
    store.append_points(pts);
    const double h = 0.25;
    for (int t = 0; t < 20; ++t) {
        Vec q(2);
        q << rng.uniform(0.0, 4.0), rng.uniform(-2.0, 2.0);
        // Independent evaluation with explicit normalization of every point.
        auto norm = [&](const Vec& y) {
            Vec o(2);
            for (int i = 0; i < 2; ++i) o[i] = 2.0 * (y[i] - sc.lo[i]) / (sc.hi[i] - sc.lo[i]) - 1.0;
            return o;
        };
        double acc = 0.0;
        for (const Vec& p : pts) {
            const double r2 = (norm(p) - norm(q)).squaredNorm();
            acc += std::exp(-r2 / (2.0 * h * h)) / std::sqrt(2.0 * M_PI);
        }
        const double oracle = acc / (h * pts.size());
        REQUIRE(store.density(q, h) == Catch::Approx(oracle).epsilon(1e-12));
    }
    REQUIRE(PriorDensityStore(sc).density(Vec::Zero(2), h) == 0.0);
}

TEST_CASE("store subsampling cap bounds both collections", "[modemap]") {
    PriorDensityStore store(unit_scaler(1), 10);
    std::vector<Vec> pts, labs;
    for (int i = 0; i < 25; ++i) {
        pts.push_back(v1(-1.0 + 2.0 * i / 24.0));
        Vec l(2);
        l << 1.0, 0.0;
        labs.push_back(l);
    }
    store.append_points(pts);
    store.append_labelled(pts, labs);
    REQUIRE(store.size() == 10);
    REQUIRE(store.labelled_size() == 10);
    REQUIRE(std::isfinite(store.density(v1(0.0), 0.25)));
}

TEST_CASE("store serialization preserves densities and labelled points", "[modemap]") {
    PriorDensityStore store(unit_scaler(2));
    Rng rng(12);
    std::vector<Vec> pts, labs;
    for (int i = 0; i < 30; ++i) {
        Vec p(2);
        p << rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0);
        pts.push_back(p);
        Vec l(3);
        l << 0.2, 0.5, 0.3;
        labs.push_back(l);
    }
    store.append_points(pts);
    store.append_labelled(pts, labs);
    const PriorDensityStore back = PriorDensityStore::from_json(store.to_json());
    Vec q(2);
    q << 0.15, -0.6;
    REQUIRE(back.density(q, 0.25) == store.density(q, 0.25));
    REQUIRE(back.labelled_size() == store.labelled_size());
    Mat Xa, Ya, Xb, Yb;
    store.labelled_batch(Xa, Ya);
    back.labelled_batch(Xb, Yb);
    REQUIRE((Xa - Xb).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((Ya - Yb).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("residual likelihoods match the closed-form single-sample posterior", "[modemap]") {
    KernelHyperparams hp;
    hp.signal_variance = 1.0;
    hp.lengthscales = v1(1.0);
    hp.noise_variance = 1.0;
    // Mode 1 centered at zero, mode 2 pulled toward 10 near its sample.
    Mat X1(1, 1), X2(1, 1);
    X1 << 0.0;
    X2 << 0.0;
    Vec y1(1), y2(1);
    y1 << 0.0;
    y2 << 10.0;
    std::vector<std::vector<GpModel>> banks;
    banks.push_back({GpModel(X1, y1, hp)});
    banks.push_back({GpModel(X2, y2, hp)});
    HybridResidualModel model(std::move(banks));

    const double q = 0.7;
    const double d = 2.0;
    Vec like = compute_likelihoods(model, v1(q), v1(d));
    for (int m = 0; m < 2; ++m) {
        double mean, latent;
        single_sample_posterior(hp, 0.0, m == 0 ? 0.0 : 10.0, q, mean, latent);
        const double obs_var = latent + hp.noise_variance;
        REQUIRE(like[m] == Catch::Approx(normal_pdf(d, mean, obs_var)).epsilon(1e-12));
    }

    // A far query under a noise-free unit-variance mode recovers the standard
    // normal density at the origin.
    KernelHyperparams clean = hp;
    clean.noise_variance = 0.0;
    std::vector<std::vector<GpModel>> far;
    far.push_back({GpModel(X1, y1, clean)});
    far.push_back({GpModel(X2, y2, clean)});
    HybridResidualModel far_model(std::move(far));
    const Vec lf = compute_likelihoods(far_model, v1(100.0), v1(0.0));
    REQUIRE(lf[0] == Catch::Approx(1.0 / std::sqrt(2.0 * M_PI)).epsilon(1e-9));
}

TEST_CASE("likelihood exponent interpolates and clamps", "[modemap]") {
    TradeoffConfig cfg;
    cfg.validate();
    REQUIRE(alpha_of(0.0, cfg) == cfg.alpha_max);
    REQUIRE(alpha_of(cfg.kappa_min, cfg) == cfg.alpha_max);
    REQUIRE(alpha_of(cfg.kappa_max, cfg) == cfg.alpha_min);
    REQUIRE(alpha_of(cfg.kappa_max + 5.0, cfg) == cfg.alpha_min);
    const double mid = 0.5 * (cfg.kappa_min + cfg.kappa_max);
    REQUIRE(alpha_of(mid, cfg) == Catch::Approx(0.5 * (cfg.alpha_min + cfg.alpha_max)).epsilon(1e-12));
    double prev = alpha_of(0.0, cfg);
    for (double k = 0.0; k <= 1.2; k += 0.01) {
        const double a = alpha_of(k, cfg);
        REQUIRE(a <= prev + 1e-15);
        prev = a;
    }
    TradeoffConfig bad;
    bad.kappa_max = bad.kappa_min;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("tempered posterior limits and identities", "[modemap]") {
    Vec like(3), prior(3);
    like << 0.4, 0.1, 0.02;
    prior << 0.2, 0.5, 0.3;

    // Full evidence weight: posterior proportional to prior times likelihood.
    Vec p1 = compute_posteriors(like, prior, 1.0);
    Vec oracle(3);
    for (int m = 0; m < 3; ++m) oracle[m] = prior[m] * like[m];
    oracle /= oracle.sum();
    for (int m = 0; m < 3; ++m) REQUIRE(p1[m] == Catch::Approx(oracle[m]).epsilon(1e-14));

    // Zero evidence weight: the prior passes through untouched.
    Vec p0 = compute_posteriors(like, prior, 0.0);
    for (int m = 0; m < 3; ++m) REQUIRE(p0[m] == Catch::Approx(prior[m]).epsilon(1e-14));

    // A zero prior silences a mode regardless of its likelihood.
    Vec prior0(3);
    prior0 << 0.0, 0.6, 0.4;
    REQUIRE(compute_posteriors(like, prior0, 0.7)[0] == 0.0);

    // Vanishing numerators fall back to likelihood-only, then to uniform.
    Vec zero_prior = Vec::Zero(3);
    Vec pf = compute_posteriors(like, zero_prior, 0.5);
    Vec lo = like / like.sum();
    for (int m = 0; m < 3; ++m) REQUIRE(pf[m] == Catch::Approx(lo[m]).epsilon(1e-14));
    Vec pu = compute_posteriors(Vec::Zero(3), zero_prior, 0.5);
    for (int m = 0; m < 3; ++m) REQUIRE(pu[m] == Catch::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("posterior mass on the likelihood-favored mode grows with alpha", "[modemap]") {
    Rng rng(21);
    for (int t = 0; t < 25; ++t) {
        Vec like(2), prior(2);
        like << rng.uniform(0.5, 3.0), rng.uniform(0.01, 0.4);
        prior << rng.uniform(0.05, 0.45), 0.0;
        prior[1] = 1.0 - prior[0];
        double prev = compute_posteriors(like, prior, 0.0)[0];
        for (double a = 0.05; a <= 1.0 + 1e-12; a += 0.05) {
            const double cur = compute_posteriors(like, prior, a)[0];
            REQUIRE(cur >= prev - 1e-12);
            prev = cur;
        }
    }
}

TEST_CASE("residual tuples reproduce hand-computed deviations", "[modemap]") {
    FeatureSplit split = FeatureSplit::from_state_indices({1}, {0, 1}, 2, 1);
    auto nominal = [](const Vec& x, const Vec& u) { return Vec(2.0 * x + Vec::Constant(x.size(), u[0])); };
    std::vector<Vec> xs, us;
    Vec x0(2), x1(2), x2(2);
    x0 << 1.0, 2.0;
    x1 << 3.0, 5.0;
    x2 << 7.5, 11.0;
    xs = {x0, x1, x2};
    us = {v1(0.5), v1(-1.0)};
    const auto tuples = make_residual_tuples(xs, us, nominal, split, Mat::Identity(2, 2));
    REQUIRE(tuples.size() == 2);
    REQUIRE(tuples[0].yg[0] == 2.0);
    REQUIRE(tuples[0].yd[0] == 1.0);
    REQUIRE(tuples[0].yd[1] == 2.0);
    REQUIRE(tuples[0].d[0] == Catch::Approx(3.0 - (2.0 + 0.5)).margin(1e-12));
    REQUIRE(tuples[0].d[1] == Catch::Approx(5.0 - (4.0 + 0.5)).margin(1e-12));
    REQUIRE(tuples[1].d[0] == Catch::Approx(7.5 - (6.0 - 1.0)).margin(1e-12));
    REQUIRE_THROWS_AS(make_residual_tuples({x0}, us, nominal, split, Mat::Identity(2, 2)),
                      std::invalid_argument);

    // A single-column channel recovers the scalar residual from the state
    // deviation it generated, ignoring nothing: the deviation must lie in the
    // channel's range for the reconstruction to be exact.
    Mat chan = Mat::Zero(2, 1);
    chan(0, 0) = 2.0;
    std::vector<Vec> xs2 = {x0, Vec(2.0 * x0 + Vec::Constant(2, 0.5) + chan.col(0) * 0.75)};
    const auto scalar = make_residual_tuples(xs2, {v1(0.5)}, nominal, split, chan);
    REQUIRE(scalar[0].d.size() == 1);
    REQUIRE(scalar[0].d[0] == Catch::Approx(0.75).margin(1e-12));
}

TEST_CASE("one mapping pass recovers a well-separated two-mode split", "[modemap]") {
    LineWorld world = LineWorld::make();
    std::vector<double> line;
    const int T = 80;
    for (int k = 0; k <= T; ++k) line.push_back(-0.95 + 1.9 * k / T);
    std::vector<Vec> xs, us;
    world.trajectory(line, 0.02, 31, xs, us);

    ModeClassifier classifier(1, 2, unit_scaler(1), 7);
    PriorDensityStore store(unit_scaler(1));
    TradeoffConfig cfg;
    const auto labels = iterate_mode_map(world.model, xs, us, world.nominal, world.split,
                                         Mat::Identity(1, 1), classifier, store, cfg, 2000, 1e-3);
    REQUIRE(labels.size() == static_cast<size_t>(T));
    REQUIRE(store.size() == static_cast<size_t>(T));
    REQUIRE(store.labelled_size() == static_cast<size_t>(T));

    // The store was empty while labelling, so full evidence weight applied and
    // the labels themselves should be nearly one-hot correct.
    int label_ok = 0;
    for (int k = 0; k < T; ++k) {
        const int want = line[k] < 0.0 ? 0 : 1;
        if (labels[k][want] > 0.9) ++label_ok;
    }
    REQUIRE(label_ok >= static_cast<int>(0.95 * T));

    // And the fine-tuned classifier reproduces the split on the visited points.
    int clf_ok = 0;
    for (int k = 0; k < T; ++k)
        if (classifier.hard_label(v1(line[k])) == (line[k] < 0.0 ? 1 : 2)) ++clf_ok;
    REQUIRE(clf_ok >= static_cast<int>(0.95 * T));
}

TEST_CASE("evidence weight is taken from the pre-update store", "[modemap]") {
    LineWorld world = LineWorld::make();
    std::vector<double> line;
    for (int k = 0; k <= 20; ++k) line.push_back(-0.95 + 1.9 * k / 20.0);
    std::vector<Vec> xs, us;
    world.trajectory(line, 0.02, 5, xs, us);

    // kappa_max near zero: any visited neighborhood drops alpha to exactly 0.
    TradeoffConfig cfg;
    cfg.kappa_min = 0.0;
    cfg.kappa_max = 1e-9;
    cfg.alpha_min = 0.0;
    cfg.alpha_max = 1.0;

    ModeClassifier classifier(1, 2, unit_scaler(1), 7);
    PriorDensityStore store(unit_scaler(1));

    // First pass: store is empty, so alpha stays at alpha_max and likelihood
    // evidence shapes the labels despite the near-uniform prior.
    const auto first = iterate_mode_map(world.model, xs, us, world.nominal, world.split,
                                        Mat::Identity(1, 1), classifier, store, cfg, 50, 1e-3);
    bool evidence_used = false;
    for (const Vec& l : first)
        if (std::abs(l[0] - 0.5) > 0.3) evidence_used = true;
    REQUIRE(evidence_used);

    // Second pass over the same points: every query now sees stored mass, so
    // alpha collapses to 0 and each label equals the pre-retrain prior.
    const ModeClassifier snapshot = classifier;
    const auto second = iterate_mode_map(world.model, xs, us, world.nominal, world.split,
                                         Mat::Identity(1, 1), classifier, store, cfg, 50, 1e-3);
    for (size_t k = 0; k < second.size(); ++k) {
        const Vec expect = snapshot.probabilities(v1(line[k]));
        for (int m = 0; m < 2; ++m) REQUIRE(second[k][m] == Catch::Approx(expect[m]).margin(1e-12));
    }
}
