#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "pwrmpc/common.hpp"
#include "pwrmpc/data.hpp"

namespace pwrmpc {

struct KernelHyperparams {
    double signal_variance = 1.0;
    Vec lengthscales;  // one per input dimension (ARD)
    double noise_variance = 0.0;

    void validate() const {
        if (!(signal_variance > 0.0)) throw std::invalid_argument("KernelHyperparams: signal_variance must be > 0");
        if (lengthscales.size() == 0) throw std::invalid_argument("KernelHyperparams: no lengthscales");
        for (int i = 0; i < lengthscales.size(); ++i)
            if (!(lengthscales[i] > 0.0)) throw std::invalid_argument("KernelHyperparams: lengthscales must be > 0");
        if (!(noise_variance >= 0.0)) throw std::invalid_argument("KernelHyperparams: noise_variance must be >= 0");
    }
};

inline double se_ard_kernel(const KernelHyperparams& hp, const Vec& a, const Vec& b) {
    double s = 0.0;
    for (int d = 0; d < a.size(); ++d) {
        const double r = (a[d] - b[d]) / hp.lengthscales[d];
        s += r * r;
    }
    return hp.signal_variance * std::exp(-0.5 * s);
}

struct GpPrediction {
    double mean = 0.0;
    double variance = 0.0;
};

/// Scalar-output Gaussian process regressor with a squared-exponential ARD
/// kernel. Training factorizes K + sigma_n^2 I once (Cholesky, with a jitter
/// ladder on failure); predictions return the latent posterior, i.e. the
/// variance of the underlying function without observation noise.
class GpModel {
  public:
    GpModel() = default;

    GpModel(Mat X, Vec y, KernelHyperparams hp)
        : X_(std::move(X)), y_(std::move(y)), hyper_(std::move(hp)) {
        if (X_.rows() == 0) throw std::invalid_argument("GpModel: empty sample list");
        if (X_.rows() != y_.size()) throw std::invalid_argument("GpModel: input/target count mismatch");
        if (hyper_.lengthscales.size() != X_.cols())
            throw std::invalid_argument("GpModel: lengthscale count != input dimension");
        hyper_.validate();
        factorize();
    }

    int sample_count() const { return static_cast<int>(X_.rows()); }
    int input_dim() const { return static_cast<int>(X_.cols()); }
    const KernelHyperparams& hyper() const { return hyper_; }
    const Mat& inputs() const { return X_; }
    const Vec& targets() const { return y_; }
    double jitter_used() const { return jitter_; }
    double log_marginal() const { return log_marginal_; }
    long variance_clamp_count() const { return clamp_count_ ? clamp_count_->load() : 0; }

    GpPrediction predict(const Vec& x) const {
        Vec k = kernel_vector(x);
        GpPrediction p;
        p.mean = k.dot(alpha_);
        const Vec v = L_.triangularView<Eigen::Lower>().solve(k);
        double var = hyper_.signal_variance - v.squaredNorm();
        if (var < 0.0) {
            var = 0.0;
            clamp_count_->fetch_add(1, std::memory_order_relaxed);
        }
        p.variance = var;
        return p;
    }

    /// Latent prediction plus the gradient of the posterior mean w.r.t. the query.
    GpPrediction predict_with_gradient(const Vec& x, Vec& dmean_dx) const {
        Vec k = kernel_vector(x);
        GpPrediction p;
        p.mean = k.dot(alpha_);
        dmean_dx = Vec::Zero(x.size());
        for (int i = 0; i < X_.rows(); ++i) {
            const double ka = k[i] * alpha_[i];
            for (int d = 0; d < x.size(); ++d) {
                const double l2 = hyper_.lengthscales[d] * hyper_.lengthscales[d];
                dmean_dx[d] -= ka * (x[d] - X_(i, d)) / l2;
            }
        }
        const Vec v = L_.triangularView<Eigen::Lower>().solve(k);
        double var = hyper_.signal_variance - v.squaredNorm();
        if (var < 0.0) {
            var = 0.0;
            clamp_count_->fetch_add(1, std::memory_order_relaxed);
        }
        p.variance = var;
        return p;
    }

    /// Variance of a new noisy observation at x (latent + fitted noise).
    double observation_variance(const Vec& x) const { return predict(x).variance + hyper_.noise_variance; }

  private:
    void factorize() {
        const int n = static_cast<int>(X_.rows());
        Mat K(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j <= i; ++j) K(i, j) = K(j, i) = se_ard_kernel(hyper_, X_.row(i), X_.row(j));
        // Jitter ladder: 1e-8 * sigma_f^2, escalating by 10x up to 1e-4 * sigma_f^2.
        double jitter = 0.0;
        for (;;) {
            Mat Kn = K;
            Kn.diagonal().array() += hyper_.noise_variance + jitter;
            Eigen::LLT<Mat> llt(Kn);
            if (llt.info() == Eigen::Success) {
                L_ = llt.matrixL();
                jitter_ = jitter;
                break;
            }
            if (jitter == 0.0)
                jitter = 1e-8 * hyper_.signal_variance;
            else if (jitter < 1e-4 * hyper_.signal_variance)
                jitter *= 10.0;
            else
                throw std::runtime_error("GpModel: kernel matrix not factorizable (degenerate hyperparameters)");
        }
        alpha_ = L_.triangularView<Eigen::Lower>().solve(y_);
        double quad = alpha_.squaredNorm();
        alpha_ = L_.transpose().triangularView<Eigen::Upper>().solve(alpha_);
        double logdet = 0.0;
        for (int i = 0; i < n; ++i) logdet += std::log(L_(i, i));
        log_marginal_ = -0.5 * quad - logdet - 0.5 * n * std::log(2.0 * M_PI);
    }

    Vec kernel_vector(const Vec& x) const {
        if (x.size() != X_.cols()) throw std::invalid_argument("GpModel::predict: query dimension mismatch");
        Vec k(X_.rows());
        for (int i = 0; i < X_.rows(); ++i) k[i] = se_ard_kernel(hyper_, x, X_.row(i));
        return k;
    }

    Mat X_;
    Vec y_;
    KernelHyperparams hyper_;
    Mat L_;
    Vec alpha_;
    double jitter_ = 0.0;
    double log_marginal_ = 0.0;
    std::shared_ptr<std::atomic<long>> clamp_count_ = std::make_shared<std::atomic<long>>(0);
};

inline std::vector<GpPrediction> predict_batch(const GpModel& m, const Mat& queries) {
    std::vector<GpPrediction> out(queries.rows());
    for (int i = 0; i < queries.rows(); ++i) out[i] = m.predict(queries.row(i));
    return out;
}

/// Log marginal likelihood of the data under the given hyperparameters, or
/// -inf when the kernel matrix cannot be factorized even with jitter.
inline double log_marginal_likelihood(const Mat& X, const Vec& y, const KernelHyperparams& hp) {
    try {
        GpModel m(X, y, hp);
        return m.log_marginal();
    } catch (const std::runtime_error&) {
        return -std::numeric_limits<double>::infinity();
    }
}

namespace detail {

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct HyperSearch {
    Mat X;
    Vec y;
    double best_lml = -std::numeric_limits<double>::infinity();
    KernelHyperparams best;

    void consider(const KernelHyperparams& hp) {
        const double lml = log_marginal_likelihood(X, y, hp);
        if (lml > best_lml) {
            best_lml = lml;
            best = hp;
        }
    }
};

}  // namespace detail

/// Deterministic hyperparameter fit: data-driven centers, a joint log grid of
/// 7 points per parameter spanning 3 decades, then 2 rounds of coordinate
/// refinement (7 points per parameter spanning 1 decade around the incumbent).
inline KernelHyperparams fit_hyperparams(const Mat& X, const Vec& y) {
    const int n = static_cast<int>(X.rows());
    const int dim = static_cast<int>(X.cols());

    const double ymean = y.mean();
    double yvar = 0.0;
    for (int i = 0; i < n; ++i) yvar += (y[i] - ymean) * (y[i] - ymean);
    yvar = std::max(yvar / std::max(n - 1, 1), 1e-12);

    Vec lcenter(dim);
    for (int d = 0; d < dim; ++d) {
        std::vector<double> diffs;
        const int max_pairs = 2000;
        int count = 0;
        for (int i = 0; i < n && count < max_pairs; ++i)
            for (int j = i + 1; j < n && count < max_pairs; ++j) {
                const double dd = std::abs(X(i, d) - X(j, d));
                if (dd > 0.0) {
                    diffs.push_back(dd);
                    ++count;
                }
            }
        const double med = detail::median(diffs);
        lcenter[d] = med > 0.0 ? med : 1.0;
    }

    detail::HyperSearch search{X, y};
    const auto factors = linspace(-1.5, 1.5, 7);

    KernelHyperparams center;
    center.signal_variance = yvar;
    center.lengthscales = lcenter;
    center.noise_variance = std::max(0.1 * yvar, 1e-12);

    const int nparams = 2 + dim;
    if (nparams <= 4) {
        // joint grid
        std::vector<int> idx(nparams, 0);
        for (;;) {
            KernelHyperparams hp = center;
            hp.signal_variance = yvar * std::pow(10.0, factors[idx[0]]);
            for (int d = 0; d < dim; ++d) hp.lengthscales[d] = lcenter[d] * std::pow(10.0, factors[idx[1 + d]]);
            hp.noise_variance = center.noise_variance * std::pow(10.0, factors[idx[nparams - 1]]);
            search.consider(hp);
            int p = nparams - 1;
            while (p >= 0 && ++idx[p] == 7) idx[p--] = 0;
            if (p < 0) break;
        }
    } else {
        // coordinate sweeps from the center for high-dimensional inputs
        search.consider(center);
        for (int round = 0; round < 3; ++round) {
            for (int p = 0; p < nparams; ++p) {
                for (double f : factors) {
                    KernelHyperparams hp = search.best;
                    const double mul = std::pow(10.0, f);
                    if (p == 0) hp.signal_variance = search.best.signal_variance * mul;
                    else if (p <= dim) hp.lengthscales[p - 1] = search.best.lengthscales[p - 1] * mul;
                    else hp.noise_variance = search.best.noise_variance * mul;
                    search.consider(hp);
                }
            }
        }
    }

    // coordinate refinement, 2 rounds, 1 decade span
    const auto refine = linspace(-0.5, 0.5, 7);
    for (int round = 0; round < 2; ++round) {
        for (int p = 0; p < nparams; ++p) {
            const KernelHyperparams base = search.best;
            for (double f : refine) {
                KernelHyperparams hp = base;
                const double mul = std::pow(10.0, f);
                if (p == 0) hp.signal_variance = base.signal_variance * mul;
                else if (p <= dim) hp.lengthscales[p - 1] = base.lengthscales[p - 1] * mul;
                else hp.noise_variance = base.noise_variance * mul;
                search.consider(hp);
            }
        }
    }

    return search.best;
}

inline GpModel fit_gp(const Mat& X, const Vec& y, std::optional<KernelHyperparams> hp = std::nullopt) {
    if (X.rows() == 0) throw std::invalid_argument("fit_gp: empty sample list");
    if (hp) return GpModel(X, y, *hp);
    return GpModel(X, y, fit_hyperparams(X, y));
}

/// Per-mode bank of independent scalar GPs, one per residual output dimension
/// (diagonal residual covariance).
class HybridResidualModel {
  public:
    HybridResidualModel() = default;
    HybridResidualModel(std::vector<std::vector<GpModel>> banks) : banks_(std::move(banks)) {
        if (banks_.empty()) throw std::invalid_argument("HybridResidualModel: no modes");
        for (const auto& b : banks_)
            if (b.size() != banks_.front().size())
                throw std::invalid_argument("HybridResidualModel: inconsistent residual dimensions");
    }

    int mode_count() const { return static_cast<int>(banks_.size()); }
    int residual_dim() const { return static_cast<int>(banks_.front().size()); }
    const GpModel& gp(int mode, int dim) const { return banks_.at(check_mode(mode) - 1).at(dim); }

    /// Latent residual moments for 1-based `mode`: mean vector and diagonal variance.
    void predict_hybrid(int mode, const Vec& yg, Vec& mean, Vec& var) const {
        const auto& bank = banks_[check_mode(mode) - 1];
        mean = Vec(residual_dim());
        var = Vec(residual_dim());
        for (int j = 0; j < residual_dim(); ++j) {
            const auto p = bank[j].predict(yg);
            mean[j] = p.mean;
            var[j] = p.variance;
        }
    }

    /// Moments of a new noisy residual observation (latent variance + fitted noise).
    void observation_moments(int mode, const Vec& yg, Vec& mean, Vec& var) const {
        predict_hybrid(mode, yg, mean, var);
        const auto& bank = banks_[mode - 1];
        for (int j = 0; j < residual_dim(); ++j) var[j] += bank[j].hyper().noise_variance;
    }

    /// Mean and its Jacobian w.r.t. y^g, for solver linearizations.
    void predict_mean_grad(int mode, const Vec& yg, Vec& mean, Mat& jac) const {
        const auto& bank = banks_[check_mode(mode) - 1];
        mean = Vec(residual_dim());
        jac = Mat(residual_dim(), yg.size());
        Vec g;
        for (int j = 0; j < residual_dim(); ++j) {
            const auto p = bank[j].predict_with_gradient(yg, g);
            mean[j] = p.mean;
            jac.row(j) = g.transpose();
        }
    }

  private:
    int check_mode(int mode) const {
        if (mode < 1 || mode > mode_count())
            throw std::invalid_argument("HybridResidualModel: mode " + std::to_string(mode) + " out of range");
        return mode;
    }

    std::vector<std::vector<GpModel>> banks_;
};

/// Fits one GP per (mode, residual dimension) from labelled dataset rows.
/// `hp[m-1][j]` overrides the hyperparameter fit where provided.
inline HybridResidualModel fit_residual_bank(
    const Dataset& rows, const FeatureSplit& split, int modes,
    const std::vector<std::vector<std::optional<KernelHyperparams>>>* hp = nullptr) {
    if (rows.empty()) throw std::invalid_argument("fit_residual_bank: empty dataset");
    const int nd = static_cast<int>(rows.front().d.size());
    std::vector<std::vector<GpModel>> banks;
    for (int m = 1; m <= modes; ++m) {
        std::vector<int> sel;
        for (size_t i = 0; i < rows.size(); ++i)
            if (rows[i].mode == m) sel.push_back(static_cast<int>(i));
        if (sel.empty()) throw std::invalid_argument("fit_residual_bank: no samples for mode " + std::to_string(m));
        Mat X(static_cast<int>(sel.size()), split.yg_dim());
        for (size_t i = 0; i < sel.size(); ++i)
            X.row(static_cast<int>(i)) = split.yg_of(rows[sel[i]].x, rows[sel[i]].u).transpose();
        std::vector<GpModel> bank;
        for (int j = 0; j < nd; ++j) {
            Vec y(static_cast<int>(sel.size()));
            for (size_t i = 0; i < sel.size(); ++i) y[static_cast<int>(i)] = rows[sel[i]].d[j];
            std::optional<KernelHyperparams> h;
            if (hp && !(*hp)[m - 1].empty()) h = (*hp)[m - 1][j];
            bank.push_back(fit_gp(X, y, h));
        }
        banks.push_back(std::move(bank));
    }
    return HybridResidualModel(std::move(banks));
}

// ---- JSON serialization ----

inline nlohmann::json to_json(const KernelHyperparams& hp) {
    return {{"signal_variance", hp.signal_variance},
            {"lengthscales", std::vector<double>(hp.lengthscales.data(), hp.lengthscales.data() + hp.lengthscales.size())},
            {"noise_variance", hp.noise_variance}};
}

inline KernelHyperparams hyperparams_from_json(const nlohmann::json& j) {
    KernelHyperparams hp;
    hp.signal_variance = j.at("signal_variance").get<double>();
    const auto l = j.at("lengthscales").get<std::vector<double>>();
    hp.lengthscales = Eigen::Map<const Vec>(l.data(), static_cast<int>(l.size()));
    hp.noise_variance = j.at("noise_variance").get<double>();
    hp.validate();
    return hp;
}

inline nlohmann::json to_json(const GpModel& m) {
    std::vector<std::vector<double>> X(m.sample_count());
    for (int i = 0; i < m.sample_count(); ++i) {
        X[i].resize(m.input_dim());
        for (int d = 0; d < m.input_dim(); ++d) X[i][d] = m.inputs()(i, d);
    }
    return {{"hyperparams", to_json(m.hyper())},
            {"inputs", X},
            {"targets", std::vector<double>(m.targets().data(), m.targets().data() + m.sample_count())}};
}

inline GpModel gp_from_json(const nlohmann::json& j) {
    const auto hp = hyperparams_from_json(j.at("hyperparams"));
    const auto Xv = j.at("inputs").get<std::vector<std::vector<double>>>();
    const auto yv = j.at("targets").get<std::vector<double>>();
    if (Xv.empty() || Xv.size() != yv.size()) throw std::runtime_error("gp_from_json: malformed data");
    Mat X(static_cast<int>(Xv.size()), static_cast<int>(Xv.front().size()));
    for (size_t i = 0; i < Xv.size(); ++i)
        for (size_t d = 0; d < Xv[i].size(); ++d) X(static_cast<int>(i), static_cast<int>(d)) = Xv[i][d];
    Vec y = Eigen::Map<const Vec>(yv.data(), static_cast<int>(yv.size()));
    return GpModel(X, y, hp);
}

inline nlohmann::json to_json(const HybridResidualModel& model) {
    nlohmann::json modes = nlohmann::json::array();
    for (int m = 1; m <= model.mode_count(); ++m) {
        nlohmann::json dims = nlohmann::json::array();
        for (int d = 0; d < model.residual_dim(); ++d) dims.push_back(to_json(model.gp(m, d)));
        modes.push_back(dims);
    }
    return {{"schema_version", 1}, {"modes", modes}};
}

inline HybridResidualModel residual_bank_from_json(const nlohmann::json& j) {
    if (j.at("schema_version").get<int>() != 1) throw std::runtime_error("residual_bank_from_json: unknown schema");
    std::vector<std::vector<GpModel>> banks;
    for (const auto& mode : j.at("modes")) {
        std::vector<GpModel> bank;
        for (const auto& d : mode) bank.push_back(gp_from_json(d));
        banks.push_back(std::move(bank));
    }
    return HybridResidualModel(std::move(banks));
}

}  // namespace pwrmpc
