#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "pwrmpc/common.hpp"
#include "pwrmpc/gp.hpp"
#include "pwrmpc/normal.hpp"
#include "pwrmpc/siren.hpp"

namespace pwrmpc {

/// Knobs for blending residual-likelihood evidence with the classifier prior.
/// The likelihood exponent alpha decays linearly in the local density kappa of
/// previously visited points: sparse regions trust fresh evidence (alpha_max),
/// well-covered regions lean on the accumulated classifier (alpha_min).
struct TradeoffConfig {
    double h = 0.25;
    double kappa_min = 0.05;
    double kappa_max = 1.0;
    double alpha_min = 0.3;
    double alpha_max = 1.0;

    void validate() const {
        if (!(h > 0.0)) throw std::invalid_argument("TradeoffConfig: h must be positive");
        if (!(kappa_min >= 0.0) || !(kappa_max > kappa_min))
            throw std::invalid_argument("TradeoffConfig: need 0 <= kappa_min < kappa_max");
        if (!(alpha_min >= 0.0) || !(alpha_max <= 1.0) || !(alpha_min <= alpha_max))
            throw std::invalid_argument("TradeoffConfig: need 0 <= alpha_min <= alpha_max <= 1");
    }
};

/// Append-only store of visited locations. Densities are evaluated in the
/// normalized [-1, 1] workspace shared with the classifier; the store also
/// accumulates the soft-labelled set used for classifier fine-tuning. An
/// optional uniform subsampling cap bounds both collections.
class PriorDensityStore {
  public:
    PriorDensityStore() = default;
    explicit PriorDensityStore(FeatureScaler scaler, std::size_t cap = 20000)
        : scaler_(std::move(scaler)), cap_(cap) {}

    std::size_t size() const { return pts_.size(); }
    std::size_t labelled_size() const { return labelled_in_.size(); }
    const FeatureScaler& scaler() const { return scaler_; }

    /// Kernel density of a raw workspace query against stored points:
    /// kappa(y) = (1 / (h N)) * sum_i phi(||p_i - y~|| / h) with the standard
    /// normal profile phi(r) = exp(-r^2 / 2) / sqrt(2 pi). Empty store gives 0.
    double density(const Vec& yd_raw, double h) const {
        if (pts_.empty()) return 0.0;
        const Vec q = scaler_.normalize(yd_raw);
        double acc = 0.0;
        for (const Vec& p : pts_) {
            const double r2 = (p - q).squaredNorm();
            acc += std::exp(-r2 / (2.0 * h * h));
        }
        constexpr double inv_sqrt_2pi = 0.3989422804014326779;
        return acc * inv_sqrt_2pi / (h * static_cast<double>(pts_.size()));
    }

    void append_points(const std::vector<Vec>& yd_raw) {
        for (const Vec& y : yd_raw) pts_.push_back(scaler_.normalize(y));
        enforce_cap(pts_);
    }

    void append_labelled(const std::vector<Vec>& yd_raw, const std::vector<Vec>& soft_labels) {
        if (yd_raw.size() != soft_labels.size())
            throw std::invalid_argument("PriorDensityStore: labelled batch size mismatch");
        for (std::size_t i = 0; i < yd_raw.size(); ++i) {
            labelled_in_.push_back(yd_raw[i]);
            labelled_lab_.push_back(soft_labels[i]);
        }
        enforce_cap_pair(labelled_in_, labelled_lab_);
    }

    /// Training matrices over the accumulated labelled set (raw inputs).
    void labelled_batch(Mat& inputs, Mat& labels) const {
        if (labelled_in_.empty()) throw std::runtime_error("PriorDensityStore: no labelled points");
        const int n = static_cast<int>(labelled_in_.size());
        inputs.resize(n, labelled_in_.front().size());
        labels.resize(n, labelled_lab_.front().size());
        for (int i = 0; i < n; ++i) {
            inputs.row(i) = labelled_in_[i].transpose();
            labels.row(i) = labelled_lab_[i].transpose();
        }
    }

    nlohmann::json to_json() const {
        auto vv = [](const std::vector<Vec>& xs) {
            std::vector<std::vector<double>> out;
            out.reserve(xs.size());
            for (const Vec& x : xs) out.emplace_back(x.data(), x.data() + x.size());
            return out;
        };
        return {{"schema_version", 1},
                {"cap", cap_},
                {"scaler_lo", std::vector<double>(scaler_.lo.data(), scaler_.lo.data() + scaler_.lo.size())},
                {"scaler_hi", std::vector<double>(scaler_.hi.data(), scaler_.hi.data() + scaler_.hi.size())},
                {"points", vv(pts_)},
                {"labelled_inputs", vv(labelled_in_)},
                {"labelled_labels", vv(labelled_lab_)}};
    }

    static PriorDensityStore from_json(const nlohmann::json& j) {
        if (j.at("schema_version").get<int>() != 1)
            throw std::runtime_error("PriorDensityStore::from_json: unknown schema");
        PriorDensityStore s;
        s.cap_ = j.at("cap").get<std::size_t>();
        auto vecd = [&](const char* k) {
            const auto v = j.at(k).get<std::vector<double>>();
            return Vec(Eigen::Map<const Vec>(v.data(), static_cast<int>(v.size())));
        };
        s.scaler_.lo = vecd("scaler_lo");
        s.scaler_.hi = vecd("scaler_hi");
        auto fill = [&](const char* k, std::vector<Vec>& dst) {
            for (const auto& row : j.at(k).get<std::vector<std::vector<double>>>())
                dst.push_back(Vec(Eigen::Map<const Vec>(row.data(), static_cast<int>(row.size()))));
        };
        fill("points", s.pts_);
        fill("labelled_inputs", s.labelled_in_);
        fill("labelled_labels", s.labelled_lab_);
        return s;
    }

  private:
    void enforce_cap(std::vector<Vec>& xs) const {
        if (cap_ == 0 || xs.size() <= cap_) return;
        std::vector<Vec> kept;
        kept.reserve(cap_);
        const std::size_t n = xs.size();
        for (std::size_t i = 0; i < cap_; ++i) kept.push_back(xs[i * n / cap_]);
        xs = std::move(kept);
    }
    void enforce_cap_pair(std::vector<Vec>& a, std::vector<Vec>& b) const {
        if (cap_ == 0 || a.size() <= cap_) return;
        std::vector<Vec> ka, kb;
        ka.reserve(cap_);
        kb.reserve(cap_);
        const std::size_t n = a.size();
        for (std::size_t i = 0; i < cap_; ++i) {
            ka.push_back(a[i * n / cap_]);
            kb.push_back(b[i * n / cap_]);
        }
        a = std::move(ka);
        b = std::move(kb);
    }

    FeatureScaler scaler_;
    std::size_t cap_ = 20000;
    std::vector<Vec> pts_;
    std::vector<Vec> labelled_in_;
    std::vector<Vec> labelled_lab_;
};

/// One transition's evidence: regression features, classification features and
/// the observed residual in residual coordinates, recovered from the state
/// deviation through the residual channel: d = B_g^+ (x_next - f(x, u)).
struct ResidualTuple {
    Vec yg;
    Vec yd;
    Vec d;
};

inline std::vector<ResidualTuple> make_residual_tuples(
    const std::vector<Vec>& states, const std::vector<Vec>& inputs,
    const std::function<Vec(const Vec&, const Vec&)>& nominal, const FeatureSplit& split,
    const Mat& B_g) {
    if (states.size() != inputs.size() + 1)
        throw std::invalid_argument("make_residual_tuples: need one more state than input");
    if (B_g.rows() != states.front().size())
        throw std::invalid_argument("make_residual_tuples: residual channel row count mismatch");
    const Eigen::CompleteOrthogonalDecomposition<Mat> channel(B_g);
    std::vector<ResidualTuple> out;
    out.reserve(inputs.size());
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        ResidualTuple t;
        t.yg = split.yg_of(states[k], inputs[k]);
        t.yd = split.yd_of(states[k], inputs[k]);
        t.d = channel.solve(states[k + 1] - nominal(states[k], inputs[k]));
        out.push_back(std::move(t));
    }
    return out;
}

/// Per-mode likelihood of an observed residual under the mode's predictive
/// observation distribution (independent per output dimension).
inline Vec compute_likelihoods(const HybridResidualModel& model, const Vec& yg, const Vec& d) {
    Vec like(model.mode_count());
    for (int m = 1; m <= model.mode_count(); ++m) {
        Vec mean, var;
        model.observation_moments(m, yg, mean, var);
        if (d.size() != mean.size())
            throw std::invalid_argument("compute_likelihoods: observation dimension mismatch");
        double l = 1.0;
        for (int j = 0; j < d.size(); ++j) l *= normal_pdf(d[j], mean[j], std::max(var[j], 1e-300));
        like[m - 1] = l;
    }
    return like;
}

/// Likelihood exponent as a clamped linear decay in the local sample density.
inline double alpha_of(double kappa, const TradeoffConfig& cfg) {
    if (kappa <= cfg.kappa_min) return cfg.alpha_max;
    if (kappa >= cfg.kappa_max) return cfg.alpha_min;
    const double t = (kappa - cfg.kappa_min) / (cfg.kappa_max - cfg.kappa_min);
    return cfg.alpha_max + t * (cfg.alpha_min - cfg.alpha_max);
}

/// Tempered Bayesian label: posterior_m proportional to prior_m * L_m^alpha,
/// evaluated in log space. If every numerator vanishes the label falls back to
/// the likelihood-only posterior (alpha = 1), and to uniform as a last resort.
inline Vec compute_posteriors(const Vec& likelihoods, const Vec& priors, double alpha) {
    const int M = static_cast<int>(likelihoods.size());
    const double neg_inf = -std::numeric_limits<double>::infinity();
    auto log_numerators = [&](double a, bool use_prior) {
        Vec lg(M);
        for (int m = 0; m < M; ++m) {
            if (use_prior && !(priors[m] > 0.0)) {
                lg[m] = neg_inf;
                continue;
            }
            double v = use_prior ? std::log(priors[m]) : 0.0;
            if (a > 0.0) v += likelihoods[m] > 0.0 ? a * std::log(likelihoods[m]) : neg_inf;
            lg[m] = v;
        }
        return lg;
    };
    auto normalize = [&](const Vec& lg, Vec& out) {
        const double mx = lg.maxCoeff();
        if (mx == neg_inf) return false;
        out.resize(M);
        if (std::isinf(mx)) {
            for (int m = 0; m < M; ++m) out[m] = lg[m] == mx ? 1.0 : 0.0;
        } else {
            for (int m = 0; m < M; ++m) out[m] = std::exp(lg[m] - mx);
        }
        out /= out.sum();
        return true;
    };
    Vec p;
    if (normalize(log_numerators(alpha, true), p)) return p;
    if (normalize(log_numerators(1.0, false), p)) return p;
    return Vec::Constant(M, 1.0 / M);
}

/// One mapping iteration over a finished trajectory: label each transition with
/// the tempered posterior (alpha taken from the pre-update store), fine-tune
/// the classifier on the accumulated labelled set, then append the visited
/// points to the store. Returns the soft labels for diagnostics.
inline std::vector<Vec> iterate_mode_map(const HybridResidualModel& model, const std::vector<Vec>& states,
                                         const std::vector<Vec>& inputs,
                                         const std::function<Vec(const Vec&, const Vec&)>& nominal,
                                         const FeatureSplit& split, const Mat& B_g,
                                         ModeClassifier& classifier, PriorDensityStore& store,
                                         const TradeoffConfig& cfg, int epochs = 500,
                                         double step_size = 1e-3) {
    cfg.validate();
    const auto tuples = make_residual_tuples(states, inputs, nominal, split, B_g);
    std::vector<Vec> labels;
    std::vector<Vec> visited;
    labels.reserve(tuples.size());
    visited.reserve(tuples.size());
    for (const auto& t : tuples) {
        const double kappa = store.density(t.yd, cfg.h);
        const double alpha = alpha_of(kappa, cfg);
        const Vec like = compute_likelihoods(model, t.yg, t.d);
        const Vec prior = classifier.probabilities(t.yd);
        labels.push_back(compute_posteriors(like, prior, alpha));
        visited.push_back(t.yd);
    }
    store.append_labelled(visited, labels);
    Mat X, Y;
    store.labelled_batch(X, Y);
    classifier.train(X, Y, epochs, step_size);
    store.append_points(visited);
    return labels;
}

}  // namespace pwrmpc
