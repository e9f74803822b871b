#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "pwrmpc/common.hpp"

namespace pwrmpc {

/// Affine map from workspace coordinates into [-1, 1]^d, the input range the
/// sinusoidal network is designed for.
struct FeatureScaler {
    Vec lo;
    Vec hi;

    Vec normalize(const Vec& y) const {
        Vec out(y.size());
        for (int i = 0; i < y.size(); ++i) {
            const double w = hi[i] - lo[i];
            out[i] = w > 0.0 ? 2.0 * (y[i] - lo[i]) / w - 1.0 : 0.0;
        }
        return out;
    }
};

/// Sinusoidal-representation classifier over mode ids: two hidden layers of 64
/// units, frequency scale 30 on the first layer, linear head normalized with a
/// softmax. Weight layout and initialization follow the SIREN convention; the
/// output bias starts at zero so a cold network emits near-uniform priors.
class ModeClassifier {
  public:
    ModeClassifier() = default;

    ModeClassifier(int input_dim, int modes, FeatureScaler scaler, std::uint64_t seed, int hidden = 64)
        : scaler_(std::move(scaler)), in_(input_dim), modes_(modes), hidden_(hidden) {
        if (modes < 2) throw std::invalid_argument("ModeClassifier: need at least 2 modes");
        Rng rng(seed);
        auto uniform_mat = [&](int r, int c, double a) {
            Mat m(r, c);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(-a, a);
            return m;
        };
        W1_ = uniform_mat(hidden, input_dim, 1.0 / input_dim);
        b1_ = Vec::Zero(hidden);
        const double hid_bound = std::sqrt(6.0 / hidden) / omega0_;
        W2_ = uniform_mat(hidden, hidden, hid_bound);
        b2_ = Vec::Zero(hidden);
        W3_ = uniform_mat(modes, hidden, hid_bound);
        b3_ = Vec::Zero(modes);
    }

    int mode_count() const { return modes_; }
    int input_dim() const { return in_; }
    const FeatureScaler& scaler() const { return scaler_; }

    /// Class probabilities for one raw-workspace query.
    Vec probabilities(const Vec& yd_raw) const {
        Mat q(1, in_);
        q.row(0) = scaler_.normalize(yd_raw).transpose();
        return forward(q).row(0).transpose();
    }

    /// Batched probabilities, one raw query per row.
    Mat probabilities_batch(const Mat& yd_raw) const {
        Mat q(yd_raw.rows(), in_);
        for (int i = 0; i < yd_raw.rows(); ++i) q.row(i) = scaler_.normalize(yd_raw.row(i)).transpose();
        return forward(q);
    }

    /// Argmax mode id (1-based); ties resolve to the lowest index.
    int hard_label(const Vec& yd_raw) const {
        const Vec p = probabilities(yd_raw);
        int best = 0;
        for (int m = 1; m < modes_; ++m)
            if (p[m] > p[best]) best = m;
        return best + 1;
    }

    /// Full-batch gradient-descent fine-tuning against soft labels, keeping the
    /// best-loss iterate. A non-finite loss halves the step size and restarts
    /// from the entry weights, up to five times.
    double train(const Mat& yd_raw, const Mat& soft_labels, int epochs, double step_size) {
        if (yd_raw.rows() != soft_labels.rows() || yd_raw.rows() == 0)
            throw std::invalid_argument("ModeClassifier::train: bad batch");
        Mat X(yd_raw.rows(), in_);
        for (int i = 0; i < yd_raw.rows(); ++i) X.row(i) = scaler_.normalize(yd_raw.row(i)).transpose();

        const Weights entry = weights();
        double lr = step_size;
        for (int attempt = 0; attempt < 5; ++attempt) {
            if (attempt > 0) {
                set_weights(entry);
                lr *= 0.5;
            }
            Weights best = weights();
            double best_loss = loss_of(X, soft_labels);
            bool bad = !std::isfinite(best_loss);
            for (int e = 0; e < epochs && !bad; ++e) {
                const double l = gd_step(X, soft_labels, lr);
                if (!std::isfinite(l)) {
                    bad = true;
                    break;
                }
                if (l < best_loss) {
                    best_loss = l;
                    best = weights();
                }
            }
            if (!bad) {
                const double final_loss = loss_of(X, soft_labels);
                if (std::isfinite(final_loss) && final_loss < best_loss) {
                    best_loss = final_loss;
                } else {
                    set_weights(best);
                }
                return best_loss;
            }
        }
        throw std::runtime_error("ModeClassifier::train: loss stayed non-finite after 5 step-size reductions");
    }

    nlohmann::json to_json() const {
        auto mat = [](const Mat& m) {
            std::vector<std::vector<double>> v(m.rows());
            for (int i = 0; i < m.rows(); ++i) {
                v[i].resize(m.cols());
                for (int j = 0; j < m.cols(); ++j) v[i][j] = m(i, j);
            }
            return v;
        };
        auto vecj = [](const Vec& x) { return std::vector<double>(x.data(), x.data() + x.size()); };
        return {{"schema_version", 1},
                {"input_dim", in_},
                {"modes", modes_},
                {"hidden", hidden_},
                {"scaler_lo", vecj(scaler_.lo)},
                {"scaler_hi", vecj(scaler_.hi)},
                {"W1", mat(W1_)}, {"b1", vecj(b1_)},
                {"W2", mat(W2_)}, {"b2", vecj(b2_)},
                {"W3", mat(W3_)}, {"b3", vecj(b3_)}};
    }

    static ModeClassifier from_json(const nlohmann::json& j) {
        if (j.at("schema_version").get<int>() != 1)
            throw std::runtime_error("ModeClassifier::from_json: unknown schema");
        ModeClassifier c;
        c.in_ = j.at("input_dim").get<int>();
        c.modes_ = j.at("modes").get<int>();
        c.hidden_ = j.at("hidden").get<int>();
        auto vecd = [&](const char* k) {
            const auto v = j.at(k).get<std::vector<double>>();
            return Vec(Eigen::Map<const Vec>(v.data(), static_cast<int>(v.size())));
        };
        auto matd = [&](const char* k) {
            const auto v = j.at(k).get<std::vector<std::vector<double>>>();
            Mat m(static_cast<int>(v.size()), static_cast<int>(v.front().size()));
            for (size_t i = 0; i < v.size(); ++i)
                for (size_t jj = 0; jj < v[i].size(); ++jj) m(static_cast<int>(i), static_cast<int>(jj)) = v[i][jj];
            return m;
        };
        c.scaler_.lo = vecd("scaler_lo");
        c.scaler_.hi = vecd("scaler_hi");
        c.W1_ = matd("W1");
        c.b1_ = vecd("b1");
        c.W2_ = matd("W2");
        c.b2_ = vecd("b2");
        c.W3_ = matd("W3");
        c.b3_ = vecd("b3");
        return c;
    }

  private:
    struct Weights {
        Mat W1, W2, W3;
        Vec b1, b2, b3;
    };
    Weights weights() const { return {W1_, W2_, W3_, b1_, b2_, b3_}; }
    void set_weights(const Weights& w) {
        W1_ = w.W1;
        W2_ = w.W2;
        W3_ = w.W3;
        b1_ = w.b1;
        b2_ = w.b2;
        b3_ = w.b3;
    }

    // X rows are already normalized.
    Mat forward(const Mat& X) const {
        Mat Z1 = (X * W1_.transpose()).rowwise() + b1_.transpose();
        Mat A1 = (omega0_ * Z1).array().sin();
        Mat Z2 = (A1 * W2_.transpose()).rowwise() + b2_.transpose();
        Mat A2 = Z2.array().sin();
        Mat Z3 = (A2 * W3_.transpose()).rowwise() + b3_.transpose();
        return softmax_rows(Z3);
    }

    static Mat softmax_rows(Mat Z) {
        for (int i = 0; i < Z.rows(); ++i) {
            const double m = Z.row(i).maxCoeff();
            Z.row(i) = (Z.row(i).array() - m).exp();
            Z.row(i) /= Z.row(i).sum();
        }
        return Z;
    }

    double loss_of(const Mat& X, const Mat& Y) const {
        const Mat P = forward(X);
        double loss = 0.0;
        for (int i = 0; i < P.rows(); ++i)
            for (int m = 0; m < modes_; ++m)
                if (Y(i, m) > 0.0) loss -= Y(i, m) * std::log(std::max(P(i, m), 1e-300));
        return loss / P.rows();
    }

    double gd_step(const Mat& X, const Mat& Y, double lr) {
        const int K = static_cast<int>(X.rows());
        Mat Z1 = (X * W1_.transpose()).rowwise() + b1_.transpose();
        Mat A1 = (omega0_ * Z1).array().sin();
        Mat Z2 = (A1 * W2_.transpose()).rowwise() + b2_.transpose();
        Mat A2 = Z2.array().sin();
        Mat Z3 = (A2 * W3_.transpose()).rowwise() + b3_.transpose();
        Mat P = softmax_rows(Z3);

        double loss = 0.0;
        for (int i = 0; i < K; ++i)
            for (int m = 0; m < modes_; ++m)
                if (Y(i, m) > 0.0) loss -= Y(i, m) * std::log(std::max(P(i, m), 1e-300));
        loss /= K;

        Mat dZ3 = (P - Y) / K;
        Mat dW3 = dZ3.transpose() * A2;
        Vec db3 = dZ3.colwise().sum();
        Mat dA2 = dZ3 * W3_;
        Mat dZ2 = dA2.array() * Z2.array().cos();
        Mat dW2 = dZ2.transpose() * A1;
        Vec db2 = dZ2.colwise().sum();
        Mat dA1 = dZ2 * W2_;
        Mat dZ1 = dA1.array() * (omega0_ * (omega0_ * Z1).array().cos());
        Mat dW1 = dZ1.transpose() * X;
        Vec db1 = dZ1.colwise().sum();

        W1_ -= lr * dW1;
        b1_ -= lr * db1;
        W2_ -= lr * dW2;
        b2_ -= lr * db2;
        W3_ -= lr * dW3;
        b3_ -= lr * db3;
        return loss;
    }

    FeatureScaler scaler_;
    int in_ = 0;
    int modes_ = 0;
    int hidden_ = 64;
    double omega0_ = 30.0;
    Mat W1_, W2_, W3_;
    Vec b1_, b2_, b3_;
};

}  // namespace pwrmpc
