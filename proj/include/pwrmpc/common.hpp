#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pwrmpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Axis-aligned box, used for state and input constraint sets.
struct Box {
    Vec lo;
    Vec hi;

    Box() = default;
    Box(Vec l, Vec h) : lo(std::move(l)), hi(std::move(h)) {
        if (lo.size() != hi.size()) throw std::invalid_argument("Box: lo/hi size mismatch");
        for (int i = 0; i < lo.size(); ++i)
            if (lo[i] > hi[i]) throw std::invalid_argument("Box: lo > hi on dimension " + std::to_string(i));
    }

    int dim() const { return static_cast<int>(lo.size()); }
    Vec center() const { return 0.5 * (lo + hi); }
    Vec width() const { return hi - lo; }

    bool contains(const Vec& x, double tol = 0.0) const {
        for (int i = 0; i < lo.size(); ++i)
            if (x[i] < lo[i] - tol || x[i] > hi[i] + tol) return false;
        return true;
    }

    /// Number of box faces violated by more than `tol`.
    int violated_faces(const Vec& x, double tol) const {
        int v = 0;
        for (int i = 0; i < lo.size(); ++i) {
            if (x[i] < lo[i] - tol) ++v;
            if (x[i] > hi[i] + tol) ++v;
        }
        return v;
    }

    Vec clamp(Vec x) const {
        for (int i = 0; i < lo.size(); ++i) x[i] = std::min(std::max(x[i], lo[i]), hi[i]);
        return x;
    }
};

/// Deterministic RNG used everywhere randomness is needed. Gaussian draws go
/// through an explicit Box-Muller transform so streams are identical across
/// standard library implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform() {
        // 53-bit mantissa uniform in [0, 1)
        return (gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    std::uint64_t next_raw() { return gen_(); }

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// Feature extraction z = (x, u) -> (y^g, y^delta). Both experiment
/// environments use linear selectors, so the split is stored as matrices and
/// exact Jacobians are available to the solver.
struct FeatureSplit {
    Mat Gx, Gu;  // y^g    = Gx * x + Gu * u
    Mat Dx, Du;  // y^delta = Dx * x + Du * u

    Vec yg_of(const Vec& x, const Vec& u) const { return Gx * x + Gu * u; }
    Vec yd_of(const Vec& x, const Vec& u) const { return Dx * x + Du * u; }

    int yg_dim() const { return static_cast<int>(Gx.rows()); }
    int yd_dim() const { return static_cast<int>(Dx.rows()); }

    static FeatureSplit from_state_selectors(const Mat& gx, const Mat& dx, int m_inputs) {
        FeatureSplit s;
        s.Gx = gx;
        s.Gu = Mat::Zero(gx.rows(), m_inputs);
        s.Dx = dx;
        s.Du = Mat::Zero(dx.rows(), m_inputs);
        return s;
    }

    /// Both feature maps pick plain state coordinates by index.
    static FeatureSplit from_state_indices(const std::vector<int>& gx_idx, const std::vector<int>& dx_idx,
                                           int n_states, int m_inputs) {
        auto selector = [&](const std::vector<int>& idx) {
            Mat s = Mat::Zero(static_cast<int>(idx.size()), n_states);
            for (std::size_t i = 0; i < idx.size(); ++i) s(static_cast<int>(i), idx[i]) = 1.0;
            return s;
        };
        return from_state_selectors(selector(gx_idx), selector(dx_idx), m_inputs);
    }
};

inline std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> out(n);
    if (n == 1) {
        out[0] = a;
        return out;
    }
    for (int i = 0; i < n; ++i) out[i] = a + (b - a) * i / (n - 1);
    return out;
}

}  // namespace pwrmpc
