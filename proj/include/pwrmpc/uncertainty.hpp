#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <vector>

#include "pwrmpc/common.hpp"
#include "pwrmpc/environment.hpp"
#include "pwrmpc/gp.hpp"
#include "pwrmpc/normal.hpp"

namespace pwrmpc {

/// State covariances along a horizon, starting from an exactly known state.
struct CovarianceTrajectory {
    std::vector<Mat> sigmas;
};

struct TightenedFace {
    Vec a;
    double b_orig = 0.0;
    double b_tight = 0.0;
};

/// Per-step half-space lists describing the shrunk state sets.
struct TightenedConstraints {
    std::vector<std::vector<TightenedFace>> steps;
};

/// First-order covariance step: the state covariance maps through the dynamics
/// Jacobian while the residual covariance is injected through B_g. Inputs are
/// deterministic and the state-residual cross term is neglected, so the joint
/// covariance is block-diagonal. The result is symmetrized.
inline Mat propagate_covariance(const Mat& grad_f, const Mat& B_g, const Mat& sigma_x,
                                const Mat& sigma_g) {
    Mat s = grad_f * sigma_x * grad_f.transpose() + B_g * sigma_g * B_g.transpose();
    return 0.5 * (s + s.transpose());
}

/// Shrink one half-space a'x <= b so a Gaussian state with covariance sigma_x
/// centered on the shrunk boundary still satisfies the original constraint with
/// probability p_row: b' = b - Phi^{-1}(p_row) sqrt(a' sigma_x a).
inline double tighten_halfspace(const Vec& a, double b, const Mat& sigma_x, double p_row) {
    if (!(p_row >= 0.5) || !(p_row < 1.0))
        throw std::invalid_argument("tighten_halfspace: need 0.5 <= p_row < 1");
    const double spread = std::sqrt(std::max(0.0, double(a.transpose() * sigma_x * a)));
    return b - normal_quantile(p_row) * spread;
}

/// Everything the offline pass produces for one reference segment.
struct ReferenceUncertainty {
    std::vector<Mat> sigma_g;     // residual covariance per step, k = 0..N-1
    CovarianceTrajectory cov;     // N+1 state covariances, sigma_0 = 0
    TightenedConstraints tight;   // N+1 half-space lists over the state box
};

namespace detail {

inline std::vector<TightenedFace> box_faces(const Box& box) {
    std::vector<TightenedFace> faces;
    const int n = box.dim();
    faces.reserve(2 * n);
    for (int i = 0; i < n; ++i) {
        TightenedFace up;
        up.a = Vec::Zero(n);
        up.a[i] = 1.0;
        up.b_orig = up.b_tight = box.hi[i];
        faces.push_back(up);
        TightenedFace lo;
        lo.a = Vec::Zero(n);
        lo.a[i] = -1.0;
        lo.b_orig = lo.b_tight = -box.lo[i];
        faces.push_back(lo);
    }
    return faces;
}

}  // namespace detail

/// Offline pass along a one-hot mode-labelled reference: query each step's
/// active-mode predictive covariance, roll the covariance recursion from zero
/// along the reference Jacobians, and tighten every face of the state box. The
/// joint level p_x is split uniformly over the faces the covariance actually
/// touches at that step. Tightening is capped at 95% of a face's slack to the
/// box center so late steps never produce an empty set.
inline ReferenceUncertainty precompute_reference_uncertainty(
    const HybridResidualModel& model, const Environment& env, const std::vector<Vec>& x_ref,
    const std::vector<Vec>& u_ref, const std::vector<int>& modes_ref, double p_x) {
    if (x_ref.size() != u_ref.size() + 1 || modes_ref.size() != u_ref.size())
        throw std::invalid_argument("precompute_reference_uncertainty: length mismatch");
    if (!(p_x >= 0.5) || !(p_x < 1.0))
        throw std::invalid_argument("precompute_reference_uncertainty: need 0.5 <= p_x < 1");
    const int N = static_cast<int>(u_ref.size());
    const int k_res = model.residual_dim();

    ReferenceUncertainty out;
    out.cov.sigmas.push_back(Mat::Zero(env.n, env.n));
    out.tight.steps.push_back(detail::box_faces(env.state_box));

    const Vec center = env.state_box.center();
    Mat A, B;
    for (int k = 0; k < N; ++k) {
        const Vec yg = env.split.yg_of(x_ref[k], u_ref[k]);
        Vec mean, var;
        model.observation_moments(modes_ref[k], yg, mean, var);
        Mat sg = Mat::Zero(k_res, k_res);
        for (int j = 0; j < k_res; ++j) sg(j, j) = var[j];
        out.sigma_g.push_back(sg);

        env.jacobian(x_ref[k], u_ref[k], A, B);
        const Mat next = propagate_covariance(A, env.B_g, out.cov.sigmas.back(), sg);
        out.cov.sigmas.push_back(next);

        std::vector<TightenedFace> faces = detail::box_faces(env.state_box);
        int n_f = 0;
        for (const auto& f : faces)
            if (double(f.a.transpose() * next * f.a) > 1e-15) ++n_f;
        if (n_f > 0) {
            const double p_row = 1.0 - (1.0 - p_x) / n_f;
            for (auto& f : faces) {
                const double shrunk = tighten_halfspace(f.a, f.b_orig, next, p_row);
                const double slack = f.b_orig - f.a.dot(center);
                f.b_tight = std::max(shrunk, f.a.dot(center) + 0.05 * slack);
            }
        }
        out.tight.steps.push_back(std::move(faces));
    }
    return out;
}

/// CSV export of shrunk sets: one row per step and face.
inline void save_tightened_csv(const std::string& path, const TightenedConstraints& tight) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_tightened_csv: cannot open " + path);
    const int n = tight.steps.empty() ? 0 : static_cast<int>(tight.steps.front().front().a.size());
    f << "step,face";
    for (int i = 0; i < n; ++i) f << ",a_" << i + 1;
    f << ",b,b_tight\n";
    for (std::size_t k = 0; k < tight.steps.size(); ++k) {
        for (std::size_t j = 0; j < tight.steps[k].size(); ++j) {
            const auto& face = tight.steps[k][j];
            f << k << ',' << j;
            for (int i = 0; i < n; ++i) f << ',' << format_double(face.a[i]);
            f << ',' << format_double(face.b_orig) << ',' << format_double(face.b_tight) << '\n';
        }
    }
}

}  // namespace pwrmpc
