#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "pwrmpc/common.hpp"
#include "pwrmpc/gp.hpp"
#include "pwrmpc/qp.hpp"
#include "pwrmpc/siren.hpp"
#include "pwrmpc/uncertainty.hpp"

namespace pwrmpc {

enum class SolveStatus { optimal, infeasible, max_iter };

inline const char* to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::optimal: return "optimal";
        case SolveStatus::infeasible: return "infeasible";
        default: return "max_iter";
    }
}

/// How the residual term enters the predicted dynamics.
enum class ResidualParam {
    nominal,  // no residual
    exo,      // frozen per-step means, external to the optimization
    endo      // per-step mode's model mean evaluated inside the rollout
};

/// Finite-horizon tracking problem over an input sequence.
struct OcpSpec {
    int N = 0;
    Mat Q, R, P;
    std::vector<Vec> x_ref;  // N+1
    std::vector<Vec> u_ref;  // N
    Box input_box;
    const TightenedConstraints* tight = nullptr;  // N+1 step lists; steps 1..N enforced
    Vec x0;

    std::function<Vec(const Vec&, const Vec&)> f;
    std::function<void(const Vec&, const Vec&, Mat&, Mat&)> jacobian;
    Mat B_g;
    FeatureSplit split;

    ResidualParam param = ResidualParam::nominal;
    const HybridResidualModel* model = nullptr;  // endo
    std::vector<int> modes_ref;                  // endo: N+1 labels, first N used in dynamics
    std::vector<Vec> mu_g_ref;                   // exo: N frozen residual means

    // Optional per-step membership polytopes over y^delta (rows may be empty).
    std::vector<Mat> member_H;  // N+1
    std::vector<Vec> member_b;  // N+1

    void validate() const {
        if (N < 1) throw std::invalid_argument("OcpSpec: N >= 1 required");
        if (x_ref.size() != static_cast<std::size_t>(N + 1) || u_ref.size() != static_cast<std::size_t>(N))
            throw std::invalid_argument("OcpSpec: reference length mismatch");
        if (param == ResidualParam::endo &&
            (model == nullptr || modes_ref.size() < static_cast<std::size_t>(N)))
            throw std::invalid_argument("OcpSpec: endogenous parametrization needs model and modes");
        if (param == ResidualParam::exo && mu_g_ref.size() != static_cast<std::size_t>(N))
            throw std::invalid_argument("OcpSpec: exogenous parametrization needs N residual means");
        if (!member_H.empty() && (member_H.size() != static_cast<std::size_t>(N + 1) ||
                                  member_b.size() != static_cast<std::size_t>(N + 1)))
            throw std::invalid_argument("OcpSpec: membership lists must cover steps 0..N");
    }
};

struct SolveResult {
    std::vector<Vec> inputs;
    std::vector<Vec> means;
    double objective = 0.0;
    SolveStatus status = SolveStatus::max_iter;
    double wall_ms = 0.0;
    int iterations = 0;
};

/// One row of the optional per-iteration solver trace.
struct SqpTraceRow {
    int iteration = 0;
    double objective = 0.0;
    double step_norm = 0.0;
    double kkt = 0.0;
    double violation = 0.0;
    int active_rows = 0;
};

namespace detail {

struct Rollout {
    std::vector<Vec> states;   // N+1
    std::vector<Vec> g_mean;   // N, residual dim
    std::vector<Mat> g_grad;   // N, residual dim x yg dim
    double objective = 0.0;
};

inline Rollout roll(const OcpSpec& spec, const std::vector<Vec>& inputs, bool need_grad) {
    const int N = spec.N;
    const int k_res = static_cast<int>(spec.B_g.cols());
    Rollout r;
    r.states.reserve(N + 1);
    r.states.push_back(spec.x0);
    for (int k = 0; k < N; ++k) {
        const Vec& x = r.states.back();
        const Vec& u = inputs[k];
        Vec gm = Vec::Zero(k_res);
        Mat gg = Mat::Zero(k_res, spec.split.yg_dim());
        if (spec.param == ResidualParam::exo) {
            gm = spec.mu_g_ref[k];
        } else if (spec.param == ResidualParam::endo) {
            const Vec yg = spec.split.yg_of(x, u);
            if (need_grad)
                spec.model->predict_mean_grad(spec.modes_ref[k], yg, gm, gg);
            else {
                Vec var;
                spec.model->predict_hybrid(spec.modes_ref[k], yg, gm, var);
            }
        }
        r.g_mean.push_back(gm);
        r.g_grad.push_back(gg);
        r.states.push_back(spec.f(x, u) + spec.B_g * gm);
    }
    r.objective = 0.0;
    for (int k = 0; k < N; ++k) {
        const Vec ex = r.states[k] - spec.x_ref[k];
        const Vec eu = inputs[k] - spec.u_ref[k];
        r.objective += ex.dot(spec.Q * ex) + eu.dot(spec.R * eu);
    }
    const Vec eN = r.states[N] - spec.x_ref[N];
    r.objective += eN.dot(spec.P * eN);
    return r;
}

}  // namespace detail

/// Objective of a given input plan under the spec's own predicted dynamics.
inline double plan_objective(const OcpSpec& spec, const std::vector<Vec>& inputs) {
    return detail::roll(spec, inputs, false).objective;
}

/// Sequential quadratic programming on the condensed single-shooting problem.
/// Each major iteration linearizes the rollout (dynamics plus residual-mean
/// terms), solves a box and half-space constrained QP with a Gauss-Newton
/// Hessian, and backtracks on the true objective. Convergence is declared on a
/// small step, or on a small KKT residual carried by the previous multipliers.
inline SolveResult solve_ocp_nlp(const OcpSpec& spec, std::vector<SqpTraceRow>* trace = nullptr) {
    spec.validate();
    const auto t_start = std::chrono::steady_clock::now();
    const int N = spec.N;
    const int m = static_cast<int>(spec.input_box.dim());
    const int n = static_cast<int>(spec.x0.size());
    const int nv = N * m;

    std::vector<Vec> U(spec.u_ref);
    for (auto& u : U) u = spec.input_box.clamp(u);
    detail::Rollout ro = detail::roll(spec, U, true);

    SolveResult res;
    res.status = SolveStatus::max_iter;
    Vec lambda_prev;
    bool have_lambda = false;

    Mat A(n, n), B(n, m);
    int it = 0;
    for (it = 1; it <= 50; ++it) {
        // Sensitivities of each rolled state to the stacked input vector.
        std::vector<Mat> S(N + 1, Mat::Zero(n, nv));
        for (int k = 0; k < N; ++k) {
            spec.jacobian(ro.states[k], U[k], A, B);
            Mat Atot = A;
            Mat Btot = B;
            if (spec.param == ResidualParam::endo) {
                Atot += spec.B_g * ro.g_grad[k] * spec.split.Gx;
                Btot += spec.B_g * ro.g_grad[k] * spec.split.Gu;
            }
            S[k + 1] = Atot * S[k];
            S[k + 1].middleCols(k * m, m) += Btot;
        }

        // Gauss-Newton model of the tracking objective.
        Mat H = Mat::Zero(nv, nv);
        Vec g = Vec::Zero(nv);
        for (int k = 1; k < N; ++k) {
            const Vec e = ro.states[k] - spec.x_ref[k];
            H += 2.0 * S[k].transpose() * spec.Q * S[k];
            g += 2.0 * S[k].transpose() * (spec.Q * e);
        }
        {
            const Vec e = ro.states[N] - spec.x_ref[N];
            H += 2.0 * S[N].transpose() * spec.P * S[N];
            g += 2.0 * S[N].transpose() * (spec.P * e);
        }
        for (int k = 0; k < N; ++k) {
            H.block(k * m, k * m, m, m) += 2.0 * spec.R;
            g.segment(k * m, m) += 2.0 * spec.R * (U[k] - spec.u_ref[k]);
        }
        H = 0.5 * (H + H.transpose());

        // Constraint rows on the stacked input step.
        std::vector<Vec> rows;
        std::vector<double> rhs;
        auto add_row = [&](const Vec& a, double b) {
            rows.push_back(a);
            rhs.push_back(b);
        };
        for (int k = 0; k < N; ++k) {
            for (int j = 0; j < m; ++j) {
                Vec up = Vec::Zero(nv);
                up[k * m + j] = 1.0;
                add_row(up, spec.input_box.hi[j] - U[k][j]);
                add_row(-up, U[k][j] - spec.input_box.lo[j]);
            }
        }
        if (spec.tight != nullptr) {
            for (int k = 1; k <= N; ++k) {
                for (const auto& face : spec.tight->steps[k])
                    add_row(S[k].transpose() * face.a, face.b_tight - face.a.dot(ro.states[k]));
            }
        }
        bool constant_row_violated = false;
        if (!spec.member_H.empty()) {
            for (int k = 0; k <= N; ++k) {
                if (spec.member_H[k].rows() == 0) continue;
                const Vec u_here = k < N ? U[k] : Vec(Vec::Zero(m));
                const Vec yd = spec.split.Dx * ro.states[k] + spec.split.Du * u_here;
                Mat J = spec.member_H[k] * spec.split.Dx * S[k];
                if (k < N) {
                    Mat Ek = Mat::Zero(m, nv);
                    Ek.middleCols(k * m, m).setIdentity();
                    J += spec.member_H[k] * spec.split.Du * Ek;
                }
                const Vec resid = spec.member_b[k] - spec.member_H[k] * yd;
                for (int r = 0; r < J.rows(); ++r) {
                    const Vec a = J.row(r).transpose();
                    if (a.cwiseAbs().maxCoeff() < 1e-14) {
                        if (resid[r] < -1e-9) constant_row_violated = true;
                        continue;
                    }
                    add_row(a, resid[r]);
                }
            }
        }
        if (constant_row_violated) {
            res.status = SolveStatus::infeasible;
            break;
        }

        const int nr = static_cast<int>(rows.size());
        Mat C(nr, nv);
        Vec d(nr);
        for (int i = 0; i < nr; ++i) {
            C.row(i) = rows[i].transpose();
            d[i] = rhs[i];
        }

        const double violation = nr > 0 ? std::max(0.0, -d.minCoeff()) : 0.0;

        // KKT residual at the fresh linearization using last iteration's
        // multipliers: exact for affine problems, a cheap certificate here.
        if (have_lambda && lambda_prev.size() == nr) {
            const double stat =
                (g + C.transpose() * lambda_prev).cwiseAbs().maxCoeff() / (1.0 + g.cwiseAbs().maxCoeff());
            if (std::max(stat, violation) < 1e-6) {
                res.status = SolveStatus::optimal;
                --it;
                break;
            }
        }

        const QpResult qp = solve_qp(H, g, C, d);
        if (qp.status == QpStatus::infeasible) {
            res.status = SolveStatus::infeasible;
            break;
        }
        lambda_prev = qp.multipliers;
        have_lambda = true;
        const Vec& delta = qp.x;
        const double step_norm = delta.cwiseAbs().maxCoeff();

        if (trace != nullptr) {
            SqpTraceRow row;
            row.iteration = it;
            row.objective = ro.objective;
            row.step_norm = step_norm;
            row.kkt = (g + C.transpose() * lambda_prev).cwiseAbs().maxCoeff() /
                      (1.0 + g.cwiseAbs().maxCoeff());
            row.violation = violation;
            row.active_rows = static_cast<int>((qp.multipliers.array() > 1e-12).count());
            trace->push_back(row);
        }

        if (step_norm < 1e-8) {
            res.status = violation < 1e-6 ? SolveStatus::optimal : SolveStatus::max_iter;
            break;
        }

        // Backtracking line search on the true objective.
        const double slope = g.dot(delta);
        double t = 1.0;
        bool accepted = false;
        detail::Rollout cand;
        std::vector<Vec> Ucand(N, Vec(m));
        for (int ls = 0; ls < 25; ++ls) {
            for (int k = 0; k < N; ++k) Ucand[k] = U[k] + t * delta.segment(k * m, m);
            cand = detail::roll(spec, Ucand, true);
            if (std::isfinite(cand.objective) &&
                (cand.objective <= ro.objective + 1e-4 * t * slope ||
                 (violation > 1e-6 && std::isfinite(cand.objective)))) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) {
            res.status = violation < 1e-6 ? SolveStatus::optimal : SolveStatus::max_iter;
            break;
        }
        U = Ucand;
        ro = cand;
    }
    if (it > 50) it = 50;

    res.inputs = U;
    res.means = ro.states;
    res.objective = ro.objective;
    res.iterations = it;
    res.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start).count();
    return res;
}

/// Hard labels along a reference segment: one mode per step k = 0..N.
inline std::vector<int> build_reference_params(const ModeClassifier& classifier,
                                               const std::vector<Vec>& x_ref,
                                               const std::vector<Vec>& u_ref, const FeatureSplit& split) {
    std::vector<int> modes;
    modes.reserve(x_ref.size());
    for (std::size_t k = 0; k < x_ref.size(); ++k) {
        const Vec u = k < u_ref.size() ? u_ref[k] : Vec(Vec::Zero(split.Du.cols()));
        modes.push_back(classifier.hard_label(split.yd_of(x_ref[k], u)));
    }
    return modes;
}

/// Baseline labelling: the first reference point's mode is held on all steps.
inline std::vector<int> build_fixed_params(const ModeClassifier& classifier,
                                           const std::vector<Vec>& x_ref, const std::vector<Vec>& u_ref,
                                           const FeatureSplit& split) {
    const Vec u0 = u_ref.empty() ? Vec(Vec::Zero(split.Du.cols())) : u_ref.front();
    const int mode = classifier.hard_label(split.yd_of(x_ref.front(), u0));
    return std::vector<int>(x_ref.size(), mode);
}

/// Frozen residual means along the reference for the exogenous controller.
inline std::vector<Vec> build_exo_residuals(const HybridResidualModel& model,
                                            const std::vector<Vec>& x_ref, const std::vector<Vec>& u_ref,
                                            const std::vector<int>& modes_ref, const FeatureSplit& split) {
    std::vector<Vec> mu;
    mu.reserve(u_ref.size());
    for (std::size_t k = 0; k < u_ref.size(); ++k) {
        Vec mean, var;
        model.predict_hybrid(modes_ref[k], split.yg_of(x_ref[k], u_ref[k]), mean, var);
        mu.push_back(mean);
    }
    return mu;
}

/// The exogenous controller: residual means frozen along the reference.
inline SolveResult solve_nlp_exo(OcpSpec spec) {
    spec.param = ResidualParam::exo;
    return solve_ocp_nlp(spec);
}

/// The endogenous controller: model mean and gradient live inside the rollout.
inline SolveResult solve_nlp_endo(OcpSpec spec) {
    spec.param = ResidualParam::endo;
    return solve_ocp_nlp(spec);
}

}  // namespace pwrmpc
