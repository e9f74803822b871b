#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Cholesky>

#include "pwrmpc/common.hpp"

namespace pwrmpc {

enum class QpStatus { optimal, infeasible, max_iter };

struct QpResult {
    Vec x;
    Vec multipliers;
    QpStatus status = QpStatus::max_iter;
    int iterations = 0;
    double objective = 0.0;
};

/// Dual active-set solver for the strictly convex program
///     min 1/2 x'Hx + g'x   subject to   Cx <= d.
/// Starting from the unconstrained minimum, the most violated constraint is
/// driven into the active set along the dual ascent direction; multipliers
/// stay nonnegative throughout, so the first primal-feasible iterate is
/// optimal. An empty dual ascent direction with no droppable constraint
/// certifies primal infeasibility.
inline QpResult solve_qp(const Mat& H, const Vec& g, const Mat& C, const Vec& d, int max_iter = 0) {
    const int n = static_cast<int>(H.rows());
    const int p = static_cast<int>(C.rows());
    if (H.cols() != n || g.size() != n || (p > 0 && C.cols() != n) || d.size() != p)
        throw std::invalid_argument("solve_qp: dimension mismatch");
    Eigen::LLT<Mat> llt(H);
    if (llt.info() != Eigen::Success) throw std::invalid_argument("solve_qp: H is not positive definite");
    if (max_iter <= 0) max_iter = 50 + 10 * p;

    const double inf = std::numeric_limits<double>::infinity();
    QpResult res;
    res.x = llt.solve(-g);
    res.multipliers = Vec::Zero(p);

    std::vector<int> active;
    Vec lambda(0);

    auto slack_tol = [&](int i) { return 1e-9 * (1.0 + std::abs(d[i])); };

    for (res.iterations = 0; res.iterations < max_iter; ++res.iterations) {
        // Most violated constraint, or done.
        int worst = -1;
        double worst_s = 0.0;
        for (int i = 0; i < p; ++i) {
            const double s = C.row(i).dot(res.x) - d[i];
            if (s > slack_tol(i) && s > worst_s) {
                worst_s = s;
                worst = i;
            }
        }
        if (worst < 0) {
            for (std::size_t j = 0; j < active.size(); ++j) res.multipliers[active[j]] = lambda[j];
            res.status = QpStatus::optimal;
            res.objective = 0.5 * res.x.dot(H * res.x) + g.dot(res.x);
            return res;
        }

        const Vec c = C.row(worst).transpose();
        double lam_new = 0.0;
        bool placed = false;
        while (!placed && res.iterations < max_iter) {
            const int k = static_cast<int>(active.size());
            const Vec hic = llt.solve(c);
            Vec r(k), z(n);
            if (k > 0) {
                Mat Nt(n, k);
                for (int j = 0; j < k; ++j) Nt.col(j) = C.row(active[j]).transpose();
                const Mat HiN = llt.solve(Nt);
                Mat M = Nt.transpose() * HiN;
                M.diagonal().array() += 1e-12 * (1.0 + M.diagonal().cwiseAbs().maxCoeff());
                r = M.ldlt().solve(Nt.transpose() * hic);
                z = -llt.solve(c - Nt * r);
            } else {
                z = -hic;
            }

            const double s_cur = c.dot(res.x) - d[worst];
            // dir = -|c - N'r|^2 in the H-inverse norm; compare against the
            // constraint's own scale so a dependent normal registers as zero.
            const double dir = c.dot(z);
            const double dir_tol = 1e-10 * (1.0 + c.dot(hic));
            const double t_primal = dir < -dir_tol ? -s_cur / dir : inf;
            double t_dual = inf;
            int blocker = -1;
            for (int j = 0; j < k; ++j) {
                if (r[j] > 1e-14 && lambda[j] / r[j] < t_dual) {
                    t_dual = lambda[j] / r[j];
                    blocker = j;
                }
            }
            const double t = std::min(t_primal, t_dual);
            if (t == inf) {
                res.status = QpStatus::infeasible;
                for (std::size_t j = 0; j < active.size(); ++j) res.multipliers[active[j]] = lambda[j];
                res.objective = 0.5 * res.x.dot(H * res.x) + g.dot(res.x);
                return res;
            }

            res.x += t * z;
            for (int j = 0; j < k; ++j) lambda[j] -= t * r[j];
            lam_new += t;

            if (t_primal <= t_dual) {
                active.push_back(worst);
                Vec grown(k + 1);
                grown.head(k) = lambda;
                grown[k] = lam_new;
                lambda = grown;
                placed = true;
            } else {
                active.erase(active.begin() + blocker);
                Vec shrunk(k - 1);
                int w = 0;
                for (int j = 0; j < k; ++j)
                    if (j != blocker) shrunk[w++] = lambda[j];
                lambda = shrunk;
                ++res.iterations;
            }
        }
    }

    for (std::size_t j = 0; j < active.size(); ++j) res.multipliers[active[j]] = lambda[j];
    res.status = QpStatus::max_iter;
    res.objective = 0.5 * res.x.dot(H * res.x) + g.dot(res.x);
    return res;
}

}  // namespace pwrmpc
