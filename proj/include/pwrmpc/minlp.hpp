#pragma once

#include <limits>
#include <stdexcept>
#include <vector>

#include "pwrmpc/common.hpp"
#include "pwrmpc/gp.hpp"
#include "pwrmpc/ocp.hpp"

namespace pwrmpc {

/// Polytopic membership set of one mode over the classification features.
struct ModeRegion {
    Mat H;
    Vec b;

    bool contains(const Vec& yd, double tol = 1e-9) const {
        for (int r = 0; r < H.rows(); ++r)
            if (H.row(r).dot(yd) > b[r] + tol) return false;
        return true;
    }
};

/// Band partition along one coordinate: thresholds t_1 < ... < t_{M-1} produce
/// M closed slabs whose shared boundaries belong to both neighbours.
inline std::vector<ModeRegion> band_regions(int coord, const std::vector<double>& thresholds,
                                            int yd_dim) {
    std::vector<ModeRegion> regions;
    const int M = static_cast<int>(thresholds.size()) + 1;
    for (int m = 0; m < M; ++m) {
        const bool has_lo = m > 0;
        const bool has_hi = m < M - 1;
        ModeRegion reg;
        reg.H = Mat::Zero(has_lo + has_hi, yd_dim);
        reg.b = Vec::Zero(has_lo + has_hi);
        int r = 0;
        if (has_lo) {
            reg.H(r, coord) = -1.0;
            reg.b[r] = -thresholds[m - 1];
            ++r;
        }
        if (has_hi) {
            reg.H(r, coord) = 1.0;
            reg.b[r] = thresholds[m];
        }
        regions.push_back(std::move(reg));
    }
    return regions;
}

struct MinlpOptions {
    bool prune = true;
    int max_horizon = 6;
};

struct MinlpResult {
    SolveResult result;
    std::vector<int> sequence;
    int subproblems_solved = 0;
    int candidates_considered = 0;
};

namespace detail {

// Axis-aligned interval over the classification features.
struct YdBox {
    Vec lo, hi;
};

inline YdBox yd_range_of_box(const Mat& Dx, const Box& state_box) {
    const int q = static_cast<int>(Dx.rows());
    YdBox out;
    out.lo = Vec(q);
    out.hi = Vec(q);
    for (int i = 0; i < q; ++i) {
        double lo = 0.0, hi = 0.0;
        for (int j = 0; j < Dx.cols(); ++j) {
            const double c = Dx(i, j);
            lo += c * (c > 0.0 ? state_box.lo[j] : state_box.hi[j]);
            hi += c * (c > 0.0 ? state_box.hi[j] : state_box.lo[j]);
        }
        out.lo[i] = lo;
        out.hi[i] = hi;
    }
    return out;
}

// A region is reachable at a step when every row admits some point of the
// step's interval: a necessary condition, so pruning on it is sound.
inline bool region_touches(const ModeRegion& reg, const YdBox& box) {
    for (int r = 0; r < reg.H.rows(); ++r) {
        double lo = 0.0;
        for (int j = 0; j < reg.H.cols(); ++j) {
            const double c = reg.H(r, j);
            lo += c * (c > 0.0 ? box.lo[j] : box.hi[j]);
        }
        if (lo > reg.b[r] + 1e-9) return false;
    }
    return true;
}

}  // namespace detail

/// Globally optimal discrete assignment by exhaustive enumeration: every mode
/// sequence surviving the x0-membership collapse and interval-reachability
/// pruning is solved as an endogenous NLP with per-step membership rows; the
/// reference sequence is always kept as a candidate. The minimum-objective
/// feasible result wins, ties resolving to the lexicographically smallest
/// sequence.
inline MinlpResult solve_minlp(const OcpSpec& base, const HybridResidualModel& model,
                               const std::vector<ModeRegion>& regions,
                               const std::vector<int>& ref_sequence, const Vec& yd_step_bound,
                               const Box& state_box, const MinlpOptions& options = {}) {
    const int N = base.N;
    const int M = static_cast<int>(regions.size());
    if (N > options.max_horizon) throw std::invalid_argument("solve_minlp: horizon above configured cap");
    if (base.split.Du.cwiseAbs().maxCoeff() > 0.0)
        throw std::invalid_argument("solve_minlp: input-dependent membership features unsupported");
    if (!ref_sequence.empty() && ref_sequence.size() != static_cast<std::size_t>(N + 1))
        throw std::invalid_argument("solve_minlp: reference sequence length mismatch");

    const Vec yd0 = base.split.Dx * base.x0;
    const detail::YdBox global = detail::yd_range_of_box(base.split.Dx, state_box);

    // reach[k][m]: region m touches the step-k reachable interval.
    std::vector<std::vector<bool>> reach(N + 1, std::vector<bool>(M, true));
    if (options.prune) {
        detail::YdBox cur{yd0, yd0};
        for (int k = 0; k <= N; ++k) {
            for (int m = 0; m < M; ++m) reach[k][m] = detail::region_touches(regions[m], cur);
            cur.lo = (cur.lo - yd_step_bound).cwiseMax(global.lo);
            cur.hi = (cur.hi + yd_step_bound).cwiseMin(global.hi);
        }
    } else {
        for (int m = 0; m < M; ++m) reach[0][m] = regions[m].contains(yd0);
    }

    MinlpResult out;
    out.result.status = SolveStatus::infeasible;
    double best = std::numeric_limits<double>::infinity();

    std::vector<int> seq(N + 1, 1);
    bool done = false;
    while (!done) {
        bool candidate = true;
        for (int k = 0; k <= N && candidate; ++k) candidate = reach[k][seq[k] - 1];
        if (!candidate && seq == ref_sequence) candidate = true;
        ++out.candidates_considered;

        if (candidate) {
            OcpSpec sub = base;
            sub.param = ResidualParam::endo;
            sub.model = &model;
            sub.modes_ref = seq;
            sub.member_H.resize(N + 1);
            sub.member_b.resize(N + 1);
            for (int k = 0; k <= N; ++k) {
                sub.member_H[k] = regions[seq[k] - 1].H;
                sub.member_b[k] = regions[seq[k] - 1].b;
            }
            const SolveResult r = solve_ocp_nlp(sub);
            ++out.subproblems_solved;
            if (r.status == SolveStatus::optimal && r.objective < best) {
                best = r.objective;
                out.result = r;
                out.sequence = seq;
            }
        }

        // Lexicographic odometer over mode ids.
        int pos = N;
        while (pos >= 0) {
            if (seq[pos] < M) {
                ++seq[pos];
                break;
            }
            seq[pos] = 1;
            --pos;
        }
        done = pos < 0;
    }
    return out;
}

}  // namespace pwrmpc
