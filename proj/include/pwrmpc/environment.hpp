#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pwrmpc/common.hpp"
#include "pwrmpc/data.hpp"

namespace pwrmpc {

/// Ground-truth simulated plant: nominal model, per-mode residual curves over
/// the regression features, a (possibly run-dependent) region map over the
/// classification features, and per-mode process noise entering through B_g.
struct Environment {
    std::string name;
    int n = 0;
    int m = 0;
    double dt = 1.0;
    std::function<Vec(const Vec&, const Vec&)> f;
    std::function<void(const Vec&, const Vec&, Mat&, Mat&)> jacobian;
    std::vector<std::function<double(const Vec&)>> residual_modes;
    Vec noise_vars;
    std::function<int(const Vec&, int)> region_map;
    FeatureSplit split;
    Mat B_g;
    Box state_box;
    Box input_box;
    Mat Q;
    Mat R;
    Vec yd_step_bound;

    int mode_count() const { return static_cast<int>(residual_modes.size()); }

    double true_residual(int mode, const Vec& yg) const {
        if (mode < 1 || mode > mode_count()) throw std::invalid_argument("Environment: mode out of range");
        return residual_modes[mode - 1](yg);
    }

    /// One step of the true plant: x+ = f(x,u) + B_g (g^m(y^g) + w) with the
    /// active mode read off the region map and w ~ N(0, noise_vars[m]).
    Vec step_truth(const Vec& x, const Vec& u, int run_index, Rng& rng) const {
        const Vec yg = split.yg_of(x, u);
        const Vec yd = split.yd_of(x, u);
        const int mode = region_map(yd, run_index);
        const double w = rng.gaussian(0.0, std::sqrt(noise_vars[mode - 1]));
        return f(x, u) + B_g.col(0) * (true_residual(mode, yg) + w);
    }
};

/// Planar system with direct discrete dynamics x+ = Ax + Bu, A = [[1,0],[0,-1]],
/// B = I. Three residual modes live in horizontal bands of x2 and disturb x1.
inline Environment lti_env() {
    Environment env;
    env.name = "lti";
    env.n = 2;
    env.m = 2;
    env.dt = 1.0;

    Mat A(2, 2), B(2, 2);
    A << 1.0, 0.0, 0.0, -1.0;
    B.setIdentity();
    env.f = [A, B](const Vec& x, const Vec& u) { return Vec(A * x + B * u); };
    env.jacobian = [A, B](const Vec&, const Vec&, Mat& Ao, Mat& Bo) {
        Ao = A;
        Bo = B;
    };

    env.residual_modes = {
        [](const Vec& yg) { return 0.4 * std::sin(1.5 * yg[0]); },
        [](const Vec& yg) { return -0.5 + 0.25 * yg[0]; },
        [](const Vec& yg) { return 0.5 * std::cos(yg[0]); },
    };
    env.noise_vars = Vec(3);
    env.noise_vars << 0.2, 0.15, 0.25;
    env.region_map = [](const Vec& yd, int) {
        const double x2 = yd[1];
        if (x2 < 1.3) return 1;
        if (x2 < 2.6) return 2;
        return 3;
    };
    env.split = FeatureSplit::from_state_indices({1}, {0, 1}, 2, 2);
    env.B_g = Mat::Zero(2, 1);
    env.B_g(0, 0) = 1.0;

    env.state_box.lo = Vec(2);
    env.state_box.hi = Vec(2);
    env.state_box.lo << 0.0, -0.05;
    env.state_box.hi << 4.0, 4.0;
    env.input_box.lo = Vec::Constant(2, -5.0);
    env.input_box.hi = Vec::Constant(2, 5.0);

    env.Q = 50.0 * Mat::Identity(2, 2);
    env.R = 0.01 * Mat::Identity(2, 2);

    // Per-step motion of y^delta = (x1, x2) under planned dynamics: x1 moves by
    // u1 plus a model residual (curves stay within +-0.5, margin doubled), x2
    // by -2 x2 + u2 over the state box.
    env.yd_step_bound = Vec(2);
    env.yd_step_bound << 5.0 + 1.0, 2.0 * 4.0 + 5.0;
    return env;
}

/// Planar quadrotor with explicit Euler dynamics at dt = 0.05 s. The residual
/// acts on the p_x position row only and is driven by the angular velocity;
/// the region map tiles the x-z workspace into three vertical bands, with a
/// rectangular sub-region cycling its assignment after `shift_after_run`.
inline Environment quad2d_env(int shift_after_run = 3) {
    Environment env;
    env.name = "quad2d";
    env.n = 6;
    env.m = 2;
    env.dt = 0.05;

    const double mass = 0.027;
    const double arm = 0.0397;
    const double inertia = 1.4e-5;
    const double grav = 9.81;
    const double dt = env.dt;

    env.f = [=](const Vec& x, const Vec& u) {
        const double thrust = u[0] + u[1];
        Vec xn(6);
        xn[0] = x[0] + dt * x[1];
        xn[1] = x[1] - dt * thrust * std::sin(x[4]) / mass;
        xn[2] = x[2] + dt * x[3];
        xn[3] = x[3] + dt * (thrust * std::cos(x[4]) / mass - grav);
        xn[4] = x[4] + dt * x[5];
        xn[5] = x[5] + dt * arm * (u[1] - u[0]) / inertia;
        return xn;
    };
    env.jacobian = [=](const Vec& x, const Vec& u, Mat& A, Mat& B) {
        const double thrust = u[0] + u[1];
        A = Mat::Identity(6, 6);
        A(0, 1) = dt;
        A(1, 4) = -dt * thrust * std::cos(x[4]) / mass;
        A(2, 3) = dt;
        A(3, 4) = -dt * thrust * std::sin(x[4]) / mass;
        A(4, 5) = dt;
        B = Mat::Zero(6, 2);
        B(1, 0) = -dt * std::sin(x[4]) / mass;
        B(1, 1) = B(1, 0);
        B(3, 0) = dt * std::cos(x[4]) / mass;
        B(3, 1) = B(3, 0);
        B(5, 0) = -dt * arm / inertia;
        B(5, 1) = dt * arm / inertia;
    };

    // Smooth curves over the angular velocity, scaled so the per-step position
    // offset stays within +-0.015 m (0.3 m/s at dt = 0.05).
    env.residual_modes = {
        [](const Vec& yg) { return 0.012 * std::sin(1.5 * yg[0]); },
        [](const Vec& yg) { return -0.015 + 0.0075 * yg[0]; },
        [](const Vec& yg) { return 0.015 * std::cos(yg[0]); },
    };
    env.noise_vars = Vec(3);
    env.noise_vars << 9e-6, 6e-6, 1.2e-5;

    env.region_map = [shift_after_run](const Vec& yd, int run_index) {
        const double px = yd[0];
        const double pz = yd[1];
        int mode;
        if (px < -0.45)
            mode = 1;
        else if (px < 0.45)
            mode = 2;
        else
            mode = 3;
        if (run_index > shift_after_run && px >= -0.45 && pz >= 1.2) mode = mode % 3 + 1;
        return mode;
    };
    env.split = FeatureSplit::from_state_indices({5}, {0, 2}, 6, 2);
    env.B_g = Mat::Zero(6, 1);
    env.B_g(0, 0) = 1.0;

    env.state_box.lo = Vec(6);
    env.state_box.hi = Vec(6);
    env.state_box.lo << -1.4, -3.0, 0.3, -3.0, -0.6, -3.0;
    env.state_box.hi << 1.4, 3.0, 2.1, 3.0, 0.6, 3.0;
    env.input_box.lo = Vec::Constant(2, 0.0);
    env.input_box.hi = Vec::Constant(2, 0.16);

    Vec qd(6);
    qd << 50.0, 1.0, 50.0, 1.0, 1.0, 1.0;
    env.Q = qd.asDiagonal();
    env.R = 0.01 * Mat::Identity(2, 2);

    // y^delta = (p_x, p_z): both positions move by at most v_max dt per step,
    // p_x additionally by the residual (model means stay within triple the
    // true +-0.015 m band).
    env.yd_step_bound = Vec(2);
    env.yd_step_bound << 3.0 * dt + 0.045, 3.0 * dt;
    return env;
}

/// Task geometries producing time-indexed desired-state waypoints.
struct TaskSpec {
    enum class Kind { figure8, boundary, initial_sweep };
    Kind kind = Kind::figure8;
    int duration = 100;
    Vec center;
    Vec radii;
    int period = 100;
};

/// Desired full-state waypoints w_0..w_T for a task; position coordinates carry
/// the geometry, remaining states are zero targets.
inline std::vector<Vec> task_waypoints(const Environment& env, const TaskSpec& task) {
    std::vector<Vec> wps;
    wps.reserve(task.duration + 1);

    // Map a planar point into a full desired state for this environment.
    const bool planar = env.n == 2;
    auto embed = [&](double a, double b) {
        Vec w = Vec::Zero(env.n);
        if (planar) {
            w << a, b;
        } else {
            w[0] = a;
            w[2] = b;
        }
        return w;
    };

    if (task.kind == TaskSpec::Kind::figure8) {
        for (int k = 0; k <= task.duration; ++k) {
            const double t = 2.0 * M_PI * k / task.period;
            wps.push_back(embed(task.center[0] + task.radii[0] * std::sin(t),
                                task.center[1] + task.radii[1] * std::sin(2.0 * t)));
        }
    } else if (task.kind == TaskSpec::Kind::boundary) {
        // Ride the lower edge right, then climb the right edge: the second leg
        // hugs the noisy x1 face where tightening earns its keep.
        const Vec a = embed(0.5, -0.05), b = embed(3.95, -0.05), c = embed(3.95, 3.5);
        const double len1 = (b - a).norm(), len2 = (c - b).norm();
        for (int k = 0; k <= task.duration; ++k) {
            const double s = (len1 + len2) * k / task.duration;
            wps.push_back(s <= len1 ? Vec(a + (b - a) * (s / len1))
                                    : Vec(b + (c - b) * ((s - len1) / len2)));
        }
    } else {
        // Rectangle loop through all residual bands, for initial data capture.
        const double x0 = task.center[0] - task.radii[0], x1 = task.center[0] + task.radii[0];
        const double z0 = task.center[1] - task.radii[1], z1 = task.center[1] + task.radii[1];
        const std::vector<Vec> corners = {embed(x0, z0), embed(x1, z0), embed(x1, z1),
                                          embed(x0, z1), embed(x0, z0)};
        std::vector<double> cum = {0.0};
        for (size_t i = 1; i < corners.size(); ++i)
            cum.push_back(cum.back() + (corners[i] - corners[i - 1]).norm());
        for (int k = 0; k <= task.duration; ++k) {
            double s = cum.back() * k / task.duration;
            size_t seg = 1;
            while (seg + 1 < cum.size() && s > cum[seg]) ++seg;
            const double t = (s - cum[seg - 1]) / (cum[seg] - cum[seg - 1]);
            wps.push_back(corners[seg - 1] + (corners[seg] - corners[seg - 1]) * t);
        }
    }

    for (const Vec& w : wps)
        if (!env.state_box.contains(w, 1e-9))
            throw std::invalid_argument("task_waypoints: geometry leaves the state box");
    return wps;
}

/// Per-mode labelled transitions drawn uniformly over the boxes, with the
/// residual evaluated from the true curve of the requested mode plus noise.
/// This mirrors an initial data batch collected under known mode assignment.
inline std::vector<DatasetRow> synthesize_training_data(const Environment& env, int n_per_mode,
                                                        std::uint64_t seed) {
    std::vector<DatasetRow> rows;
    rows.reserve(static_cast<std::size_t>(n_per_mode) * env.mode_count());
    Rng rng(seed);
    for (int mode = 1; mode <= env.mode_count(); ++mode) {
        for (int i = 0; i < n_per_mode; ++i) {
            DatasetRow row;
            row.x = Vec(env.n);
            row.u = Vec(env.m);
            for (int d = 0; d < env.n; ++d) row.x[d] = rng.uniform(env.state_box.lo[d], env.state_box.hi[d]);
            for (int d = 0; d < env.m; ++d) row.u[d] = rng.uniform(env.input_box.lo[d], env.input_box.hi[d]);
            const Vec yg = env.split.yg_of(row.x, row.u);
            row.d = Vec(1);
            row.d[0] = env.true_residual(mode, yg) + rng.gaussian(0.0, std::sqrt(env.noise_vars[mode - 1]));
            row.mode = mode;
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

}  // namespace pwrmpc
