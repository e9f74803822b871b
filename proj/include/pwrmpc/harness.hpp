#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pwrmpc/common.hpp"
#include "pwrmpc/environment.hpp"
#include "pwrmpc/gp.hpp"
#include "pwrmpc/minlp.hpp"
#include "pwrmpc/modemap.hpp"
#include "pwrmpc/ocp.hpp"
#include "pwrmpc/siren.hpp"
#include "pwrmpc/uncertainty.hpp"

namespace pwrmpc {

/// Dynamically feasible tracking target: states obey the nominal model under
/// the stored inputs exactly.
struct Reference {
    std::vector<Vec> x;  // T+1
    std::vector<Vec> u;  // T
    bool periodic = false;
};

namespace detail {

// Index into a reference of T+1 states for absolute time t: periodic tasks
// wrap at the period, others hold the terminal point.
inline int ref_state_index(int t, int state_count, bool periodic) {
    const int period = state_count - 1;
    if (period <= 0) return 0;
    if (periodic) return t % period;
    return std::min(t, period);
}

inline int ref_input_index(int t, int input_count, bool periodic) {
    if (input_count <= 0) return 0;
    if (periodic) return t % input_count;
    return std::min(t, input_count - 1);
}

}  // namespace detail

/// Offline reference generation: a nominal-model receding-horizon tracker is
/// rolled over the task's analytic waypoints, so the recorded trajectory is
/// feasible under f by construction. Periodic tasks get a full warmup lap
/// first, which settles the tracker onto its periodic orbit and closes the
/// recorded curve.
inline Reference generate_reference(const Environment& env, const TaskSpec& task, int horizon = 8) {
    const auto wps = task_waypoints(env, task);
    const int T = task.duration;
    const bool periodic = task.kind != TaskSpec::Kind::boundary;

    OcpSpec spec;
    spec.N = horizon;
    spec.Q = env.Q;
    spec.R = env.R;
    spec.P = env.Q;
    spec.input_box = env.input_box;
    spec.f = env.f;
    spec.jacobian = env.jacobian;
    spec.B_g = env.B_g;
    spec.split = env.split;
    spec.x_ref.resize(horizon + 1);
    spec.u_ref.assign(horizon, Vec::Zero(env.m));

    Reference ref;
    ref.periodic = periodic;
    const int warmup = periodic ? T : 0;
    Vec x = wps.front();
    for (int step = 0; step < warmup + T; ++step) {
        for (int i = 0; i <= horizon; ++i)
            spec.x_ref[i] = wps[detail::ref_state_index(step + i, static_cast<int>(wps.size()), periodic)];
        spec.x0 = x;
        const SolveResult res = solve_ocp_nlp(spec);
        if (res.status == SolveStatus::infeasible)
            throw std::runtime_error("generate_reference: nominal tracker infeasible at step " +
                                     std::to_string(step));
        const Vec u = res.inputs.front();
        if (step >= warmup) {
            ref.x.push_back(x);
            ref.u.push_back(u);
        }
        x = env.f(x, u);
    }
    ref.x.push_back(x);
    return ref;
}

enum class ControllerKind { nominal, nlp_exo, nlp_endo, minlp, fixed_baseline };

inline const char* to_string(ControllerKind k) {
    switch (k) {
        case ControllerKind::nominal: return "nominal";
        case ControllerKind::nlp_exo: return "nlp-exo";
        case ControllerKind::nlp_endo: return "nlp-endo";
        case ControllerKind::minlp: return "minlp";
        default: return "fixed-baseline";
    }
}

struct ControllerConfig {
    ControllerKind kind = ControllerKind::nominal;
    int N = 10;
    double p_x = 0.9;
    bool shrink = true;
    const HybridResidualModel* model = nullptr;
    const ModeClassifier* classifier = nullptr;
    const std::vector<ModeRegion>* regions = nullptr;  // minlp membership sets
    MinlpOptions minlp_options;

    void validate() const {
        if (N < 1) throw std::invalid_argument("ControllerConfig: N >= 1 required");
        if (kind != ControllerKind::nominal && (model == nullptr || classifier == nullptr))
            throw std::invalid_argument("ControllerConfig: model and classifier required");
        if (kind == ControllerKind::minlp && regions == nullptr)
            throw std::invalid_argument("ControllerConfig: minlp needs membership regions");
        if (shrink && kind != ControllerKind::nominal && (!(p_x >= 0.5) || !(p_x < 1.0)))
            throw std::invalid_argument("ControllerConfig: need 0.5 <= p_x < 1");
    }
};

struct ClosedLoopResult {
    std::vector<Vec> states;            // T+1
    std::vector<Vec> inputs;            // T
    std::vector<double> ol_ms;          // per step, solver call only
    std::vector<double> prep_ms;        // per step, parametric precomputation
    std::vector<SolveStatus> statuses;  // per step
    std::vector<int> iterations;        // per step
    std::vector<double> objectives;     // per step, open-loop plan objective
    double cl_cost = 0.0;
    int violations = 0;
    std::uint64_t seed = 0;
    int fallbacks = 0;
};

/// Terminal Q-weighted error plus running Q/R-weighted sums along a trajectory.
inline double cl_cost(const std::vector<Vec>& states, const std::vector<Vec>& inputs,
                      const std::vector<Vec>& reference, const Mat& Q, const Mat& R) {
    const std::size_t T = inputs.size();
    if (states.size() != T + 1 || reference.size() != T + 1)
        throw std::invalid_argument("cl_cost: length mismatch");
    double cost = 0.0;
    for (std::size_t k = 0; k < T; ++k) {
        const Vec e = states[k] - reference[k];
        cost += e.dot(Q * e) + inputs[k].dot(R * inputs[k]);
    }
    const Vec eT = states[T] - reference[T];
    return cost + eT.dot(Q * eT);
}

/// Number of timesteps whose state violates any box face beyond 1e-9.
inline int count_violations(const std::vector<Vec>& states, const Box& box) {
    int count = 0;
    for (const auto& x : states)
        if (box.violated_faces(x, 1e-9) > 0) ++count;
    return count;
}

/// Receding-horizon execution: at each step the reference window is sliced,
/// the parametric quantities (labels, frozen residuals, shrunk sets) are
/// rebuilt for the configured controller, one horizon problem is solved, and
/// the first input is applied to the noisy truth. An infeasible solve falls
/// back to the previous plan shifted by one step.
inline ClosedLoopResult run_closed_loop(const Environment& env, const ControllerConfig& ctrl,
                                        const Reference& ref, int T, int run_index,
                                        std::uint64_t seed) {
    ctrl.validate();
    if (T < 1) throw std::invalid_argument("run_closed_loop: T >= 1 required");
    const int N = ctrl.N;
    const int states_len = static_cast<int>(ref.x.size());
    const int inputs_len = static_cast<int>(ref.u.size());

    using clock = std::chrono::steady_clock;
    Rng rng(seed);
    ClosedLoopResult out;
    out.seed = seed;
    out.states.push_back(ref.x.front());

    std::vector<Vec> plan;  // last accepted input sequence, shifted on reuse
    for (int t = 0; t < T; ++t) {
        const auto prep_start = clock::now();
        OcpSpec spec;
        spec.N = N;
        spec.Q = env.Q;
        spec.R = env.R;
        spec.P = env.Q;
        spec.input_box = env.input_box;
        spec.x0 = out.states.back();
        spec.f = env.f;
        spec.jacobian = env.jacobian;
        spec.B_g = env.B_g;
        spec.split = env.split;
        spec.x_ref.resize(N + 1);
        spec.u_ref.resize(N);
        for (int i = 0; i <= N; ++i)
            spec.x_ref[i] = ref.x[detail::ref_state_index(t + i, states_len, ref.periodic)];
        for (int i = 0; i < N; ++i)
            spec.u_ref[i] = ref.u[detail::ref_input_index(t + i, inputs_len, ref.periodic)];

        std::vector<int> modes;
        if (ctrl.kind != ControllerKind::nominal) {
            modes = ctrl.kind == ControllerKind::fixed_baseline
                        ? build_fixed_params(*ctrl.classifier, spec.x_ref, spec.u_ref, env.split)
                        : build_reference_params(*ctrl.classifier, spec.x_ref, spec.u_ref, env.split);
        }
        ReferenceUncertainty ru;
        if (ctrl.shrink && ctrl.kind != ControllerKind::nominal) {
            const std::vector<int> run_modes(modes.begin(), modes.begin() + N);
            ru = precompute_reference_uncertainty(*ctrl.model, env, spec.x_ref, spec.u_ref, run_modes,
                                                  ctrl.p_x);
            spec.tight = &ru.tight;
        }
        if (ctrl.kind == ControllerKind::nlp_exo || ctrl.kind == ControllerKind::fixed_baseline)
            spec.mu_g_ref = build_exo_residuals(*ctrl.model, spec.x_ref, spec.u_ref, modes, env.split);
        if (ctrl.kind == ControllerKind::nlp_endo || ctrl.kind == ControllerKind::minlp) {
            spec.model = ctrl.model;
            spec.modes_ref = modes;
        }
        SolveResult res;
        const auto solve_start = clock::now();
        out.prep_ms.push_back(
            std::chrono::duration<double, std::milli>(solve_start - prep_start).count());
        try {
            switch (ctrl.kind) {
                case ControllerKind::nominal:
                    res = solve_ocp_nlp(spec);
                    break;
                case ControllerKind::nlp_exo:
                case ControllerKind::fixed_baseline:
                    res = solve_nlp_exo(spec);
                    break;
                case ControllerKind::minlp:
                    res = solve_minlp(spec, *ctrl.model, *ctrl.regions, modes, env.yd_step_bound,
                                      env.state_box, ctrl.minlp_options)
                              .result;
                    break;
                default:
                    res = solve_nlp_endo(spec);
                    break;
            }
        } catch (const std::exception& e) {
            throw std::runtime_error("run_closed_loop: step " + std::to_string(t) + ": " + e.what());
        }
        out.ol_ms.push_back(
            std::chrono::duration<double, std::milli>(clock::now() - solve_start).count());
        out.statuses.push_back(res.status);
        out.iterations.push_back(res.iterations);
        out.objectives.push_back(res.objective);

        Vec u;
        if (res.status != SolveStatus::infeasible) {
            plan = res.inputs;
            u = plan.front();
        } else {
            ++out.fallbacks;
            if (!plan.empty()) {
                plan.erase(plan.begin());  // shift, holding the last input
                if (plan.empty()) plan.push_back(spec.input_box.clamp(spec.u_ref.front()));
                u = plan.front();
            } else {
                u = spec.input_box.clamp(spec.u_ref.front());
            }
        }
        out.inputs.push_back(u);
        out.states.push_back(env.step_truth(out.states.back(), u, run_index, rng));
    }

    std::vector<Vec> aligned;
    aligned.reserve(T + 1);
    for (int k = 0; k <= T; ++k) aligned.push_back(ref.x[detail::ref_state_index(k, states_len, ref.periodic)]);
    out.cl_cost = cl_cost(out.states, out.inputs, aligned, env.Q, env.R);
    out.violations = count_violations(out.states, env.state_box);
    return out;
}

/// Fraction of a deterministic uniform mesh over the classification features
/// on which `label` agrees with the environment's ground-truth region map.
inline double classifier_accuracy(const std::function<int(const Vec&)>& label, const Environment& env,
                                  int run_index, int total_points = 10000) {
    const detail::YdBox range = detail::yd_range_of_box(env.split.Dx, env.state_box);
    const int q = static_cast<int>(range.lo.size());
    const int per_dim = std::max(2, static_cast<int>(std::floor(std::pow(double(total_points), 1.0 / q))));
    std::vector<int> idx(q, 0);
    long correct = 0, total = 0;
    for (;;) {
        Vec yd(q);
        for (int d = 0; d < q; ++d)
            yd[d] = range.lo[d] + (range.hi[d] - range.lo[d]) * idx[d] / (per_dim - 1);
        if (label(yd) == env.region_map(yd, run_index)) ++correct;
        ++total;
        int d = q - 1;
        while (d >= 0 && ++idx[d] == per_dim) idx[d--] = 0;
        if (d < 0) break;
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

/// Classifier argmax accuracy on the same mesh.
inline double classifier_accuracy(const ModeClassifier& classifier, const Environment& env,
                                  int run_index, int total_points = 10000) {
    return classifier_accuracy(
        [&classifier](const Vec& yd) { return classifier.hard_label(yd); }, env, run_index,
        total_points);
}

/// One run of a repetitive protocol: which task, which controller, whether the
/// mode map is retrained on the run's trajectory afterwards.
struct RunSpec {
    TaskSpec task;
    ControllerKind kind = ControllerKind::nominal;
    bool retrain = true;
};

struct RunProtocol {
    std::vector<RunSpec> runs;
    std::vector<std::uint64_t> seeds;
    int retrain_epochs = 500;
    double retrain_step = 1e-3;

    void validate() const {
        if (runs.empty()) throw std::invalid_argument("RunProtocol: no runs");
        if (runs.front().kind != ControllerKind::nominal)
            throw std::invalid_argument("RunProtocol: run 1 must use the nominal controller");
        if (seeds.empty()) throw std::invalid_argument("RunProtocol: no seeds");
    }
};

struct RunRecord {
    int run = 0;  // 1-based
    std::uint64_t seed = 0;
    ControllerKind kind = ControllerKind::nominal;
    double cl_cost = 0.0;
    int violations = 0;
    double mean_ol_ms = 0.0;
    double mean_prep_ms = 0.0;
    double accuracy_pre = 0.0;   // classifier as used during the run
    double accuracy_post = 0.0;  // after the between-run update
    int fallbacks = 0;
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace detail

/// The multi-run protocol: per seed, a cold classifier and empty density store
/// are carried through the ordered runs. Run 1 collects samples under nominal
/// control; after every run flagged for retraining, the mode-map iteration
/// relabels the run's trajectory and fine-tunes the classifier. The
/// environment applies its own mode shift via the run index.
/// Invoked after every run's classifier update with the live classifier, so
/// callers can snapshot learned mode maps without rerunning anything.
using RunObserver = std::function<void(std::uint64_t seed, int run_index, const ModeClassifier&)>;

inline std::vector<RunRecord> run_repetitive_experiment(const Environment& env,
                                                        const RunProtocol& protocol,
                                                        const HybridResidualModel& model,
                                                        const TradeoffConfig& cfg,
                                                        const ControllerConfig& base,
                                                        const std::vector<Reference>* shared_refs = nullptr,
                                                        const RunObserver& observer = {}) {
    protocol.validate();
    cfg.validate();

    // References are noise-free and seed-independent: generate one per run
    // unless the caller already holds them.
    std::vector<Reference> refs;
    if (shared_refs) {
        if (shared_refs->size() != protocol.runs.size())
            throw std::invalid_argument("run_repetitive_experiment: reference count mismatch");
        refs = *shared_refs;
    } else {
        refs.reserve(protocol.runs.size());
        for (const auto& run : protocol.runs) refs.push_back(generate_reference(env, run.task));
    }

    const detail::YdBox range = detail::yd_range_of_box(env.split.Dx, env.state_box);
    const FeatureScaler scaler{range.lo, range.hi};
    const int q = static_cast<int>(range.lo.size());

    std::vector<RunRecord> records;
    for (const std::uint64_t seed : protocol.seeds) {
        ModeClassifier classifier(q, env.mode_count(), scaler, seed);
        PriorDensityStore store(scaler);
        for (std::size_t r = 0; r < protocol.runs.size(); ++r) {
            const RunSpec& run = protocol.runs[r];
            const int run_index = static_cast<int>(r) + 1;

            ControllerConfig ctrl = base;
            ctrl.kind = run.kind;
            ctrl.model = &model;
            ctrl.classifier = &classifier;

            RunRecord rec;
            rec.run = run_index;
            rec.seed = seed;
            rec.kind = run.kind;
            rec.accuracy_pre = classifier_accuracy(classifier, env, run_index);

            const int T = static_cast<int>(refs[r].u.size());
            const ClosedLoopResult cl =
                run_closed_loop(env, ctrl, refs[r], T, run_index, seed + 1000003ULL * run_index);
            rec.cl_cost = cl.cl_cost;
            rec.violations = cl.violations;
            rec.mean_ol_ms = detail::mean_of(cl.ol_ms);
            rec.mean_prep_ms = detail::mean_of(cl.prep_ms);
            rec.fallbacks = cl.fallbacks;

            if (run.retrain)
                iterate_mode_map(model, cl.states, cl.inputs, env.f, env.split, env.B_g, classifier,
                                 store, cfg, protocol.retrain_epochs, protocol.retrain_step);
            rec.accuracy_post = classifier_accuracy(classifier, env, run_index);
            if (observer) observer(seed, run_index, classifier);
            records.push_back(rec);
        }
    }
    return records;
}

struct RunSummary {
    int run = 0;
    ControllerKind kind = ControllerKind::nominal;
    int seeds = 0;
    double cost_mean = 0.0;
    double cost_std = 0.0;
    double violations_mean = 0.0;
    double ol_ms_mean = 0.0;
    double prep_ms_mean = 0.0;
    double accuracy_pre_mean = 0.0;
    double accuracy_post_mean = 0.0;
};

inline std::vector<RunSummary> summarize_runs(const std::vector<RunRecord>& records) {
    int max_run = 0;
    for (const auto& r : records) max_run = std::max(max_run, r.run);
    std::vector<RunSummary> out;
    for (int run = 1; run <= max_run; ++run) {
        RunSummary s;
        s.run = run;
        std::vector<double> costs;
        for (const auto& r : records) {
            if (r.run != run) continue;
            s.kind = r.kind;
            ++s.seeds;
            costs.push_back(r.cl_cost);
            s.violations_mean += r.violations;
            s.ol_ms_mean += r.mean_ol_ms;
            s.prep_ms_mean += r.mean_prep_ms;
            s.accuracy_pre_mean += r.accuracy_pre;
            s.accuracy_post_mean += r.accuracy_post;
        }
        if (s.seeds == 0) continue;
        const double n = s.seeds;
        s.cost_mean = detail::mean_of(costs);
        double ss = 0.0;
        for (double c : costs) ss += (c - s.cost_mean) * (c - s.cost_mean);
        s.cost_std = s.seeds > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
        s.violations_mean /= n;
        s.ol_ms_mean /= n;
        s.prep_ms_mean /= n;
        s.accuracy_pre_mean /= n;
        s.accuracy_post_mean /= n;
        out.push_back(s);
    }
    return out;
}

}  // namespace pwrmpc
