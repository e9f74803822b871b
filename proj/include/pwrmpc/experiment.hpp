#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "pwrmpc/data.hpp"
#include "pwrmpc/harness.hpp"

namespace pwrmpc {

/// Malformed or inconsistent configuration. The CLI maps this to exit code 2,
/// keeping it distinct from solver failures (exit code 3).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

using nlohmann::json;

// Strict schema enforcement: every present key must be declared, every
// required key must be present. Unknown keys fail fast by design.
inline void check_keys(const json& j, const std::string& where,
                       std::initializer_list<const char*> required,
                       std::initializer_list<const char*> optional) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const char* k : required)
        if (!j.contains(k)) throw ConfigError(where + ": missing key '" + k + "'");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* k : required)
            if (item.key() == k) known = true;
        for (const char* k : optional)
            if (item.key() == k) known = true;
        if (!known) throw ConfigError(where + ": unknown key '" + item.key() + "'");
    }
}

inline int get_int(const json& j, const std::string& where) {
    if (!j.is_number_integer()) throw ConfigError(where + ": expected an integer");
    return j.get<int>();
}

inline double get_double(const json& j, const std::string& where) {
    if (!j.is_number()) throw ConfigError(where + ": expected a number");
    return j.get<double>();
}

inline bool get_bool(const json& j, const std::string& where) {
    if (!j.is_boolean()) throw ConfigError(where + ": expected a boolean");
    return j.get<bool>();
}

inline std::string get_string(const json& j, const std::string& where) {
    if (!j.is_string()) throw ConfigError(where + ": expected a string");
    return j.get<std::string>();
}

inline Vec get_planar(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 2) throw ConfigError(where + ": expected an array of 2 numbers");
    Vec v(2);
    v[0] = get_double(j[0], where + "[0]");
    v[1] = get_double(j[1], where + "[1]");
    return v;
}

// Bounded worker pool over [0, n). Work items must be independent; the first
// exception wins and is rethrown on the caller's thread.
inline void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
    const int w = std::max(1, std::min(workers, n));
    if (w == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::mutex mu;
    std::exception_ptr err;
    std::vector<std::thread> pool;
    pool.reserve(w);
    for (int t = 0; t < w; ++t)
        pool.emplace_back([&] {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!err) err = std::current_exception();
                    return;
                }
            }
        });
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace detail

struct GpFixedHyperparams {
    double signal_variance = 0.0;
    double lengthscale = 0.0;
    std::vector<double> noise_variance;  // one entry per mode, or one broadcast entry
};

struct GpConfig {
    std::string source;        // "file" | "fit"
    std::string path;          // bank JSON: input for "file", output for "fit"
    std::string training_csv;  // "fit": labelled residual dataset on disk
    bool synthesize = false;   // "fit": draw labelled data from the environment instead
    int samples_per_mode = 200;
    std::uint64_t synth_seed = 11;
    bool optimize = true;  // marginal-likelihood hyperparameter search
    std::optional<GpFixedHyperparams> fixed;
};

struct ControllerEntry {
    ControllerKind kind = ControllerKind::nominal;
    int N = 10;
    double p_x = 0.9;
    bool shrink = true;
};

struct ClassifierTraining {
    int points_per_dim = 40;
    int epochs = 1000;
    double step = 1e-2;
    std::uint64_t seed = 5;
};

struct TrackingStudy {
    TaskSpec task;
    int T = 0;  // simulation length; defaults to the task duration
    int seed_count = 1;
    std::vector<ControllerEntry> controllers;
    bool dump_trajectories = false;
    ClassifierTraining classifier;
};

struct ProtocolStudy {
    std::vector<RunSpec> runs;
    int seed_count = 1;
    int N = 10;
    double p_x = 0.9;
    bool shrink = true;
    int retrain_epochs = 500;
    double retrain_step = 1e-3;
    std::vector<double> alpha_mins;  // used by the alpha_min ablation command
};

struct ExperimentConfig {
    std::string env_id;
    int shift_after_run = 3;
    GpConfig gp;
    TradeoffConfig tradeoff;
    std::string output_dir;
    std::optional<TrackingStudy> tracking;
    std::optional<ProtocolStudy> protocol;

    // Command-line options, not part of the JSON document.
    std::uint64_t seed_base = 0;
    int workers = 1;
    bool debug_trace = false;
};

namespace detail {

inline ControllerKind parse_kind(const std::string& s, const std::string& where) {
    if (s == "nominal") return ControllerKind::nominal;
    if (s == "nlp-exo") return ControllerKind::nlp_exo;
    if (s == "nlp-endo") return ControllerKind::nlp_endo;
    if (s == "minlp") return ControllerKind::minlp;
    if (s == "fixed-baseline") return ControllerKind::fixed_baseline;
    throw ConfigError(where + ": unknown controller kind '" + s +
                      "' (expected nominal, nlp-exo, nlp-endo, minlp, fixed-baseline)");
}

inline TaskSpec parse_task(const json& j, const std::string& where) {
    check_keys(j, where, {"kind", "duration"}, {"period", "center", "radii"});
    TaskSpec task;
    const std::string kind = get_string(j.at("kind"), where + ".kind");
    task.duration = get_int(j.at("duration"), where + ".duration");
    if (task.duration < 1) throw ConfigError(where + ".duration: must be >= 1");
    if (kind == "boundary") {
        task.kind = TaskSpec::Kind::boundary;
        if (j.contains("center") || j.contains("radii") || j.contains("period"))
            throw ConfigError(where + ": boundary tasks take no center/radii/period");
        return task;
    }
    if (kind == "figure8")
        task.kind = TaskSpec::Kind::figure8;
    else if (kind == "initial_sweep")
        task.kind = TaskSpec::Kind::initial_sweep;
    else
        throw ConfigError(where + ".kind: unknown task kind '" + kind + "'");
    if (!j.contains("center") || !j.contains("radii"))
        throw ConfigError(where + ": " + kind + " tasks need center and radii");
    task.center = get_planar(j.at("center"), where + ".center");
    task.radii = get_planar(j.at("radii"), where + ".radii");
    task.period = j.contains("period") ? get_int(j.at("period"), where + ".period") : task.duration;
    if (task.period < 1) throw ConfigError(where + ".period: must be >= 1");
    return task;
}

inline ControllerEntry parse_controller(const json& j, const std::string& where, bool with_kind) {
    ControllerEntry e;
    if (with_kind) {
        check_keys(j, where, {"kind", "N"}, {"p_x", "shrink"});
        e.kind = parse_kind(get_string(j.at("kind"), where + ".kind"), where + ".kind");
    } else {
        check_keys(j, where, {"N"}, {"p_x", "shrink"});
    }
    e.N = get_int(j.at("N"), where + ".N");
    if (e.N < 1) throw ConfigError(where + ".N: must be >= 1 (got " + std::to_string(e.N) + ")");
    if (j.contains("p_x")) {
        e.p_x = get_double(j.at("p_x"), where + ".p_x");
        if (!(e.p_x >= 0.5) || !(e.p_x < 1.0))
            throw ConfigError(where + ".p_x: must lie in [0.5, 1) (got " + format_double(e.p_x) + ")");
    }
    if (j.contains("shrink")) e.shrink = get_bool(j.at("shrink"), where + ".shrink");
    return e;
}

inline GpConfig parse_gp(const json& j) {
    check_keys(j, "gp", {"source"},
               {"path", "training_csv", "synthesize", "optimize", "hyperparams"});
    GpConfig gp;
    gp.source = get_string(j.at("source"), "gp.source");
    if (gp.source == "file") {
        if (!j.contains("path")) throw ConfigError("gp: source 'file' needs 'path'");
        for (const char* k : {"training_csv", "synthesize", "optimize", "hyperparams"})
            if (j.contains(k))
                throw ConfigError(std::string("gp: key '") + k + "' is only valid with source 'fit'");
        gp.path = get_string(j.at("path"), "gp.path");
        return gp;
    }
    if (gp.source != "fit")
        throw ConfigError("gp.source: expected 'file' or 'fit' (got '" + gp.source + "')");
    const bool has_csv = j.contains("training_csv");
    const bool has_synth = j.contains("synthesize");
    if (has_csv == has_synth)
        throw ConfigError("gp: source 'fit' needs exactly one of 'training_csv' or 'synthesize'");
    if (has_csv) gp.training_csv = get_string(j.at("training_csv"), "gp.training_csv");
    if (has_synth) {
        gp.synthesize = true;
        const json& s = j.at("synthesize");
        check_keys(s, "gp.synthesize", {"samples_per_mode", "seed"}, {});
        gp.samples_per_mode = get_int(s.at("samples_per_mode"), "gp.synthesize.samples_per_mode");
        if (gp.samples_per_mode < 2) throw ConfigError("gp.synthesize.samples_per_mode: must be >= 2");
        gp.synth_seed = static_cast<std::uint64_t>(get_int(s.at("seed"), "gp.synthesize.seed"));
    }
    if (j.contains("path")) gp.path = get_string(j.at("path"), "gp.path");
    if (j.contains("optimize")) gp.optimize = get_bool(j.at("optimize"), "gp.optimize");
    if (j.contains("hyperparams")) {
        const json& h = j.at("hyperparams");
        check_keys(h, "gp.hyperparams", {"signal_variance", "lengthscale", "noise_variance"}, {});
        GpFixedHyperparams fixed;
        fixed.signal_variance = get_double(h.at("signal_variance"), "gp.hyperparams.signal_variance");
        fixed.lengthscale = get_double(h.at("lengthscale"), "gp.hyperparams.lengthscale");
        const json& nv = h.at("noise_variance");
        if (nv.is_array()) {
            for (std::size_t i = 0; i < nv.size(); ++i)
                fixed.noise_variance.push_back(
                    get_double(nv[i], "gp.hyperparams.noise_variance[" + std::to_string(i) + "]"));
            if (fixed.noise_variance.empty())
                throw ConfigError("gp.hyperparams.noise_variance: empty array");
        } else {
            fixed.noise_variance.push_back(get_double(nv, "gp.hyperparams.noise_variance"));
        }
        gp.fixed = fixed;
    }
    if (!gp.optimize && !gp.fixed)
        throw ConfigError("gp: optimize=false requires a 'hyperparams' block");
    return gp;
}

inline TradeoffConfig parse_tradeoff(const json& j) {
    check_keys(j, "tradeoff", {}, {"h", "kappa_min", "kappa_max", "alpha_min", "alpha_max"});
    TradeoffConfig cfg;
    if (j.contains("h")) cfg.h = get_double(j.at("h"), "tradeoff.h");
    if (j.contains("kappa_min")) cfg.kappa_min = get_double(j.at("kappa_min"), "tradeoff.kappa_min");
    if (j.contains("kappa_max")) cfg.kappa_max = get_double(j.at("kappa_max"), "tradeoff.kappa_max");
    if (j.contains("alpha_min")) cfg.alpha_min = get_double(j.at("alpha_min"), "tradeoff.alpha_min");
    if (j.contains("alpha_max")) cfg.alpha_max = get_double(j.at("alpha_max"), "tradeoff.alpha_max");
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("tradeoff: ") + e.what());
    }
    return cfg;
}

inline TrackingStudy parse_tracking(const json& j) {
    check_keys(j, "study", {"type", "task", "seeds", "controllers"},
               {"T", "dump_trajectories", "classifier"});
    TrackingStudy study;
    study.task = parse_task(j.at("task"), "study.task");
    study.seed_count = get_int(j.at("seeds"), "study.seeds");
    if (study.seed_count < 1) throw ConfigError("study.seeds: must be >= 1");
    const json& ctrls = j.at("controllers");
    if (!ctrls.is_array() || ctrls.empty())
        throw ConfigError("study.controllers: expected a non-empty array");
    for (std::size_t i = 0; i < ctrls.size(); ++i)
        study.controllers.push_back(
            parse_controller(ctrls[i], "study.controllers[" + std::to_string(i) + "]", true));
    study.T = j.contains("T") ? get_int(j.at("T"), "study.T") : study.task.duration;
    if (study.T < 1) throw ConfigError("study.T: must be >= 1");
    if (j.contains("dump_trajectories"))
        study.dump_trajectories = get_bool(j.at("dump_trajectories"), "study.dump_trajectories");
    if (j.contains("classifier")) {
        const json& c = j.at("classifier");
        check_keys(c, "study.classifier", {}, {"points_per_dim", "epochs", "step", "seed"});
        if (c.contains("points_per_dim"))
            study.classifier.points_per_dim = get_int(c.at("points_per_dim"), "study.classifier.points_per_dim");
        if (c.contains("epochs")) study.classifier.epochs = get_int(c.at("epochs"), "study.classifier.epochs");
        if (c.contains("step")) study.classifier.step = get_double(c.at("step"), "study.classifier.step");
        if (c.contains("seed"))
            study.classifier.seed = static_cast<std::uint64_t>(get_int(c.at("seed"), "study.classifier.seed"));
        if (study.classifier.points_per_dim < 2 || study.classifier.epochs < 1)
            throw ConfigError("study.classifier: need points_per_dim >= 2 and epochs >= 1");
    }
    return study;
}

inline ProtocolStudy parse_protocol(const json& j) {
    check_keys(j, "study", {"type", "runs", "seeds", "controller"},
               {"retrain_epochs", "retrain_step", "alpha_mins"});
    ProtocolStudy study;
    const json& runs = j.at("runs");
    if (!runs.is_array() || runs.empty()) throw ConfigError("study.runs: expected a non-empty array");
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const std::string where = "study.runs[" + std::to_string(i) + "]";
        check_keys(runs[i], where, {"task", "kind"}, {"retrain"});
        RunSpec spec;
        spec.task = parse_task(runs[i].at("task"), where + ".task");
        spec.kind = parse_kind(get_string(runs[i].at("kind"), where + ".kind"), where + ".kind");
        if (runs[i].contains("retrain")) spec.retrain = get_bool(runs[i].at("retrain"), where + ".retrain");
        study.runs.push_back(spec);
    }
    if (study.runs.front().kind != ControllerKind::nominal)
        throw ConfigError("study.runs[0].kind: run 1 must use the nominal controller");
    study.seed_count = get_int(j.at("seeds"), "study.seeds");
    if (study.seed_count < 1) throw ConfigError("study.seeds: must be >= 1");
    const ControllerEntry base = parse_controller(j.at("controller"), "study.controller", false);
    study.N = base.N;
    study.p_x = base.p_x;
    study.shrink = base.shrink;
    if (j.contains("retrain_epochs")) {
        study.retrain_epochs = get_int(j.at("retrain_epochs"), "study.retrain_epochs");
        if (study.retrain_epochs < 1) throw ConfigError("study.retrain_epochs: must be >= 1");
    }
    if (j.contains("retrain_step")) {
        study.retrain_step = get_double(j.at("retrain_step"), "study.retrain_step");
        if (!(study.retrain_step > 0.0)) throw ConfigError("study.retrain_step: must be positive");
    }
    if (j.contains("alpha_mins")) {
        const json& a = j.at("alpha_mins");
        if (!a.is_array() || a.empty()) throw ConfigError("study.alpha_mins: expected a non-empty array");
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double v = get_double(a[i], "study.alpha_mins[" + std::to_string(i) + "]");
            if (!(v >= 0.0) || !(v <= 1.0))
                throw ConfigError("study.alpha_mins: values must lie in [0, 1]");
            study.alpha_mins.push_back(v);
        }
    }
    return study;
}

}  // namespace detail

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const std::exception& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    detail::check_keys(j, "config", {"schema_version", "environment", "gp", "output_dir"},
                       {"tradeoff", "study"});
    const int version = detail::get_int(j.at("schema_version"), "schema_version");
    if (version != 1)
        throw ConfigError("schema_version: expected 1 (got " + std::to_string(version) + ")");

    ExperimentConfig cfg;
    const nlohmann::json& env = j.at("environment");
    detail::check_keys(env, "environment", {"id"}, {"shift_after_run"});
    cfg.env_id = detail::get_string(env.at("id"), "environment.id");
    if (cfg.env_id != "lti" && cfg.env_id != "quad2d")
        throw ConfigError("environment.id: expected 'lti' or 'quad2d' (got '" + cfg.env_id + "')");
    if (env.contains("shift_after_run")) {
        if (cfg.env_id != "quad2d")
            throw ConfigError("environment.shift_after_run: only valid for quad2d");
        cfg.shift_after_run = detail::get_int(env.at("shift_after_run"), "environment.shift_after_run");
        if (cfg.shift_after_run < 1) throw ConfigError("environment.shift_after_run: must be >= 1");
    }

    cfg.gp = detail::parse_gp(j.at("gp"));
    if (j.contains("tradeoff")) cfg.tradeoff = detail::parse_tradeoff(j.at("tradeoff"));
    cfg.output_dir = detail::get_string(j.at("output_dir"), "output_dir");
    if (cfg.output_dir.empty()) throw ConfigError("output_dir: must be non-empty");

    if (j.contains("study")) {
        const nlohmann::json& study = j.at("study");
        if (!study.is_object() || !study.contains("type"))
            throw ConfigError("study: expected an object with a 'type' key");
        const std::string type = detail::get_string(study.at("type"), "study.type");
        if (type == "tracking")
            cfg.tracking = detail::parse_tracking(study);
        else if (type == "protocol")
            cfg.protocol = detail::parse_protocol(study);
        else
            throw ConfigError("study.type: expected 'tracking' or 'protocol' (got '" + type + "')");
    }
    return cfg;
}

inline Environment make_environment(const ExperimentConfig& cfg) {
    if (cfg.env_id == "lti") return lti_env();
    return quad2d_env(cfg.shift_after_run);
}

namespace detail {

// Membership polytopes handed to the enumeration controller: the environments'
// band partitions over the classification features.
inline std::vector<ModeRegion> membership_regions(const Environment& env) {
    if (env.name == "lti") return band_regions(1, {1.3, 2.6}, 2);
    return band_regions(0, {-0.45, 0.45}, 2);
}

inline Dataset training_rows(const Environment& env, const GpConfig& gp) {
    if (gp.synthesize) return synthesize_training_data(env, gp.samples_per_mode, gp.synth_seed);
    if (!std::filesystem::exists(gp.training_csv))
        throw ConfigError("gp.training_csv: file not found: " + gp.training_csv);
    try {
        return load_dataset_csv(gp.training_csv);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("gp.training_csv: ") + e.what());
    }
}

inline HybridResidualModel fit_bank(const Environment& env, const GpConfig& gp, const Dataset& rows) {
    std::vector<std::vector<std::optional<KernelHyperparams>>> hp;
    const std::vector<std::vector<std::optional<KernelHyperparams>>>* hp_ptr = nullptr;
    if (!gp.optimize) {
        const GpFixedHyperparams& fixed = *gp.fixed;
        hp.resize(env.mode_count());
        for (int m = 0; m < env.mode_count(); ++m) {
            KernelHyperparams k;
            k.signal_variance = fixed.signal_variance;
            k.lengthscales = Vec::Constant(1, fixed.lengthscale);
            const std::size_t idx = fixed.noise_variance.size() == 1 ? 0 : static_cast<std::size_t>(m);
            if (idx >= fixed.noise_variance.size())
                throw ConfigError("gp.hyperparams.noise_variance: need one entry or one per mode");
            k.noise_variance = fixed.noise_variance[idx];
            hp[m].push_back(k);
        }
        hp_ptr = &hp;
    }
    return fit_residual_bank(rows, env.split, env.mode_count(), hp_ptr);
}

inline HybridResidualModel load_bank_file(const Environment& env, const std::string& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("gp.path: file not found: " + path);
    std::ifstream f(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const std::exception& e) {
        throw ConfigError("gp.path: " + path + " is not valid JSON: " + e.what());
    }
    HybridResidualModel bank = residual_bank_from_json(j);
    if (bank.mode_count() != env.mode_count())
        throw ConfigError("gp.path: bank has " + std::to_string(bank.mode_count()) +
                          " modes, environment expects " + std::to_string(env.mode_count()));
    return bank;
}

/// Bank used by run commands: loaded from disk or fitted in memory.
inline HybridResidualModel acquire_bank(const Environment& env, const GpConfig& gp) {
    if (gp.source == "file") return load_bank_file(env, gp.path);
    return fit_bank(env, gp, training_rows(env, gp));
}

inline std::vector<Vec> yd_mesh(const Environment& env, int per_dim) {
    const YdBox range = yd_range_of_box(env.split.Dx, env.state_box);
    const int q = static_cast<int>(range.lo.size());
    std::vector<int> idx(q, 0);
    std::vector<Vec> points;
    for (;;) {
        Vec yd(q);
        for (int d = 0; d < q; ++d)
            yd[d] = range.lo[d] + (range.hi[d] - range.lo[d]) * idx[d] / (per_dim - 1);
        points.push_back(yd);
        int d = q - 1;
        while (d >= 0 && ++idx[d] == per_dim) idx[d--] = 0;
        if (d < 0) break;
    }
    return points;
}

/// Classifier for tracking studies: trained on ground-truth labels over a
/// uniform feature mesh, standing in for a converged mode-mapping phase.
inline ModeClassifier ground_truth_classifier(const Environment& env, const ClassifierTraining& ct,
                                              int run_index) {
    const YdBox range = yd_range_of_box(env.split.Dx, env.state_box);
    const FeatureScaler scaler{range.lo, range.hi};
    const int q = static_cast<int>(range.lo.size());
    const auto points = yd_mesh(env, ct.points_per_dim);
    Mat X(points.size(), q);
    Mat soft = Mat::Zero(points.size(), env.mode_count());
    for (std::size_t i = 0; i < points.size(); ++i) {
        X.row(i) = points[i].transpose();
        soft(i, env.region_map(points[i], run_index) - 1) = 1.0;
    }
    ModeClassifier clf(q, env.mode_count(), scaler, ct.seed);
    clf.train(X, soft, ct.epochs, ct.step);
    return clf;
}

inline std::ofstream open_out(const std::filesystem::path& dir, const std::string& name) {
    std::ofstream f(dir / name);
    if (!f) throw std::runtime_error("cannot open output file " + (dir / name).string());
    return f;
}

inline std::string kind_name(ControllerKind k) { return to_string(k); }

}  // namespace detail

/// fit-gps: fit one GP per mode and residual dimension on labelled data and
/// serialize the bank (hyperparameters plus data) as JSON. Synthesized
/// training data is written next to the bank for inspection.
inline void cmd_fit_gps(const ExperimentConfig& cfg) {
    if (cfg.gp.source != "fit")
        throw ConfigError("fit-gps: gp.source must be 'fit' (got '" + cfg.gp.source + "')");
    const Environment env = make_environment(cfg);
    const std::filesystem::path out_dir(cfg.output_dir);
    std::filesystem::create_directories(out_dir);

    const Dataset rows = detail::training_rows(env, cfg.gp);
    if (cfg.gp.synthesize) save_dataset_csv((out_dir / "training_data.csv").string(), rows);

    const HybridResidualModel bank = detail::fit_bank(env, cfg.gp, rows);
    const std::filesystem::path bank_path =
        cfg.gp.path.empty() ? out_dir / "gp_bank.json" : std::filesystem::path(cfg.gp.path);
    if (bank_path.has_parent_path()) std::filesystem::create_directories(bank_path.parent_path());
    std::ofstream f(bank_path);
    if (!f) throw std::runtime_error("cannot open output file " + bank_path.string());
    f << to_json(bank).dump(2) << "\n";
    std::printf("fit-gps: %d modes x %d residual dims on %zu rows -> %s\n", bank.mode_count(),
                bank.residual_dim(), rows.size(), bank_path.string().c_str());
}

namespace detail {

inline void write_tracking_outputs(const Environment& env, const TrackingStudy& study,
                                   const ExperimentConfig& cfg, const ModeClassifier* clf,
                                   const std::vector<std::vector<ClosedLoopResult>>& results) {
    const std::filesystem::path out_dir(cfg.output_dir);
    std::filesystem::create_directories(out_dir);

    auto runs_csv = open_out(out_dir, "runs.csv");
    runs_csv << "controller,N,p_x,shrink,seed,cl_cost,violations,fallbacks,mean_ol_ms,mean_prep_ms\n";
    for (std::size_t c = 0; c < study.controllers.size(); ++c) {
        const ControllerEntry& e = study.controllers[c];
        for (const ClosedLoopResult& cl : results[c])
            runs_csv << kind_name(e.kind) << "," << e.N << "," << format_double(e.p_x) << ","
                     << (e.shrink ? 1 : 0) << "," << cl.seed << "," << format_double(cl.cl_cost)
                     << "," << cl.violations << "," << cl.fallbacks << ","
                     << format_double(mean_of(cl.ol_ms)) << "," << format_double(mean_of(cl.prep_ms))
                     << "\n";
    }

    auto summary_csv = open_out(out_dir, "summary.csv");
    summary_csv << "controller,N,p_x,shrink,seeds,cost_mean,cost_std,violations_mean,"
                   "mean_ol_ms,mean_prep_ms\n";
    for (std::size_t c = 0; c < study.controllers.size(); ++c) {
        const ControllerEntry& e = study.controllers[c];
        const auto& rs = results[c];
        double cost_mean = 0.0, viol = 0.0, ol = 0.0, prep = 0.0;
        for (const auto& cl : rs) {
            cost_mean += cl.cl_cost;
            viol += cl.violations;
            ol += mean_of(cl.ol_ms);
            prep += mean_of(cl.prep_ms);
        }
        const double n = static_cast<double>(rs.size());
        cost_mean /= n;
        double ss = 0.0;
        for (const auto& cl : rs) ss += (cl.cl_cost - cost_mean) * (cl.cl_cost - cost_mean);
        const double cost_std = rs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
        summary_csv << kind_name(e.kind) << "," << e.N << "," << format_double(e.p_x) << ","
                    << (e.shrink ? 1 : 0) << "," << rs.size() << "," << format_double(cost_mean)
                    << "," << format_double(cost_std) << "," << format_double(viol / n) << ","
                    << format_double(ol / n) << "," << format_double(prep / n) << "\n";
    }

    if (clf) {
        auto grid_csv = open_out(out_dir, "mode_grid.csv");
        grid_csv << "yd_1,yd_2,run_index,truth_mode,classifier_mode\n";
        for (const Vec& yd : yd_mesh(env, 60))
            grid_csv << format_double(yd[0]) << "," << format_double(yd[1]) << ",1,"
                     << env.region_map(yd, 1) << "," << clf->hard_label(yd) << "\n";
    }

    if (study.dump_trajectories) {
        auto states_csv = open_out(out_dir, "states.csv");
        states_csv << "controller,seed,t";
        for (int d = 0; d < env.n; ++d) states_csv << ",x_" << (d + 1);
        states_csv << "\n";
        auto inputs_csv = open_out(out_dir, "inputs.csv");
        inputs_csv << "controller,seed,t";
        for (int d = 0; d < env.m; ++d) inputs_csv << ",u_" << (d + 1);
        inputs_csv << "\n";
        for (std::size_t c = 0; c < study.controllers.size(); ++c)
            for (const ClosedLoopResult& cl : results[c]) {
                for (std::size_t t = 0; t < cl.states.size(); ++t) {
                    states_csv << kind_name(study.controllers[c].kind) << "," << cl.seed << "," << t;
                    for (int d = 0; d < env.n; ++d) states_csv << "," << format_double(cl.states[t][d]);
                    states_csv << "\n";
                }
                for (std::size_t t = 0; t < cl.inputs.size(); ++t) {
                    inputs_csv << kind_name(study.controllers[c].kind) << "," << cl.seed << "," << t;
                    for (int d = 0; d < env.m; ++d) inputs_csv << "," << format_double(cl.inputs[t][d]);
                    inputs_csv << "\n";
                }
            }
    }

    if (cfg.debug_trace) {
        auto trace_csv = open_out(out_dir, "solve_trace.csv");
        trace_csv << "controller,seed,t,status,iterations,objective,ol_ms,prep_ms\n";
        for (std::size_t c = 0; c < study.controllers.size(); ++c)
            for (const ClosedLoopResult& cl : results[c])
                for (std::size_t t = 0; t < cl.statuses.size(); ++t)
                    trace_csv << kind_name(study.controllers[c].kind) << "," << cl.seed << "," << t
                              << "," << to_string(cl.statuses[t]) << "," << cl.iterations[t] << ","
                              << format_double(cl.objectives[t]) << ","
                              << format_double(cl.ol_ms[t]) << "," << format_double(cl.prep_ms[t])
                              << "\n";
    }
}

struct ProtocolOutput {
    std::vector<RunRecord> records;                 // seed-major, run-minor
    std::vector<std::vector<int>> grid_snapshots;   // per run: classifier labels on the 60-mesh
};

inline ProtocolOutput execute_protocol(const Environment& env, const HybridResidualModel& bank,
                                       const ProtocolStudy& study, const TradeoffConfig& tradeoff,
                                       const ExperimentConfig& cfg, bool want_grids) {
    RunProtocol protocol;
    protocol.runs = study.runs;
    protocol.retrain_epochs = study.retrain_epochs;
    protocol.retrain_step = study.retrain_step;
    for (int s = 0; s < study.seed_count; ++s)
        protocol.seeds.push_back(cfg.seed_base + static_cast<std::uint64_t>(s));

    ControllerConfig base;
    base.N = study.N;
    base.p_x = study.p_x;
    base.shrink = study.shrink;
    const std::vector<ModeRegion> regions = membership_regions(env);
    base.regions = &regions;

    // References are seed-independent: generate once, share across workers.
    std::vector<Reference> refs;
    refs.reserve(protocol.runs.size());
    for (const auto& run : protocol.runs) refs.push_back(generate_reference(env, run.task));

    const auto mesh = want_grids ? yd_mesh(env, 60) : std::vector<Vec>{};
    ProtocolOutput out;
    if (want_grids) out.grid_snapshots.resize(protocol.runs.size());

    std::vector<std::vector<RunRecord>> per_seed(protocol.seeds.size());
    parallel_for(static_cast<int>(protocol.seeds.size()), cfg.workers, [&](int s) {
        RunProtocol one = protocol;
        one.seeds = {protocol.seeds[static_cast<std::size_t>(s)]};
        RunObserver observer;
        if (want_grids && s == 0)
            observer = [&](std::uint64_t, int run_index, const ModeClassifier& clf) {
                auto& snap = out.grid_snapshots[static_cast<std::size_t>(run_index - 1)];
                snap.reserve(mesh.size());
                for (const Vec& yd : mesh) snap.push_back(clf.hard_label(yd));
            };
        per_seed[static_cast<std::size_t>(s)] =
            run_repetitive_experiment(env, one, bank, tradeoff, base, &refs, observer);
    });
    for (const auto& recs : per_seed)
        out.records.insert(out.records.end(), recs.begin(), recs.end());
    return out;
}

inline void write_protocol_runs_csv(std::ofstream& f, const std::vector<RunRecord>& records,
                                    bool with_alpha, double alpha_min) {
    for (const RunRecord& r : records) {
        if (with_alpha) f << format_double(alpha_min) << ",";
        f << r.run << "," << kind_name(r.kind) << "," << r.seed << "," << format_double(r.cl_cost)
          << "," << r.violations << "," << r.fallbacks << "," << format_double(r.mean_ol_ms) << ","
          << format_double(r.mean_prep_ms) << "," << format_double(r.accuracy_pre) << ","
          << format_double(r.accuracy_post) << "\n";
    }
}

inline void write_protocol_summary_csv(std::ofstream& f, const std::vector<RunRecord>& records,
                                       bool with_alpha, double alpha_min) {
    for (const RunSummary& s : summarize_runs(records)) {
        if (with_alpha) f << format_double(alpha_min) << ",";
        f << s.run << "," << kind_name(s.kind) << "," << s.seeds << "," << format_double(s.cost_mean)
          << "," << format_double(s.cost_std) << "," << format_double(s.violations_mean) << ","
          << format_double(s.ol_ms_mean) << "," << format_double(s.prep_ms_mean) << ","
          << format_double(s.accuracy_pre_mean) << "," << format_double(s.accuracy_post_mean)
          << "\n";
    }
}

constexpr const char* kProtocolRunsHeader =
    "run,kind,seed,cl_cost,violations,fallbacks,mean_ol_ms,mean_prep_ms,accuracy_pre,accuracy_post";
constexpr const char* kProtocolSummaryHeader =
    "run,kind,seeds,cost_mean,cost_std,violations_mean,mean_ol_ms,mean_prep_ms,"
    "accuracy_pre_mean,accuracy_post_mean";

}  // namespace detail

/// run: execute the configured study end to end and emit tidy result CSVs.
inline void cmd_run(const ExperimentConfig& cfg) {
    if (!cfg.tracking && !cfg.protocol)
        throw ConfigError("run: config has no 'study' block");
    const Environment env = make_environment(cfg);
    const HybridResidualModel bank = detail::acquire_bank(env, cfg.gp);

    if (cfg.tracking) {
        const TrackingStudy& study = *cfg.tracking;
        const Reference ref = generate_reference(env, study.task);

        bool needs_classifier = false, needs_regions = false;
        for (const auto& e : study.controllers) {
            if (e.kind != ControllerKind::nominal) needs_classifier = true;
            if (e.kind == ControllerKind::minlp) needs_regions = true;
        }
        std::optional<ModeClassifier> clf;
        if (needs_classifier)
            clf.emplace(detail::ground_truth_classifier(env, study.classifier, 1));
        const std::vector<ModeRegion> regions =
            needs_regions ? detail::membership_regions(env) : std::vector<ModeRegion>{};

        std::vector<std::vector<ClosedLoopResult>> results(study.controllers.size());
        for (auto& r : results) r.resize(study.seed_count);
        const int jobs = static_cast<int>(study.controllers.size()) * study.seed_count;
        detail::parallel_for(jobs, cfg.workers, [&](int i) {
            const int c = i / study.seed_count;
            const int s = i % study.seed_count;
            const ControllerEntry& e = study.controllers[static_cast<std::size_t>(c)];
            ControllerConfig ctrl;
            ctrl.kind = e.kind;
            ctrl.N = e.N;
            ctrl.p_x = e.p_x;
            ctrl.shrink = e.shrink;
            if (e.kind != ControllerKind::nominal) {
                ctrl.model = &bank;
                ctrl.classifier = &*clf;
            }
            if (e.kind == ControllerKind::minlp) ctrl.regions = &regions;
            results[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)] = run_closed_loop(
                env, ctrl, ref, study.T, 1, cfg.seed_base + static_cast<std::uint64_t>(s));
        });
        detail::write_tracking_outputs(env, study, cfg, clf ? &*clf : nullptr, results);
        std::printf("run: tracking study, %zu controllers x %d seeds -> %s\n",
                    study.controllers.size(), study.seed_count, cfg.output_dir.c_str());
        return;
    }

    const ProtocolStudy& study = *cfg.protocol;
    const detail::ProtocolOutput out =
        detail::execute_protocol(env, bank, study, cfg.tradeoff, cfg, true);

    const std::filesystem::path out_dir(cfg.output_dir);
    std::filesystem::create_directories(out_dir);
    auto runs_csv = detail::open_out(out_dir, "runs.csv");
    runs_csv << detail::kProtocolRunsHeader << "\n";
    detail::write_protocol_runs_csv(runs_csv, out.records, false, 0.0);
    auto summary_csv = detail::open_out(out_dir, "summary.csv");
    summary_csv << detail::kProtocolSummaryHeader << "\n";
    detail::write_protocol_summary_csv(summary_csv, out.records, false, 0.0);

    auto grid_csv = detail::open_out(out_dir, "mode_grid.csv");
    grid_csv << "yd_1,yd_2,run_index,truth_mode,classifier_mode\n";
    const auto mesh = detail::yd_mesh(env, 60);
    for (std::size_t r = 0; r < study.runs.size(); ++r)
        for (std::size_t i = 0; i < mesh.size(); ++i) {
            grid_csv << format_double(mesh[i][0]) << "," << format_double(mesh[i][1]) << ","
                     << (r + 1) << "," << env.region_map(mesh[i], static_cast<int>(r) + 1) << ","
                     << out.grid_snapshots[r][i] << "\n";
        }
    std::printf("run: protocol study, %zu runs x %d seeds -> %s\n", study.runs.size(),
                study.seed_count, cfg.output_dir.c_str());
}

/// ablate-alpha-min: repeat the protocol study once per alpha_min value and
/// emit the pooled per-run records plus per-value summaries.
inline void cmd_ablate_alpha_min(const ExperimentConfig& cfg) {
    if (!cfg.protocol) throw ConfigError("ablate-alpha-min: config needs a protocol study");
    const ProtocolStudy& study = *cfg.protocol;
    if (study.alpha_mins.empty())
        throw ConfigError("ablate-alpha-min: study.alpha_mins must list at least one value");
    for (double a : study.alpha_mins)
        if (a > cfg.tradeoff.alpha_max)
            throw ConfigError("ablate-alpha-min: alpha_min " + format_double(a) +
                              " exceeds tradeoff.alpha_max " + format_double(cfg.tradeoff.alpha_max));

    const Environment env = make_environment(cfg);
    const HybridResidualModel bank = detail::acquire_bank(env, cfg.gp);

    const std::filesystem::path out_dir(cfg.output_dir);
    std::filesystem::create_directories(out_dir);
    auto runs_csv = detail::open_out(out_dir, "ablation.csv");
    runs_csv << "alpha_min," << detail::kProtocolRunsHeader << "\n";
    auto summary_csv = detail::open_out(out_dir, "ablation_summary.csv");
    summary_csv << "alpha_min," << detail::kProtocolSummaryHeader << "\n";

    for (double alpha_min : study.alpha_mins) {
        TradeoffConfig tradeoff = cfg.tradeoff;
        tradeoff.alpha_min = alpha_min;
        const detail::ProtocolOutput out =
            detail::execute_protocol(env, bank, study, tradeoff, cfg, false);
        detail::write_protocol_runs_csv(runs_csv, out.records, true, alpha_min);
        detail::write_protocol_summary_csv(summary_csv, out.records, true, alpha_min);
    }
    std::printf("ablate-alpha-min: %zu values x %zu runs x %d seeds -> %s\n",
                study.alpha_mins.size(), study.runs.size(), study.seed_count,
                cfg.output_dir.c_str());
}

}  // namespace pwrmpc
