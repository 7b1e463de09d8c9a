#pragma once

// Subcommands of the command-line tool. Each command reads a RunConfig, writes
// its result files into an output directory and finishes with manifest.json.

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "stochlm/config.hpp"
#include "stochlm/moments.hpp"

namespace stochlm {

inline constexpr const char* kVersion = "0.1.0";

inline const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names{"simulate", "sample",     "moments", "fit-moments",
                                                "bridge",   "likelihood", "fit-em",  "synth"};
    return names;
}

/// Collects written files so the manifest can list them.
class OutputDir {
public:
    explicit OutputDir(std::filesystem::path root) : root_(std::move(root)) {
        std::filesystem::create_directories(root_);
    }

    void text(const std::string& name, const std::string& content) {
        write_text_file(root_ / name, content);
        files_.push_back(name);
    }
    void json_file(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }

    [[nodiscard]] const std::filesystem::path& root() const { return root_; }
    [[nodiscard]] std::vector<std::string> files() const { return files_; }

private:
    std::filesystem::path root_;
    std::vector<std::string> files_;
};

inline json noise_to_json(const NoiseModel& noise) {
    json j;
    if (const auto* e = std::get_if<EulerianNoise>(&noise)) {
        j["backend"] = "eulerian";
        json fields = json::array();
        for (const auto& f : e->fields)
            fields.push_back({{"center", vector_to_json(f.center)},
                              {"lambda", vector_to_json(f.lambda)},
                              {"family", to_string(f.kernel.family)},
                              {"scale", f.kernel.scale}});
        j["fields"] = std::move(fields);
    } else {
        const auto& l = std::get<LagrangianNoise>(noise);
        j["backend"] = "lagrangian";
        j["family"] = to_string(l.kernel.family);
        j["scale"] = l.kernel.scale;
        j["lambdas"] = positions_to_json(l.lambdas);
    }
    return j;
}

inline json theta_to_json(const Theta& t) {
    return {{"q0", positions_to_json(t.q0)}, {"p0", positions_to_json(t.p0)},
            {"lambdas", positions_to_json(t.lambdas)}};
}

inline std::vector<Positions> load_observations(const RunConfig& c) {
    if (!c.data) throw ConfigError("data: a dataset path is required for this command");
    const ShapeDataset ds = read_dataset(*c.data);
    if (ds.shapes.empty()) throw ConfigError("data: dataset contains no shapes");
    if (c.initial.q && (ds.n_landmarks != c.initial.q->rows() || ds.d != c.initial.q->cols()))
        throw ConfigError("data: landmark layout differs from initial.q");
    return ds.shapes;
}

inline NoiseModel resolve_noise(const RunConfig& c, const std::vector<Positions>* data = nullptr) {
    NoiseSpec spec = c.noise_spec();
    if (spec.lagrangian_auto_scale) {
        if (!data) throw ConfigError("noise.scale: \"auto\" requires a dataset");
        auto& lag = std::get<LagrangianNoise>(spec.model);
        lag.kernel = KernelSpec(lag.kernel.family, std::sqrt(lagrangian_range(*data)));
    }
    return spec.model;
}

inline const EulerianNoise& require_eulerian(const NoiseModel& noise, const std::string& command) {
    const auto* e = std::get_if<EulerianNoise>(&noise);
    if (!e) throw ConfigError("noise.backend: '" + command + "' requires the eulerian backend");
    return *e;
}

/// Pearson correlation of two equally long samples; 0 when either is constant.
inline double pearson(const Vector& a, const Vector& b) {
    const Vector da = a.array() - a.mean();
    const Vector db = b.array() - b.mean();
    const double den = std::sqrt(da.squaredNorm() * db.squaredNorm());
    return den > 0.0 ? da.dot(db) / den : 0.0;
}

inline json moment_summary(const MomentState& ms) {
    json blocks = json::array();
    for (Eigen::Index i = 0; i < ms.layout.n; ++i) blocks.push_back(matrix_to_json(ms.landmark_cov(i)));
    return {{"mean_q", positions_to_json(ms.mean_q())},
            {"mean_p", positions_to_json(ms.mean_p())},
            {"landmark_cov", blocks}};
}

inline void cmd_simulate(const RunConfig& c, OutputDir& out) {
    const PhaseState s0(c.q0(), c.p0());
    const NoiseModel noise = c.noise ? resolve_noise(c) : NoiseModel(EulerianNoise{});
    const StochasticSystem sys{c.kernel, noise};
    Rng rng(sub_seed(c.seed, seed_purpose::simulate, 0));
    Trajectory traj;
    simulate_path(sys, s0.to_vector(), layout_of(s0), c.sde, rng, &traj);
    out.text("trajectory.csv", trajectory_csv(traj));
    const PhaseState& end = traj.back();
    out.json_file("result.json", {{"command", "simulate"},
                                  {"final_q", positions_to_json(end.q)},
                                  {"final_p", positions_to_json(end.p)},
                                  {"hamiltonian_initial", hamiltonian(s0, c.kernel)},
                                  {"hamiltonian_final", hamiltonian(end, c.kernel)}});
}

inline void cmd_sample(const RunConfig& c, OutputDir& out) {
    const PhaseState s0(c.q0(), c.p0());
    const EnsembleSummary es = sample_ensemble(s0, c.kernel, resolve_noise(c), c.sde, c.n_samples, true);
    out.json_file("endpoints.json", dataset_to_json(dataset_from_shapes(*es.endpoints, "simulated")));
    json blocks = json::array();
    for (Eigen::Index i = 0; i < es.mean_q.rows(); ++i) blocks.push_back(matrix_to_json(es.landmark_cov(i)));
    out.json_file("result.json", {{"command", "sample"},
                                  {"n_samples", es.n_samples},
                                  {"mean_q", positions_to_json(es.mean_q)},
                                  {"landmark_cov", blocks},
                                  {"cov_qq", matrix_to_json(es.cov_qq)}});
}

inline void cmd_moments(const RunConfig& c, OutputDir& out) {
    const PhaseState s0(c.q0(), c.p0());
    const NoiseModel noise = resolve_noise(c);
    std::vector<MomentTrajectoryPoint> traj;
    const MomentState ms = integrate_moments(MomentState::deterministic(s0), c.kernel,
                                             require_eulerian(noise, "moments"), c.T, c.moments.dt, &traj);
    out.text("moments.csv", moments_csv(traj));
    json res = moment_summary(ms);
    res["command"] = "moments";
    out.json_file("result.json", res);
}

inline void cmd_fit_moments(const RunConfig& c, OutputDir& out) {
    const PhaseState s0(c.q0(), c.p0());
    const NoiseModel noise = resolve_noise(c);
    const EulerianNoise& truth = require_eulerian(noise, "fit-moments");
    const bool simulated = !c.data.has_value();
    MomentTargets targets;
    if (simulated) {
        const EnsembleSummary es = sample_ensemble(s0, c.kernel, noise, c.sde, c.n_samples, true);
        out.json_file("endpoints.json", dataset_to_json(dataset_from_shapes(*es.endpoints, "simulated")));
        targets = MomentTargets::from_summary(es);
    } else {
        targets = MomentTargets::from_shapes(load_observations(c));
    }
    MomentProblem prob;
    prob.kv = c.kernel;
    prob.noise_template = truth;
    prob.mean_q0 = s0.q;
    prob.mean_p0 = s0.p;
    prob.targets = targets;
    prob.T = c.T;
    prob.dt = c.moments.dt;
    prob.gamma1 = c.moments.gamma1;
    prob.gamma2 = c.moments.gamma2;
    prob.estimate_p0 = c.moments.estimate_p0;

    DeConfig de = c.de;
    const auto K = prob.n_params();
    de.lower = Vector::Constant(K, c.moments.lambda_lower);
    de.upper = Vector::Constant(K, c.moments.lambda_upper);
    if (prob.estimate_p0) {
        de.lower.head(s0.q.size()).setConstant(c.moments.p0_lower);
        de.upper.head(s0.q.size()).setConstant(c.moments.p0_upper);
    }
    const DeResult r = minimize([&](const Vector& th) { return prob.cost(th); }, de);
    out.text("de_trace.csv", de_trace_csv(r.trace));

    const Positions p0 = prob.unpack_p0(r.best_x);
    const Positions lam = prob.unpack_lambdas(r.best_x);
    std::vector<MomentTrajectoryPoint> traj;
    const MomentState fitted = integrate_moments(MomentState::deterministic(PhaseState(s0.q, p0)), c.kernel,
                                                 prob.noise_with(lam), c.T, prob.dt, &traj);
    out.text("moments.csv", moments_csv(traj));

    json res{{"command", "fit-moments"},
             {"cost", r.best_f},
             {"evaluations", r.evaluations},
             {"p0", positions_to_json(p0)},
             {"lambdas", positions_to_json(lam)},
             {"fitted", moment_summary(fitted)},
             {"targets_from", simulated ? "simulation" : "data"}};
    json var_err = json::array();
    for (Eigen::Index i = 0; i < s0.q.rows(); ++i) {
        const double tgt = targets.cov_blocks[static_cast<std::size_t>(i)].trace();
        var_err.push_back(tgt > 0.0 ? std::abs(fitted.landmark_cov(i).trace() - tgt) / tgt : 0.0);
    }
    res["variance_trace_relative_error"] = var_err;
    if (simulated) {
        const Positions true_lam = amplitudes_of(noise);
        res["true_lambdas"] = positions_to_json(true_lam);
        res["abs_lambda_correlation"] =
            pearson(flatten(true_lam).cwiseAbs(), flatten(lam).cwiseAbs());
    }
    out.json_file("result.json", res);
}

inline void cmd_bridge(const RunConfig& c, OutputDir& out) {
    const PhaseState s0(c.q0(), c.p0());
    Positions target;
    if (c.target) target = *c.target;
    else target = load_observations(c).front();
    if (target.rows() != s0.q.rows() || target.cols() != s0.q.cols())
        throw ConfigError("target: landmark layout differs from initial.q");
    const StochasticSystem sys{c.kernel, resolve_noise(c)};
    const Layout L = layout_of(s0);
    const auto samples = sample_bridges(sys, s0.to_vector(), L, flatten(target), c.T, c.bridge);
    const std::size_t n_write = c.bridge_write_paths < 0
                                    ? samples.size()
                                    : std::min(samples.size(), static_cast<std::size_t>(c.bridge_write_paths));
    std::vector<double> lw;
    json gaps = json::array();
    for (std::size_t m = 0; m < samples.size(); ++m) {
        const auto& s = samples[m];
        lw.push_back(s.log_weight);
        gaps.push_back(s.endpoint_gap);
        if (m >= n_write) continue;
        Trajectory traj;
        for (std::size_t k = 0; k < s.states.size(); ++k) traj.push_back(s.state(k, L));
        char stem[32];
        std::snprintf(stem, sizeof stem, "bridges/path_%04zu", m);
        out.text(std::string(stem) + ".csv", trajectory_csv(traj));
        out.json_file(std::string(stem) + ".json",
                      {{"log_weight", s.log_weight}, {"endpoint_gap", s.endpoint_gap}, {"retries", s.retries}});
    }
    const auto w = normalized_weights(lw);
    out.json_file("result.json", {{"command", "bridge"},
                                  {"n_samples", samples.size()},
                                  {"log_weights", lw},
                                  {"endpoint_gaps", gaps},
                                  {"ess", effective_sample_size(w)},
                                  {"log_density_estimate", log_mean_exp(lw)}});
}

inline void cmd_likelihood(const RunConfig& c, OutputDir& out) {
    const PhaseState s0(c.q0(), c.p0());
    const auto obs = load_observations(c);
    const LikelihoodResult r = log_likelihood(s0, c.kernel, resolve_noise(c, &obs), obs, c.T, c.bridge);
    out.json_file("result.json", {{"command", "likelihood"},
                                  {"log_likelihood", r.log_likelihood},
                                  {"per_observation", r.per_observation},
                                  {"ess", r.ess},
                                  {"degenerate", r.degenerate}});
}

inline void cmd_fit_em(const RunConfig& c, OutputDir& out) {
    const auto obs = load_observations(c);
    const NoiseModel noise = resolve_noise(c, &obs);
    Theta init;
    init.q0 = c.initial.q ? *c.initial.q : euclidean_mean(obs);
    init.p0 = c.initial.p ? *c.initial.p : Positions(Positions::Zero(init.q0.rows(), init.q0.cols()));
    init.lambdas = amplitudes_of(noise);
    const EmResult r = fit_em(obs, init, c.kernel, noise, c.T, c.em);
    out.text("em_trace.csv", em_trace_csv(r));
    json iters = json::array();
    bool ascent = true;
    for (const auto& it : r.trace) {
        ascent = ascent && it.q_value >= it.q_prev - 3.0 * it.q_std_error;
        iters.push_back({{"iteration", it.iteration},
                         {"Q_prev", it.q_prev},
                         {"Q", it.q_value},
                         {"Q_std_error", it.q_std_error},
                         {"mean_ess", it.mean_ess},
                         {"min_ess", it.min_ess},
                         {"lambda_change", it.lambda_change},
                         {"at_bound", it.at_bound}});
    }
    json res{{"command", "fit-em"},
             {"theta", theta_to_json(r.theta)},
             {"noise", noise_to_json(with_amplitudes(noise, r.theta.lambdas))},
             {"converged", r.converged},
             {"ascent_within_mc_error", ascent},
             {"iterations", iters}};
    if (!r.warning.empty()) res["warning"] = r.warning;
    out.json_file("result.json", res);
}

inline void cmd_synth(const RunConfig& c, OutputDir& out) {
    if (!c.synth) throw ConfigError("synth: section required for this command");
    const auto& ss = *c.synth;
    Section p(ss.params, "synth.params");
    if (ss.kind == "ellipse") {
        const long n = p.integer("n_landmarks", 5, 3);
        const Vector ctr = p.has("center") ? p.vector("center", 2) : Vector(Vector::Zero(2));
        const Vector ax = p.vector("axes", 2);
        const double rot = p.number("rotation", 0.0);
        p.finish();
        out.json_file("dataset.json", dataset_to_json(dataset_from_shapes(
                                          {synth_ellipse(n, Eigen::Vector2d(ctr[0], ctr[1]), ax[0], ax[1], rot)},
                                          "synthetic ellipse")));
    } else if (ss.kind == "grid-noise") {
        const EulerianNoise nz = parse_grid(p);
        out.json_file("noise.json", noise_to_json(nz));
    } else {
        CcLikeConfig cc;
        cc.n_landmarks = p.integer("n_landmarks", 77, 3);
        cc.n_shapes = static_cast<int>(p.integer("n_shapes", 65, 1));
        cc.n_modes = static_cast<int>(p.integer("n_modes", 6, 1));
        cc.amplitude = p.number("amplitude", 0.02);
        cc.seed = c.seed;
        p.finish();
        out.json_file("dataset.json",
                      dataset_to_json(dataset_from_shapes(synth_cc_like(cc), "synthetic corpus-callosum-like stand-in")));
    }
    out.json_file("result.json", {{"command", "synth"}, {"kind", ss.kind}});
}

/// Runs `command` and writes manifest.json last. The manifest embeds the
/// resolved configuration, so it alone reproduces the run.
inline void run_command(const std::string& command, const RunConfig& c, const std::filesystem::path& out_dir) {
    static const std::map<std::string, std::function<void(const RunConfig&, OutputDir&)>> table{
        {"simulate", cmd_simulate}, {"sample", cmd_sample},         {"moments", cmd_moments},
        {"fit-moments", cmd_fit_moments}, {"bridge", cmd_bridge},   {"likelihood", cmd_likelihood},
        {"fit-em", cmd_fit_em},     {"synth", cmd_synth}};
    const auto it = table.find(command);
    if (it == table.end()) throw ConfigError("unknown command '" + command + "'");
    OutputDir out(out_dir);
    it->second(c, out);
    const std::string canonical = c.raw.dump();
    auto files = out.files();
    std::sort(files.begin(), files.end());
    out.json_file("manifest.json", {{"schema_version", kSchemaVersion},
                                    {"command", command},
                                    {"seed", c.seed},
                                    {"config_hash", "fnv1a64:" + hex64(fnv1a64(canonical))},
                                    {"version", kVersion},
                                    {"eigen_version", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                                          std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                                          std::to_string(EIGEN_MINOR_VERSION)},
                                    {"config", c.raw},
                                    {"outputs", files}});
}

}  // namespace stochlm
