#pragma once

// Run configuration: one JSON document per run, validated before any compute.
// Errors name the offending field by its dotted path.

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stochlm/bridge.hpp"
#include "stochlm/em.hpp"
#include "stochlm/io.hpp"
#include "stochlm/sde.hpp"
#include "stochlm/synth.hpp"

namespace stochlm {

/// Typed access to one JSON object; `finish()` rejects keys that were never read.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    [[nodiscard]] bool has(const std::string& key) const { return j_.contains(key); }

    [[nodiscard]] const json& raw(const std::string& key) {
        used_.insert(key);
        if (!j_.contains(key)) throw ConfigError(field(key) + ": missing");
        return j_.at(key);
    }

    [[nodiscard]] std::string field(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    double number(const std::string& key, std::optional<double> fallback = std::nullopt) {
        used_.insert(key);
        if (!j_.contains(key)) {
            if (fallback) return *fallback;
            throw ConfigError(field(key) + ": missing");
        }
        return number_at(j_.at(key), field(key));
    }

    double positive(const std::string& key, std::optional<double> fallback = std::nullopt) {
        const double v = number(key, fallback);
        if (!(v > 0.0)) throw ConfigError(field(key) + ": must be > 0");
        return v;
    }

    long integer(const std::string& key, std::optional<long> fallback = std::nullopt, long min = 0) {
        used_.insert(key);
        long v = 0;
        if (!j_.contains(key)) {
            if (!fallback) throw ConfigError(field(key) + ": missing");
            v = *fallback;
        } else {
            const json& x = j_.at(key);
            if (!x.is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
            v = x.get<long>();
        }
        if (v < min) throw ConfigError(field(key) + ": must be >= " + std::to_string(min));
        return v;
    }

    bool boolean(const std::string& key, bool fallback) {
        used_.insert(key);
        if (!j_.contains(key)) return fallback;
        if (!j_.at(key).is_boolean()) throw ConfigError(field(key) + ": expected true or false");
        return j_.at(key).get<bool>();
    }

    std::string string(const std::string& key, std::optional<std::string> fallback = std::nullopt) {
        used_.insert(key);
        if (!j_.contains(key)) {
            if (fallback) return *fallback;
            throw ConfigError(field(key) + ": missing");
        }
        if (!j_.at(key).is_string()) throw ConfigError(field(key) + ": expected a string");
        return j_.at(key).get<std::string>();
    }

    Vector vector(const std::string& key, Eigen::Index expected = -1) {
        return vector_from_json(raw(key), field(key), expected);
    }

    Positions positions(const std::string& key, Eigen::Index n = -1, Eigen::Index d = -1) {
        return positions_from_json(raw(key), field(key), n, d);
    }

    Section sub(const std::string& key) { return {raw(key), field(key)}; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown field");
    }

    [[nodiscard]] std::string where() const { return path_.empty() ? "config" : path_; }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

inline KernelSpec parse_kernel(Section s) {
    const auto fam = kernel_family_from_string(s.string("family", "gaussian"));
    const double scale = s.positive("scale");
    s.finish();
    return {fam, scale};
}

inline AmplitudeRule parse_amplitude_rule(Section s) {
    const std::string rule = s.string("rule");
    AmplitudeRule r;
    if (rule == "uniform") {
        r = AmplitudeRule::uniform(s.number("value"));
    } else if (rule == "split") {
        r = AmplitudeRule::split(s.number("low"), s.number("high"));
    } else {
        throw ConfigError(s.field("rule") + ": expected uniform|split");
    }
    s.finish();
    return r;
}

inline EulerianNoise parse_grid(Section s) {
    const int nx = static_cast<int>(s.integer("nx", std::nullopt, 1));
    const int ny = static_cast<int>(s.integer("ny", std::nullopt, 1));
    const Vector region = s.vector("region", 4);
    if (!(region[0] <= region[1]) || !(region[2] <= region[3]))
        throw ConfigError(s.field("region") + ": expected [x_min, x_max, y_min, y_max]");
    const auto fam = kernel_family_from_string(s.string("family", "gaussian"));
    const KernelSpec k(fam, s.positive("scale"));
    const AmplitudeRule rule = parse_amplitude_rule(s.sub("amplitudes"));
    s.finish();
    return synth_grid_noise(nx, ny, {region[0], region[1], region[2], region[3]}, k, rule);
}

/// Noise backends. Lagrangian amplitudes may be a single d-vector applied to
/// every landmark; "scale": "auto" takes the square root of the data range.
struct NoiseSpec {
    NoiseModel model;
    bool lagrangian_auto_scale = false;
};

inline NoiseSpec parse_noise(Section s, Eigen::Index n, Eigen::Index d) {
    const std::string backend = s.string("backend");
    NoiseSpec spec;
    if (backend == "eulerian") {
        EulerianNoise nz;
        if (s.has("grid")) nz = parse_grid(s.sub("grid"));
        if (s.has("fields")) {
            const json& arr = s.raw("fields");
            if (!arr.is_array()) throw ConfigError(s.field("fields") + ": expected an array");
            for (std::size_t l = 0; l < arr.size(); ++l) {
                Section f(arr[l], s.field("fields") + "[" + std::to_string(l) + "]");
                NoiseField nf;
                nf.center = f.vector("center", d);
                nf.lambda = f.vector("lambda", d);
                nf.kernel = KernelSpec(kernel_family_from_string(f.string("family", "gaussian")),
                                       f.positive("scale"));
                f.finish();
                nz.fields.push_back(std::move(nf));
            }
        }
        for (const auto& f : nz.fields)
            if (f.center.size() != d) throw ConfigError(s.where() + ": field dimension differs from landmarks");
        spec.model = std::move(nz);
    } else if (backend == "lagrangian") {
        LagrangianNoise nz;
        const auto fam = kernel_family_from_string(s.string("family", "gaussian"));
        if (s.has("scale") && s.raw("scale").is_string()) {
            if (s.string("scale") != "auto") throw ConfigError(s.field("scale") + ": expected a number or \"auto\"");
            spec.lagrangian_auto_scale = true;
            nz.kernel = KernelSpec(fam, 1.0);
        } else {
            nz.kernel = KernelSpec(fam, s.positive("scale"));
        }
        const json& lam = s.raw("lambdas");
        if (lam.is_array() && !lam.empty() && lam[0].is_number()) {
            const Vector row = vector_from_json(lam, s.field("lambdas"), d);
            nz.lambdas = Positions(n, d);
            for (Eigen::Index i = 0; i < n; ++i) nz.lambdas.row(i) = row.transpose();
        } else {
            nz.lambdas = positions_from_json(lam, s.field("lambdas"), n, d);
        }
        spec.model = std::move(nz);
    } else {
        throw ConfigError(s.field("backend") + ": expected eulerian|lagrangian");
    }
    s.finish();
    return spec;
}

/// Template shape: explicit points or a generated ellipse.
inline Positions parse_shape(Section s) {
    Positions q;
    if (s.has("ellipse")) {
        Section e = s.sub("ellipse");
        const long n = e.integer("n_landmarks", std::nullopt, 3);
        const Vector c = e.has("center") ? e.vector("center", 2) : Vector(Vector::Zero(2));
        const Vector ax = e.vector("axes", 2);
        const double rot = e.number("rotation", 0.0);
        e.finish();
        q = synth_ellipse(n, Eigen::Vector2d(c[0], c[1]), ax[0], ax[1], rot);
    } else {
        q = s.positions("points");
    }
    s.finish();
    return q;
}

struct InitialSpec {
    std::optional<Positions> q;
    std::optional<Positions> p;
};

inline InitialSpec parse_initial(Section s) {
    InitialSpec out;
    if (s.has("ellipse") || s.has("points")) {
        json shape = json::object();
        if (s.has("ellipse")) shape["ellipse"] = s.raw("ellipse");
        if (s.has("points")) shape["points"] = s.raw("points");
        out.q = parse_shape(Section(shape, s.where()));
    } else if (s.has("q")) {
        out.q = s.positions("q");
    }
    if (s.has("p")) {
        const json& p = s.raw("p");
        if (p.is_string()) {
            if (p.get<std::string>() != "zero") throw ConfigError(s.field("p") + ": expected points or \"zero\"");
        } else {
            if (!out.q) throw ConfigError(s.field("p") + ": requires initial positions");
            out.p = positions_from_json(p, s.field("p"), out.q->rows(), out.q->cols());
        }
    }
    s.finish();
    return out;
}

struct FitMomentsSettings {
    double dt = 0.01;
    double gamma1 = 1.0;
    double gamma2 = 1.0;
    bool estimate_p0 = true;
    double lambda_lower = -0.1;
    double lambda_upper = 0.1;
    double p0_lower = -2.0;
    double p0_upper = 2.0;
};

struct SynthSettings {
    std::string kind;
    json params;  ///< kind-specific section, parsed by the command
};

/// Fully parsed run configuration.
struct RunConfig {
    json raw;
    std::filesystem::path base_dir;
    std::uint64_t seed = 0;
    unsigned workers = 0;
    double T = 1.0;
    KernelSpec kernel = KernelSpec::gaussian(1.0);
    InitialSpec initial;
    std::optional<NoiseSpec> noise;
    SdeConfig sde;
    long n_samples = 100;
    FitMomentsSettings moments;
    DeConfig de;
    BridgeConfig bridge;
    long bridge_write_paths = -1;
    EmConfig em;
    std::optional<std::filesystem::path> data;
    std::optional<Positions> target;
    std::optional<SynthSettings> synth;

    [[nodiscard]] Positions q0() const {
        if (!initial.q) throw ConfigError("initial: positions are required for this command");
        return *initial.q;
    }
    [[nodiscard]] Positions p0() const {
        const Positions q = q0();
        return initial.p ? *initial.p : Positions(Positions::Zero(q.rows(), q.cols()));
    }
    [[nodiscard]] const NoiseSpec& noise_spec() const {
        if (!noise) throw ConfigError("noise: required for this command");
        return *noise;
    }
};

inline RunConfig parse_config(const json& j, const std::filesystem::path& base_dir,
                              std::optional<std::uint64_t> seed_override = std::nullopt) {
    RunConfig c;
    c.raw = j;
    if (seed_override) c.raw["seed"] = *seed_override;
    c.base_dir = base_dir;
    Section root(c.raw, "");
    const long version = root.integer("schema_version", kSchemaVersion, 1);
    if (version != kSchemaVersion) throw ConfigError("schema_version: unsupported version " + std::to_string(version));
    if (root.has("seed")) {
        const json& s = root.raw("seed");
        if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<long long>() >= 0))
            throw ConfigError("seed: expected a non-negative integer");
        c.seed = s.get<std::uint64_t>();
    }
    c.workers = static_cast<unsigned>(root.integer("workers", 0, 0));
    c.T = root.positive("T", 1.0);
    if (root.has("kernel")) c.kernel = parse_kernel(root.sub("kernel"));
    if (root.has("initial")) c.initial = parse_initial(root.sub("initial"));
    if (root.has("data")) c.data = base_dir / root.string("data");
    if (root.has("target")) c.target = root.positions("target");

    Eigen::Index n = c.initial.q ? c.initial.q->rows() : -1;
    Eigen::Index d = c.initial.q ? c.initial.q->cols() : 2;
    if (n < 0 && c.data) {
        const ShapeDataset ds = read_dataset(*c.data);
        n = ds.n_landmarks;
        d = ds.d;
    }
    if (root.has("noise")) {
        if (n < 0) throw ConfigError("noise: landmark count unknown; provide initial positions or data");
        c.noise = parse_noise(root.sub("noise"), n, d);
    }

    if (root.has("sde")) {
        Section s = root.sub("sde");
        c.sde.dt = s.positive("dt", 1e-3);
        c.sde.scheme = sde_scheme_from_string(s.string("scheme", "heun"));
        c.n_samples = s.integer("n_samples", 100, 2);
        s.finish();
    }
    if (c.sde.dt > c.T) throw ConfigError("sde.dt: must not exceed T");
    c.sde.T = c.T;
    c.sde.seed = c.seed;
    c.sde.workers = c.workers;

    if (root.has("moments")) {
        Section s = root.sub("moments");
        auto& m = c.moments;
        m.dt = s.positive("dt", 0.01);
        m.gamma1 = s.positive("gamma1", 1.0);
        m.gamma2 = s.positive("gamma2", 1.0);
        m.estimate_p0 = s.boolean("estimate_p0", true);
        if (s.has("lambda_bounds")) {
            const Vector b = s.vector("lambda_bounds", 2);
            m.lambda_lower = b[0];
            m.lambda_upper = b[1];
        }
        if (s.has("p0_bounds")) {
            const Vector b = s.vector("p0_bounds", 2);
            m.p0_lower = b[0];
            m.p0_upper = b[1];
        }
        if (!(m.lambda_lower < m.lambda_upper)) throw ConfigError("moments.lambda_bounds: lower must be < upper");
        if (!(m.p0_lower < m.p0_upper)) throw ConfigError("moments.p0_bounds: lower must be < upper");
        s.finish();
    }

    if (root.has("de")) {
        Section s = root.sub("de");
        c.de.population = static_cast<int>(s.integer("population", 0, 0));
        if (c.de.population != 0 && c.de.population < 4) throw ConfigError("de.population: must be >= 4");
        c.de.F = s.number("F", 0.8);
        c.de.CR = s.number("CR", 0.9);
        c.de.generations = static_cast<int>(s.integer("generations", 100, 0));
        c.de.polish_steps = static_cast<int>(s.integer("polish_steps", 0, 0));
        if (!(c.de.F > 0.0 && c.de.F <= 2.0)) throw ConfigError("de.F: must be in (0, 2]");
        if (!(c.de.CR >= 0.0 && c.de.CR <= 1.0)) throw ConfigError("de.CR: must be in [0, 1]");
        s.finish();
    }
    c.de.seed = c.seed;
    c.de.workers = c.workers;

    if (root.has("bridge")) {
        Section s = root.sub("bridge");
        auto& b = c.bridge;
        b.n_steps = static_cast<int>(s.integer("n_steps", 100, 2));
        b.epsilon_end = s.number("epsilon_end", 0.01);
        if (!(b.epsilon_end > 0.0 && b.epsilon_end <= 0.1))
            throw ConfigError("bridge.epsilon_end: must be in (0, 0.1]");
        b.n_samples = static_cast<int>(s.integer("n_samples", 100, 1));
        b.predictor_steps = static_cast<int>(s.integer("predictor_steps", 10, 1));
        b.max_retries = static_cast<int>(s.integer("max_retries", 3, 0));
        b.drift_clip = s.number("drift_clip", 0.0);
        const std::string norm = s.string("normalization", "trace");
        if (norm == "trace") b.normalization = GuidanceNormalization::Trace;
        else if (norm == "none") b.normalization = GuidanceNormalization::None;
        else throw ConfigError("bridge.normalization: expected trace|none");
        c.bridge_write_paths = s.integer("write_paths", -1, -1);
        s.finish();
    }
    c.bridge.seed = c.seed;
    c.bridge.workers = c.workers;

    c.em.bridge = c.bridge;
    if (root.has("em")) {
        Section s = root.sub("em");
        auto& e = c.em;
        e.max_iterations = static_cast<int>(s.integer("max_iterations", 30, 1));
        e.tolerance = s.positive("tolerance", 1e-3);
        e.patience = static_cast<int>(s.integer("patience", 3, 1));
        e.bounds.estimate_q0 = s.boolean("estimate_q0", true);
        e.bounds.estimate_p0 = s.boolean("estimate_p0", false);
        e.bounds.q0_halfwidth = s.positive("q0_halfwidth", 0.1);
        e.bounds.p0_halfwidth = s.positive("p0_halfwidth", 1.0);
        if (s.has("lambda_bounds")) {
            const Vector b = s.vector("lambda_bounds", 2);
            e.bounds.lambda_lower = b[0];
            e.bounds.lambda_upper = b[1];
        }
        if (!(e.bounds.lambda_lower < e.bounds.lambda_upper))
            throw ConfigError("em.lambda_bounds: lower must be < upper");
        e.mstep.population = static_cast<int>(s.integer("population", 0, 0));
        e.mstep.generations = static_cast<int>(s.integer("generations", 30, 0));
        e.mstep.polish_steps = static_cast<int>(s.integer("polish_steps", 10, 0));
        s.finish();
    }
    c.em.seed = c.seed;
    c.em.mstep.workers = c.workers;

    if (root.has("synth")) {
        Section s = root.sub("synth");
        SynthSettings ss;
        ss.kind = s.string("kind");
        if (ss.kind != "ellipse" && ss.kind != "grid-noise" && ss.kind != "cc-like")
            throw ConfigError("synth.kind: expected ellipse|grid-noise|cc-like");
        ss.params = s.has("params") ? s.raw("params") : json::object();
        if (!ss.params.is_object()) throw ConfigError("synth.params: expected an object");
        s.finish();
        c.synth = std::move(ss);
    }
    root.finish();
    return c;
}

}  // namespace stochlm
