#pragma once

// Monte-Carlo EM for theta = (q0, p0, noise amplitudes).
//
// E-step: guided bridges from theta_prev to every observation are sampled once
// and frozen together with their self-normalized weights. The complete-data
// log-density of a cached path under theta scores its position increments as
// Euler transitions,
//   q_{k+1} ~ N(q_k + F_q(X_k; theta) dt_k, Sigma_q Sigma_q^T(X_k; theta) dt_k),
// where F = b + c is the Ito drift. The first transition starts from theta's
// own initial state and the last one ends at the observation at time T.
// M-step: differential evolution warm-started at theta_prev, followed by a
// polish; since theta_prev is in the initial population the frozen-sample Q
// never decreases.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stochlm/bridge.hpp"
#include "stochlm/optimize.hpp"

namespace stochlm {

struct Theta {
    Positions q0;
    Positions p0;
    Positions lambdas;  ///< N x d (Lagrangian) or J x d (Eulerian)
};

/// Amplitudes of a noise model as a row-per-field (or row-per-landmark) array.
inline Positions amplitudes_of(const NoiseModel& noise) {
    if (const auto* lag = std::get_if<LagrangianNoise>(&noise)) return lag->lambdas;
    const auto& eul = std::get<EulerianNoise>(noise);
    const auto d = eul.fields.empty() ? 0 : eul.fields.front().lambda.size();
    Positions out(eul.size(), d);
    for (Eigen::Index l = 0; l < eul.size(); ++l)
        out.row(l) = eul.fields[static_cast<std::size_t>(l)].lambda.transpose();
    return out;
}

/// Copy of `noise` with amplitudes replaced; shape must match amplitudes_of(noise).
inline NoiseModel with_amplitudes(const NoiseModel& noise, const Positions& lambdas) {
    if (const auto* lag = std::get_if<LagrangianNoise>(&noise)) {
        if (lambdas.rows() != lag->lambdas.rows() || lambdas.cols() != lag->lambdas.cols())
            throw std::invalid_argument("with_amplitudes: Lagrangian amplitudes must be N x d");
        LagrangianNoise out = *lag;
        out.lambdas = lambdas;
        return out;
    }
    EulerianNoise out = std::get<EulerianNoise>(noise);
    if (lambdas.rows() != out.size())
        throw std::invalid_argument("with_amplitudes: one amplitude row per Eulerian field");
    for (Eigen::Index l = 0; l < out.size(); ++l)
        out.fields[static_cast<std::size_t>(l)].lambda = lambdas.row(l).transpose();
    return out;
}

/// log N(q_next; q + F_q dt, Sigma_q Sigma_q^T dt) at phase state x.
inline double transition_log_density(const StochasticSystem& sys, const Vector& x, const Layout& L,
                                     const Vector& q_next, double dt) {
    const Matrix sig = sys.sigma(x, L);
    const Vector drift = sys.drift(x, L) + ito_correction(sys.noise, x, L);
    const auto nd = L.nd();
    const Vector mean = x.head(nd) + drift.head(nd) * dt;
    const Matrix cov = sig.topRows(nd) * sig.topRows(nd).transpose() * dt;
    return gaussian_log_density(q_next, mean, cov);
}

/// Complete-data log-density of a cached bridge path ending at v (time T),
/// with the path's initial state replaced by x0.
inline double path_log_density(const StochasticSystem& sys, const BridgeSample& path,
                               const Vector& x0, const Layout& L, const Vector& v, double T) {
    const auto nd = L.nd();
    const std::size_t K = path.states.size();
    double lp = 0.0;
    for (std::size_t k = 0; k + 1 < K; ++k) {
        const Vector& xk = k == 0 ? x0 : path.states[k];
        lp += transition_log_density(sys, xk, L, path.states[k + 1].head(nd),
                                     path.times[k + 1] - path.times[k]);
    }
    const Vector& last = K == 1 ? x0 : path.states.back();
    lp += transition_log_density(sys, last, L, v, T - path.times.back());
    return lp;
}

/// Spatial correlation range of the Lagrangian backend estimated from data:
/// the mean over shapes k and landmark pairs (i, j) of |q_ik - q_jk|^2.
inline double lagrangian_range(const std::vector<Positions>& shapes) {
    if (shapes.empty()) throw ConfigError("lagrangian_range: no shapes");
    double total = 0.0;
    double count = 0.0;
    for (const auto& q : shapes)
        for (Eigen::Index i = 0; i < q.rows(); ++i)
            for (Eigen::Index j = 0; j < q.rows(); ++j) {
                total += (q.row(i) - q.row(j)).squaredNorm();
                count += 1.0;
            }
    return total / count;
}

/// Landmark-wise Euclidean mean of a set of shapes.
inline Positions euclidean_mean(const std::vector<Positions>& shapes) {
    if (shapes.empty()) throw ConfigError("euclidean_mean: no shapes");
    Positions m = Positions::Zero(shapes.front().rows(), shapes.front().cols());
    for (const auto& q : shapes) m += q;
    return m / static_cast<double>(shapes.size());
}

struct QEstimate {
    double value = 0.0;
    double std_error = 0.0;
};

/// Frozen-sample estimate of theta -> E[log p(path, v | theta) | v, theta_prev],
/// summed over observations.
class QFunction {
public:
    struct CachedObservation {
        Vector v;
        std::vector<BridgeSample> samples;
        std::vector<double> weights;  ///< normalized
        double ess = 0.0;
    };

    QFunction(KernelSpec kv, NoiseModel noise_template, Layout L, double T,
              std::vector<CachedObservation> obs)
        : kv_(kv), template_(std::move(noise_template)), L_(L), T_(T), obs_(std::move(obs)) {}

    [[nodiscard]] QEstimate evaluate(const Theta& theta) const {
        const StochasticSystem sys{kv_, with_amplitudes(template_, theta.lambdas)};
        const Vector x0 = PhaseState(theta.q0, theta.p0).to_vector();
        QEstimate q;
        double var = 0.0;
        for (const auto& o : obs_) {
            std::vector<double> ell(o.samples.size());
            double qi = 0.0;
            for (std::size_t m = 0; m < o.samples.size(); ++m) {
                if (o.weights[m] == 0.0) {
                    ell[m] = 0.0;
                    continue;
                }
                ell[m] = path_log_density(sys, o.samples[m], x0, L_, o.v, T_);
                qi += o.weights[m] * ell[m];
            }
            for (std::size_t m = 0; m < o.samples.size(); ++m)
                if (o.weights[m] != 0.0) var += o.weights[m] * o.weights[m] * (ell[m] - qi) * (ell[m] - qi);
            q.value += qi;
        }
        q.std_error = std::sqrt(var);
        return q;
    }

    double operator()(const Theta& theta) const { return evaluate(theta).value; }

    [[nodiscard]] const std::vector<CachedObservation>& observations() const { return obs_; }

    [[nodiscard]] double mean_ess() const {
        double s = 0.0;
        for (const auto& o : obs_) s += o.ess;
        return obs_.empty() ? 0.0 : s / static_cast<double>(obs_.size());
    }

    [[nodiscard]] double min_ess() const {
        double s = std::numeric_limits<double>::infinity();
        for (const auto& o : obs_) s = std::min(s, o.ess);
        return s;
    }

private:
    KernelSpec kv_;
    NoiseModel template_;
    Layout L_;
    double T_;
    std::vector<CachedObservation> obs_;
};

/// Samples and caches bridges from theta_prev to every observation. The random
/// streams of an observation are keyed by its coordinates and cfg.seed.
inline QFunction e_step(const Theta& theta_prev, const std::vector<Positions>& observations,
                        const KernelSpec& kv, const NoiseModel& noise_template, double T,
                        const BridgeConfig& cfg) {
    if (cfg.n_samples < 2) throw ConfigError("e_step: bridge.n_samples must be >= 2");
    const PhaseState s0(theta_prev.q0, theta_prev.p0);
    const Layout L = layout_of(s0);
    const StochasticSystem sys{kv, with_amplitudes(noise_template, theta_prev.lambdas)};
    const Vector x0 = s0.to_vector();
    std::vector<QFunction::CachedObservation> cached(observations.size());
    for (std::size_t i = 0; i < observations.size(); ++i) {
        if (observations[i].rows() != L.n || observations[i].cols() != L.d)
            throw std::invalid_argument("e_step: observation " + std::to_string(i) +
                                        " has a different landmark layout");
        auto& c = cached[i];
        c.v = flatten(observations[i]);
        c.samples = sample_bridges(sys, x0, L, c.v, T, cfg, content_stream(c.v));
        std::vector<double> lw;
        lw.reserve(c.samples.size());
        for (const auto& s : c.samples) lw.push_back(s.log_weight);
        c.weights = normalized_weights(lw);
        c.ess = effective_sample_size(c.weights);
    }
    return QFunction(kv, noise_template, L, T, std::move(cached));
}

/// Which parts of theta the M-step optimizes and within which box.
struct EmBounds {
    bool estimate_q0 = true;
    bool estimate_p0 = false;
    double q0_halfwidth = 0.1;  ///< box around theta_prev.q0
    double p0_halfwidth = 1.0;  ///< box around theta_prev.p0
    double lambda_lower = 0.0;
    double lambda_upper = 1.0;

    void validate() const {
        if (!(lambda_lower < lambda_upper)) throw ConfigError("em.lambda_bounds: lower must be < upper");
        if (estimate_q0 && !(q0_halfwidth > 0.0)) throw ConfigError("em.q0_halfwidth must be > 0");
        if (estimate_p0 && !(p0_halfwidth > 0.0)) throw ConfigError("em.p0_halfwidth must be > 0");
    }
};

/// Flat parameter vector [q0?, p0?, lambdas] and its names.
struct ThetaPacking {
    EmBounds bounds;
    Eigen::Index n = 0;
    Eigen::Index d = 0;
    Eigen::Index lambda_rows = 0;

    [[nodiscard]] Eigen::Index size() const {
        return (bounds.estimate_q0 ? n * d : 0) + (bounds.estimate_p0 ? n * d : 0) + lambda_rows * d;
    }

    [[nodiscard]] Vector pack(const Theta& t) const {
        Vector x(size());
        Eigen::Index off = 0;
        if (bounds.estimate_q0) {
            x.segment(off, n * d) = flatten(t.q0);
            off += n * d;
        }
        if (bounds.estimate_p0) {
            x.segment(off, n * d) = flatten(t.p0);
            off += n * d;
        }
        x.segment(off, lambda_rows * d) = flatten(t.lambdas);
        return x;
    }

    /// Parameters not in x are taken from `base`.
    [[nodiscard]] Theta unpack(const Vector& x, const Theta& base) const {
        Theta t = base;
        Eigen::Index off = 0;
        if (bounds.estimate_q0) {
            t.q0 = unflatten(x.segment(off, n * d), n, d);
            off += n * d;
        }
        if (bounds.estimate_p0) {
            t.p0 = unflatten(x.segment(off, n * d), n, d);
            off += n * d;
        }
        t.lambdas = unflatten(x.segment(off, lambda_rows * d), lambda_rows, d);
        return t;
    }

    [[nodiscard]] std::vector<std::string> names() const {
        std::vector<std::string> out;
        auto add = [&](const std::string& base, Eigen::Index rows) {
            for (Eigen::Index i = 0; i < rows; ++i)
                for (Eigen::Index a = 0; a < d; ++a)
                    out.push_back(base + "[" + std::to_string(i) + "][" + std::to_string(a) + "]");
        };
        if (bounds.estimate_q0) add("q0", n);
        if (bounds.estimate_p0) add("p0", n);
        add("lambda", lambda_rows);
        return out;
    }

    void box(const Theta& center, Vector& lo, Vector& hi) const {
        lo.resize(size());
        hi.resize(size());
        Eigen::Index off = 0;
        if (bounds.estimate_q0) {
            const Vector q = flatten(center.q0);
            lo.segment(off, n * d) = q.array() - bounds.q0_halfwidth;
            hi.segment(off, n * d) = q.array() + bounds.q0_halfwidth;
            off += n * d;
        }
        if (bounds.estimate_p0) {
            const Vector p = flatten(center.p0);
            lo.segment(off, n * d) = p.array() - bounds.p0_halfwidth;
            hi.segment(off, n * d) = p.array() + bounds.p0_halfwidth;
            off += n * d;
        }
        lo.segment(off, lambda_rows * d).setConstant(bounds.lambda_lower);
        hi.segment(off, lambda_rows * d).setConstant(bounds.lambda_upper);
    }
};

struct MStepConfig {
    int population = 0;  ///< 0 selects max(8, 2 K)
    int generations = 30;
    int polish_steps = 10;
    double F = 0.8;
    double CR = 0.9;
    unsigned workers = 0;
};

struct MStepResult {
    Theta theta;
    double q_value = 0.0;
    double q_prev = 0.0;
    std::vector<std::string> at_bound;  ///< names of amplitude parameters on a bound
    long evaluations = 0;
};

using ThetaObjective = std::function<double(const Theta&)>;

/// Maximizes Q within the box, starting from theta_prev.
inline MStepResult m_step(const ThetaObjective& Q, const Theta& theta_prev, const EmBounds& bounds,
                          const MStepConfig& cfg, std::uint64_t seed) {
    bounds.validate();
    ThetaPacking pk{bounds, theta_prev.q0.rows(), theta_prev.q0.cols(), theta_prev.lambdas.rows()};
    DeConfig de;
    pk.box(theta_prev, de.lower, de.upper);
    const auto K = pk.size();
    de.population = cfg.population > 0 ? cfg.population : static_cast<int>(std::max<Eigen::Index>(8, 2 * K));
    de.generations = cfg.generations;
    de.polish_steps = cfg.polish_steps;
    de.F = cfg.F;
    de.CR = cfg.CR;
    de.seed = seed;
    de.workers = cfg.workers;
    de.initial = pk.pack(theta_prev);
    const Objective f = [&](const Vector& x) { return -Q(pk.unpack(x, theta_prev)); };
    const DeResult r = minimize(f, de);

    MStepResult out;
    out.theta = pk.unpack(r.best_x, theta_prev);
    out.q_value = -r.best_f;
    out.q_prev = Q(pk.unpack(clip_to_box(*de.initial, de.lower, de.upper), theta_prev));
    out.evaluations = r.evaluations + 1;
    const auto names = pk.names();
    const Eigen::Index lam_off = K - theta_prev.lambdas.size();
    for (Eigen::Index j = lam_off; j < K; ++j) {
        const double tol = 1e-9 * (de.upper[j] - de.lower[j]);
        if (r.best_x[j] <= de.lower[j] + tol || r.best_x[j] >= de.upper[j] - tol)
            out.at_bound.push_back(names[static_cast<std::size_t>(j)]);
    }
    return out;
}

struct EmConfig {
    EmBounds bounds;
    MStepConfig mstep;
    BridgeConfig bridge;
    int max_iterations = 30;
    double tolerance = 1e-3;
    int patience = 3;
    std::uint64_t seed = 0;

    void validate() const {
        bounds.validate();
        bridge.validate();
        if (bridge.n_samples < 2) throw ConfigError("em.bridge.n_samples must be >= 2");
        if (max_iterations < 1) throw ConfigError("em.max_iterations must be >= 1");
        if (!(tolerance > 0.0)) throw ConfigError("em.tolerance must be > 0");
        if (patience < 1) throw ConfigError("em.patience must be >= 1");
    }
};

struct EmIteration {
    int iteration = 0;
    Theta theta;            ///< theta after this iteration's M-step
    double q_prev = 0.0;    ///< Q(theta_prev | theta_prev)
    double q_value = 0.0;   ///< Q(theta | theta_prev)
    double q_std_error = 0.0;
    double mean_ess = 0.0;
    double min_ess = 0.0;
    double lambda_change = 0.0;  ///< max relative change of the amplitudes
    std::vector<std::string> at_bound;
    double wall_seconds = 0.0;
};

struct EmResult {
    Theta theta;
    std::vector<EmIteration> trace;
    bool converged = false;
    std::string warning;
    std::vector<std::string> parameter_names;
};

/// Iterates e_step / m_step with fresh bridge seeds until the amplitudes change
/// by less than `tolerance` (relative) for `patience` consecutive iterations.
/// Without convergence the last iterate is returned with a warning.
inline EmResult fit_em(const std::vector<Positions>& observations, const Theta& init,
                       const KernelSpec& kv, const NoiseModel& noise_template, double T,
                       const EmConfig& cfg) {
    cfg.validate();
    if (observations.size() < 2) throw ConfigError("fit_em: need at least 2 observations");
    EmResult res;
    res.theta = init;
    res.parameter_names =
        ThetaPacking{cfg.bounds, init.q0.rows(), init.q0.cols(), init.lambdas.rows()}.names();
    int calm = 0;
    for (int it = 1; it <= cfg.max_iterations; ++it) {
        const auto start = std::chrono::steady_clock::now();
        BridgeConfig bc = cfg.bridge;
        bc.seed = sub_seed(cfg.seed, seed_purpose::em, static_cast<std::uint64_t>(it));
        const QFunction Q = e_step(res.theta, observations, kv, noise_template, T, bc);
        const MStepResult ms = m_step(Q, res.theta, cfg.bounds, cfg.mstep,
                                      sub_seed(cfg.seed, seed_purpose::de, static_cast<std::uint64_t>(it)));
        EmIteration rec;
        rec.iteration = it;
        rec.theta = ms.theta;
        rec.q_prev = ms.q_prev;
        rec.q_value = ms.q_value;
        rec.q_std_error = Q.evaluate(res.theta).std_error;
        rec.mean_ess = Q.mean_ess();
        rec.min_ess = Q.min_ess();
        rec.at_bound = ms.at_bound;
        const Vector a = flatten(res.theta.lambdas);
        const Vector b = flatten(ms.theta.lambdas);
        for (Eigen::Index j = 0; j < a.size(); ++j)
            rec.lambda_change = std::max(rec.lambda_change,
                                         std::abs(b[j] - a[j]) / std::max(std::abs(a[j]), 1e-12));
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        res.theta = ms.theta;
        res.trace.push_back(rec);
        calm = rec.lambda_change < cfg.tolerance ? calm + 1 : 0;
        if (calm >= cfg.patience) {
            res.converged = true;
            return res;
        }
    }
    res.warning = "em did not converge within " + std::to_string(cfg.max_iterations) +
                  " iterations; returning the last iterate";
    return res;
}

}  // namespace stochlm
