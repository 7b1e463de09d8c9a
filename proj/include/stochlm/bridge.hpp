#pragma once

// Guided diffusion bridges for the stochastic landmark system.
//
// The guided process is
//   dX = b~(X) dt - Sigma^2(X) r(t, X) / (s(X) (T - t)) dt + Sigma(X) dW
// where b~ = b + c is the Ito drift, r stacks (phi_{T-t}(X) - v) in the
// position slots and zeros in the momentum slots, phi_{T-t} is the
// deterministic endpoint predictor, and s(X) = tr(Sigma_q Sigma_q^T) / (N d) is
// a scalar normalization (1 when disabled). The added drift equals Sigma a with
//   a = -Sigma_q^T (phi - v) / (s (T - t)),
// so the likelihood ratio against the unguided process needs no inverse of
// Sigma:  log dP/dQ = sum_k ( -a_k . dW_k - 1/2 |a_k|^2 dt_k ).
// Sampling stops at t_s = T (1 - epsilon); the remaining interval is closed by
// the Gaussian transition density N(v; phi_{T-t_s}(X), Sigma_q Sigma_q^T (T - t_s)).
// The sample log-weight is the sum of both terms, so mean(exp(log_weight)) is
// an estimate of the transition density p(v) and self-normalized weights give
// conditional expectations given q(T) = v.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "stochlm/dynamics.hpp"
#include "stochlm/noise.hpp"
#include "stochlm/parallel.hpp"
#include "stochlm/random.hpp"
#include "stochlm/sde.hpp"

namespace stochlm {

enum class GuidanceNormalization { Trace, None };

struct BridgeConfig {
    int n_steps = 100;
    double epsilon_end = 0.01;
    int n_samples = 100;
    int predictor_steps = 10;  ///< RK4 sub-steps of phi_{T-t}
    std::uint64_t seed = 0;
    int max_retries = 3;
    double drift_clip = 0.0;  ///< bound on |b~| per coordinate; 0 disables
    GuidanceNormalization normalization = GuidanceNormalization::Trace;
    unsigned workers = 0;

    void validate() const {
        if (n_steps < 2) throw ConfigError("bridge.n_steps must be >= 2");
        if (!(epsilon_end > 0.0 && epsilon_end <= 0.1))
            throw ConfigError("bridge.epsilon_end must be in (0, 0.1]");
        if (n_samples < 1) throw ConfigError("bridge.n_samples must be >= 1");
        if (predictor_steps < 1) throw ConfigError("bridge.predictor_steps must be >= 1");
        if (max_retries < 0) throw ConfigError("bridge.max_retries must be >= 0");
    }
};

/// Time grid on [0, T(1 - eps)]: uniform steps, then the final 20% of the steps
/// shrink geometrically in remaining time T - t. The split point is chosen so
/// the first refined step matches the uniform step.
inline std::vector<double> bridge_time_grid(double T, int n_steps, double eps) {
    const int n_fine = std::max(1, static_cast<int>(std::lround(0.2 * n_steps)));
    const int n_coarse = n_steps - n_fine;
    const double r_stop = T * eps;
    std::vector<double> grid;
    grid.reserve(static_cast<std::size_t>(n_steps) + 1);
    if (n_coarse <= 0) {
        const double ratio = std::pow(r_stop / T, 1.0 / n_fine);
        double r = T;
        grid.push_back(0.0);
        for (int k = 1; k <= n_fine; ++k) grid.push_back(T - (r *= ratio));
        grid.back() = T - r_stop;
        return grid;
    }
    auto mismatch = [&](double r_a) {
        const double ratio = std::pow(r_stop / r_a, 1.0 / n_fine);
        return r_a * (1.0 - ratio) - (T - r_a) / n_coarse;
    };
    double lo = r_stop;
    double hi = T;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (mismatch(mid) < 0.0 ? lo : hi) = mid;
    }
    const double r_a = 0.5 * (lo + hi);
    const double t_a = T - r_a;
    for (int k = 0; k <= n_coarse; ++k) grid.push_back(t_a * k / n_coarse);
    const double ratio = std::pow(r_stop / r_a, 1.0 / n_fine);
    double r = r_a;
    for (int k = 1; k <= n_fine; ++k) {
        r *= ratio;
        grid.push_back(T - r);
    }
    grid.back() = T - r_stop;
    return grid;
}

struct GuidedStepResult {
    Vector x;
    double log_weight_increment = 0.0;
};

/// Pieces of the guided drift at one state.
struct Guidance {
    Matrix sigma;       ///< 2Nd x M
    Vector ito_drift;   ///< b + c (possibly clipped)
    Vector predicted;   ///< phi_{T-t}(x), positions only (Nd)
    Vector a;           ///< M, guidance expressed in noise coordinates
    double scale = 1.0; ///< s(x)
};

inline double guidance_scale(const Matrix& sigma, const Layout& L, GuidanceNormalization norm) {
    if (norm == GuidanceNormalization::None) return 1.0;
    return sigma.topRows(L.nd()).squaredNorm() / static_cast<double>(L.nd());
}

inline Guidance compute_guidance(const StochasticSystem& sys, const Vector& x, const Layout& L,
                                 const Vector& v, double t, double T, const BridgeConfig& cfg) {
    Guidance g;
    g.sigma = sys.sigma(x, L);
    g.ito_drift = sys.drift(x, L) + ito_correction(sys.noise, x, L);
    if (cfg.drift_clip > 0.0)
        g.ito_drift = g.ito_drift.cwiseMax(-cfg.drift_clip).cwiseMin(cfg.drift_clip);
    g.predicted = flow_endpoint(sys.kv, x, L, T - t, cfg.predictor_steps).head(L.nd());
    g.scale = guidance_scale(g.sigma, L, cfg.normalization);
    if (g.scale > 0.0)
        g.a = -(g.sigma.topRows(L.nd()).transpose() * (g.predicted - v)) / (g.scale * (T - t));
    else
        g.a = Vector::Zero(g.sigma.cols());
    return g;
}

/// The guidance drift -Sigma^2 r / (s (T - t)) as a phase-space vector.
inline Vector guidance_drift(const StochasticSystem& sys, const Vector& x, const Layout& L,
                             const Vector& v, double t, double T, const BridgeConfig& cfg) {
    const Guidance g = compute_guidance(sys, x, L, v, t, T, cfg);
    return g.sigma * g.a;
}

/// The same forcing written as a Sigma^2-preconditioned gradient flow of
/// E(y) = 1/2 |y - v|^2 at the predicted endpoint y = phi_{T-t}(x); the
/// gradient is taken by central differences so this serves as an independent check.
inline Vector gradient_flow_forcing(const StochasticSystem& sys, const Vector& x, const Layout& L,
                                    const Vector& v, double t, double T, const BridgeConfig& cfg) {
    const Matrix sig = sys.sigma(x, L);
    const double s = guidance_scale(sig, L, cfg.normalization);
    const Vector y = flow_endpoint(sys.kv, x, L, T - t, cfg.predictor_steps).head(L.nd());
    auto energy = [&](const Vector& z) { return 0.5 * (z - v).squaredNorm(); };
    Vector grad(L.nd());
    for (Eigen::Index j = 0; j < L.nd(); ++j) {
        const double h = 1e-6 * std::max(1.0, std::abs(y[j]));
        Vector yp = y;
        Vector ym = y;
        yp[j] += h;
        ym[j] -= h;
        grad[j] = (energy(yp) - energy(ym)) / (2.0 * h);
    }
    Vector full = Vector::Zero(L.phase());
    full.head(L.nd()) = grad;
    const Matrix sig2 = sig * sig.transpose();
    return -(sig2 * full) / (s * (T - t));
}

/// One Euler-Maruyama step of the guided process from time t.
inline GuidedStepResult guided_step(const StochasticSystem& sys, const Vector& x, const Layout& L,
                                    const Vector& v, double t, double dt, double T,
                                    const Vector& dW, const BridgeConfig& cfg) {
    if (!(t < T)) throw std::invalid_argument("guided_step: requires t < T");
    const Guidance g = compute_guidance(sys, x, L, v, t, T, cfg);
    GuidedStepResult out;
    out.x = x + (g.ito_drift + g.sigma * g.a) * dt + g.sigma * dW;
    out.log_weight_increment = -g.a.dot(dW) - 0.5 * g.a.squaredNorm() * dt;
    return out;
}

/// log N(v; mean, cov) with a relative diagonal jitter if cov is singular.
inline double gaussian_log_density(const Vector& v, const Vector& mean, const Matrix& cov) {
    const auto k = v.size();
    const double base = std::max(cov.diagonal().cwiseAbs().maxCoeff(), 1e-300);
    double jitter = 0.0;
    for (int attempt = 0; attempt < 12; ++attempt) {
        Matrix c = cov;
        c.diagonal().array() += jitter;
        Eigen::LLT<Matrix> llt(c);
        if (llt.info() == Eigen::Success) {
            const Vector z = llt.matrixL().solve(v - mean);
            const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
            return -0.5 * (static_cast<double>(k) * std::log(2.0 * std::numbers::pi) + logdet +
                           z.squaredNorm());
        }
        jitter = jitter == 0.0 ? 1e-12 * base : jitter * 100.0;
    }
    return -std::numeric_limits<double>::infinity();
}

struct BridgeSample {
    std::vector<double> times;
    std::vector<Vector> states;  ///< flat phase vectors at `times`
    double log_girsanov = 0.0;
    double log_endpoint = 0.0;
    double log_weight = 0.0;  ///< log_girsanov + log_endpoint
    double endpoint_gap = 0.0;
    int retries = 0;

    [[nodiscard]] PhaseState state(std::size_t k, const Layout& L) const {
        return PhaseState::from_vector(states[k], L.n, L.d, times[k]);
    }

    /// Positions at time t by linear interpolation on the stored grid.
    [[nodiscard]] Vector q_at(double t, const Layout& L) const {
        if (t <= times.front()) return states.front().head(L.nd());
        for (std::size_t k = 1; k < times.size(); ++k)
            if (t <= times[k]) {
                const double w = (t - times[k - 1]) / (times[k] - times[k - 1]);
                return (1.0 - w) * states[k - 1].head(L.nd()) + w * states[k].head(L.nd());
            }
        return states.back().head(L.nd());
    }
};

/// Samples one guided bridge from x0 (time 0) towards positions v at time T.
/// `stream` selects the random sub-stream of cfg.seed.
inline BridgeSample sample_bridge(const StochasticSystem& sys, const Vector& x0, const Layout& L,
                                  const Vector& v, double T, const BridgeConfig& cfg,
                                  std::uint64_t stream) {
    cfg.validate();
    if (v.size() != L.nd()) throw std::invalid_argument("sample_bridge: target has wrong size");
    const auto grid = bridge_time_grid(T, cfg.n_steps, cfg.epsilon_end);
    const Eigen::Index m = noise_dim(sys.noise, L);
    std::string last_error;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        Rng rng(splitmix64(sub_seed(cfg.seed, seed_purpose::bridge, stream) ^
                           splitmix64(static_cast<std::uint64_t>(attempt) + 1)));
        BridgeSample bs;
        bs.retries = attempt;
        bs.times = grid;
        bs.states.reserve(grid.size());
        bs.states.push_back(x0);
        Vector x = x0;
        bool ok = true;
        for (std::size_t k = 1; k < grid.size(); ++k) {
            const double dt = grid[k] - grid[k - 1];
            const Vector dW = gaussian_increment(rng, m, dt);
            const GuidedStepResult r = guided_step(sys, x, L, v, grid[k - 1], dt, T, dW, cfg);
            if (!r.x.allFinite() || !std::isfinite(r.log_weight_increment)) {
                last_error = "non-finite guided state at step " + std::to_string(k) +
                             " (t=" + std::to_string(grid[k]) + ")";
                ok = false;
                break;
            }
            x = r.x;
            bs.log_girsanov += r.log_weight_increment;
            bs.states.push_back(x);
        }
        if (!ok) continue;
        const double t_stop = grid.back();
        const Matrix sig = sys.sigma(x, L);
        const Vector pred = flow_endpoint(sys.kv, x, L, T - t_stop, cfg.predictor_steps).head(L.nd());
        const Matrix cov = sig.topRows(L.nd()) * sig.topRows(L.nd()).transpose() * (T - t_stop);
        bs.log_endpoint = gaussian_log_density(v, pred, cov);
        bs.log_weight = bs.log_girsanov + bs.log_endpoint;
        bs.endpoint_gap = (x.head(L.nd()) - v).norm();
        if (!std::isfinite(bs.log_weight)) {
            last_error = "non-finite bridge log-weight";
            continue;
        }
        return bs;
    }
    throw NumericalError("sample_bridge: " + last_error + " after " +
                         std::to_string(cfg.max_retries + 1) + " attempts");
}

/// n_samples independent bridges; sample m uses stream splitmix64(stream_base) + m.
inline std::vector<BridgeSample> sample_bridges(const StochasticSystem& sys, const Vector& x0,
                                                const Layout& L, const Vector& v, double T,
                                                const BridgeConfig& cfg,
                                                std::uint64_t stream_base = 0) {
    std::vector<BridgeSample> out(static_cast<std::size_t>(cfg.n_samples));
    const std::uint64_t base = splitmix64(stream_base);
    parallel_for(
        out.size(), [&](std::size_t m) { out[m] = sample_bridge(sys, x0, L, v, T, cfg, base + m); },
        cfg.workers);
    return out;
}

/// Self-normalized importance weights (sum to 1) from log-weights.
inline std::vector<double> normalized_weights(const std::vector<double>& log_w) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double lw : log_w) mx = std::max(mx, lw);
    std::vector<double> w(log_w.size());
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) total += (w[i] = std::exp(log_w[i] - mx));
    for (double& wi : w) wi /= total;
    return w;
}

inline double effective_sample_size(const std::vector<double>& normalized) {
    double s2 = 0.0;
    for (double w : normalized) s2 += w * w;
    return 1.0 / s2;
}

/// log of the mean of exp(log_w), computed stably.
inline double log_mean_exp(const std::vector<double>& log_w) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double lw : log_w) mx = std::max(mx, lw);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double lw : log_w) s += std::exp(lw - mx);
    return mx + std::log(s / static_cast<double>(log_w.size()));
}

struct WeightedEstimate {
    double value = 0.0;
    double ess = 0.0;
    double std_error = 0.0;  ///< delta-method standard error of the ratio estimator
    bool degenerate = false; ///< ESS below 2
};

using PathFunctional = std::function<double(const BridgeSample&)>;

inline WeightedEstimate weighted_average(const std::vector<BridgeSample>& samples,
                                         const PathFunctional& f) {
    if (samples.size() < 2) throw std::invalid_argument("conditional_expectation: need >= 2 samples");
    std::vector<double> lw;
    lw.reserve(samples.size());
    for (const auto& s : samples) lw.push_back(s.log_weight);
    const auto w = normalized_weights(lw);
    std::vector<double> vals(samples.size());
    WeightedEstimate est;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        vals[i] = f(samples[i]);
        est.value += w[i] * vals[i];
    }
    double var = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const double dv = vals[i] - est.value;
        var += w[i] * w[i] * dv * dv;
    }
    est.std_error = std::sqrt(var);
    est.ess = effective_sample_size(w);
    est.degenerate = est.ess < 2.0;
    return est;
}

/// E[f(path) | q(T) = v] by self-normalized importance sampling over guided bridges.
inline WeightedEstimate conditional_expectation(const PathFunctional& f, const PhaseState& s0,
                                                const KernelSpec& kv, const NoiseModel& noise,
                                                const Positions& v, double T,
                                                const BridgeConfig& cfg) {
    const StochasticSystem sys{kv, noise};
    const auto samples = sample_bridges(sys, s0.to_vector(), layout_of(s0), flatten(v), T, cfg);
    return weighted_average(samples, f);
}

struct LikelihoodResult {
    double log_likelihood = 0.0;
    std::vector<double> per_observation;
    std::vector<double> ess;
    bool degenerate = false;
};

/// Sum over observations of log p^(v_i). The random streams of an observation
/// are keyed by its coordinates, so the result does not depend on list order.
inline LikelihoodResult log_likelihood(const PhaseState& s0, const KernelSpec& kv,
                                       const NoiseModel& noise,
                                       const std::vector<Positions>& observations, double T,
                                       const BridgeConfig& cfg) {
    const StochasticSystem sys{kv, noise};
    const Layout L = layout_of(s0);
    const Vector x0 = s0.to_vector();
    LikelihoodResult res;
    for (std::size_t i = 0; i < observations.size(); ++i) {
        if (observations[i].rows() != L.n || observations[i].cols() != L.d)
            throw std::invalid_argument("log_likelihood: observation " + std::to_string(i) +
                                        " has a different landmark layout");
        const Vector v = flatten(observations[i]);
        const auto samples = sample_bridges(sys, x0, L, v, T, cfg, content_stream(v));
        std::vector<double> lw;
        for (const auto& s : samples) lw.push_back(s.log_weight);
        const double lp = log_mean_exp(lw);
        const double ess = effective_sample_size(normalized_weights(lw));
        res.per_observation.push_back(lp);
        res.ess.push_back(ess);
        res.degenerate = res.degenerate || ess < 2.0;
        res.log_likelihood += lp;
    }
    return res;
}

}  // namespace stochlm
