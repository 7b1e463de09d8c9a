#pragma once

// Stochastic integrators for
//   dX = b(X) dt + Sigma(X) o dW      (Stratonovich, Heun)
//   dX = (b + c)(X) dt + Sigma(X) dW   (Ito, Euler-Maruyama)
// where c is the Stratonovich-to-Ito correction.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stochlm/dynamics.hpp"
#include "stochlm/noise.hpp"
#include "stochlm/parallel.hpp"
#include "stochlm/random.hpp"

namespace stochlm {

enum class SdeScheme { HeunStratonovich, EulerMaruyamaIto };

inline SdeScheme sde_scheme_from_string(const std::string& s) {
    if (s == "heun") return SdeScheme::HeunStratonovich;
    if (s == "euler-ito") return SdeScheme::EulerMaruyamaIto;
    throw ConfigError("unknown sde scheme '" + s + "' (expected heun|euler-ito)");
}

inline std::string to_string(SdeScheme s) {
    return s == SdeScheme::HeunStratonovich ? "heun" : "euler-ito";
}

struct SdeConfig {
    double dt = 1e-3;
    double T = 1.0;
    SdeScheme scheme = SdeScheme::HeunStratonovich;
    std::uint64_t seed = 0;
    unsigned workers = 0;
};

/// Everything a stepper needs to evaluate drift and diffusion.
struct StochasticSystem {
    KernelSpec kv;
    NoiseModel noise;

    [[nodiscard]] Vector drift(const Vector& x, const Layout& L) const {
        return canonical_drift(kv, x, L);
    }
    [[nodiscard]] Matrix sigma(const Vector& x, const Layout& L) const {
        return build_sigma(noise, x, L);
    }
};

/// One Heun step (stochastic trapezoidal rule) of the Stratonovich system.
inline Vector step_stratonovich(const StochasticSystem& sys, const Vector& x, const Layout& L,
                                double dt, const Vector& dW) {
    const Vector b0 = sys.drift(x, L);
    const Matrix s0 = sys.sigma(x, L);
    const Vector pred = x + b0 * dt + s0 * dW;
    const Vector b1 = sys.drift(pred, L);
    const Matrix s1 = sys.sigma(pred, L);
    return x + 0.5 * (b0 + b1) * dt + 0.5 * (s0 * dW + s1 * dW);
}

inline PhaseState step_stratonovich(const PhaseState& s, const KernelSpec& kv,
                                    const NoiseModel& noise, double dt, const Vector& dW) {
    const StochasticSystem sys{kv, noise};
    const Layout L = layout_of(s);
    const Vector x = step_stratonovich(sys, s.to_vector(), L, dt, dW);
    if (!x.allFinite()) throw NumericalError("step_stratonovich: non-finite state at t=" + std::to_string(s.t));
    return PhaseState::from_vector(x, L.n, L.d, s.t + dt);
}

inline Vector ito_drift_correction(const PhaseState& s, const NoiseModel& noise) {
    return ito_correction(noise, s.to_vector(), layout_of(s));
}

/// One Euler-Maruyama step of the Ito form.
inline Vector step_ito(const StochasticSystem& sys, const Vector& x, const Layout& L, double dt,
                       const Vector& dW) {
    const Vector b = sys.drift(x, L) + ito_correction(sys.noise, x, L);
    return x + b * dt + sys.sigma(x, L) * dW;
}

/// Integrates a single path. When `record` is set, every state is stored.
inline Vector simulate_path(const StochasticSystem& sys, const Vector& x0, const Layout& L,
                            const SdeConfig& cfg, Rng& rng, Trajectory* record = nullptr) {
    const auto grid = uniform_time_grid(cfg.T, cfg.dt);
    const Eigen::Index m = noise_dim(sys.noise, L);
    Vector x = x0;
    if (record) {
        record->clear();
        record->reserve(grid.size());
        record->push_back(PhaseState::from_vector(x, L.n, L.d, 0.0));
    }
    for (std::size_t k = 1; k < grid.size(); ++k) {
        const double h = grid[k] - grid[k - 1];
        const Vector dW = gaussian_increment(rng, m, h);
        x = cfg.scheme == SdeScheme::HeunStratonovich ? step_stratonovich(sys, x, L, h, dW)
                                                      : step_ito(sys, x, L, h, dW);
        if (!x.allFinite())
            throw NumericalError("sde: non-finite state at step " + std::to_string(k) +
                                 " (t=" + std::to_string(grid[k]) + ")");
        if (record) record->push_back(PhaseState::from_vector(x, L.n, L.d, grid[k]));
    }
    return x;
}

struct EnsembleSummary {
    Positions mean_q;
    Matrix cov_qq;  ///< Nd x Nd centered sample covariance (divisor n - 1)
    Eigen::Index n_samples = 0;
    std::optional<std::vector<Positions>> endpoints;

    /// d x d covariance block of landmark i.
    [[nodiscard]] Matrix landmark_cov(Eigen::Index i) const {
        const auto d = mean_q.cols();
        return cov_qq.block(i * d, i * d, d, d);
    }
};

/// Sample mean and centered covariance of a set of shapes, reduced in index order.
inline EnsembleSummary summarize_shapes(const std::vector<Positions>& shapes) {
    if (shapes.size() < 2) throw std::invalid_argument("summarize_shapes: need at least 2 shapes");
    const auto n = shapes.front().rows();
    const auto d = shapes.front().cols();
    // shifted by the first sample so identical inputs give an exactly zero covariance
    const Vector ref = flatten(shapes.front());
    Vector shift = Vector::Zero(n * d);
    for (const auto& s : shapes) shift += flatten(s) - ref;
    const Vector mean = ref + shift / static_cast<double>(shapes.size());
    Matrix cov = Matrix::Zero(n * d, n * d);
    for (const auto& s : shapes) {
        const Vector c = flatten(s) - mean;
        cov.noalias() += c * c.transpose();
    }
    cov /= static_cast<double>(shapes.size() - 1);
    EnsembleSummary out;
    out.mean_q = unflatten(mean, n, d);
    out.cov_qq = cov;
    out.n_samples = static_cast<Eigen::Index>(shapes.size());
    return out;
}

/// n independent paths; path m draws from sub-stream m of cfg.seed, so the
/// result is identical for any worker count.
inline EnsembleSummary sample_ensemble(const PhaseState& s0, const KernelSpec& kv,
                                       const NoiseModel& noise, const SdeConfig& cfg,
                                       Eigen::Index n, bool keep_endpoints = false) {
    if (n < 2) throw std::invalid_argument("sample_ensemble: n must be >= 2");
    const StochasticSystem sys{kv, noise};
    const Layout L = layout_of(s0);
    const Vector x0 = s0.to_vector();
    std::vector<Positions> ends(static_cast<std::size_t>(n));
    parallel_for(
        ends.size(),
        [&](std::size_t m) {
            Rng rng(sub_seed(cfg.seed, seed_purpose::ensemble, m));
            const Vector x = simulate_path(sys, x0, L, cfg, rng);
            ends[m] = unflatten(x.head(L.nd()), L.n, L.d);
        },
        cfg.workers);
    EnsembleSummary out = summarize_shapes(ends);
    if (keep_endpoints) out.endpoints = std::move(ends);
    return out;
}

}  // namespace stochlm
