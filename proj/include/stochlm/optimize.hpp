#pragma once

// Differential evolution (DE/rand/1/bin) with a finite-difference gradient
// descent polish. Objective evaluations inside a generation may run in
// parallel; all random draws happen on the calling thread before evaluation so
// results depend only on the seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "stochlm/parallel.hpp"
#include "stochlm/random.hpp"
#include "stochlm/types.hpp"

namespace stochlm {

struct DeConfig {
    int population = 0;  ///< 0 selects 10 * K
    double F = 0.8;
    double CR = 0.9;
    int generations = 100;
    Vector lower;
    Vector upper;
    std::uint64_t seed = 0;
    int polish_steps = 0;
    unsigned workers = 0;
    /// Optional warm start; replaces the first population member.
    std::optional<Vector> initial;

    void validate() const {
        if (lower.size() == 0 || lower.size() != upper.size())
            throw ConfigError("de: bounds must be non-empty and of equal length");
        for (Eigen::Index j = 0; j < lower.size(); ++j)
            if (!std::isfinite(lower[j]) || !std::isfinite(upper[j]) || !(lower[j] < upper[j]))
                throw ConfigError("de: bounds[" + std::to_string(j) + "] must be finite with lo < hi");
        if (population != 0 && population < 4) throw ConfigError("de: population must be >= 4");
        if (!(F > 0.0 && F <= 2.0)) throw ConfigError("de: F must be in (0, 2]");
        if (!(CR >= 0.0 && CR <= 1.0)) throw ConfigError("de: CR must be in [0, 1]");
        if (generations < 0 || polish_steps < 0) throw ConfigError("de: negative iteration count");
    }
};

struct TracePoint {
    int iteration = 0;
    double best = 0.0;
    bool polish = false;
};

struct DeResult {
    Vector best_x;
    double best_f = std::numeric_limits<double>::infinity();
    std::vector<TracePoint> trace;
    long evaluations = 0;
};

using Objective = std::function<double(const Vector&)>;

inline Vector clip_to_box(Vector x, const Vector& lo, const Vector& hi) {
    return x.cwiseMax(lo).cwiseMin(hi);
}

namespace detail {

inline double finite_or_inf(double v) {
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
}

/// Central-difference gradient inside the box (one-sided at active bounds).
inline Vector fd_gradient(const Objective& f, const Vector& x, double fx, const Vector& lo,
                          const Vector& hi, long& evals) {
    const auto k = x.size();
    Vector g(k);
    for (Eigen::Index j = 0; j < k; ++j) {
        const double h = 1e-4 * std::max(std::abs(x[j]), 1e-2 * (hi[j] - lo[j]));
        Vector xp = x;
        Vector xm = x;
        xp[j] = std::min(hi[j], x[j] + h);
        xm[j] = std::max(lo[j], x[j] - h);
        const double fp = xp[j] > x[j] ? f(xp) : fx;
        const double fm = xm[j] < x[j] ? f(xm) : fx;
        evals += (xp[j] > x[j]) + (xm[j] < x[j]);
        const double span = xp[j] - xm[j];
        g[j] = span > 0.0 ? (fp - fm) / span : 0.0;
    }
    return g;
}

}  // namespace detail

/// Gradient descent with backtracking, clipped to the box. Appends one trace
/// point per accepted step and stops early when no decrease can be found.
inline void polish(const Objective& f, DeResult& res, const Vector& lo, const Vector& hi, int steps,
                   int iteration_offset) {
    Vector x = res.best_x;
    double fx = res.best_f;
    const double diag = (hi - lo).norm();
    double alpha = -1.0;
    for (int s = 0; s < steps; ++s) {
        const Vector g = detail::fd_gradient(f, x, fx, lo, hi, res.evaluations);
        const double gn = g.norm();
        if (!(gn > 0.0) || !std::isfinite(gn)) break;
        if (alpha < 0.0) alpha = 0.1 * diag / gn;
        alpha *= 2.0;
        bool accepted = false;
        for (int bt = 0; bt < 40; ++bt) {
            const Vector trial = clip_to_box(x - alpha * g, lo, hi);
            const double ft = detail::finite_or_inf(f(trial));
            ++res.evaluations;
            if (ft < fx) {
                x = trial;
                fx = ft;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) break;
        res.best_x = x;
        res.best_f = fx;
        res.trace.push_back({iteration_offset + s + 1, fx, true});
    }
}

inline DeResult minimize(const Objective& f, const DeConfig& cfg) {
    cfg.validate();
    const Vector& lo = cfg.lower;
    const Vector& hi = cfg.upper;
    const auto k = lo.size();
    const int np = cfg.population > 0 ? cfg.population : static_cast<int>(std::max<Eigen::Index>(4, 10 * k));
    Rng rng(sub_seed(cfg.seed, seed_purpose::de, 0));
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    std::vector<Vector> pop(static_cast<std::size_t>(np));
    for (int i = 0; i < np; ++i) {
        Vector x(k);
        for (Eigen::Index j = 0; j < k; ++j) x[j] = lo[j] + unif(rng) * (hi[j] - lo[j]);
        pop[static_cast<std::size_t>(i)] = x;
    }
    if (cfg.initial) {
        if (cfg.initial->size() != k) throw ConfigError("de: initial point has wrong dimension");
        pop[0] = clip_to_box(*cfg.initial, lo, hi);
    }

    DeResult res;
    std::vector<double> fit(static_cast<std::size_t>(np));
    parallel_for(fit.size(), [&](std::size_t i) { fit[i] = f(pop[i]); }, cfg.workers);
    res.evaluations += np;
    for (int i = 0; i < np; ++i)
        if (!std::isfinite(fit[static_cast<std::size_t>(i)]))
            throw NumericalError("de: objective is non-finite at initial member " + std::to_string(i) +
                                 "; check the objective and bounds");

    auto record_best = [&](int gen) {
        const auto it = std::min_element(fit.begin(), fit.end());
        const auto idx = static_cast<std::size_t>(it - fit.begin());
        res.best_f = *it;
        res.best_x = pop[idx];
        res.trace.push_back({gen, res.best_f, false});
    };
    record_best(0);

    std::vector<Vector> trial(static_cast<std::size_t>(np));
    std::vector<double> trial_fit(static_cast<std::size_t>(np));
    std::uniform_int_distribution<int> pick(0, np - 1);
    std::uniform_int_distribution<Eigen::Index> pick_dim(0, k - 1);
    for (int gen = 1; gen <= cfg.generations; ++gen) {
        for (int i = 0; i < np; ++i) {
            int a, b, c;
            do { a = pick(rng); } while (a == i);
            do { b = pick(rng); } while (b == i || b == a);
            do { c = pick(rng); } while (c == i || c == a || c == b);
            const Vector& xa = pop[static_cast<std::size_t>(a)];
            const Vector& xb = pop[static_cast<std::size_t>(b)];
            const Vector& xc = pop[static_cast<std::size_t>(c)];
            Vector u = pop[static_cast<std::size_t>(i)];
            const Eigen::Index forced = pick_dim(rng);
            for (Eigen::Index j = 0; j < k; ++j)
                if (j == forced || unif(rng) < cfg.CR) u[j] = xa[j] + cfg.F * (xb[j] - xc[j]);
            trial[static_cast<std::size_t>(i)] = clip_to_box(std::move(u), lo, hi);
        }
        parallel_for(
            trial.size(),
            [&](std::size_t i) { trial_fit[i] = detail::finite_or_inf(f(trial[i])); }, cfg.workers);
        res.evaluations += np;
        for (std::size_t i = 0; i < trial.size(); ++i)
            if (trial_fit[i] <= fit[i]) {
                pop[i] = trial[i];
                fit[i] = trial_fit[i];
            }
        record_best(gen);
    }
    polish(f, res, lo, hi, cfg.polish_steps, cfg.generations);
    return res;
}

}  // namespace stochlm
