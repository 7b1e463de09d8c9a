#pragma once

// Second-order (Gaussian cluster) closure of the Fokker-Planck moment hierarchy
// for the Eulerian-noise landmark system. See docs/moment_equations.md for the
// derivation; in short, with x = (q, p), mean mu and covariance C:
//
//   dmu/dt = b(mu) + c(mu) + m(mu, C)
//   dC/dt  = J C + C J^T + D(mu, C)
//
// b is the canonical drift, c the Ito correction, J = d(b + c)/dx at mu,
// m collects the p-p and p-q second-moment couplings of b (kernel functions
// evaluated at the mean), and D = <Sigma Sigma^T> with q frozen at its mean
// and the p-dependence of the momentum rows taken exactly.

#include <cmath>
#include <functional>
#include <vector>

#include "stochlm/dynamics.hpp"
#include "stochlm/noise.hpp"
#include "stochlm/sde.hpp"

namespace stochlm {

struct MomentState {
    Vector mean;  ///< 2Nd
    Matrix cov;   ///< 2Nd x 2Nd
    Layout layout;
    double t = 0.0;

    static MomentState deterministic(const PhaseState& s) {
        MomentState ms;
        ms.layout = layout_of(s);
        ms.mean = s.to_vector();
        ms.cov = Matrix::Zero(ms.layout.phase(), ms.layout.phase());
        ms.t = s.t;
        return ms;
    }

    [[nodiscard]] Positions mean_q() const { return unflatten(mean.head(layout.nd()), layout.n, layout.d); }
    [[nodiscard]] Positions mean_p() const { return unflatten(mean.tail(layout.nd()), layout.n, layout.d); }
    [[nodiscard]] Matrix cov_qq() const { return cov.topLeftCorner(layout.nd(), layout.nd()); }
    [[nodiscard]] Matrix cov_qp() const { return cov.topRightCorner(layout.nd(), layout.nd()); }
    [[nodiscard]] Matrix cov_pp() const { return cov.bottomRightCorner(layout.nd(), layout.nd()); }
    [[nodiscard]] Matrix landmark_cov(Eigen::Index i) const {
        return cov.block(i * layout.d, i * layout.d, layout.d, layout.d);
    }
};

struct MomentDerivative {
    Vector mean;
    Matrix cov;
};

/// Second-moment correction m(mu, C) to the mean drift.
inline Vector moment_mean_correction(const KernelSpec& kv, const Vector& mu, const Matrix& C,
                                     const Layout& L) {
    const auto n = L.n;
    const auto d = L.d;
    const auto nd = L.nd();
    Vector m = Vector::Zero(L.phase());
    auto cqp = [&](Eigen::Index i, Eigen::Index j) { return C.block(i * d, nd + j * d, d, d); };
    for (Eigen::Index i = 0; i < n; ++i) {
        const SmallVec pi = mu.segment(nd + i * d, d);
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            const SmallVec diff = mu.segment(i * d, d) - mu.segment(j * d, d);
            const RadialDerivs rd = radial(kv, diff.norm());
            const SmallVec grad = rd.g * diff;
            SmallMat hess = rd.g * SmallMat::Identity(d, d);
            hess.noalias() += rd.h * diff * diff.transpose();
            const SmallVec pj = mu.segment(nd + j * d, d);

            // <p_j k(q_i - q_j)>: covariance of p_j with the separation
            m.segment(i * d, d).noalias() += (cqp(i, j) - cqp(j, j)).transpose() * grad;

            // <(p_i . p_j) grad k(q_i - q_j)>
            const double tr_pp = C.block(nd + i * d, nd + j * d, d, d).trace();
            const SmallVec w = (cqp(i, i) - cqp(j, i)) * pj + (cqp(i, j) - cqp(j, j)) * pi;
            m.segment(nd + i * d, d).noalias() -= tr_pp * grad + hess * w;
        }
    }
    return m;
}

/// Expected diffusion <Sigma Sigma^T> under the closure.
inline Matrix moment_diffusion(const EulerianNoise& noise, const Vector& mu, const Matrix& C,
                               const Layout& L) {
    const auto n = L.n;
    const auto d = L.d;
    const auto nd = L.nd();
    const Matrix sig = build_sigma(noise, mu, L);
    Matrix D = sig * sig.transpose();
    // p-rows of column l are -(p_i . lambda_l) grad_i, so their second moment adds
    // G V G^T with V_ij = lambda^T Cov(p_i, p_j) lambda and G = blockdiag(grad_i).
    Matrix lam_blocks = Matrix::Zero(nd, n);
    Matrix grad_blocks = Matrix::Zero(nd, n);
    for (const auto& f : noise.fields) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const SmallVec diff = mu.segment(i * d, d) - f.center;
            grad_blocks.block(i * d, i, d, 1) = radial(f.kernel, diff.norm()).g * diff;
            lam_blocks.block(i * d, i, d, 1) = f.lambda;
        }
        const Matrix V = lam_blocks.transpose() * C.bottomRightCorner(nd, nd) * lam_blocks;
        D.bottomRightCorner(nd, nd).noalias() += grad_blocks * V * grad_blocks.transpose();
    }
    return D;
}

inline MomentDerivative moment_rhs(const MomentState& ms, const KernelSpec& kv,
                                   const EulerianNoise& noise) {
    const Layout& L = ms.layout;
    MomentDerivative out;
    out.mean = canonical_drift(kv, ms.mean, L) + ito_correction(noise, ms.mean, L) +
               moment_mean_correction(kv, ms.mean, ms.cov, L);
    const Matrix J = canonical_drift_jacobian(kv, ms.mean, L) +
                     ito_correction_jacobian(noise, ms.mean, L);
    Matrix JC = J * ms.cov;
    out.cov = JC + JC.transpose() + moment_diffusion(noise, ms.mean, ms.cov, L);
    return out;
}

struct MomentTrajectoryPoint {
    double t;
    MomentState state;
};

/// RK4 integration of the closed moment system over [ms0.t, ms0.t + T].
/// `trajectory`, when provided, receives every step (including the start).
inline MomentState integrate_moments(const MomentState& ms0, const KernelSpec& kv,
                                     const EulerianNoise& noise, double T, double dt,
                                     std::vector<MomentTrajectoryPoint>* trajectory = nullptr) {
    const auto grid = uniform_time_grid(T, dt);
    MomentState ms = ms0;
    if (trajectory) trajectory->push_back({ms.t, ms});
    auto shifted = [&](const MomentState& base, const MomentDerivative& k, double h) {
        MomentState s = base;
        s.mean += h * k.mean;
        s.cov += h * k.cov;
        return s;
    };
    const double t0 = ms0.t;
    for (std::size_t step = 1; step < grid.size(); ++step) {
        const double h = grid[step] - grid[step - 1];
        const MomentDerivative k1 = moment_rhs(ms, kv, noise);
        const MomentDerivative k2 = moment_rhs(shifted(ms, k1, 0.5 * h), kv, noise);
        const MomentDerivative k3 = moment_rhs(shifted(ms, k2, 0.5 * h), kv, noise);
        const MomentDerivative k4 = moment_rhs(shifted(ms, k3, h), kv, noise);
        ms.mean += (h / 6.0) * (k1.mean + 2.0 * k2.mean + 2.0 * k3.mean + k4.mean);
        ms.cov += (h / 6.0) * (k1.cov + 2.0 * k2.cov + 2.0 * k3.cov + k4.cov);
        ms.cov = 0.5 * (ms.cov + ms.cov.transpose()).eval();
        ms.t = t0 + grid[step];
        if (!ms.mean.allFinite() || !ms.cov.allFinite())
            throw NumericalError("integrate_moments: non-finite moments at step " +
                                 std::to_string(step) + " (t=" + std::to_string(ms.t) + ")");
        if (trajectory) trajectory->push_back({ms.t, ms});
    }
    return ms;
}

/// Observed final-time moments: sample mean and per-landmark d x d covariances.
struct MomentTargets {
    Positions mean_q;
    std::vector<Matrix> cov_blocks;

    static MomentTargets from_summary(const EnsembleSummary& s) {
        MomentTargets t;
        t.mean_q = s.mean_q;
        for (Eigen::Index i = 0; i < s.mean_q.rows(); ++i) t.cov_blocks.push_back(s.landmark_cov(i));
        return t;
    }

    static MomentTargets from_shapes(const std::vector<Positions>& shapes) {
        return from_summary(summarize_shapes(shapes));
    }

    static MomentTargets from_moments(const MomentState& ms) {
        MomentTargets t;
        t.mean_q = ms.mean_q();
        for (Eigen::Index i = 0; i < ms.layout.n; ++i) t.cov_blocks.push_back(ms.landmark_cov(i));
        return t;
    }
};

/// Moment-matching problem: estimate the initial mean momentum and the field
/// amplitudes of a fixed set of Eulerian noise fields.
struct MomentProblem {
    KernelSpec kv;
    EulerianNoise noise_template;  ///< centers and kernels; amplitudes are overwritten
    Positions mean_q0;
    Positions mean_p0;  ///< used as-is when estimate_p0 is false
    MomentTargets targets;
    double T = 1.0;
    double dt = 0.01;
    double gamma1 = 1.0;
    double gamma2 = 1.0;
    bool estimate_p0 = true;
    double variance_floor = 1e-12;

    [[nodiscard]] Eigen::Index n_params() const {
        const auto d = mean_q0.cols();
        return (estimate_p0 ? mean_q0.size() : 0) + noise_template.size() * d;
    }

    [[nodiscard]] Positions unpack_p0(const Vector& theta) const {
        if (!estimate_p0) return mean_p0;
        return unflatten(theta.head(mean_q0.size()), mean_q0.rows(), mean_q0.cols());
    }

    /// Field amplitudes as a J x d array.
    [[nodiscard]] Positions unpack_lambdas(const Vector& theta) const {
        const auto off = estimate_p0 ? mean_q0.size() : 0;
        return unflatten(theta.segment(off, noise_template.size() * mean_q0.cols()),
                         noise_template.size(), mean_q0.cols());
    }

    [[nodiscard]] Vector pack(const Positions& p0, const Positions& lambdas) const {
        Vector theta(n_params());
        Eigen::Index off = 0;
        if (estimate_p0) {
            theta.head(p0.size()) = flatten(p0);
            off = p0.size();
        }
        theta.segment(off, lambdas.size()) = flatten(lambdas);
        return theta;
    }

    [[nodiscard]] EulerianNoise noise_with(const Positions& lambdas) const {
        EulerianNoise nz = noise_template;
        for (Eigen::Index l = 0; l < nz.size(); ++l)
            nz.fields[static_cast<std::size_t>(l)].lambda = lambdas.row(l).transpose();
        return nz;
    }

    [[nodiscard]] MomentState final_moments(const Positions& p0, const Positions& lambdas) const {
        const MomentState ms0 = MomentState::deterministic(PhaseState(mean_q0, p0));
        return integrate_moments(ms0, kv, noise_with(lambdas), T, dt);
    }

    /// Cost of a final moment state against the targets.
    [[nodiscard]] double cost_of(const MomentState& ms) const {
        const auto n = ms.layout.n;
        const auto d = ms.layout.d;
        double mean_term = 0.0;
        double cov_term = 0.0;
        const Positions mq = ms.mean_q();
        for (Eigen::Index i = 0; i < n; ++i) {
            const Matrix& target = targets.cov_blocks[static_cast<std::size_t>(i)];
            const double scale = std::max(target.trace() / static_cast<double>(d), variance_floor);
            mean_term += (mq.row(i) - targets.mean_q.row(i)).squaredNorm() / scale;
            cov_term += (ms.landmark_cov(i) - target).squaredNorm() / (scale * scale);
        }
        return (mean_term / gamma1 + cov_term / gamma2) / static_cast<double>(n);
    }

    [[nodiscard]] double cost(const Vector& theta) const {
        return cost_of(final_moments(unpack_p0(theta), unpack_lambdas(theta)));
    }
};

/// Moment cost for explicit parameters.
inline double moment_cost(const MomentProblem& problem, const Positions& mean_p0,
                          const Positions& lambdas) {
    return problem.cost_of(problem.final_moments(mean_p0, lambdas));
}

}  // namespace stochlm
