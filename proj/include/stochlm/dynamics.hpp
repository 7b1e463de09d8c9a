#pragma once

// Deterministic landmark Hamiltonian system
//   h(q, p) = 1/2 sum_ij (p_i . p_j) k(|q_i - q_j|)
// with canonical equations qdot = dh/dp, pdot = -dh/dq.
//
// Flat phase vectors are laid out as [q_11 .. q_1d, q_21, ..., q_Nd, p_11, ..., p_Nd].

#include <string>
#include <utility>
#include <vector>

#include "stochlm/kernels.hpp"
#include "stochlm/types.hpp"

namespace stochlm {

struct Layout {
    Eigen::Index n = 0;
    Eigen::Index d = 0;

    [[nodiscard]] Eigen::Index nd() const { return n * d; }
    [[nodiscard]] Eigen::Index phase() const { return 2 * n * d; }
    [[nodiscard]] Eigen::Index qi(Eigen::Index i, Eigen::Index a) const { return i * d + a; }
    [[nodiscard]] Eigen::Index pi(Eigen::Index i, Eigen::Index a) const { return n * d + i * d + a; }
};

inline Layout layout_of(const PhaseState& s) { return {s.n_landmarks(), s.dim()}; }

inline double hamiltonian(const PhaseState& s, const KernelSpec& kv) {
    const auto n = s.n_landmarks();
    double h = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        h += 0.5 * s.p.row(i).squaredNorm() * radial(kv, 0.0).k;
        for (Eigen::Index j = i + 1; j < n; ++j)
            h += s.p.row(i).dot(s.p.row(j)) * radial(kv, (s.q.row(i) - s.q.row(j)).norm()).k;
    }
    return h;
}

struct HamiltonianGradient {
    Positions dq;  ///< dh/dq
    Positions dp;  ///< dh/dp
};

inline HamiltonianGradient grad_h(const PhaseState& s, const KernelSpec& kv) {
    const auto n = s.n_landmarks();
    const auto d = s.dim();
    HamiltonianGradient out{Positions::Zero(n, d), Positions::Zero(n, d)};
    const double k0 = radial(kv, 0.0).k;
    for (Eigen::Index i = 0; i < n; ++i) {
        out.dp.row(i) += k0 * s.p.row(i);
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const auto diff = (s.q.row(i) - s.q.row(j)).eval();
            const RadialDerivs rd = radial(kv, diff.norm());
            out.dp.row(i) += rd.k * s.p.row(j);
            out.dp.row(j) += rd.k * s.p.row(i);
            const double pp = s.p.row(i).dot(s.p.row(j));
            // grad of k is odd in the separation
            out.dq.row(i) += (pp * rd.g) * diff;
            out.dq.row(j) -= (pp * rd.g) * diff;
        }
    }
    return out;
}

/// Canonical drift b(x) = (dh/dp, -dh/dq) on a flat phase vector.
inline Vector canonical_drift(const KernelSpec& kv, const Vector& x, const Layout& L) {
    const auto n = L.n;
    const auto d = L.d;
    Vector b = Vector::Zero(L.phase());
    const double* q = x.data();
    const double* p = x.data() + L.nd();
    const double k0 = radial(kv, 0.0).k;
    double diff[kMaxDim];
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index a = 0; a < d; ++a) b[i * d + a] += k0 * p[i * d + a];
        for (Eigen::Index j = i + 1; j < n; ++j) {
            double r2 = 0.0;
            double pp = 0.0;
            for (Eigen::Index a = 0; a < d; ++a) {
                diff[a] = q[i * d + a] - q[j * d + a];
                r2 += diff[a] * diff[a];
                pp += p[i * d + a] * p[j * d + a];
            }
            const RadialDerivs rd = radial(kv, std::sqrt(r2));
            for (Eigen::Index a = 0; a < d; ++a) {
                b[i * d + a] += rd.k * p[j * d + a];
                b[j * d + a] += rd.k * p[i * d + a];
                b[L.nd() + i * d + a] -= pp * rd.g * diff[a];
                b[L.nd() + j * d + a] += pp * rd.g * diff[a];
            }
        }
    }
    return b;
}

inline Vector canonical_drift(const PhaseState& s, const KernelSpec& kv) {
    return canonical_drift(kv, s.to_vector(), layout_of(s));
}

/// Jacobian of the canonical drift with respect to the flat phase vector.
inline Matrix canonical_drift_jacobian(const KernelSpec& kv, const Vector& x, const Layout& L) {
    const auto n = L.n;
    const auto d = L.d;
    const auto nd = L.nd();
    Matrix jac = Matrix::Zero(L.phase(), L.phase());
    const double k0 = radial(kv, 0.0).k;
    for (Eigen::Index i = 0; i < n; ++i) {
        const SmallVec pi = x.segment(nd + i * d, d);
        // d(bq_i)/d(p_i)
        jac.block(i * d, nd + i * d, d, d).diagonal().array() += k0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            const SmallVec diff = x.segment(i * d, d) - x.segment(j * d, d);
            const SmallVec pj = x.segment(nd + j * d, d);
            const RadialDerivs rd = radial(kv, diff.norm());
            const SmallVec grad = rd.g * diff;
            SmallMat hess = rd.g * SmallMat::Identity(d, d);
            hess.noalias() += rd.h * diff * diff.transpose();
            const double pp = pi.dot(pj);

            // bq_i = sum_j p_j k(q_i - q_j)
            jac.block(i * d, nd + j * d, d, d).diagonal().array() += rd.k;
            jac.block(i * d, i * d, d, d).noalias() += pj * grad.transpose();
            jac.block(i * d, j * d, d, d).noalias() -= pj * grad.transpose();

            // bp_i = -sum_j (p_i . p_j) grad k(q_i - q_j)
            jac.block(nd + i * d, nd + i * d, d, d).noalias() -= grad * pj.transpose();
            jac.block(nd + i * d, nd + j * d, d, d).noalias() -= grad * pi.transpose();
            jac.block(nd + i * d, i * d, d, d).noalias() -= pp * hess;
            jac.block(nd + i * d, j * d, d, d).noalias() += pp * hess;
        }
    }
    return jac;
}

/// One classical RK4 step for an autonomous vector field f.
template <typename F>
Vector rk4_step(F&& f, const Vector& x, double dt) {
    const Vector k1 = f(x);
    const Vector k2 = f(x + 0.5 * dt * k1);
    const Vector k3 = f(x + 0.5 * dt * k2);
    const Vector k4 = f(x + dt * k3);
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

using Trajectory = std::vector<PhaseState>;

/// Fixed-step RK4 integration of the canonical equations on [t0, t0 + T].
inline Trajectory integrate_deterministic(const PhaseState& s0, const KernelSpec& kv, double T,
                                          double dt) {
    const Layout L = layout_of(s0);
    const auto grid = uniform_time_grid(T, dt);
    Trajectory path;
    path.reserve(grid.size());
    path.push_back(s0);
    Vector x = s0.to_vector();
    auto f = [&](const Vector& y) { return canonical_drift(kv, y, L); };
    for (std::size_t k = 1; k < grid.size(); ++k) {
        x = rk4_step(f, x, grid[k] - grid[k - 1]);
        if (!x.allFinite())
            throw NumericalError("integrate_deterministic: non-finite state at step " +
                                 std::to_string(k));
        path.push_back(PhaseState::from_vector(x, L.n, L.d, s0.t + grid[k]));
    }
    return path;
}

/// Endpoint of the deterministic flow from x over the given horizon using
/// `n_steps` RK4 steps (the phi_{T-t} predictor of the bridge scheme).
inline Vector flow_endpoint(const KernelSpec& kv, const Vector& x, const Layout& L, double horizon,
                            int n_steps) {
    if (horizon <= 0.0) return x;
    const double h = horizon / n_steps;
    Vector y = x;
    auto f = [&](const Vector& z) { return canonical_drift(kv, z, L); };
    for (int k = 0; k < n_steps; ++k) y = rk4_step(f, y, h);
    return y;
}

/// Positions at T predicted by noise-free flow from `s` with step dt_pred
/// (at least one step when time remains).
inline Positions predict_endpoint(const PhaseState& s, const KernelSpec& kv, double T,
                                  double dt_pred) {
    const double horizon = T - s.t;
    if (horizon <= 0.0) return s.q;
    const int n_steps = std::max(1, static_cast<int>(std::ceil(horizon / dt_pred - 1e-9)));
    const Layout L = layout_of(s);
    const Vector y = flow_endpoint(kv, s.to_vector(), L, horizon, n_steps);
    return unflatten(y.head(L.nd()), L.n, L.d);
}

}  // namespace stochlm
