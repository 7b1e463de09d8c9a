#pragma once

// Noise backends for the stochastic landmark system.
//
// Both backends produce a diffusion matrix Sigma (2Nd x M). Column m is the
// canonical Hamiltonian vector field of a linear-in-p potential
//   Phi_m(q, p) = sum_i p_i . sigma_m(q_i),
// i.e. its q-rows hold sigma_m(q_i) and its p-rows hold -d/dq_i (p_i . sigma_m(q_i)).
//
//   Eulerian:   sigma_l(x) = lambda_l k(|x - delta_l|),          M = J
//   Lagrangian: sigma_(j,b)(x) = Lambda_jb k(|x - q_j|) e_b,      M = N d
// For the Lagrangian backend the field centers q_j are the landmarks
// themselves; the p-rows differentiate only the evaluation point q_i.

#include <variant>
#include <vector>

#include "stochlm/dynamics.hpp"
#include "stochlm/kernels.hpp"
#include "stochlm/types.hpp"

namespace stochlm {

struct NoiseField {
    Vector center;
    Vector lambda;
    KernelSpec kernel;
};

struct EulerianNoise {
    std::vector<NoiseField> fields;

    [[nodiscard]] Eigen::Index size() const { return static_cast<Eigen::Index>(fields.size()); }
};

struct LagrangianNoise {
    KernelSpec kernel;
    Positions lambdas;  ///< N x d per-landmark axis amplitudes
};

using NoiseModel = std::variant<EulerianNoise, LagrangianNoise>;

inline Eigen::Index noise_dim(const NoiseModel& noise, const Layout& L) {
    if (const auto* e = std::get_if<EulerianNoise>(&noise)) return e->size();
    return L.nd();
}

/// sigma_l(q_i) for every field; entry l of the result is an N x d array.
inline std::vector<Positions> sigma_fields(const EulerianNoise& noise, const Positions& q) {
    std::vector<Positions> out;
    out.reserve(noise.fields.size());
    for (const auto& f : noise.fields) {
        Positions s(q.rows(), q.cols());
        for (Eigen::Index i = 0; i < q.rows(); ++i) {
            const double k = radial(f.kernel, (q.row(i).transpose() - f.center).norm()).k;
            s.row(i) = k * f.lambda.transpose();
        }
        out.push_back(std::move(s));
    }
    return out;
}

inline double momentum_map(const EulerianNoise& noise, const PhaseState& s, Eigen::Index l) {
    if (l < 0 || l >= noise.size()) throw std::out_of_range("momentum_map: field index");
    const auto& f = noise.fields[static_cast<std::size_t>(l)];
    double phi = 0.0;
    for (Eigen::Index i = 0; i < s.n_landmarks(); ++i) {
        const double k = radial(f.kernel, (s.q.row(i).transpose() - f.center).norm()).k;
        phi += k * s.p.row(i).dot(f.lambda);
    }
    return phi;
}

inline Matrix build_sigma(const EulerianNoise& noise, const Vector& x, const Layout& L) {
    const auto n = L.n;
    const auto d = L.d;
    const auto nd = L.nd();
    Matrix sig = Matrix::Zero(L.phase(), noise.size());
    for (Eigen::Index l = 0; l < noise.size(); ++l) {
        const auto& f = noise.fields[static_cast<std::size_t>(l)];
        for (Eigen::Index i = 0; i < n; ++i) {
            double r2 = 0.0;
            double plam = 0.0;
            for (Eigen::Index a = 0; a < d; ++a) {
                const double da = x[i * d + a] - f.center[a];
                r2 += da * da;
                plam += x[nd + i * d + a] * f.lambda[a];
            }
            const RadialDerivs rd = radial(f.kernel, std::sqrt(r2));
            for (Eigen::Index a = 0; a < d; ++a) {
                sig(i * d + a, l) = f.lambda[a] * rd.k;
                sig(nd + i * d + a, l) = -plam * rd.g * (x[i * d + a] - f.center[a]);
            }
        }
    }
    return sig;
}

inline Matrix build_sigma(const LagrangianNoise& noise, const Vector& x, const Layout& L) {
    const auto n = L.n;
    const auto d = L.d;
    const auto nd = L.nd();
    if (noise.lambdas.rows() != n || noise.lambdas.cols() != d)
        throw std::invalid_argument("LagrangianNoise: lambdas must be N x d");
    Matrix sig = Matrix::Zero(L.phase(), nd);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            double r2 = 0.0;
            for (Eigen::Index a = 0; a < d; ++a) {
                const double da = x[i * d + a] - x[j * d + a];
                r2 += da * da;
            }
            const RadialDerivs rd = radial(noise.kernel, std::sqrt(r2));
            if (rd.k == 0.0 && rd.g == 0.0) continue;
            for (Eigen::Index b = 0; b < d; ++b) {
                const double lam = noise.lambdas(j, b);
                const Eigen::Index col = j * d + b;
                sig(i * d + b, col) = lam * rd.k;
                const double pib = x[nd + i * d + b];
                for (Eigen::Index a = 0; a < d; ++a)
                    sig(nd + i * d + a, col) = -pib * lam * rd.g * (x[i * d + a] - x[j * d + a]);
            }
        }
    }
    return sig;
}

inline Matrix build_sigma(const NoiseModel& noise, const Vector& x, const Layout& L) {
    return std::visit([&](const auto& nm) { return build_sigma(nm, x, L); }, noise);
}

inline Matrix build_sigma(const NoiseModel& noise, const PhaseState& s) {
    return build_sigma(noise, s.to_vector(), layout_of(s));
}

/// Sigma Sigma^T (2Nd x 2Nd).
inline Matrix sigma_squared(const NoiseModel& noise, const PhaseState& s) {
    const Matrix sig = build_sigma(noise, s);
    Matrix out = sig * sig.transpose();
    // the product is symmetric up to rounding; make it exact
    out = 0.5 * (out + out.transpose()).eval();
    return out;
}

/// The Nd x Nd matrix K(q) used as the position noise map of the Lagrangian backend.
inline Matrix spatial_covariance_root(const LagrangianNoise& noise, const Positions& q) {
    const Layout L{q.rows(), q.cols()};
    Vector x = Vector::Zero(L.phase());
    x.head(L.nd()) = flatten(q);
    return build_sigma(noise, x, L).topRows(L.nd());
}

/// Stratonovich-to-Ito drift correction 1/2 sum_m (dSigma_m/dx) Sigma_m.
inline Vector ito_correction(const EulerianNoise& noise, const Vector& x, const Layout& L) {
    const auto n = L.n;
    const auto d = L.d;
    const auto nd = L.nd();
    Vector c = Vector::Zero(L.phase());
    for (const auto& f : noise.fields) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const SmallVec diff = x.segment(i * d, d) - f.center;
            const RadialDerivs rd = radial(f.kernel, diff.norm());
            const SmallVec grad = rd.g * diff;
            const double lg = f.lambda.dot(grad);
            const double pl = x.segment(nd + i * d, d).dot(f.lambda);
            // hess * lambda = g lambda + h diff (diff . lambda)
            const SmallVec hl = rd.g * f.lambda + rd.h * diff.dot(f.lambda) * diff;
            c.segment(i * d, d) += 0.5 * rd.k * lg * f.lambda;
            c.segment(nd + i * d, d) += 0.5 * pl * (lg * grad - rd.k * hl);
        }
    }
    return c;
}

inline Vector ito_correction(const LagrangianNoise& noise, const Vector& x, const Layout& L) {
    const auto n = L.n;
    const auto d = L.d;
    const auto nd = L.nd();
    const double k0 = radial(noise.kernel, 0.0).k;
    Vector c = Vector::Zero(L.phase());
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            const SmallVec diff = x.segment(i * d, d) - x.segment(j * d, d);
            const RadialDerivs rd = radial(noise.kernel, diff.norm());
            if (rd.g == 0.0) continue;
            const SmallVec grad = rd.g * diff;
            for (Eigen::Index b = 0; b < d; ++b) {
                const double lam2 = noise.lambdas(j, b) * noise.lambdas(j, b);
                const double dk = rd.k - k0;
                c[i * d + b] += 0.5 * lam2 * grad[b] * dk;
                // hess * e_b
                SmallVec he = rd.h * diff[b] * diff;
                he[b] += rd.g;
                const double pib = x[nd + i * d + b];
                c.segment(nd + i * d, d) += 0.5 * lam2 * pib * (grad[b] * grad - dk * he);
            }
        }
    }
    return c;
}

inline Vector ito_correction(const NoiseModel& noise, const Vector& x, const Layout& L) {
    return std::visit([&](const auto& nm) { return ito_correction(nm, x, L); }, noise);
}

/// Jacobian of the Eulerian Ito correction with respect to the phase vector.
inline Matrix ito_correction_jacobian(const EulerianNoise& noise, const Vector& x, const Layout& L) {
    const auto n = L.n;
    const auto d = L.d;
    const auto nd = L.nd();
    Matrix jac = Matrix::Zero(L.phase(), L.phase());
    for (const auto& f : noise.fields) {
        const Vector& lam = f.lambda;
        for (Eigen::Index i = 0; i < n; ++i) {
            const SmallVec diff = x.segment(i * d, d) - f.center;
            const RadialDerivs rd = radial(f.kernel, diff.norm());
            const SmallVec grad = rd.g * diff;
            SmallMat hess = rd.g * SmallMat::Identity(d, d);
            hess.noalias() += rd.h * diff * diff.transpose();
            const SmallVec hl = hess * lam;
            const double lg = lam.dot(grad);
            const double pl = x.segment(nd + i * d, d).dot(lam);
            const SmallMat third = eval_third_contract(f.kernel, diff, lam);

            // c_q_i = 1/2 k (lam . grad) lam
            jac.block(i * d, i * d, d, d).noalias() += 0.5 * lam * (lg * grad + rd.k * hl).transpose();
            // c_p_i = 1/2 (p_i . lam) [(lam . grad) grad - k H lam]
            const SmallVec w = lg * grad - rd.k * hl;
            jac.block(nd + i * d, nd + i * d, d, d).noalias() += 0.5 * w * lam.transpose();
            const SmallMat dw = grad * hl.transpose() + lg * hess - hl * grad.transpose() - rd.k * third;
            jac.block(nd + i * d, i * d, d, d).noalias() += 0.5 * pl * dw;
        }
    }
    return jac;
}

}  // namespace stochlm
