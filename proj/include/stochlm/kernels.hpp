#pragma once

// Radial scalar kernels k(|x|) and their derivatives up to third order.
//
// Every derivative is expressed through a radial profile kappa(r):
//   g   = kappa'(r) / r
//   h   = g'(r) / r
//   h_r = h'(r) / r
// so that
//   grad k      = g x
//   hess k      = g I + h x x^T
//   d_c H_ab    = h (x_c d_ab + x_a d_bc + x_b d_ac) + h_r x_a x_b x_c
// which keeps every formula free of 1/r singularities for the Gaussian.

#include <cmath>
#include <string>

#include "stochlm/types.hpp"

namespace stochlm {

enum class KernelFamily { Gaussian, CubicBSpline };

struct KernelSpec {
    KernelFamily family = KernelFamily::Gaussian;
    double scale = 1.0;

    KernelSpec() = default;
    KernelSpec(KernelFamily f, double s) : family(f), scale(s) {
        if (!(s > 0.0) || !std::isfinite(s))
            throw std::invalid_argument("KernelSpec: scale must be positive and finite");
    }

    static KernelSpec gaussian(double s) { return {KernelFamily::Gaussian, s}; }
    static KernelSpec bspline(double s) { return {KernelFamily::CubicBSpline, s}; }
};

inline std::string to_string(KernelFamily f) {
    return f == KernelFamily::Gaussian ? "gaussian" : "bspline3";
}

inline KernelFamily kernel_family_from_string(const std::string& s) {
    if (s == "gaussian") return KernelFamily::Gaussian;
    if (s == "bspline3") return KernelFamily::CubicBSpline;
    throw ConfigError("unknown kernel family '" + s + "' (expected gaussian|bspline3)");
}

/// Centered cardinal cubic B-spline, support (-2, 2), S3(0) = 2/3.
inline double cubic_bspline(double u) {
    const double a = std::abs(u);
    if (a < 1.0) return 2.0 / 3.0 - a * a + 0.5 * a * a * a;
    if (a < 2.0) {
        const double b = 2.0 - a;
        return b * b * b / 6.0;
    }
    return 0.0;
}

struct RadialDerivs {
    double k = 0.0;
    double g = 0.0;
    double h = 0.0;
    double h_r = 0.0;
};

/// Radial profile at distance r >= 0.
inline RadialDerivs radial(const KernelSpec& spec, double r) {
    const double s = spec.scale;
    RadialDerivs out;
    if (spec.family == KernelFamily::Gaussian) {
        const double s2 = s * s;
        out.k = std::exp(-0.5 * r * r / s2);
        out.g = -out.k / s2;
        out.h = out.k / (s2 * s2);
        out.h_r = -out.k / (s2 * s2 * s2);
        return out;
    }
    const double u = r / s;
    const double s2 = s * s;
    if (u >= 2.0) return out;
    out.k = cubic_bspline(u);
    if (u < 1.0) {
        out.g = (-2.0 + 1.5 * u) / s2;
        // h and h_r blow up like 1/r at the center where the third derivative
        // of |u|^3 is discontinuous; the products h*x and h*x*x stay bounded.
        if (r > 0.0) {
            out.h = 1.5 / (s2 * s * r);
            out.h_r = -1.5 / (s2 * s * r * r * r);
        }
    } else {
        const double b = 2.0 - u;
        out.g = -b * b / (2.0 * u * s2);
        out.h = (4.0 - u * u) / (2.0 * u * u * u * s2 * s2);
        out.h_r = (u * u - 12.0) / (2.0 * u * u * u * u * u * s2 * s2 * s2);
    }
    return out;
}

inline double eval(const KernelSpec& spec, double x) { return radial(spec, std::abs(x)).k; }

inline double eval(const KernelSpec& spec, const SmallVec& x) {
    return radial(spec, x.norm()).k;
}

/// Gradient of x -> k(|x|).
inline SmallVec eval_grad(const KernelSpec& spec, const SmallVec& x) {
    const RadialDerivs rd = radial(spec, x.norm());
    return rd.g * x;
}

/// Hessian of x -> k(|x|).
inline SmallMat eval_hess(const KernelSpec& spec, const SmallVec& x) {
    const RadialDerivs rd = radial(spec, x.norm());
    const auto d = x.size();
    SmallMat hm = rd.g * SmallMat::Identity(d, d);
    hm.noalias() += rd.h * (x * x.transpose());
    return hm;
}

/// Third derivative contracted with a direction: out(a, c) = sum_b T_abc v_b.
/// Same contraction from precomputed radial derivatives at x.
inline SmallMat third_contract(const RadialDerivs& rd, const SmallVec& x, const SmallVec& v) {
    const double xv = x.dot(v);
    SmallMat out = rd.h * (v * x.transpose() + x * v.transpose());
    out.diagonal().array() += rd.h * xv;
    out.noalias() += (rd.h_r * xv) * (x * x.transpose());
    return out;
}

inline SmallMat eval_third_contract(const KernelSpec& spec, const SmallVec& x, const SmallVec& v) {
    return third_contract(radial(spec, x.norm()), x, v);
}

/// Kernel Gram matrix with entries k(|q_i - q_j|).
inline Matrix kv_matrix(const KernelSpec& spec, const Positions& q) {
    const auto n = q.rows();
    Matrix km(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        km(i, i) = radial(spec, 0.0).k;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double v = radial(spec, (q.row(i) - q.row(j)).norm()).k;
            km(i, j) = v;
            km(j, i) = v;
        }
    }
    return km;
}

}  // namespace stochlm
