#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace stochlm {

/// N x d landmark array, row i is landmark i. Row-major so that the flat
/// view orders coordinates as (i * d + alpha).
using Positions = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Landmarks live in at most three dimensions; per-landmark vectors and
/// matrices use stack storage.
inline constexpr int kMaxDim = 3;
using SmallVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using SmallMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

/// Raised when an integrator or estimator produces a non-finite value.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised for malformed configuration or input data.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Landmark positions and momenta at time t.
struct PhaseState {
    Positions q;
    Positions p;
    double t = 0.0;

    PhaseState() = default;
    PhaseState(Positions q_, Positions p_, double t_ = 0.0)
        : q(std::move(q_)), p(std::move(p_)), t(t_) {
        if (q.rows() != p.rows() || q.cols() != p.cols())
            throw std::invalid_argument("PhaseState: q and p must have identical shape");
        if (q.cols() < 1 || q.cols() > kMaxDim)
            throw std::invalid_argument("PhaseState: landmark dimension must be 1, 2 or 3");
    }

    [[nodiscard]] Eigen::Index n_landmarks() const { return q.rows(); }
    [[nodiscard]] Eigen::Index dim() const { return q.cols(); }
    [[nodiscard]] Eigen::Index phase_dim() const { return 2 * q.size(); }

    [[nodiscard]] bool finite() const { return q.allFinite() && p.allFinite(); }

    /// Stacked phase vector (q flat, then p flat).
    [[nodiscard]] Vector to_vector() const {
        Vector x(phase_dim());
        x.head(q.size()) = Eigen::Map<const Vector>(q.data(), q.size());
        x.tail(p.size()) = Eigen::Map<const Vector>(p.data(), p.size());
        return x;
    }

    static PhaseState from_vector(const Vector& x, Eigen::Index n, Eigen::Index d, double t = 0.0) {
        PhaseState s;
        s.q = Eigen::Map<const Positions>(x.data(), n, d);
        s.p = Eigen::Map<const Positions>(x.data() + n * d, n, d);
        s.t = t;
        return s;
    }
};

inline Vector flatten(const Positions& q) { return Eigen::Map<const Vector>(q.data(), q.size()); }

inline Positions unflatten(const Vector& x, Eigen::Index n, Eigen::Index d) {
    return Eigen::Map<const Positions>(x.data(), n, d);
}

/// Time grid of fixed steps dt on [0, T]; the last step is shortened to land on T.
inline std::vector<double> uniform_time_grid(double T, double dt) {
    if (!(T > 0.0) || !(dt > 0.0) || dt > T * (1.0 + 1e-12))
        throw std::invalid_argument("time grid requires 0 < dt <= T");
    const auto n = static_cast<std::size_t>(std::ceil(T / dt - 1e-9));
    std::vector<double> grid(n + 1);
    for (std::size_t k = 0; k < n; ++k) grid[k] = static_cast<double>(k) * dt;
    grid[n] = T;
    return grid;
}

}  // namespace stochlm
