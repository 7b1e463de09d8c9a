#pragma once

// Synthetic inputs: ellipse templates, regular grids of Eulerian noise fields,
// and a stand-in generator for corpus-callosum-like outlines.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "stochlm/noise.hpp"
#include "stochlm/random.hpp"

namespace stochlm {

/// n points at evenly spaced parameter angles 2 pi k / n on the ellipse with
/// semi-axes (a, b), rotated by `rotation` and shifted to `center`.
inline Positions synth_ellipse(Eigen::Index n, const Eigen::Vector2d& center, double a, double b,
                               double rotation = 0.0) {
    if (n < 3) throw ConfigError("synth_ellipse: n_landmarks must be >= 3");
    Positions q(n, 2);
    const double c = std::cos(rotation);
    const double s = std::sin(rotation);
    for (Eigen::Index k = 0; k < n; ++k) {
        const double th = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
        const double x = a * std::cos(th);
        const double y = b * std::sin(th);
        q(k, 0) = center[0] + c * x - s * y;
        q(k, 1) = center[1] + s * x + c * y;
    }
    return q;
}

struct GridRegion {
    double x_min = -1.0;
    double x_max = 1.0;
    double y_min = -1.0;
    double y_max = 1.0;
};

/// How amplitudes are assigned to the fields of a grid.
struct AmplitudeRule {
    enum class Kind { Uniform, Split } kind = Kind::Uniform;
    double value = 0.0;  ///< Uniform: every lambda_l = (value, value)
    double low = 0.0;    ///< Split: bottom half (high, low), top half (low, high)
    double high = 0.0;

    static AmplitudeRule uniform(double c) { return {Kind::Uniform, c, 0.0, 0.0}; }
    static AmplitudeRule split(double lo, double hi) { return {Kind::Split, 0.0, lo, hi}; }
};

/// nx x ny fields with centers on a regular grid over `region` (row by row from
/// the bottom, x fastest). A single row or column sits at the region's midline.
inline EulerianNoise synth_grid_noise(int nx, int ny, const GridRegion& region, const KernelSpec& kernel,
                                      const AmplitudeRule& rule) {
    if (nx < 1 || ny < 1) throw ConfigError("synth_grid_noise: nx and ny must be >= 1");
    auto coord = [](double lo, double hi, int k, int m) {
        return m == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * static_cast<double>(k) / (m - 1);
    };
    EulerianNoise noise;
    for (int iy = 0; iy < ny; ++iy)
        for (int ix = 0; ix < nx; ++ix) {
            NoiseField f;
            f.center = Eigen::Vector2d(coord(region.x_min, region.x_max, ix, nx),
                                       coord(region.y_min, region.y_max, iy, ny));
            f.kernel = kernel;
            if (rule.kind == AmplitudeRule::Kind::Uniform) {
                f.lambda = Eigen::Vector2d(rule.value, rule.value);
            } else {
                // rows in the lower half favor x, rows in the upper half favor y
                const bool bottom = 2 * iy < ny;
                f.lambda = bottom ? Eigen::Vector2d(rule.high, rule.low) : Eigen::Vector2d(rule.low, rule.high);
            }
            noise.fields.push_back(std::move(f));
        }
    return noise;
}

/// Reference outline for the stand-in generator: a closed arch resembling a
/// mid-sagittal corpus callosum, traversed once counter-clockwise.
inline Positions cc_reference_outline(Eigen::Index n) {
    Positions q(n, 2);
    for (Eigen::Index k = 0; k < n; ++k) {
        const double th = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
        const double x = std::cos(th);
        q(k, 0) = 0.5 * x;
        q(k, 1) = 0.08 * std::sin(th) + 0.12 * (1.0 - x * x) - 0.04 * std::cos(2.0 * th);
    }
    return q;
}

struct CcLikeConfig {
    Eigen::Index n_landmarks = 77;
    int n_shapes = 65;
    int n_modes = 6;
    double amplitude = 0.02;  ///< standard deviation of the first Fourier mode
    std::uint64_t seed = 0;
};

/// Smooth random outlines: the reference outline displaced along its normals by
/// a truncated Fourier series with coefficients ~ N(0, (amplitude / k)^2).
/// Synthetic stand-in only; it is not derived from real anatomy.
inline std::vector<Positions> synth_cc_like(const CcLikeConfig& cfg) {
    if (cfg.n_landmarks < 3) throw ConfigError("synth.cc_like.n_landmarks must be >= 3");
    if (cfg.n_shapes < 1) throw ConfigError("synth.cc_like.n_shapes must be >= 1");
    const Positions ref = cc_reference_outline(cfg.n_landmarks);
    const auto n = cfg.n_landmarks;
    Positions normal(n, 2);
    for (Eigen::Index k = 0; k < n; ++k) {
        const Eigen::RowVector2d tangent = ref.row((k + 1) % n) - ref.row((k + n - 1) % n);
        normal(k, 0) = tangent[1];
        normal(k, 1) = -tangent[0];
        normal.row(k).normalize();
    }
    std::vector<Positions> out;
    for (int s = 0; s < cfg.n_shapes; ++s) {
        Rng rng(sub_seed(cfg.seed, seed_purpose::synth, static_cast<std::uint64_t>(s)));
        std::normal_distribution<double> nd(0.0, 1.0);
        std::vector<double> a(static_cast<std::size_t>(cfg.n_modes) + 1);
        std::vector<double> b(a.size());
        for (int m = 1; m <= cfg.n_modes; ++m) {
            a[static_cast<std::size_t>(m)] = nd(rng) * cfg.amplitude / m;
            b[static_cast<std::size_t>(m)] = nd(rng) * cfg.amplitude / m;
        }
        Positions q = ref;
        for (Eigen::Index k = 0; k < n; ++k) {
            const double th = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
            double disp = 0.0;
            for (int m = 1; m <= cfg.n_modes; ++m)
                disp += a[static_cast<std::size_t>(m)] * std::cos(m * th) +
                        b[static_cast<std::size_t>(m)] * std::sin(m * th);
            q.row(k) += disp * normal.row(k);
        }
        out.push_back(std::move(q));
    }
    return out;
}

}  // namespace stochlm
