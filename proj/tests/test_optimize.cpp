#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "stochlm/optimize.hpp"

using namespace stochlm;

namespace {

double sphere(const Vector& x) { return x.squaredNorm(); }

double rastrigin(const Vector& x) {
    double s = 10.0 * static_cast<double>(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) s += x[i] * x[i] - 10.0 * std::cos(2.0 * std::numbers::pi * x[i]);
    return s;
}

DeConfig box(Eigen::Index k, double half) {
    DeConfig cfg;
    cfg.lower = Vector::Constant(k, -half);
    cfg.upper = Vector::Constant(k, half);
    return cfg;
}

}  // namespace

TEST(Optimize, SphereConverges) {
    DeConfig cfg = box(5, 5.0);
    cfg.generations = 300;
    cfg.seed = 1;
    const DeResult res = minimize(sphere, cfg);
    EXPECT_LT(res.best_f, 1e-6);
    EXPECT_EQ(res.best_f, sphere(res.best_x));
}

TEST(Optimize, RastriginMajorityOfSeeds) {
    int solved = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        DeConfig cfg = box(4, 5.12);
        cfg.population = 60;
        cfg.F = 0.5;
        cfg.generations = 600;
        cfg.seed = seed;
        if (minimize(rastrigin, cfg).best_f < 1e-2) ++solved;
    }
    EXPECT_GE(solved, 2);
}

TEST(Optimize, TraceIsNonIncreasing) {
    DeConfig cfg = box(3, 2.0);
    cfg.generations = 50;
    cfg.polish_steps = 10;
    cfg.seed = 4;
    const DeResult res = minimize(rastrigin, cfg);
    ASSERT_GE(res.trace.size(), 51U);
    for (std::size_t k = 1; k < res.trace.size(); ++k) {
        EXPECT_LE(res.trace[k].best, res.trace[k - 1].best);
        EXPECT_EQ(res.trace[k].iteration, res.trace[k - 1].iteration + 1);
    }
    EXPECT_EQ(res.trace.back().best, res.best_f);
}

TEST(Optimize, StaysInsideBox) {
    DeConfig cfg;
    cfg.lower = (Vector(2) << 1.0, -3.0).finished();
    cfg.upper = (Vector(2) << 2.0, -2.0).finished();
    cfg.generations = 60;
    // unconstrained minimum at the origin lies outside the box
    const DeResult res = minimize(sphere, cfg);
    EXPECT_NEAR(res.best_x[0], 1.0, 1e-6);
    EXPECT_NEAR(res.best_x[1], -2.0, 1e-6);
}

TEST(Optimize, DeterministicForSeedAndWorkerCount) {
    DeConfig cfg = box(3, 2.0);
    cfg.generations = 30;
    cfg.seed = 7;
    cfg.workers = 1;
    const DeResult a = minimize(rastrigin, cfg);
    cfg.workers = 3;
    const DeResult b = minimize(rastrigin, cfg);
    EXPECT_EQ(a.best_x, b.best_x);
    EXPECT_EQ(a.best_f, b.best_f);
}

TEST(Optimize, WarmStartIsNeverWorse) {
    DeConfig cfg = box(4, 5.12);
    cfg.generations = 1;
    cfg.initial = Vector::Zero(4);
    EXPECT_EQ(minimize(rastrigin, cfg).best_f, 0.0);
}

TEST(Optimize, NonFiniteInitialPopulationThrows) {
    DeConfig cfg = box(2, 1.0);
    cfg.generations = 5;
    EXPECT_THROW(minimize([](const Vector& x) { return x[0] < 0 ? std::nan("") : sphere(x); }, cfg), NumericalError);
}

TEST(Optimize, InvalidConfigThrows) {
    DeConfig cfg = box(2, 1.0);
    cfg.upper[0] = -2.0;
    EXPECT_THROW(minimize(sphere, cfg), ConfigError);
    cfg = box(2, 1.0);
    cfg.CR = 1.5;
    EXPECT_THROW(minimize(sphere, cfg), ConfigError);
}
