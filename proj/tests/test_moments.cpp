#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "stochlm/moments.hpp"
#include "stochlm/synth.hpp"

using namespace stochlm;

namespace {

PhaseState three_landmarks() {
    Positions q(3, 2), p(3, 2);
    q << -0.25, 0.0, 0.0, 0.15, 0.25, -0.05;
    p << 0.3, 0.1, -0.1, 0.2, 0.05, -0.25;
    return {q, p};
}

EulerianNoise small_grid(double amplitude) {
    return synth_grid_noise(3, 3, {-0.4, 0.4, -0.4, 0.4}, KernelSpec::gaussian(0.4),
                            AmplitudeRule::uniform(amplitude));
}

}  // namespace

TEST(Moments, ZeroNoiseFollowsDeterministicFlow) {
    const PhaseState s0 = three_landmarks();
    const KernelSpec kv = KernelSpec::gaussian(0.5);
    const MomentState end = integrate_moments(MomentState::deterministic(s0), kv, small_grid(0.0), 1.0, 0.01);
    const Trajectory ref = integrate_deterministic(s0, kv, 1.0, 0.01);
    EXPECT_LT((end.mean - ref.back().to_vector()).norm(), 1e-12);
    EXPECT_EQ(end.cov.norm(), 0.0);
    EXPECT_DOUBLE_EQ(end.t, 1.0);
}

TEST(Moments, PureDiffusionIsExact) {
    Positions q(2, 2);
    q << -0.2, 0.0, 0.2, 0.0;
    const PhaseState s0(q, Positions::Zero(2, 2));
    EulerianNoise noise;
    noise.fields.push_back({Vector::Zero(2), (Vector(2) << 0.2, 0.05).finished(), KernelSpec::gaussian(1e6)});
    noise.fields.push_back({Vector::Zero(2), (Vector(2) << -0.05, 0.15).finished(), KernelSpec::gaussian(1e6)});
    const double T = 1.3;
    const MomentState end = integrate_moments(MomentState::deterministic(s0), KernelSpec::gaussian(0.5), noise, T, 0.01);
    Eigen::Matrix2d block = Eigen::Matrix2d::Zero();
    for (const auto& f : noise.fields) block += T * f.lambda * f.lambda.transpose();
    Matrix expected(4, 4);
    expected << block, block, block, block;
    EXPECT_LT((end.cov_qq() - expected).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((end.mean_q() - q).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Moments, MeanCorrectionMatchesSecondOrderExpansion) {
    // with a vanishing qq block the correction is exactly 1/2 sum_jk d2b/dx_j dx_k C_jk
    const PhaseState s = three_landmarks();
    const Layout L = layout_of(s);
    const KernelSpec kv = KernelSpec::gaussian(0.5);
    const Vector mu = s.to_vector();
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd(0.0, 1.0);
    Matrix A = Matrix::NullaryExpr(L.phase(), L.phase(), [&] { return nd(rng); });
    Matrix C = 0.01 * A * A.transpose();
    C.topLeftCorner(L.nd(), L.nd()).setZero();

    auto b = [&](const Vector& x) { return canonical_drift(kv, x, L); };
    const double h = 1e-4;
    Vector oracle = Vector::Zero(L.phase());
    for (Eigen::Index j = 0; j < L.phase(); ++j)
        for (Eigen::Index k = 0; k < L.phase(); ++k) {
            if (C(j, k) == 0.0) continue;
            Vector xpp = mu, xpm = mu, xmp = mu, xmm = mu;
            xpp[j] += h, xpp[k] += h;
            xpm[j] += h, xpm[k] -= h;
            xmp[j] -= h, xmp[k] += h;
            xmm[j] -= h, xmm[k] -= h;
            oracle += 0.5 * C(j, k) * (b(xpp) - b(xpm) - b(xmp) + b(xmm)) / (4 * h * h);
        }
    const Vector m = moment_mean_correction(kv, mu, C, L);
    EXPECT_LT((m - oracle).norm(), 1e-6 * (1.0 + oracle.norm()));
}

TEST(Moments, CovarianceStaysSymmetricPsd) {
    const MomentState end = integrate_moments(MomentState::deterministic(three_landmarks()), KernelSpec::gaussian(0.5),
                                              small_grid(0.05), 1.0, 0.01);
    EXPECT_EQ((end.cov - end.cov.transpose()).norm(), 0.0);
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<Matrix>(end.cov).eigenvalues().minCoeff(), -1e-10);
}

TEST(Moments, TrajectoryIncludesStart) {
    std::vector<MomentTrajectoryPoint> traj;
    integrate_moments(MomentState::deterministic(three_landmarks()), KernelSpec::gaussian(0.5), small_grid(0.05), 0.5,
                      0.1, &traj);
    ASSERT_EQ(traj.size(), 6U);
    EXPECT_EQ(traj.front().t, 0.0);
    EXPECT_DOUBLE_EQ(traj.back().t, 0.5);
}

TEST(Moments, SmallNoiseAgreesWithMonteCarlo) {
    const PhaseState s0 = three_landmarks();
    const KernelSpec kv = KernelSpec::gaussian(0.5);
    const EulerianNoise noise = small_grid(0.025);
    const MomentState end = integrate_moments(MomentState::deterministic(s0), kv, noise, 1.0, 0.01);
    SdeConfig cfg;
    cfg.dt = 0.01;
    cfg.seed = 11;
    const EnsembleSummary mc = sample_ensemble(s0, kv, noise, cfg, 3000);
    EXPECT_LT((end.mean_q() - mc.mean_q).cwiseAbs().maxCoeff(), 0.01);
    for (Eigen::Index i = 0; i < 3; ++i)
        for (int a = 0; a < 2; ++a) {
            const double v = mc.landmark_cov(i)(a, a);
            EXPECT_NEAR(end.landmark_cov(i)(a, a), v, 0.2 * v) << i << a;
        }
}

TEST(Moments, ProblemCostVanishesAtTruth) {
    MomentProblem prob;
    prob.kv = KernelSpec::gaussian(0.5);
    prob.noise_template = small_grid(0.0);
    const PhaseState s0 = three_landmarks();
    prob.mean_q0 = s0.q;
    prob.mean_p0 = s0.p;
    Positions lam = Positions::Constant(9, 2, 0.03);
    lam(4, 1) = -0.05;
    prob.targets = MomentTargets::from_moments(prob.final_moments(s0.p, lam));
    const Vector theta = prob.pack(s0.p, lam);
    EXPECT_EQ(theta.size(), prob.n_params());
    EXPECT_EQ(prob.unpack_p0(theta), s0.p);
    EXPECT_EQ(prob.unpack_lambdas(theta), lam);
    EXPECT_EQ(prob.cost(theta), 0.0);
    Positions other = lam;
    other(0, 0) = 0.06;
    EXPECT_GT(moment_cost(prob, s0.p, other), 0.0);
    // the moment equations are even in each lambda_l
    EXPECT_NEAR(moment_cost(prob, s0.p, -lam), 0.0, 1e-20);
}

TEST(Moments, ProblemWithoutMomentumEstimation) {
    MomentProblem prob;
    prob.kv = KernelSpec::gaussian(0.5);
    prob.noise_template = small_grid(0.0);
    prob.mean_q0 = three_landmarks().q;
    prob.mean_p0 = three_landmarks().p;
    prob.estimate_p0 = false;
    EXPECT_EQ(prob.n_params(), 18);
    const Vector theta = Vector::Constant(18, 0.01);
    EXPECT_EQ(prob.unpack_p0(theta), prob.mean_p0);
}
