#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <random>

#include "iaekf/covariance.hpp"
#include "iaekf/errors.hpp"
#include "iaekf/smoothing.hpp"
#include "oracles.hpp"

using namespace iaekf;

namespace {

oracle::LinearSystem random_system(std::mt19937_64& gen, int n) {
    std::uniform_int_distribution<int> rows(1, 6);
    oracle::LinearSystem s;
    s.dim = 3;
    s.m0 = oracle::random_vector(gen, 3);
    s.P0 = oracle::random_spd(gen, 3, 1.0);
    for (int i = 0; i < n; ++i) {
        const int m = rows(gen);
        Mat3 f = Mat3::Identity();
        for (int c = 0; c < 3; ++c) f.col(c) += Vec3(oracle::random_vector(gen, 3, 0.2));
        s.F.push_back(f);
        s.Q.push_back(oracle::random_spd(gen, 3, 0.1));
        Eigen::MatrixXd h(m, 3);
        for (int r = 0; r < m; ++r) h.row(r) = oracle::random_vector(gen, 3).transpose();
        s.H.push_back(h);
        s.R.push_back(oracle::random_spd(gen, m, 0.2));
        s.y.push_back(oracle::random_vector(gen, m));
    }
    return s;
}

/// Plain Kalman filter over the linear system, no resets.
std::vector<SmootherStep> filter_steps(const oracle::LinearSystem& s) {
    std::vector<SmootherStep> steps;
    SmootherStep first;
    first.x_post = s.m0;
    first.P_post = s.P0;
    first.P_prior = s.P0;
    steps.push_back(first);
    for (int i = 0; i < s.n(); ++i) {
        const SmootherStep& prev = steps.back();
        SmootherStep cur;
        cur.F = s.F[i];
        cur.x_prior = cur.F * prev.x_post;
        cur.P_prior = cur.F * prev.P_post * cur.F.transpose() + Mat3(s.Q[i]);
        const Eigen::MatrixXd& h = s.H[i];
        const Eigen::MatrixXd S = h * cur.P_prior * h.transpose() + s.R[i];
        const Eigen::MatrixXd K = cur.P_prior * h.transpose() * S.inverse();
        cur.x_post = cur.x_prior + K * (s.y[i] - h * cur.x_prior);
        cur.KH = K * h;
        cur.P_post = (Mat3::Identity() - cur.KH) * cur.P_prior;
        steps.push_back(cur);
    }
    return steps;
}

}  // namespace

TEST_CASE("smoother matches batch conditioning") {
    std::mt19937_64 gen(21);
    std::uniform_int_distribution<int> len(1, 10);
    double worst_mean = 0.0, worst_cov = 0.0, worst_lag = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const oracle::LinearSystem sys = random_system(gen, len(gen));
        const oracle::BatchPosterior post = oracle::batch_posterior(sys);
        const auto steps = filter_steps(sys);
        SmoothedTrajectory sm = rts_smooth(steps);
        lag_one_smooth(steps, sm);
        for (int i = 0; i <= sys.n(); ++i) {
            worst_mean = std::max(worst_mean, (sm.xi[i] - post.x(i)).cwiseAbs().maxCoeff());
            worst_cov = std::max(worst_cov, (sm.P[i] - post.P(i, i)).cwiseAbs().maxCoeff());
            if (i >= 1) worst_lag = std::max(worst_lag, (sm.P_lag[i] - post.P(i, i - 1)).cwiseAbs().maxCoeff());
        }
    }
    CHECK(worst_mean < 1e-9);
    CHECK(worst_cov < 1e-9);
    CHECK(worst_lag < 1e-9);
}

TEST_CASE("edge cases") {
    SmootherStep only;
    only.x_post = Vec3(1, 2, 3);
    only.P_post = Mat3::Identity() * 2.0;
    std::vector<SmootherStep> one = {only};
    SmoothedTrajectory sm = rts_smooth(one);
    CHECK(sm.size() == 1);
    CHECK(sm.xi[0] == only.x_post);
    CHECK(sm.P[0] == only.P_post);
    CHECK_NOTHROW(lag_one_smooth(one, sm));
    CHECK_THROWS_AS(rts_smooth(std::vector<SmootherStep>{}), InvalidArgument);

    // No process noise and no information: the covariance never moves.
    std::vector<SmootherStep> flat(6, only);
    for (auto& s : flat) {
        s.P_prior = only.P_post;
        s.x_prior = only.x_post;
    }
    sm = rts_smooth(flat);
    lag_one_smooth(flat, sm);
    for (std::size_t i = 0; i < flat.size(); ++i) {
        CHECK((sm.P[i] - only.P_post).norm() < 1e-14);
        if (i >= 1) CHECK((sm.P_lag[i] - only.P_post).norm() < 1e-14);
    }

    // n = 1: the lag initialisation is (I - K H) F P+_0.
    std::mt19937_64 gen(5);
    const oracle::LinearSystem sys = random_system(gen, 1);
    const auto steps = filter_steps(sys);
    sm = rts_smooth(steps);
    lag_one_smooth(steps, sm);
    const Mat3 expected = (Mat3::Identity() - steps[1].KH) * steps[1].F * steps[0].P_post;
    CHECK((sm.P_lag[1] - expected).norm() < 1e-14);

    // Zero gain: the lag covariance is the propagated one, P+ itself when F = I.
    auto blind = flat;
    for (std::size_t i = 1; i < blind.size(); ++i) {
        blind[i].P_prior = blind[i - 1].P_post + Mat3::Identity() * 0.1;
        blind[i].P_post = blind[i].P_prior;
    }
    sm = rts_smooth(blind);
    lag_one_smooth(blind, sm);
    CHECK((sm.P_lag[blind.size() - 1] - blind[blind.size() - 2].P_post).norm() < 1e-14);

    auto singular = flat;
    singular[3].P_prior = Mat3::Zero();
    CHECK_THROWS_AS(rts_smooth(singular), NumericalDegeneracy);

    SmoothedTrajectory wrong;
    CHECK_THROWS_AS(lag_one_smooth(flat, wrong), InvalidArgument);
}

TEST_CASE("smoothing never loses information") {
    std::mt19937_64 gen(8);
    for (int trial = 0; trial < 50; ++trial) {
        const oracle::LinearSystem sys = random_system(gen, 10);
        const auto steps = filter_steps(sys);
        const SmoothedTrajectory sm = rts_smooth(steps);
        for (std::size_t i = 0; i < steps.size(); ++i) {
            CHECK((sm.P[i] - sm.P[i].transpose()).cwiseAbs().maxCoeff() < 1e-14);
            CHECK(min_eigenvalue(sm.P[i]) > 0.0);
            CHECK(min_eigenvalue(Mat3(steps[i].P_post - sm.P[i])) > -1e-12);
        }
    }
}

TEST_CASE("invariant filter records") {
    TrajectoryConfig cfg;
    cfg.n_steps = 50;
    const Trajectory tr = generate_trajectory(cfg, WorldConstants(), NoiseSpec());
    const FilterState init{exp_map(Vec3(0.2, 0.1, -0.1)), Mat3::Identity() * 0.1, 0};
    const auto recs = riekf_run(tr.samples, init, NoiseParams(), WorldConstants(), tr.dt);
    const auto steps = smoother_steps(init, recs);
    REQUIRE(steps.size() == recs.size() + 1);
    for (std::size_t i = 1; i < steps.size(); ++i) {
        CHECK(steps[i].x_prior.isZero(0.0));
        CHECK(steps[i].reset == steps[i].x_post);
    }
    const SmoothedTrajectory sm = rts_smooth(init, recs);
    REQUIRE(sm.q.size() == steps.size());
    // The last smoothed estimate is the last filtered one.
    CHECK((sm.q.back().coeffs() - recs.back().q_post.coeffs()).norm() < 1e-15);
    double filtered = 0.0, smoothed = 0.0;
    for (std::size_t i = 1; i < sm.q.size(); ++i) {
        filtered += attitude_error(tr.truth[i], recs[i - 1].q_post).squaredNorm();
        smoothed += attitude_error(tr.truth[i], sm.q[i]).squaredNorm();
    }
    CHECK(smoothed < filtered);
}
