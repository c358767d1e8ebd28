#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "iaekf/adaptive_em.hpp"
#include "iaekf/covariance.hpp"
#include "iaekf/csv.hpp"
#include "iaekf/errors.hpp"
#include "oracles.hpp"

using namespace iaekf;

namespace {

struct Surrogate {
    Mat63 H;
    std::vector<Vec6> y;
    NoiseParams theta0;
    double dt = 0.1;
};

Surrogate random_surrogate(std::mt19937_64& gen, int n) {
    Surrogate s;
    for (int c = 0; c < 3; ++c) s.H.col(c) = Vec6(oracle::random_vector(gen, 6));
    NoiseParams truth;
    truth.mu0 = oracle::random_vector(gen, 3);
    truth.sigma0 = oracle::random_spd(gen, 3, 1.0);
    truth.sigma_eta = oracle::random_spd(gen, 3, 1.0);
    truth.sigma_nu = oracle::random_spd(gen, 6, 0.5);
    const Mat3 l0 = truth.sigma0.llt().matrixL();
    const Mat3 le = Mat3(truth.sigma_eta * s.dt * s.dt).llt().matrixL();
    const Mat6 ln = truth.sigma_nu.llt().matrixL();
    Vec3 x = truth.mu0 + l0 * Vec3(oracle::random_vector(gen, 3));
    for (int i = 0; i < n; ++i) {
        x += le * Vec3(oracle::random_vector(gen, 3));
        s.y.push_back(s.H * x + ln * Vec6(oracle::random_vector(gen, 6)));
    }
    s.theta0.mu0 = oracle::random_vector(gen, 3);
    s.theta0.sigma0 = oracle::random_spd(gen, 3, 2.0);
    s.theta0.sigma_eta = oracle::random_spd(gen, 3, 3.0);
    s.theta0.sigma_nu = oracle::random_spd(gen, 6, 2.0);
    return s;
}

oracle::TextbookTheta to_textbook(const NoiseParams& p) {
    return {p.mu0, p.sigma0, p.sigma_eta, p.sigma_nu};
}

std::vector<Eigen::VectorXd> dynamic(const std::vector<Vec6>& y) {
    return {y.begin(), y.end()};
}

bool non_increasing(const std::vector<double>& g, double rel) {
    for (std::size_t j = 1; j < g.size(); ++j) {
        if (g[j] > g[j - 1] + rel * std::abs(g[j - 1])) return false;
    }
    return true;
}

NoiseSpec paper_truth() {
    NoiseSpec n;
    n.sigma_eta = Vec3(0.75, 1.5, 1.0).asDiagonal() * 1e-1;
    n.sigma_a = Vec3(1, 2, 3).asDiagonal() * 1e-5;
    n.sigma_m = Vec3(3, 3.5, 6).asDiagonal() * 1e-5;
    return n;
}

}  // namespace

TEST_CASE("em matches textbook em on the linear surrogate") {
    std::mt19937_64 gen(31);
    EmOptions opts;
    opts.max_iter = 8;
    opts.tol_G = 0.0;
    opts.tol_theta = 0.0;
    double worst_theta = 0.0, worst_g = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const Surrogate s = random_surrogate(gen, 12 + trial % 5);
        const EmReport rep = em_fit_linear(s.y, s.H, s.theta0, s.dt, opts);
        const auto ref = oracle::textbook_em(dynamic(s.y), s.H, to_textbook(s.theta0), s.dt, opts.max_iter);
        REQUIRE(rep.G_history.size() == ref.size());
        const double shift = 3.0 * static_cast<double>(s.y.size()) * std::log(s.dt * s.dt);
        for (std::size_t j = 0; j < ref.size(); ++j) {
            const NoiseParams& th = rep.theta_history[j];
            const auto& tb = ref[j].theta;
            const double scale = 1.0 + tb.sigma_eta.norm() + tb.sigma_nu.norm() + tb.sigma0.norm() + tb.mu0.norm();
            worst_theta = std::max({worst_theta, (th.sigma_eta - tb.sigma_eta).norm() / scale,
                                    (th.sigma_nu - tb.sigma_nu).norm() / scale, (th.sigma0 - tb.sigma0).norm() / scale,
                                    (th.mu0 - tb.mu0).norm() / scale});
            worst_g = std::max(worst_g, std::abs(rep.G_history[j] + shift - ref[j].G) / (1.0 + std::abs(ref[j].G)));
        }
    }
    CHECK(worst_theta < 1e-8);
    CHECK(worst_g < 1e-8);
}

TEST_CASE("em descent") {
    std::mt19937_64 gen(32);
    EmOptions opts;
    opts.max_iter = 30;
    opts.tol_G = 0.0;
    opts.tol_theta = 0.0;
    int history_ok = 0, mstep_ok = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const Surrogate s = random_surrogate(gen, 10 + trial % 40);
        const EmReport rep = em_fit_linear(s.y, s.H, s.theta0, s.dt, opts);
        history_ok += non_increasing(rep.G_history, 1e-8);
        bool ok = true;
        for (std::size_t j = 0; j < rep.G_mstep.size(); ++j) {
            ok = ok && rep.G_mstep[j] <= rep.G_history[j] + 1e-8 * std::abs(rep.G_history[j]);
        }
        mstep_ok += ok;
    }
    MESSAGE("G_history non-increasing in " << history_ok << "/100 trials");
    CHECK(history_ok == 100);
    CHECK(mstep_ok == 100);
}

TEST_CASE("expected_log_lik") {
    EmStatistics zero;
    zero.n = 5;
    NoiseParams unit;
    unit.sigma0 = Mat3::Identity();
    unit.sigma_eta = Mat3::Identity();
    unit.sigma_nu = Mat6::Identity();
    CHECK(expected_log_lik(zero, unit, 1.0) == doctest::Approx(0.0).epsilon(1e-15));
    // Log-determinant terms alone.
    NoiseParams scaled = unit;
    scaled.sigma_eta *= 2.0;
    CHECK(expected_log_lik(zero, scaled, 1.0) == doctest::Approx(5 * 3 * std::log(2.0)).epsilon(1e-14));
    scaled.sigma_nu(0, 0) = -1.0;
    CHECK_THROWS_AS(expected_log_lik(zero, scaled, 1.0), InvalidCovariance);
}

TEST_CASE("m_step specializations") {
    EmStatistics st;
    st.n = 4;
    st.S11 = Vec3(2.0, 3.0, 4.0).asDiagonal();
    st.S00 = Vec3(1.0, 1.0, 2.0).asDiagonal();
    st.nu_sum = Mat6::Identity() * 8.0;
    st.xi0 = Vec3(0.1, 0.2, 0.3);
    st.P0 = Mat3::Identity() * 0.5;
    const double dt = 0.01;
    const NoiseParams reg = m_step(st, dt, SigmaEtaUpdate::Regression);
    CHECK((reg.sigma_eta - st.S11 / (4 * dt * dt)).norm() < 1e-9);
    const NoiseParams known = m_step(st, dt);
    CHECK((known.sigma_eta - (st.S11 + st.S00) / (4 * dt * dt)).norm() < 1e-9);
    CHECK(known.mu0 == st.xi0);
    CHECK(known.sigma0 == st.P0);
    CHECK(known.sigma_nu == Mat6::Identity() * 2.0);

    // Rank-deficient statistics are floored back to SPD.
    EmStatistics thin = st;
    thin.nu_sum = Mat6::Zero();
    thin.nu_sum(0, 0) = 1.0;
    CHECK(min_eigenvalue(m_step(thin, dt).sigma_nu) > 0.0);
    thin.S00 = Mat3::Zero();
    CHECK_THROWS_AS(m_step(thin, dt, SigmaEtaUpdate::Regression), NumericalDegeneracy);
    thin.n = 0;
    CHECK_THROWS_AS(m_step(thin, dt), InvalidArgument);
}

TEST_CASE("e_step on sensor windows") {
    TrajectoryConfig cfg;
    cfg.n_steps = 2;
    const WorldConstants world;
    const Trajectory tiny = generate_trajectory(cfg, world, paper_truth());
    const NoiseParams truth = NoiseParams::from_spec(paper_truth(), Mat3::Identity() * 1e-4);
    const EStepResult es = e_step(tiny.samples, truth, world, tiny.truth[0], tiny.dt);
    CHECK(es.window() == 2);
    REQUIRE(es.smoothed.P_lag.size() == 3);
    CHECK(es.smoothed.P_lag[1].norm() > 0.0);
    CHECK(es.smoothed.P_lag[2].norm() > 0.0);
    CHECK_THROWS_AS(e_step(std::span(tiny.samples).first(1), truth, world, tiny.truth[0], tiny.dt), InvalidArgument);

    const EStepResult again = e_step(tiny.samples, truth, world, tiny.truth[0], tiny.dt);
    CHECK(expected_log_lik(es, truth, tiny.dt) == expected_log_lik(again, truth, tiny.dt));

    // Smoothing beats filtering with the true parameters.
    double filtered = 0.0, smoothed = 0.0;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        cfg.n_steps = 200;
        cfg.seed = seed;
        const Trajectory tr = generate_trajectory(cfg, world, paper_truth());
        NoiseParams th = truth;
        th.sigma0 = Mat3::Identity() * 0.01;
        const Quaternion q_ref = quat_mul(exp_map(Vec3(0.05, -0.05, 0.02)), tr.truth[0]);
        const EStepResult r = e_step(tr.samples, th, world, q_ref, tr.dt);
        for (std::size_t i = 1; i <= tr.samples.size(); ++i) {
            filtered += attitude_error(tr.truth[i], r.records[i - 1].q_post).squaredNorm();
            smoothed += attitude_error(tr.truth[i], r.smoothed.q[i]).squaredNorm();
        }
    }
    CHECK(smoothed < filtered);
}

TEST_CASE("em_fit on sensor windows") {
    const WorldConstants world;
    const NoiseSpec spec = paper_truth();
    const NoiseParams truth = NoiseParams::from_spec(spec, Mat3::Identity() * 1e-4);
    NoiseParams scaled = truth;
    scaled.sigma_eta *= 400.0;
    scaled.sigma_nu *= 200.0;

    EmOptions one;
    one.max_iter = 1;
    EmOptions ten;
    ten.max_iter = 10;
    ten.tol_G = 0.0;
    ten.tol_theta = 0.0;
    int decreased = 0;
    std::vector<double> drift;
    bool spd = true;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        TrajectoryConfig cfg;
        cfg.n_steps = 80;
        cfg.seed = seed;
        const Trajectory tr = generate_trajectory(cfg, world, spec);
        const EmReport rep = em_fit(tr.samples, scaled, world, tr.truth[0], tr.dt, one);
        const NoiseParams& fit = rep.theta();
        decreased += (fit.sigma_eta - truth.sigma_eta).norm() < (scaled.sigma_eta - truth.sigma_eta).norm() &&
                     (fit.sigma_nu - truth.sigma_nu).norm() < (scaled.sigma_nu - truth.sigma_nu).norm();

        // Stationarity near the truth needs a longer window than the one-pass check.
        cfg.n_steps = 400;
        const Trajectory longer = generate_trajectory(cfg, world, spec);
        const EmReport stay = em_fit(longer.samples, truth, world, longer.truth[0], longer.dt, ten);
        CHECK(stay.converged_by == ConvergedBy::MaxIter);
        CHECK(stay.iterations == 10);
        drift.push_back(std::max((stay.theta().sigma_eta - truth.sigma_eta).norm() / truth.sigma_eta.norm(),
                                 (stay.theta().sigma_nu - truth.sigma_nu).norm() / truth.sigma_nu.norm()));
        for (const NoiseParams& th : stay.theta_history) {
            spd = spd && min_eigenvalue(th.sigma0) > 0.0 && min_eigenvalue(th.sigma_eta) > 0.0 &&
                  min_eigenvalue(th.sigma_nu) > 0.0;
            spd = spd && (th.sigma_nu - th.sigma_nu.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * th.sigma_nu.norm();
        }
    }
    std::nth_element(drift.begin(), drift.begin() + 25, drift.end());
    CHECK(decreased == 50);
    CHECK(drift[25] < 0.25);
    CHECK(spd);
}

TEST_CASE("em_fit bookkeeping") {
    const WorldConstants world;
    TrajectoryConfig cfg;
    cfg.n_steps = 40;
    const Trajectory tr = generate_trajectory(cfg, world, paper_truth());
    const NoiseParams theta0 = NoiseParams::from_spec(paper_truth(), Mat3::Identity() * 1e-4);

    EmOptions none;
    none.max_iter = 0;
    const EmReport idle = em_fit(tr.samples, theta0, world, tr.truth[0], tr.dt, none);
    CHECK(idle.iterations == 0);
    CHECK(idle.converged_by == ConvergedBy::MaxIter);
    REQUIRE(idle.theta_history.size() == 1);
    CHECK(idle.theta().sigma_eta == theta0.sigma_eta);
    CHECK(idle.theta().sigma_nu == theta0.sigma_nu);
    CHECK(idle.G_history.empty());

    EmOptions three;
    three.max_iter = 3;
    three.tol_G = 0.0;
    three.tol_theta = 0.0;
    const EmReport a = em_fit(tr.samples, theta0, world, tr.truth[0], tr.dt, three);
    const EmReport b = em_fit(tr.samples, theta0, world, tr.truth[0], tr.dt, three);
    std::ostringstream sa, sb;
    write_em_report_csv(sa, a);
    write_em_report_csv(sb, b);
    CHECK(sa.str() == sb.str());

    std::istringstream is(sa.str());
    std::string line;
    std::getline(is, line);
    CHECK(csv::split(line).size() == 2 + 9 + 36);
    CHECK(line.rfind("iter,G,sigma_eta00", 0) == 0);
    int rows = 0;
    std::string last;
    while (std::getline(is, line)) {
        ++rows;
        last = line;
    }
    CHECK(rows == 4);
    CHECK(csv::split(last)[1] == "nan");

    EmOptions loose;
    loose.tol_theta = 1e6;
    CHECK(em_fit(tr.samples, theta0, world, tr.truth[0], tr.dt, loose).converged_by == ConvergedBy::Parameters);
    EmOptions flat;
    flat.tol_G = 1e6;
    flat.tol_theta = 0.0;
    const EmReport by_g = em_fit(tr.samples, theta0, world, tr.truth[0], tr.dt, flat);
    CHECK(by_g.converged_by == ConvergedBy::Likelihood);
    CHECK(by_g.iterations == 1);
    CHECK(to_string(ConvergedBy::MaxIter) == "max-iter");
}

TEST_CASE("estimates rotate with the trajectory") {
    const WorldConstants world;
    const NoiseSpec iso = NoiseSpec::isotropic(0.1, 1e-5);
    NoiseParams theta0 = NoiseParams::from_spec(iso, Mat3::Identity() * 1e-4);
    theta0.sigma_eta *= 400.0;
    theta0.sigma_nu *= 200.0;
    const Quaternion rho = exp_map(Vec3(0.7, -0.2, 0.4));
    const Mat3 r = dcm(rho);
    Mat6 r2 = Mat6::Zero();
    r2.topLeftCorner<3, 3>() = r;
    r2.bottomRightCorner<3, 3>() = r;
    EmOptions opts;
    opts.max_iter = 5;
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        TrajectoryConfig cfg;
        cfg.n_steps = 80;
        cfg.seed = seed;
        const Trajectory tr = generate_trajectory(cfg, world, iso);
        std::vector<SensorSample> moved = tr.samples;
        for (auto& s : moved) {
            s.gyro = r * s.gyro;
            s.accel = r * s.accel;
            s.mag = r * s.mag;
        }
        const EmReport base = em_fit(tr.samples, theta0, world, tr.truth[0], tr.dt, opts);
        const EmReport rot = em_fit(moved, theta0, world, quat_mul(tr.truth[0], rho), tr.dt, opts);
        CHECK(base.iterations == rot.iterations);
        const Mat3 eta = r * base.theta().sigma_eta * r.transpose();
        const Mat6 nu = r2 * base.theta().sigma_nu * r2.transpose();
        worst = std::max({worst, (rot.theta().sigma_eta - eta).norm() / eta.norm(),
                          (rot.theta().sigma_nu - nu).norm() / nu.norm()});
    }
    CHECK(worst < 1e-6);
}
