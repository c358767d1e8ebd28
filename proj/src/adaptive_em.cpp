#include "iaekf/adaptive_em.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <limits>
#include <ostream>

#include "iaekf/covariance.hpp"
#include "iaekf/csv.hpp"

namespace iaekf {

std::string to_string(ConvergedBy c) {
    switch (c) {
        case ConvergedBy::Likelihood:
            return "likelihood";
        case ConvergedBy::Parameters:
            return "parameters";
        case ConvergedBy::MaxIter:
            return "max-iter";
    }
    return "unknown";
}

EStepResult e_step(std::span<const SensorSample> window, const NoiseParams& theta, const WorldConstants& world,
                   const Quaternion& q_ref, double dt) {
    if (window.size() < 2) {
        throw InvalidArgument("e_step: window length must be >= 2");
    }
    const FilterState init{quat_mul(exp_map(Vec3(theta.mu0 / 2.0)), q_ref), theta.sigma0, 0};

    EStepResult es;
    es.records = riekf_run(window, init, theta, world, dt);
    es.steps = smoother_steps(init, es.records, theta.mu0);
    es.smoothed = rts_smooth(init, es.records, theta.mu0);
    lag_one_smooth(es.steps, es.smoothed);

    const Vec6 ref = world.stacked();
    es.terms.reserve(window.size());
    for (std::size_t i = 1; i <= window.size(); ++i) {
        const StepRecord& rec = es.records[i - 1];
        EmTerm t;
        t.A = world_from_body(rec.q_prior);
        t.B = block_rotation(rec.q_prior);
        t.H = rec.H;
        t.r_smoothed = block_rotation(es.smoothed.q[i]) * window[i - 1].z() - ref;
        es.terms.push_back(t);
    }
    return es;
}

EStepResult linear_e_step(std::span<const Vec6> y, const Mat63& H, const NoiseParams& theta, double dt) {
    if (y.size() < 2) {
        throw InvalidArgument("linear_e_step: window length must be >= 2");
    }
    const Mat3 q = theta.sigma_eta * (dt * dt);
    EStepResult es;
    SmootherStep first;
    first.x_post = theta.mu0;
    first.P_post = theta.sigma0;
    first.P_prior = theta.sigma0;
    es.steps.push_back(first);
    for (const Vec6& yi : y) {
        const SmootherStep& prev = es.steps.back();
        SmootherStep s;
        s.F = Mat3::Identity();
        s.x_prior = prev.x_post;
        s.P_prior = symmetrized(Mat3(prev.P_post + q));
        const Mat6 innov_cov = H * s.P_prior * H.transpose() + theta.sigma_nu;
        const Eigen::LLT<Mat6> llt(innov_cov);
        if (llt.info() != Eigen::Success) {
            throw NumericalDegeneracy("linear_e_step: innovation covariance is not positive definite");
        }
        const Mat36 k = llt.solve(Mat63(H * s.P_prior)).transpose();
        s.x_post = s.x_prior + k * (yi - H * s.x_prior);
        s.KH = k * H;
        s.P_post = symmetrized(Mat3((Mat3::Identity() - s.KH) * s.P_prior));
        es.steps.push_back(s);
    }
    es.smoothed = rts_smooth(es.steps);
    lag_one_smooth(es.steps, es.smoothed);
    for (std::size_t i = 1; i <= y.size(); ++i) {
        EmTerm t;
        t.H = H;
        t.r_smoothed = y[i - 1] - H * es.smoothed.xi[i];
        es.terms.push_back(t);
    }
    return es;
}

EmStatistics sufficient_statistics(const EStepResult& es) {
    const auto& sm = es.smoothed;
    const std::size_t n = es.window();
    if (n < 1 || sm.size() != n + 1 || es.steps.size() != n + 1) {
        throw InvalidArgument("sufficient_statistics: inconsistent E-step result");
    }
    EmStatistics st;
    st.n = static_cast<int>(n);
    st.xi0 = sm.xi[0];
    st.P0 = sm.P[0];
    for (std::size_t i = 1; i <= n; ++i) {
        const EmTerm& t = es.terms[i - 1];
        const Mat3& f = es.steps[i].F;
        // Previous smoothed state about the reference the propagation started from.
        const Vec3 prev = sm.xi[i - 1] - es.steps[i - 1].reset;
        const Vec3& cur = sm.xi[i];
        st.S11 += t.A.transpose() * (cur * cur.transpose() + sm.P[i]) * t.A;
        st.S10 += t.A.transpose() * (cur * prev.transpose() + sm.P_lag[i]) * f.transpose() * t.A;
        st.S00 += t.A.transpose() * f * (prev * prev.transpose() + sm.P[i - 1]) * f.transpose() * t.A;
        st.nu_sum += t.B.transpose() *
                     (t.r_smoothed * t.r_smoothed.transpose() + t.H * sm.P[i] * t.H.transpose()) * t.B;
    }
    return st;
}

namespace {

template <typename Mat>
Eigen::LLT<Mat> spd_factor(const Mat& m, const char* name) {
    require_spd(m, name);
    Eigen::LLT<Mat> llt(m);
    if (llt.info() != Eigen::Success) {
        throw InvalidCovariance(std::string(name) + ": Cholesky factorization failed");
    }
    return llt;
}

template <typename Mat>
double log_det(const Eigen::LLT<Mat>& llt) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

template <typename Mat>
Mat floored(const Mat& m) {
    const double floor = 1e-12 * std::abs(m.trace()) / static_cast<double>(m.rows());
    return eigen_floored(m, floor);
}

}  // namespace

double expected_log_lik(const EmStatistics& st, const NoiseParams& theta, double dt) {
    const auto l0 = spd_factor(theta.sigma0, "sigma0");
    const auto leta = spd_factor(theta.sigma_eta, "sigma_eta");
    const auto lnu = spd_factor(theta.sigma_nu, "sigma_nu");
    const double n = st.n;
    const Vec3 d = st.xi0 - theta.mu0;
    const Mat3 init_term = st.P0 + d * d.transpose();
    const Mat3 eta_term = st.S11 - st.S10 - st.S10.transpose() + st.S00;
    return log_det(l0) + n * log_det(leta) + n * log_det(lnu) + l0.solve(init_term).trace() +
           leta.solve(eta_term).trace() / (dt * dt) + lnu.solve(st.nu_sum).trace();
}

double expected_log_lik(const EStepResult& es, const NoiseParams& theta, double dt) {
    return expected_log_lik(sufficient_statistics(es), theta, dt);
}

NoiseParams m_step(const EmStatistics& st, double dt, SigmaEtaUpdate eta_update) {
    if (st.n < 1) {
        throw InvalidArgument("m_step: empty window");
    }
    const double n = st.n;
    NoiseParams out;
    out.mu0 = st.xi0;
    out.sigma0 = floored(symmetrized(st.P0));
    Mat3 eta;
    if (eta_update == SigmaEtaUpdate::Regression) {
        const Eigen::LLT<Mat3> llt(symmetrized(st.S00));
        if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-14)) {
            throw NumericalDegeneracy("m_step: S00 is singular; enlarge the window");
        }
        eta = st.S11 - st.S10 * llt.solve(Mat3(st.S10.transpose()));
    } else {
        eta = st.S11 - st.S10 - st.S10.transpose() + st.S00;
    }
    out.sigma_eta = floored(Mat3(symmetrized(eta) / (n * dt * dt)));
    out.sigma_nu = floored(Mat6(symmetrized(st.nu_sum) / n));
    return out;
}

namespace {

double relative_change(const auto& next, const auto& prev) {
    const double base = prev.norm();
    return base > 0.0 ? (next - prev).norm() / base : (next - prev).norm();
}

}  // namespace

EmReport em_iterate(const EStepFn& estep, const NoiseParams& theta0, double dt, const EmOptions& opts) {
    theta0.validate();
    EmReport report;
    report.theta_history.push_back(theta0);
    NoiseParams theta = theta0;
    for (int it = 0; it < opts.max_iter; ++it) {
        const EStepResult es = estep(theta);
        const EmStatistics st = sufficient_statistics(es);
        const double g = expected_log_lik(st, theta, dt);
        report.G_history.push_back(g);
        if (report.G_history.size() >= 2) {
            const double prev = report.G_history[report.G_history.size() - 2];
            if (std::abs(g - prev) <= opts.tol_G * std::abs(g)) {
                report.converged_by = ConvergedBy::Likelihood;
                return report;
            }
        }
        const NoiseParams next = m_step(st, dt, opts.eta_update);
        report.G_mstep.push_back(expected_log_lik(st, next, dt));
        report.theta_history.push_back(next);
        report.iterations = it + 1;
        const double change = std::max(relative_change(next.sigma_eta, theta.sigma_eta),
                                       relative_change(next.sigma_nu, theta.sigma_nu));
        theta = next;
        if (change < opts.tol_theta) {
            report.converged_by = ConvergedBy::Parameters;
            return report;
        }
    }
    report.converged_by = ConvergedBy::MaxIter;
    return report;
}

EmReport em_fit(std::span<const SensorSample> window, const NoiseParams& theta0, const WorldConstants& world,
                const Quaternion& q_ref, double dt, const EmOptions& opts) {
    if (window.size() < 2) {
        throw InvalidArgument("em_fit: window length must be >= 2");
    }
    return em_iterate([&](const NoiseParams& th) { return e_step(window, th, world, q_ref, dt); }, theta0, dt,
                      opts);
}

EmReport em_fit_linear(std::span<const Vec6> y, const Mat63& H, const NoiseParams& theta0, double dt,
                       const EmOptions& opts) {
    return em_iterate([&](const NoiseParams& th) { return linear_e_step(y, H, th, dt); }, theta0, dt, opts);
}

void write_em_report_csv(std::ostream& os, const EmReport& report) {
    std::vector<std::string> cols = {"iter", "G"};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) cols.push_back("sigma_eta" + std::to_string(i) + std::to_string(j));
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) cols.push_back("sigma_nu" + std::to_string(i) + std::to_string(j));
    csv::write_header(os, cols);
    for (std::size_t j = 0; j < report.theta_history.size(); ++j) {
        const NoiseParams& th = report.theta_history[j];
        std::vector<double> row;
        row.push_back(j < report.G_history.size() ? report.G_history[j] : std::numeric_limits<double>::quiet_NaN());
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) row.push_back(th.sigma_eta(a, b));
        for (int a = 0; a < 6; ++a)
            for (int b = 0; b < 6; ++b) row.push_back(th.sigma_nu(a, b));
        csv::write_row(os, std::to_string(j), row);
    }
}

}  // namespace iaekf
