#pragma once

// Expectation-maximization over one window of n samples for
// Theta = {mu0, Sigma0, Sigma_eta, Sigma_nu}.
//
// E-step: filter the window from exp_map(mu0 / 2) (x) q_ref with P0 = Sigma0,
// then RTS + lag-one smoothing. M-step: closed-form covariance updates from
// the smoothed moments, with the gyro noise pulled back into the body frame by
// A_i = world_from_body(q_prior_i) and the measurement noise by
// B_i = block_rotation(q_prior_i).

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "iaekf/filters.hpp"
#include "iaekf/smoothing.hpp"

namespace iaekf {

/// Per-step quantities the M-step needs besides the smoothed moments (i = 1..n).
struct EmTerm {
    Mat3 A = Mat3::Identity();
    Mat6 B = Mat6::Identity();
    Mat63 H = Mat63::Zero();
    Vec6 r_smoothed = Vec6::Zero();
};

struct EStepResult {
    std::vector<StepRecord> records;       // empty for the linear surrogate
    std::vector<SmootherStep> steps;       // i = 0..n
    SmoothedTrajectory smoothed;
    std::vector<EmTerm> terms;             // terms[i - 1] for i = 1..n

    std::size_t window() const { return terms.size(); }
};

struct EmStatistics {
    int n = 0;
    Mat3 S11 = Mat3::Zero();
    Mat3 S10 = Mat3::Zero();
    Mat3 S00 = Mat3::Zero();
    Mat6 nu_sum = Mat6::Zero();  // sum of B' (r r' + H P H') B
    Vec3 xi0 = Vec3::Zero();
    Mat3 P0 = Mat3::Zero();
};

/// How the M-step forms Sigma_eta.
enum class SigmaEtaUpdate {
    /// (S11 - S10 - S10' + S00) / (n dt^2): the exact minimizer of G with F = I.
    KnownTransition,
    /// (S11 - S10 S00^-1 S10') / (n dt^2): regression form that also fits F.
    Regression,
};

struct EmOptions {
    int max_iter = 50;
    double tol_G = 1e-6;
    double tol_theta = 1e-4;
    SigmaEtaUpdate eta_update = SigmaEtaUpdate::KnownTransition;
};

enum class ConvergedBy { Likelihood, Parameters, MaxIter };

std::string to_string(ConvergedBy c);

struct EmReport {
    int iterations = 0;                   // M-steps taken
    std::vector<double> G_history;        // G(Theta^j | Theta^j), one per E-step
    std::vector<double> G_mstep;          // G(Theta^{j+1} | Theta^j), one per M-step
    std::vector<NoiseParams> theta_history;  // Theta^0 .. Theta^iterations
    ConvergedBy converged_by = ConvergedBy::MaxIter;

    const NoiseParams& theta() const { return theta_history.back(); }
};

/// Filter + smoother pass over the window for the invariant filter.
EStepResult e_step(std::span<const SensorSample> window, const NoiseParams& theta, const WorldConstants& world,
                   const Quaternion& q_ref, double dt);

EmStatistics sufficient_statistics(const EStepResult& es);

/// G(Theta | Theta^j) for the statistics gathered under Theta^j. Throws
/// InvalidCovariance if a block of `theta` is not SPD.
double expected_log_lik(const EmStatistics& stats, const NoiseParams& theta, double dt);
double expected_log_lik(const EStepResult& es, const NoiseParams& theta, double dt);

/// Closed-form update. Every block is symmetrized and eigenvalue-floored at
/// 1e-12 tr(block)/dim. Throws NumericalDegeneracy on a singular S00 when the
/// regression form is selected.
NoiseParams m_step(const EmStatistics& stats, double dt, SigmaEtaUpdate eta_update = SigmaEtaUpdate::KnownTransition);

using EStepFn = std::function<EStepResult(const NoiseParams&)>;

/// The EM loop for any E-step. Non-convergence is reported, not thrown.
EmReport em_iterate(const EStepFn& estep, const NoiseParams& theta0, double dt, const EmOptions& opts);

/// EM on one window of the invariant filter.
EmReport em_fit(std::span<const SensorSample> window, const NoiseParams& theta0, const WorldConstants& world,
                const Quaternion& q_ref, double dt, const EmOptions& opts = {});

/// Linear-Gaussian surrogate: x_i = x_{i-1} + w_i, y_i = H x_i + v_i with
/// w ~ N(0, Sigma_eta dt^2), v ~ N(0, Sigma_nu), x_0 ~ N(mu0, Sigma0).
EStepResult linear_e_step(std::span<const Vec6> y, const Mat63& H, const NoiseParams& theta, double dt);

EmReport em_fit_linear(std::span<const Vec6> y, const Mat63& H, const NoiseParams& theta0, double dt,
                       const EmOptions& opts = {});

/// Header `iter,G,` then sigma_eta (9, row-major) and sigma_nu (36, row-major).
/// Row j holds Theta^j and the G evaluated at it (nan when no E-step ran).
void write_em_report_csv(std::ostream& os, const EmReport& report);

}  // namespace iaekf
