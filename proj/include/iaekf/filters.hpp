#pragma once

// Right- and left-invariant extended Kalman filters on unit quaternions.
//
// Both filters carry a 3-dimensional tangent error state that is folded into
// the quaternion after every update. Frame conventions:
//
//   measurement   z = [dcm(q) g; dcm(q) b]          (body frame)
//   RI error      q_hat (x) q^-1 = exp_map(xi / 2)   (inertial frame)
//   LI error      q^-1 (x) q_hat = exp_map(xi / 2)   (body frame)
//
// Both innovations linearize to r ~ H (-xi) + noise, and both corrections add
// K r to the error, so xi+ = (I - K H) xi- + K noise.

#include <iosfwd>
#include <span>
#include <vector>

#include "iaekf/models.hpp"
#include "iaekf/types.hpp"

namespace iaekf {

/// Theta = {mu0, Sigma0, Sigma_eta, Sigma_nu}.
struct NoiseParams {
    TangentVector mu0 = TangentVector::Zero();
    Mat3 sigma0 = Mat3::Identity();
    Mat3 sigma_eta = Mat3::Identity() * 1e-1;
    Mat6 sigma_nu = Mat6::Identity() * 1e-5;

    /// Throws InvalidCovariance if any block is not symmetric positive definite.
    void validate() const;

    static NoiseParams from_spec(const NoiseSpec& spec, const Mat3& sigma0 = Mat3::Identity());
};

struct FilterState {
    Quaternion q;
    Mat3 P = Mat3::Identity();
    long k = 0;

    /// Throws InvalidCovariance if P is not symmetric PSD.
    void validate() const;
};

/// Everything one propagate + update cycle produced. F is the transition
/// that carried the error from step k-1 into step k.
struct StepRecord {
    long k = 0;
    Quaternion q_prior;
    Quaternion q_post;
    Mat3 P_prior = Mat3::Zero();
    Mat3 P_post = Mat3::Zero();
    Mat36 K = Mat36::Zero();
    Vec6 r = Vec6::Zero();
    Mat3 F = Mat3::Identity();
    Mat63 H = Mat63::Zero();
    Mat3 Q = Mat3::Zero();
    Mat6 R = Mat6::Zero();
    Mat4 Phi = Mat4::Identity();

    FilterState posterior() const { return {q_post, P_post, k}; }
};

enum class FilterKind { RightInvariant, LeftInvariant };

/// Body-to-inertial rotation, dcm(q)^T.
Mat3 world_from_body(const Quaternion& q);

/// blockdiag(world_from_body(q), world_from_body(q)); maps stacked body
/// measurements into the inertial frame.
Mat6 block_rotation(const Quaternion& q);

/// [[g]_x; [b]_x]
Mat63 measurement_jacobian(const WorldConstants& world);

/// mat_exp(dt/2 Omega[omega]).
Mat4 transition_matrix(const Vec3& gyro, double dt);

/// Prior half of a record: q_prior = Phi q_post(k-1), P_prior = F P F' + Q with
/// F = I and Q = A Sigma_eta dt^2 A', A = world_from_body(q_prior).
StepRecord riekf_propagate(const FilterState& s, const Vec3& gyro, const Mat3& sigma_eta, double dt);

/// Completes `rec` with the measurement update. Throws NumericalDegeneracy
/// when the innovation covariance is ill-conditioned (cond > 1e12).
StepRecord riekf_update(StepRecord rec, const SensorSample& sample, const WorldConstants& world,
                        const Mat6& sigma_nu);

StepRecord liekf_propagate(const FilterState& s, const Vec3& gyro, const Mat3& sigma_eta, double dt);
StepRecord liekf_update(StepRecord rec, const SensorSample& sample, const WorldConstants& world,
                        const Mat6& sigma_nu);

/// One record per sample. Only sigma_eta and sigma_nu of `params` are used;
/// the initial state is `init`.
std::vector<StepRecord> riekf_run(std::span<const SensorSample> samples, const FilterState& init,
                                  const NoiseParams& params, const WorldConstants& world, double dt);
std::vector<StepRecord> liekf_run(std::span<const SensorSample> samples, const FilterState& init,
                                  const NoiseParams& params, const WorldConstants& world, double dt);
std::vector<StepRecord> run_filter(FilterKind kind, std::span<const SensorSample> samples, const FilterState& init,
                                   const NoiseParams& params, const WorldConstants& world, double dt);

/// xi with exp_map(xi / 2) = q_hat (x) q_true^-1, on the short-rotation branch.
TangentVector attitude_error(const Quaternion& q_true, const Quaternion& q_hat);

/// Header `k,qw-,qx-,qy-,qz-,qw+,qx+,qy+,qz+,P-00..P-22,P+00..P+22,K00..K25,r0..r5`.
/// Row k = 0 echoes `init` (prior == posterior, zero gain and innovation).
void write_step_records_csv(std::ostream& os, const FilterState& init, std::span<const StepRecord> records);

}  // namespace iaekf
