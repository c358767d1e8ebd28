#pragma once

// System model: ground-truth attitude kinematics, noiseless accelerometer and
// magnetometer synthesis, and Gaussian noise injection.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "iaekf/rng.hpp"
#include "iaekf/types.hpp"

namespace iaekf {

/// Inertial-frame reference vectors. Must be non-zero and non-parallel.
struct WorldConstants {
    Vec3 g = Vec3(0.0, 0.0, 1.0);
    Vec3 b = Vec3(0.5, 0.0, std::sqrt(3.0) / 2.0);  // 60 degree dip

    /// Throws InvalidArgument when heading would be unobservable.
    void validate() const;
    Vec6 stacked() const;
};

/// Sensor noise covariances. sigma_nu() = blockdiag(sigma_a, sigma_m).
struct NoiseSpec {
    Mat3 sigma_eta = Mat3::Identity() * 1e-1;
    Mat3 sigma_a = Mat3::Identity() * 1e-5;
    Mat3 sigma_m = Mat3::Identity() * 1e-5;
    /// Permit PSD (e.g. all-zero) covariances. Test use only.
    bool allow_singular = false;

    Mat6 sigma_nu() const;
    /// Throws InvalidCovariance unless every block is symmetric and SPD
    /// (or PSD when allow_singular is set).
    void validate() const;

    static NoiseSpec zero();
    static NoiseSpec isotropic(double gyro_var, double meas_var);
};

/// Square-root factors of a NoiseSpec, computed once per trajectory.
struct NoiseFactors {
    Mat3 gyro;
    Mat6 meas;

    explicit NoiseFactors(const NoiseSpec& spec);
};

/// One sample k >= 1: gyro reading over (k-1, k], accel and mag at step k.
struct SensorSample {
    long t = 0;
    Vec3 gyro = Vec3::Zero();
    Vec3 accel = Vec3::Zero();
    Vec3 mag = Vec3::Zero();

    Vec6 z() const;
};

enum class OmegaProfileKind { Constant, Sinusoidal, RandomWalk };

/// Angular-velocity schedule (body frame, rad/s).
struct OmegaProfile {
    OmegaProfileKind kind = OmegaProfileKind::Sinusoidal;
    Vec3 constant = Vec3::Zero();
    // Sinusoidal: amplitude * sin(2 pi frequency t + phase) per axis.
    Vec3 amplitude = Vec3(0.6, 0.8, 0.5);
    Vec3 frequency = Vec3(0.11, 0.07, 0.13);
    Vec3 phase = Vec3(0.0, 1.0, 2.0);
    // RandomWalk: piecewise constant, each segment adds N(0, step_std^2 I).
    int segment_steps = 50;
    double step_std = 0.3;

    static OmegaProfile still();
};

struct TrajectoryConfig {
    double dt = 0.01;
    int n_steps = 1000;
    OmegaProfile profile;
    std::uint64_t seed = 1;
    /// Initial truth; perturbed by exp_map(s / 2) with s ~ N(0, q0_tangent_cov) when that is non-zero.
    Quaternion q0 = Quaternion::identity();
    Mat3 q0_tangent_cov = Mat3::Zero();

    void validate() const;
};

struct Trajectory {
    double dt = 0.0;
    std::vector<Quaternion> truth;       // n_steps + 1 entries, truth[k] at step k
    std::vector<Vec3> omega;             // n_steps entries, true rate over (k-1, k]
    std::vector<SensorSample> samples;   // n_steps entries, samples[k-1].t == k
};

/// Phi q with Phi = mat_exp(dt/2 Omega[omega]).
Quaternion propagate_truth(const Quaternion& q, const Vec3& omega, double dt);

/// Body-frame [a; m] for orientation q.
Vec6 measure_noiseless(const Quaternion& q, const WorldConstants& world);

SensorSample corrupt(const Vec6& z, const Vec3& omega, const NoiseFactors& factors, Rng& rng);
SensorSample corrupt(const Vec6& z, const Vec3& omega, const NoiseSpec& spec, Rng& rng);

Vec3 profile_rate(const OmegaProfile& profile, double t);

/// Deterministic given cfg.seed.
Trajectory generate_trajectory(const TrajectoryConfig& cfg, const WorldConstants& world,
                               const NoiseSpec& spec);

/// CSV with header `t,qw,qx,qy,qz,wx,wy,wz,ax,ay,az,mx,my,mz`. Row t = 0 holds
/// the initial truth with `nan` sensor columns.
void write_trajectory_csv(std::ostream& os, const Trajectory& traj);
Trajectory read_trajectory_csv(std::istream& is, double dt);

}  // namespace iaekf
