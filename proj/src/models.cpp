#include "iaekf/models.hpp"

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>

#include "iaekf/covariance.hpp"
#include "iaekf/csv.hpp"

namespace iaekf {

void WorldConstants::validate() const {
    if (!g.allFinite() || !b.allFinite()) {
        throw InvalidArgument("world: non-finite reference vector");
    }
    const double gn = g.norm();
    const double bn = b.norm();
    if (!(gn > 0.0) || !(bn > 0.0)) {
        throw InvalidArgument("world: reference vectors must be non-zero");
    }
    if (g.cross(b).norm() <= 1e-6 * gn * bn) {
        throw InvalidArgument("world: g and b are parallel; heading is unobservable");
    }
}

Vec6 WorldConstants::stacked() const {
    Vec6 out;
    out << g, b;
    return out;
}

Mat6 NoiseSpec::sigma_nu() const {
    Mat6 out = Mat6::Zero();
    out.topLeftCorner<3, 3>() = sigma_a;
    out.bottomRightCorner<3, 3>() = sigma_m;
    return out;
}

void NoiseSpec::validate() const {
    require_spd(sigma_eta, "sigma_eta", allow_singular);
    require_spd(sigma_a, "sigma_a", allow_singular);
    require_spd(sigma_m, "sigma_m", allow_singular);
}

NoiseSpec NoiseSpec::zero() {
    NoiseSpec spec;
    spec.sigma_eta.setZero();
    spec.sigma_a.setZero();
    spec.sigma_m.setZero();
    spec.allow_singular = true;
    return spec;
}

NoiseSpec NoiseSpec::isotropic(double gyro_var, double meas_var) {
    NoiseSpec spec;
    spec.sigma_eta = Mat3::Identity() * gyro_var;
    spec.sigma_a = Mat3::Identity() * meas_var;
    spec.sigma_m = Mat3::Identity() * meas_var;
    return spec;
}

NoiseFactors::NoiseFactors(const NoiseSpec& spec)
    : gyro(sqrt_factor(spec.sigma_eta, "sigma_eta", spec.allow_singular)), meas(Mat6::Zero()) {
    meas.topLeftCorner<3, 3>() = sqrt_factor(spec.sigma_a, "sigma_a", spec.allow_singular);
    meas.bottomRightCorner<3, 3>() = sqrt_factor(spec.sigma_m, "sigma_m", spec.allow_singular);
}

Vec6 SensorSample::z() const {
    Vec6 out;
    out << accel, mag;
    return out;
}

OmegaProfile OmegaProfile::still() {
    OmegaProfile p;
    p.kind = OmegaProfileKind::Constant;
    p.constant.setZero();
    return p;
}

void TrajectoryConfig::validate() const {
    if (!(dt > 0.0) || !std::isfinite(dt)) {
        throw InvalidArgument("trajectory: dt must be positive");
    }
    if (n_steps < 1) {
        throw InvalidArgument("trajectory: n_steps must be >= 1");
    }
    if (profile.kind == OmegaProfileKind::RandomWalk && profile.segment_steps < 1) {
        throw InvalidArgument("trajectory: segment_steps must be >= 1");
    }
    if (!q0_tangent_cov.isZero(0.0)) {
        require_spd(q0_tangent_cov, "q0_tangent_cov", true);
    }
}

Quaternion propagate_truth(const Quaternion& q, const Vec3& omega, double dt) {
    const Mat4 phi = mat_exp(Mat4((dt / 2.0) * omega_matrix(pure(omega))));
    return Quaternion(Vec4(phi * q.coeffs()));
}

Vec6 measure_noiseless(const Quaternion& q, const WorldConstants& world) {
    const Mat3 a = dcm(q);
    Vec6 out;
    out << a * world.g, a * world.b;
    return out;
}

SensorSample corrupt(const Vec6& z, const Vec3& omega, const NoiseFactors& factors, Rng& rng) {
    SensorSample s;
    s.gyro = omega + factors.gyro * rng.normal_vector<3>();
    const Vec6 zbar = z + factors.meas * rng.normal_vector<6>();
    s.accel = zbar.head<3>();
    s.mag = zbar.tail<3>();
    return s;
}

SensorSample corrupt(const Vec6& z, const Vec3& omega, const NoiseSpec& spec, Rng& rng) {
    return corrupt(z, omega, NoiseFactors(spec), rng);
}

Vec3 profile_rate(const OmegaProfile& profile, double t) {
    switch (profile.kind) {
        case OmegaProfileKind::Constant:
            return profile.constant;
        case OmegaProfileKind::Sinusoidal: {
            Vec3 out;
            for (int i = 0; i < 3; ++i) {
                out(i) = profile.amplitude(i) * std::sin(2.0 * M_PI * profile.frequency(i) * t + profile.phase(i));
            }
            return out;
        }
        case OmegaProfileKind::RandomWalk:
            break;
    }
    throw InvalidArgument("profile_rate: random-walk profiles need an Rng; use generate_trajectory");
}

Trajectory generate_trajectory(const TrajectoryConfig& cfg, const WorldConstants& world, const NoiseSpec& spec) {
    cfg.validate();
    world.validate();
    const NoiseFactors factors(spec);
    Rng rng(cfg.seed);

    Trajectory traj;
    traj.dt = cfg.dt;
    traj.truth.reserve(cfg.n_steps + 1);
    traj.omega.reserve(cfg.n_steps);
    traj.samples.reserve(cfg.n_steps);

    Quaternion q = cfg.q0;
    if (!cfg.q0_tangent_cov.isZero(0.0)) {
        const Mat3 l = sqrt_factor(cfg.q0_tangent_cov, "q0_tangent_cov", true);
        const Vec3 s = l * rng.normal_vector<3>();
        q = quat_mul(exp_map(Vec3(s / 2.0)), q);
    }
    traj.truth.push_back(q);

    Vec3 walk = cfg.profile.constant;
    for (int k = 1; k <= cfg.n_steps; ++k) {
        const double t = (k - 1) * cfg.dt;
        Vec3 omega;
        if (cfg.profile.kind == OmegaProfileKind::RandomWalk) {
            if ((k - 1) % cfg.profile.segment_steps == 0) {
                walk += cfg.profile.step_std * rng.normal_vector<3>();
            }
            omega = walk;
        } else {
            omega = profile_rate(cfg.profile, t);
        }
        q = propagate_truth(q, omega, cfg.dt);
        SensorSample s = corrupt(measure_noiseless(q, world), omega, factors, rng);
        s.t = k;
        traj.truth.push_back(q);
        traj.omega.push_back(omega);
        traj.samples.push_back(s);
    }
    return traj;
}

namespace {

const std::vector<std::string>& trajectory_columns() {
    static const std::vector<std::string> cols = {"t",  "qw", "qx", "qy", "qz", "wx", "wy",
                                                  "wz", "ax", "ay", "az", "mx", "my", "mz"};
    return cols;
}

}  // namespace

void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
    csv::write_header(os, trajectory_columns());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t k = 0; k < traj.truth.size(); ++k) {
        const Vec4& q = traj.truth[k].coeffs();
        std::vector<double> row = {q(0), q(1), q(2), q(3)};
        if (k == 0) {
            row.insert(row.end(), 9, nan);
        } else {
            const SensorSample& s = traj.samples[k - 1];
            row.insert(row.end(), {s.gyro(0), s.gyro(1), s.gyro(2), s.accel(0), s.accel(1), s.accel(2), s.mag(0),
                                   s.mag(1), s.mag(2)});
        }
        csv::write_row(os, std::to_string(k), row);
    }
}

Trajectory read_trajectory_csv(std::istream& is, double dt) {
    const auto rows = csv::read_table(is, trajectory_columns());
    if (rows.empty()) {
        throw ConfigError("trajectory csv: no rows");
    }
    Trajectory traj;
    traj.dt = dt;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto& r = rows[k];
        if (static_cast<std::size_t>(r[0]) != k) {
            throw ConfigError("trajectory csv: row " + std::to_string(k + 2) + " has t = " + csv::format(r[0]) +
                              ", expected " + std::to_string(k));
        }
        traj.truth.push_back(Quaternion(Vec4(r[1], r[2], r[3], r[4])));
        if (k == 0) continue;
        SensorSample s;
        s.t = static_cast<long>(k);
        s.gyro = Vec3(r[5], r[6], r[7]);
        s.accel = Vec3(r[8], r[9], r[10]);
        s.mag = Vec3(r[11], r[12], r[13]);
        if (!s.gyro.allFinite() || !s.accel.allFinite() || !s.mag.allFinite()) {
            throw ConfigError("trajectory csv: row " + std::to_string(k + 2) + " has non-finite sensor values");
        }
        traj.samples.push_back(s);
        traj.omega.push_back(s.gyro);  // true rate is not stored; the reading stands in
    }
    return traj;
}

}  // namespace iaekf
