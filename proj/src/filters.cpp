#include "iaekf/filters.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <ostream>
#include <string>

#include "iaekf/covariance.hpp"
#include "iaekf/csv.hpp"

namespace iaekf {

void NoiseParams::validate() const {
    if (!mu0.allFinite()) {
        throw InvalidCovariance("mu0: non-finite entries");
    }
    require_spd(sigma0, "sigma0");
    require_spd(sigma_eta, "sigma_eta");
    require_spd(sigma_nu, "sigma_nu");
}

NoiseParams NoiseParams::from_spec(const NoiseSpec& spec, const Mat3& sigma0) {
    NoiseParams p;
    p.sigma0 = sigma0;
    p.sigma_eta = spec.sigma_eta;
    p.sigma_nu = spec.sigma_nu();
    return p;
}

void FilterState::validate() const {
    require_spd(P, "P", true, 1e-10);
}

Mat3 world_from_body(const Quaternion& q) {
    return dcm(q).transpose();
}

Mat6 block_rotation(const Quaternion& q) {
    const Mat3 a = world_from_body(q);
    Mat6 out = Mat6::Zero();
    out.topLeftCorner<3, 3>() = a;
    out.bottomRightCorner<3, 3>() = a;
    return out;
}

Mat63 measurement_jacobian(const WorldConstants& world) {
    Mat63 h;
    h << skew(world.g), skew(world.b);
    return h;
}

Mat4 transition_matrix(const Vec3& gyro, double dt) {
    return mat_exp(Mat4((dt / 2.0) * omega_matrix(pure(gyro))));
}

namespace {

// Clamp tiny negative eigenvalues left by the (I - K H) P form.
Mat3 clamp_psd(const Mat3& p) {
    Mat3 s = symmetrized(p);
    Eigen::SelfAdjointEigenSolver<Mat3> es;
    es.computeDirect(s);
    if (es.eigenvalues()(0) >= 0.0) {
        return s;
    }
    const Vec3 lambda = es.eigenvalues().cwiseMax(0.0);
    return symmetrized(Mat3(es.eigenvectors() * lambda.asDiagonal() * es.eigenvectors().transpose()));
}

// Gain K = P H' S^-1 with S = H P H' + R via Cholesky, and P+ = (I - K H) P.
void kalman_gain(StepRecord& rec) {
    const Mat6 s = symmetrized(Mat6(rec.H * rec.P_prior * rec.H.transpose() + rec.R));
    const Eigen::LLT<Mat6> llt(s);
    if (llt.info() != Eigen::Success) {
        throw NumericalDegeneracy("step " + std::to_string(rec.k) + ": innovation covariance is not positive definite");
    }
    const double rcond = llt.rcond();
    if (!(rcond >= 1e-12)) {
        throw NumericalDegeneracy("step " + std::to_string(rec.k) + ": innovation covariance condition number " +
                                  csv::format(1.0 / rcond) + " exceeds 1e12");
    }
    const Mat63 ph = rec.H * rec.P_prior;  // P symmetric: (P H')' = H P
    rec.K = llt.solve(ph).transpose();
    rec.P_post = clamp_psd((Mat3::Identity() - rec.K * rec.H) * rec.P_prior);
}

StepRecord propagate_common(const FilterState& s, const Vec3& gyro, double dt) {
    if (!gyro.allFinite()) {
        throw InvalidArgument("propagate: non-finite gyro reading at step " + std::to_string(s.k + 1));
    }
    StepRecord rec;
    rec.k = s.k + 1;
    rec.Phi = transition_matrix(gyro, dt);
    rec.q_prior = Quaternion::normalized(rec.Phi * s.q.coeffs());
    return rec;
}

}  // namespace

StepRecord riekf_propagate(const FilterState& s, const Vec3& gyro, const Mat3& sigma_eta, double dt) {
    StepRecord rec = propagate_common(s, gyro, dt);
    rec.F = Mat3::Identity();
    const Mat3 a = world_from_body(rec.q_prior);
    rec.Q = symmetrized(Mat3(a * sigma_eta * (dt * dt) * a.transpose()));
    rec.P_prior = symmetrized(Mat3(rec.F * s.P * rec.F.transpose() + rec.Q));
    return rec;
}

StepRecord riekf_update(StepRecord rec, const SensorSample& sample, const WorldConstants& world,
                        const Mat6& sigma_nu) {
    const Mat6 b = block_rotation(rec.q_prior);
    rec.H = measurement_jacobian(world);
    rec.R = symmetrized(Mat6(b * sigma_nu * b.transpose()));
    rec.r = b * sample.z() - world.stacked();
    kalman_gain(rec);
    const Vec3 correction = rec.K * rec.r;
    rec.q_post = Quaternion::normalized(quat_mul(exp_map(Vec3(correction / 2.0)), rec.q_prior).coeffs());
    return rec;
}

StepRecord liekf_propagate(const FilterState& s, const Vec3& gyro, const Mat3& sigma_eta, double dt) {
    StepRecord rec = propagate_common(s, gyro, dt);
    // q_prior = q_post (x) delta with delta = Phi * identity; the body-frame
    // error is conjugated by delta.
    rec.F = dcm(Quaternion::normalized(rec.Phi.col(0)));
    rec.Q = symmetrized(Mat3(sigma_eta * (dt * dt)));
    rec.P_prior = symmetrized(Mat3(rec.F * s.P * rec.F.transpose() + rec.Q));
    return rec;
}

StepRecord liekf_update(StepRecord rec, const SensorSample& sample, const WorldConstants& world,
                        const Mat6& sigma_nu) {
    const Vec6 predicted = measure_noiseless(rec.q_prior, world);
    rec.H << skew(Vec3(predicted.head<3>())), skew(Vec3(predicted.tail<3>()));
    rec.R = symmetrized(sigma_nu);
    rec.r = sample.z() - predicted;
    kalman_gain(rec);
    const Vec3 correction = rec.K * rec.r;
    rec.q_post = Quaternion::normalized(quat_mul(rec.q_prior, exp_map(Vec3(correction / 2.0))).coeffs());
    return rec;
}

namespace {

template <typename Propagate, typename Update>
std::vector<StepRecord> run_impl(std::span<const SensorSample> samples, const FilterState& init,
                                 const NoiseParams& params, const WorldConstants& world, double dt,
                                 Propagate propagate, Update update) {
    if (samples.empty()) {
        throw InvalidArgument("filter run: no samples");
    }
    if (!(dt > 0.0)) {
        throw InvalidArgument("filter run: dt must be positive");
    }
    std::vector<StepRecord> records;
    records.reserve(samples.size());
    FilterState state = init;
    for (const SensorSample& sample : samples) {
        StepRecord rec = update(propagate(state, sample.gyro, params.sigma_eta, dt), sample, world, params.sigma_nu);
        state = rec.posterior();
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace

std::vector<StepRecord> riekf_run(std::span<const SensorSample> samples, const FilterState& init,
                                  const NoiseParams& params, const WorldConstants& world, double dt) {
    return run_impl(samples, init, params, world, dt, riekf_propagate, riekf_update);
}

std::vector<StepRecord> liekf_run(std::span<const SensorSample> samples, const FilterState& init,
                                  const NoiseParams& params, const WorldConstants& world, double dt) {
    return run_impl(samples, init, params, world, dt, liekf_propagate, liekf_update);
}

std::vector<StepRecord> run_filter(FilterKind kind, std::span<const SensorSample> samples, const FilterState& init,
                                   const NoiseParams& params, const WorldConstants& world, double dt) {
    return kind == FilterKind::RightInvariant ? riekf_run(samples, init, params, world, dt)
                                              : liekf_run(samples, init, params, world, dt);
}

TangentVector attitude_error(const Quaternion& q_true, const Quaternion& q_hat) {
    return 2.0 * log_map(quat_mul(q_hat, q_true.inverse()));
}

void write_step_records_csv(std::ostream& os, const FilterState& init, std::span<const StepRecord> records) {
    std::vector<std::string> cols = {"k", "qw-", "qx-", "qy-", "qz-", "qw+", "qx+", "qy+", "qz+"};
    for (const char* prefix : {"P-", "P+"}) {
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) cols.push_back(prefix + std::to_string(i) + std::to_string(j));
    }
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 6; ++j) cols.push_back("K" + std::to_string(i) + std::to_string(j));
    for (int i = 0; i < 6; ++i) cols.push_back("r" + std::to_string(i));
    csv::write_header(os, cols);

    auto emit = [&os](long k, const Quaternion& qm, const Quaternion& qp, const Mat3& pm, const Mat3& pp,
                      const Mat36& gain, const Vec6& r) {
        std::vector<double> row;
        row.reserve(50);
        for (int i = 0; i < 4; ++i) row.push_back(qm.coeffs()(i));
        for (int i = 0; i < 4; ++i) row.push_back(qp.coeffs()(i));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) row.push_back(pm(i, j));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) row.push_back(pp(i, j));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 6; ++j) row.push_back(gain(i, j));
        for (int i = 0; i < 6; ++i) row.push_back(r(i));
        csv::write_row(os, std::to_string(k), row);
    };
    emit(init.k, init.q, init.q, init.P, init.P, Mat36::Zero(), Vec6::Zero());
    for (const StepRecord& rec : records) {
        emit(rec.k, rec.q_prior, rec.q_post, rec.P_prior, rec.P_post, rec.K, rec.r);
    }
}

}  // namespace iaekf
