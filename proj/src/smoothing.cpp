#include "iaekf/smoothing.hpp"

#include <Eigen/Cholesky>

#include <string>

#include "iaekf/covariance.hpp"

namespace iaekf {

std::vector<SmootherStep> smoother_steps(const FilterState& init, std::span<const StepRecord> records,
                                         const Vec3& mu0) {
    std::vector<SmootherStep> steps;
    steps.reserve(records.size() + 1);
    SmootherStep first;
    first.x_post = mu0;
    first.P_post = init.P;
    first.P_prior = init.P;
    first.reset = mu0;
    steps.push_back(first);
    for (const StepRecord& rec : records) {
        SmootherStep s;
        s.x_post = rec.K * rec.r;
        s.reset = s.x_post;
        s.P_prior = rec.P_prior;
        s.P_post = rec.P_post;
        s.F = rec.F;
        s.KH = rec.K * rec.H;
        steps.push_back(s);
    }
    return steps;
}

SmoothedTrajectory rts_smooth(std::span<const SmootherStep> steps) {
    if (steps.empty()) {
        throw InvalidArgument("rts_smooth: no steps");
    }
    const std::size_t n = steps.size() - 1;
    SmoothedTrajectory out;
    out.xi.resize(n + 1);
    out.P.resize(n + 1);
    out.P_lag.assign(n + 1, Mat3::Zero());
    out.J.resize(n);

    out.xi[n] = steps[n].x_post;
    out.P[n] = steps[n].P_post;
    for (std::size_t i = n; i-- > 0;) {
        const SmootherStep& cur = steps[i];
        const SmootherStep& next = steps[i + 1];
        const Eigen::LLT<Mat3> llt(next.P_prior);
        if (llt.info() != Eigen::Success) {
            throw NumericalDegeneracy("rts_smooth: prior covariance at step " + std::to_string(i + 1) +
                                      " is singular");
        }
        // J = P+_i F' (P-_{i+1})^-1, solved as (P- \ (F P+))'.
        const Mat3 j = llt.solve(Mat3(next.F * cur.P_post)).transpose();
        out.J[i] = j;
        out.P[i] = symmetrized(Mat3(cur.P_post + j * (out.P[i + 1] - next.P_prior) * j.transpose()));
        out.xi[i] = cur.x_post + j * (out.xi[i + 1] - next.x_prior);
    }
    return out;
}

SmoothedTrajectory rts_smooth(const FilterState& init, std::span<const StepRecord> records, const Vec3& mu0) {
    const auto steps = smoother_steps(init, records, mu0);
    SmoothedTrajectory out = rts_smooth(steps);
    out.q.reserve(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const Quaternion& q_post = i == 0 ? init.q : records[i - 1].q_post;
        out.q.push_back(quat_mul(exp_map(Vec3((out.xi[i] - steps[i].x_post) / 2.0)), q_post));
    }
    return out;
}

void lag_one_smooth(std::span<const SmootherStep> steps, SmoothedTrajectory& smoothed) {
    const std::size_t n = steps.size() - 1;
    if (smoothed.J.size() != n || smoothed.P.size() != n + 1) {
        throw InvalidArgument("lag_one_smooth: smoothed trajectory does not match the steps");
    }
    if (n == 0) {
        return;
    }
    smoothed.P_lag.assign(n + 1, Mat3::Zero());
    smoothed.P_lag[n] = (Mat3::Identity() - steps[n].KH) * steps[n].F * steps[n - 1].P_post;
    for (std::size_t i = n - 1; i >= 1; --i) {
        const Mat3& j_prev = smoothed.J[i - 1];
        smoothed.P_lag[i] = steps[i].P_post * j_prev.transpose() +
                            smoothed.J[i] * (smoothed.P_lag[i + 1] - steps[i + 1].F * steps[i].P_post) *
                                j_prev.transpose();
    }
}

}  // namespace iaekf
