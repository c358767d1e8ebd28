#pragma once

// Fixed-interval Rauch-Tung-Striebel smoother and lag-one covariance smoother
// over a 3-dimensional error state.
//
// The recursion runs on SmootherStep inputs indexed i = 0..n, where step 0 is
// the prior at the start of the window and steps 1..n are filter updates.
// Each step may fold part of its posterior mean into the filter's reference
// orientation (`reset`); the next prior is then F (x_post - reset). For the
// invariant filters the whole correction is folded every step, so every prior
// mean is zero while x_post = K r, each expressed about that step's prior
// quaternion.

#include <span>
#include <vector>

#include "iaekf/filters.hpp"
#include "iaekf/types.hpp"

namespace iaekf {

struct SmootherStep {
    Vec3 x_prior = Vec3::Zero();  // unused at i = 0
    Vec3 x_post = Vec3::Zero();
    Mat3 P_prior = Mat3::Zero();  // unused at i = 0
    Mat3 P_post = Mat3::Zero();
    Mat3 F = Mat3::Identity();    // transition from i-1 into i; unused at i = 0
    Mat3 KH = Mat3::Zero();       // K_i H_i; zero at i = 0
    Vec3 reset = Vec3::Zero();
};

struct SmoothedTrajectory {
    std::vector<Vec3> xi;          // smoothed mean, i = 0..n
    std::vector<Mat3> P;           // smoothed covariance, i = 0..n
    std::vector<Mat3> P_lag;       // P_lag[i] = cov(x_i, x_{i-1}), i = 1..n; P_lag[0] unused
    std::vector<Mat3> J;           // smoother gains, i = 0..n-1
    std::vector<Quaternion> q;     // smoothed orientation; empty unless built from filter records

    std::size_t size() const { return xi.size(); }
};

/// Step 0 from `init` with prior mean `mu0` (already folded into init.q),
/// steps 1..n from the records.
std::vector<SmootherStep> smoother_steps(const FilterState& init, std::span<const StepRecord> records,
                                         const Vec3& mu0 = Vec3::Zero());

/// Backward RTS pass. Throws NumericalDegeneracy on a singular prior covariance.
SmoothedTrajectory rts_smooth(std::span<const SmootherStep> steps);

/// RTS pass over an invariant-filter run, also reconstructing the smoothed
/// quaternions exp_map((xi_n - xi_post) / 2) (x) q_post.
SmoothedTrajectory rts_smooth(const FilterState& init, std::span<const StepRecord> records,
                              const Vec3& mu0 = Vec3::Zero());

/// Fills P_lag. Requires the J gains from rts_smooth.
void lag_one_smooth(std::span<const SmootherStep> steps, SmoothedTrajectory& smoothed);

}  // namespace iaekf
