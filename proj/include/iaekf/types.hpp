#pragma once

#include <Eigen/Core>

#include "iaekf/lie_algebra.hpp"

namespace iaekf {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat36 = Eigen::Matrix<double, 3, 6>;
using Mat63 = Eigen::Matrix<double, 6, 3>;

/// Tangent-space attitude error, radians, inertial frame.
using TangentVector = Vec3;

}  // namespace iaekf
