#pragma once

// Quaternion and SO(3) primitives.
//
// Quaternions are stored scalar-first, [w, x, y, z]. The product is the
// Hamilton product, rotate(q, r) = q* (x) r (x) q maps inertial-frame vectors
// into the body frame, and dcm(q) is the matching 3x3 matrix. Composition
// runs right to left in dcm space: dcm(p (x) q) = dcm(q) * dcm(p).
//
// exp_map takes the *half* angle: exp_map(xi) is a rotation by 2*|xi| about
// xi/|xi|, so attitude errors are written exp_map(xi / 2).

#include <Eigen/Core>
#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>

#include "iaekf/errors.hpp"

namespace iaekf {

template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Vector4 = Eigen::Matrix<Scalar, 4, 1>;
template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar>
using Matrix4 = Eigen::Matrix<Scalar, 4, 4>;

namespace detail {

template <typename Scalar>
inline constexpr Scalar kRenormDrift = Scalar(1e-12);

template <typename Scalar>
inline constexpr Scalar kUnitTolerance = Scalar(1e-6);

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
    return m.array().isFinite().all();
}

// Renormalize only when the squared norm has drifted measurably.
template <typename Scalar>
Vector4<Scalar> settle(Vector4<Scalar> c) {
    const Scalar n2 = c.squaredNorm();
    if (std::abs(n2 - Scalar(1)) > Scalar(2) * kRenormDrift<Scalar>) {
        c /= std::sqrt(n2);
    }
    return c;
}

}  // namespace detail

/// Orientation on S^3, scalar-first. Always unit norm.
template <typename Scalar>
class UnitQuaternion {
public:
    using Coeffs = Vector4<Scalar>;

    UnitQuaternion() : c_(Scalar(1), Scalar(0), Scalar(0), Scalar(0)) {}

    UnitQuaternion(Scalar w, Scalar x, Scalar y, Scalar z) : UnitQuaternion(Coeffs(w, x, y, z)) {}

    /// Accepts coefficients that are already unit norm to within 1e-6.
    explicit UnitQuaternion(const Coeffs& c) {
        if (!detail::all_finite(c)) {
            throw InvalidArgument("UnitQuaternion: non-finite coefficients");
        }
        if (std::abs(c.norm() - Scalar(1)) > detail::kUnitTolerance<Scalar>) {
            throw InvalidArgument("UnitQuaternion: coefficients are not unit norm");
        }
        c_ = detail::settle(c);
    }

    /// Projects any non-zero 4-vector onto S^3.
    static UnitQuaternion normalized(const Coeffs& c) {
        const Scalar n = c.norm();
        if (!detail::all_finite(c) || !(n > Scalar(0))) {
            throw InvalidArgument("UnitQuaternion::normalized: zero or non-finite input");
        }
        return UnitQuaternion(Coeffs(c / n));
    }

    static UnitQuaternion identity() { return UnitQuaternion(); }

    Scalar w() const { return c_(0); }
    Vector3<Scalar> vec() const { return c_.template tail<3>(); }
    const Coeffs& coeffs() const { return c_; }

    UnitQuaternion conjugate() const {
        UnitQuaternion out;
        out.c_ << c_(0), -c_(1), -c_(2), -c_(3);
        return out;
    }

    /// Equal to the conjugate on S^3.
    UnitQuaternion inverse() const { return conjugate(); }

    UnitQuaternion operator-() const {
        UnitQuaternion out;
        out.c_ = -c_;
        return out;
    }

    template <typename Other>
    UnitQuaternion<Other> cast() const {
        return UnitQuaternion<Other>::normalized(c_.template cast<Other>());
    }

private:
    Coeffs c_;
};

using Quaternion = UnitQuaternion<double>;
using Vec3 = Vector3<double>;
using Vec4 = Vector4<double>;
using Mat3 = Matrix3<double>;
using Mat4 = Matrix4<double>;

/// Pure quaternion [0, v].
template <typename Derived>
Vector4<typename Derived::Scalar> pure(const Eigen::MatrixBase<Derived>& v) {
    using Scalar = typename Derived::Scalar;
    return Vector4<Scalar>(Scalar(0), v(0), v(1), v(2));
}

/// [v]_x, so that skew(v) * u == v.cross(u).
template <typename Derived>
Matrix3<typename Derived::Scalar> skew(const Eigen::MatrixBase<Derived>& v) {
    using Scalar = typename Derived::Scalar;
    Matrix3<Scalar> m;
    m << Scalar(0), -v(2), v(1),
         v(2), Scalar(0), -v(0),
         -v(1), v(0), Scalar(0);
    return m;
}

/// Xi[p], with p (x) q == xi_matrix(p) * q. Accepts any quaternion, unit or not.
template <typename Derived>
Matrix4<typename Derived::Scalar> xi_matrix(const Eigen::MatrixBase<Derived>& p) {
    using Scalar = typename Derived::Scalar;
    const Vector3<Scalar> pv = p.template tail<3>();
    Matrix4<Scalar> m;
    m(0, 0) = p(0);
    m.template block<1, 3>(0, 1) = -pv.transpose();
    m.template block<3, 1>(1, 0) = pv;
    m.template block<3, 3>(1, 1) = p(0) * Matrix3<Scalar>::Identity() + skew(pv);
    return m;
}

/// Omega[q], with p (x) q == omega_matrix(q) * p.
template <typename Derived>
Matrix4<typename Derived::Scalar> omega_matrix(const Eigen::MatrixBase<Derived>& q) {
    using Scalar = typename Derived::Scalar;
    const Vector3<Scalar> qv = q.template tail<3>();
    Matrix4<Scalar> m;
    m(0, 0) = q(0);
    m.template block<1, 3>(0, 1) = -qv.transpose();
    m.template block<3, 1>(1, 0) = qv;
    m.template block<3, 3>(1, 1) = q(0) * Matrix3<Scalar>::Identity() - skew(qv);
    return m;
}

template <typename Scalar>
Matrix4<Scalar> xi_matrix(const UnitQuaternion<Scalar>& p) {
    return xi_matrix(p.coeffs());
}

template <typename Scalar>
Matrix4<Scalar> omega_matrix(const UnitQuaternion<Scalar>& q) {
    return omega_matrix(q.coeffs());
}

/// Hamilton product on raw 4-vectors.
template <typename DerivedP, typename DerivedQ>
Vector4<typename DerivedP::Scalar> hamilton(const Eigen::MatrixBase<DerivedP>& p,
                                            const Eigen::MatrixBase<DerivedQ>& q) {
    using Scalar = typename DerivedP::Scalar;
    const Vector3<Scalar> pv = p.template tail<3>();
    const Vector3<Scalar> qv = q.template tail<3>();
    Vector4<Scalar> out;
    out(0) = p(0) * q(0) - pv.dot(qv);
    out.template tail<3>() = p(0) * qv + q(0) * pv + pv.cross(qv);
    return out;
}

template <typename Scalar>
UnitQuaternion<Scalar> quat_mul(const UnitQuaternion<Scalar>& p, const UnitQuaternion<Scalar>& q) {
    return UnitQuaternion<Scalar>(detail::settle<Scalar>(hamilton(p.coeffs(), q.coeffs())));
}

/// Inertial-to-body rotation q* (x) [0, r] (x) q, evaluated with quaternion products.
template <typename Scalar, typename Derived>
Vector3<Scalar> rotate(const UnitQuaternion<Scalar>& q, const Eigen::MatrixBase<Derived>& r) {
    const Vector4<Scalar> rq = hamilton(hamilton(q.conjugate().coeffs(), pure(r)), q.coeffs());
    return rq.template tail<3>();
}

/// (w^2 - v'v) I + 2 v v' - 2 w [v]_x
template <typename Scalar>
Matrix3<Scalar> dcm(const UnitQuaternion<Scalar>& q) {
    const Scalar w = q.w();
    const Vector3<Scalar> v = q.vec();
    return (w * w - v.squaredNorm()) * Matrix3<Scalar>::Identity() + Scalar(2) * v * v.transpose() -
           Scalar(2) * w * skew(v);
}

/// [cos|xi|, sin|xi| xi/|xi|]; series form below |xi| = 1e-6.
template <typename Derived>
UnitQuaternion<typename Derived::Scalar> exp_map(const Eigen::MatrixBase<Derived>& xi) {
    using Scalar = typename Derived::Scalar;
    if (!detail::all_finite(xi)) {
        throw InvalidArgument("exp_map: non-finite tangent vector");
    }
    const Scalar theta2 = xi.squaredNorm();
    const Scalar theta = std::sqrt(theta2);
    Scalar c;
    Scalar sinc;
    if (theta < Scalar(1e-6)) {
        const Scalar theta4 = theta2 * theta2;
        c = Scalar(1) - theta2 / Scalar(2) + theta4 / Scalar(24);
        sinc = Scalar(1) - theta2 / Scalar(6) + theta4 / Scalar(120);
    } else {
        c = std::cos(theta);
        sinc = std::sin(theta) / theta;
    }
    Vector4<Scalar> out;
    out(0) = c;
    out.template tail<3>() = sinc * xi;
    return UnitQuaternion<Scalar>(detail::settle(out));
}

/// Inverse of exp_map on the hemisphere w >= 0; returns a vector with norm <= pi/2.
template <typename Scalar>
Vector3<Scalar> log_map(const UnitQuaternion<Scalar>& q) {
    Scalar w = q.w();
    Vector3<Scalar> v = q.vec();
    if (w < Scalar(0)) {
        w = -w;
        v = -v;
    }
    const Scalar s = v.norm();
    if (s < Scalar(1e-6)) {
        // atan2(s, w) / s with w ~ 1
        const Scalar s2 = s * s;
        return (Scalar(1) / w) * (Scalar(1) - s2 / (Scalar(3) * w * w)) * v;
    }
    return (std::atan2(s, w) / s) * v;
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
template <typename Derived>
typename Derived::PlainObject mat_exp(const Eigen::MatrixBase<Derived>& a) {
    using Plain = typename Derived::PlainObject;
    using Scalar = typename Derived::Scalar;
    if (!detail::all_finite(a)) {
        throw InvalidArgument("mat_exp: non-finite input");
    }
    const Scalar norm = a.cwiseAbs().rowwise().sum().maxCoeff();
    int squarings = 0;
    if (norm > Scalar(0.5)) {
        squarings = static_cast<int>(std::ceil(std::log2(norm / Scalar(0.5))));
    }
    const Plain scaled = a / std::ldexp(Scalar(1), squarings);

    Plain sum = Plain::Identity(a.rows(), a.cols());
    Plain term = Plain::Identity(a.rows(), a.cols());
    const Scalar eps = std::numeric_limits<Scalar>::epsilon();
    for (int k = 1; k < 64; ++k) {
        term = (term * scaled) / Scalar(k);
        sum += term;
        if (term.cwiseAbs().maxCoeff() <= eps * Scalar(1e-3) * sum.cwiseAbs().maxCoeff()) {
            break;
        }
    }
    for (int i = 0; i < squarings; ++i) {
        sum = (sum * sum).eval();
    }
    return sum;
}

}  // namespace iaekf
