#pragma once

// Small helpers for symmetric covariance blocks.

#include <Eigen/Dense>

#include <string>

#include "iaekf/errors.hpp"

namespace iaekf {

template <typename Derived>
typename Derived::PlainObject symmetrized(const Eigen::MatrixBase<Derived>& m) {
    return (m + m.transpose()) / typename Derived::Scalar(2);
}

template <typename Derived>
typename Derived::Scalar min_eigenvalue(const Eigen::MatrixBase<Derived>& m) {
    Eigen::SelfAdjointEigenSolver<typename Derived::PlainObject> es(symmetrized(m), Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0);
}

/// Throws InvalidCovariance if `m` is non-finite, asymmetric beyond `sym_tol`
/// (relative to its largest entry), or not positive definite. With
/// `allow_singular`, zero eigenvalues pass.
template <typename Derived>
void require_spd(const Eigen::MatrixBase<Derived>& m, const std::string& name, bool allow_singular = false,
                 double sym_tol = 1e-12) {
    if (!m.array().isFinite().all()) {
        throw InvalidCovariance(name + ": non-finite entries");
    }
    const double scale = std::max(1.0, static_cast<double>(m.cwiseAbs().maxCoeff()));
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > sym_tol * scale) {
        throw InvalidCovariance(name + ": not symmetric");
    }
    const double lo = min_eigenvalue(m);
    if (allow_singular ? lo < -1e-15 * scale : !(lo > 0.0)) {
        throw InvalidCovariance(name + ": not positive definite (min eigenvalue " + std::to_string(lo) + ")");
    }
}

/// Symmetrizes and raises every eigenvalue to at least `floor`.
template <typename Derived>
typename Derived::PlainObject eigen_floored(const Eigen::MatrixBase<Derived>& m, typename Derived::Scalar floor) {
    using Plain = typename Derived::PlainObject;
    Eigen::SelfAdjointEigenSolver<Plain> es(symmetrized(m));
    if (es.eigenvalues()(0) >= floor) {
        return symmetrized(m);
    }
    const auto clamped = es.eigenvalues().cwiseMax(floor);
    Plain out = es.eigenvectors() * clamped.asDiagonal() * es.eigenvectors().transpose();
    return symmetrized(out);
}

/// Lower square-root factor L with L L' = m. Cholesky for SPD input, eigen
/// square root for PSD input when `allow_singular`.
template <typename Derived>
typename Derived::PlainObject sqrt_factor(const Eigen::MatrixBase<Derived>& m, const std::string& name,
                                          bool allow_singular = false) {
    using Plain = typename Derived::PlainObject;
    require_spd(m, name, allow_singular);
    Eigen::LLT<Plain> llt(m);
    if (llt.info() == Eigen::Success) {
        return llt.matrixL();
    }
    if (!allow_singular) {
        throw InvalidCovariance(name + ": Cholesky factorization failed");
    }
    Eigen::SelfAdjointEigenSolver<Plain> es(symmetrized(m));
    return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

}  // namespace iaekf
