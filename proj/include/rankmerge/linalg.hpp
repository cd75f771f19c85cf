#pragma once

#include <string_view>

#include "rankmerge/errors.hpp"
#include "rankmerge/types.hpp"

namespace rankmerge {

// Thin SVD, m = u * sigma.asDiagonal() * v.transpose(), with
// p = min(rows, cols) columns in u and v.
struct SvdFactors {
    Matrix u;     // rows x p, orthonormal columns
    Vector sigma; // length p, non-negative, non-increasing
    Matrix v;     // cols x p, orthonormal columns
};

void require_finite(const Eigen::Ref<const Matrix>& m, std::string_view what);

// Signs fixed so the largest-magnitude entry of each column of u is positive,
// making results deterministic.
SvdFactors svd(const Eigen::Ref<const Matrix>& m);

// Rank-r truncation of the SVD; the Frobenius-optimal rank-r approximation.
Matrix best_rank_r(const Eigen::Ref<const Matrix>& m, Index r);

// sqrt(sum of sigma[i]^2 for i >= r); the Frobenius error of the rank-r
// truncation. sigma must be sorted non-increasing.
double tail_energy(const Eigen::Ref<const Vector>& sigma, Index r);

// Sum of singular values.
double nuclear_norm(const Eigen::Ref<const Matrix>& m);

template <typename Derived>
double frobenius_norm(const Eigen::MatrixBase<Derived>& m) {
    if (!m.allFinite()) throw ValidationError("frobenius_norm: non-finite entry in input");
    return m.norm();
}

template <typename Derived>
double l1_norm(const Eigen::MatrixBase<Derived>& v) {
    if (!v.allFinite()) throw ValidationError("l1_norm: non-finite entry in input");
    return v.cwiseAbs().sum();
}

} // namespace rankmerge
