#include "rankmerge/linalg.hpp"

#include <algorithm>
#include <string>

namespace rankmerge {

void require_finite(const Eigen::Ref<const Matrix>& m, std::string_view what) {
    if (!m.allFinite()) {
        throw ValidationError(std::string(what) + ": non-finite entry in " +
                              std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                              " matrix");
    }
}

SvdFactors svd(const Eigen::Ref<const Matrix>& m) {
    if (m.rows() < 1 || m.cols() < 1) throw ValidationError("svd: empty matrix");
    require_finite(m, "svd");

    Eigen::BDCSVD<Matrix> dec(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (dec.info() != Eigen::Success) {
        throw NumericError("svd: convergence failure on " + std::to_string(m.rows()) + "x" +
                           std::to_string(m.cols()) + " matrix");
    }

    SvdFactors f{dec.matrixU(), dec.singularValues(), dec.matrixV()};

    // Fix signs: largest-magnitude entry of each left singular vector positive.
    for (Index j = 0; j < f.u.cols(); ++j) {
        Index imax = 0;
        f.u.col(j).cwiseAbs().maxCoeff(&imax);
        if (f.u(imax, j) < 0.0) {
            f.u.col(j) = -f.u.col(j);
            f.v.col(j) = -f.v.col(j);
        }
    }
    return f;
}

Matrix best_rank_r(const Eigen::Ref<const Matrix>& m, Index r) {
    const Index p = std::min(m.rows(), m.cols());
    if (r < 1 || r > p) {
        throw ValidationError("best_rank_r: r=" + std::to_string(r) + " out of range [1, " +
                              std::to_string(p) + "]");
    }
    const SvdFactors f = svd(m);
    return f.u.leftCols(r) * f.sigma.head(r).asDiagonal() * f.v.leftCols(r).transpose();
}

double tail_energy(const Eigen::Ref<const Vector>& sigma, Index r) {
    if (r < 0 || r > sigma.size()) {
        throw ValidationError("tail_energy: r=" + std::to_string(r) + " out of range [0, " +
                              std::to_string(sigma.size()) + "]");
    }
    for (Index i = 0; i + 1 < sigma.size(); ++i) {
        if (sigma[i] < sigma[i + 1]) {
            throw ValidationError("tail_energy: sigma not sorted non-increasing at index " +
                                  std::to_string(i + 1));
        }
    }
    return sigma.tail(sigma.size() - r).norm();
}

double nuclear_norm(const Eigen::Ref<const Matrix>& m) {
    return svd(m).sigma.sum();
}

} // namespace rankmerge
