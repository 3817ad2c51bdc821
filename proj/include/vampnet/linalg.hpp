#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "vampnet/errors.hpp"

namespace vampnet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Eigendecomposition of a symmetric matrix, eigenvalues descending,
/// eigenvector columns paired with them.
struct SymmetricEigen {
    Vector eigenvalues;
    Matrix eigenvectors;
};

/// Thin SVD, singular values descending.
struct SingularDecomposition {
    Matrix left;
    Vector singular_values;
    Matrix right;
};

/// Result of a spectrally truncated matrix function (inverse, inverse
/// square root). `rank` is the number of retained eigendirections.
struct TruncatedInverse {
    Matrix matrix;
    Index rank = 0;
};

inline double frobenius_norm(const Matrix& a) { return a.norm(); }

/// Symmetric eigendecomposition. The input is symmetrized as (A + A^T)/2
/// before factorization; asymmetry beyond 1e-8 relative is rejected.
inline SymmetricEigen sym_eig(const Matrix& a) {
    if (a.rows() != a.cols())
        throw DimensionError("sym_eig: matrix is " + std::to_string(a.rows()) + "x" +
                             std::to_string(a.cols()) + ", expected square");
    const double scale = std::max(a.cwiseAbs().maxCoeff(), 1.0);
    if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
        throw DomainError("sym_eig: input asymmetric beyond 1e-8 relative tolerance");
    Matrix sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
    if (solver.info() != Eigen::Success)
        throw NumericalError("sym_eig: QR iteration did not converge within " +
                             std::to_string(30 * a.rows()) + " iterations");
    // Eigen returns ascending order; flip to descending.
    SymmetricEigen out;
    out.eigenvalues = solver.eigenvalues().reverse();
    out.eigenvectors = solver.eigenvectors().rowwise().reverse();
    return out;
}

namespace detail {

template <typename Fn>
TruncatedInverse spectral_inverse(const Matrix& a, double eps_rel, Fn&& f, const char* what) {
    SymmetricEigen eig = sym_eig(a);
    const double lmax = eig.eigenvalues.size() ? eig.eigenvalues(0) : 0.0;
    const double thresh = eps_rel * std::max(lmax, 0.0);
    if (eig.eigenvalues.size() && eig.eigenvalues(eig.eigenvalues.size() - 1) < -thresh)
        throw DomainError(std::string(what) + ": matrix has eigenvalue " +
                          std::to_string(eig.eigenvalues(eig.eigenvalues.size() - 1)) +
                          " below the PSD tolerance " + std::to_string(-thresh));
    Index rank = 0;
    while (rank < eig.eigenvalues.size() && eig.eigenvalues(rank) > thresh) ++rank;
    if (rank == 0)
        throw RankError(std::string(what) + ": all eigenvalues truncated (rank zero)");
    TruncatedInverse out;
    out.rank = rank;
    Matrix q = eig.eigenvectors.leftCols(rank);
    Vector d(rank);
    for (Index i = 0; i < rank; ++i) d(i) = f(eig.eigenvalues(i));
    out.matrix = q * d.asDiagonal() * q.transpose();
    return out;
}

}  // namespace detail

/// Truncated inverse square root of a symmetric PSD matrix. Eigenvalues
/// below eps_rel * lambda_max contribute zero; retained rank is reported.
inline TruncatedInverse inv_sqrt_trunc(const Matrix& a, double eps_rel = 1e-10) {
    return detail::spectral_inverse(
        a, eps_rel, [](double l) { return 1.0 / std::sqrt(l); }, "inv_sqrt_trunc");
}

/// Truncated pseudo-inverse of a symmetric PSD matrix, same truncation rule
/// as inv_sqrt_trunc so scores and gradients stay consistent.
inline TruncatedInverse pinv_trunc(const Matrix& a, double eps_rel = 1e-10) {
    return detail::spectral_inverse(
        a, eps_rel, [](double l) { return 1.0 / l; }, "pinv_trunc");
}

/// Thin SVD with descending singular values.
inline SingularDecomposition svd(const Matrix& a) {
    if (!a.allFinite())
        throw DomainError("svd: input has non-finite entries");
    Eigen::JacobiSVD<Matrix> solver(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    SingularDecomposition out;
    out.left = solver.matrixU();
    out.singular_values = solver.singularValues();
    out.right = solver.matrixV();
    return out;
}

}  // namespace vampnet
