#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "vampnet/dataset.hpp"
#include "vampnet/errors.hpp"
#include "vampnet/linalg.hpp"

namespace vampnet {

/// Covariance matrices of a batch of feature-transformed pairs. Features are
/// column-major batches: X and Y are m x T (feature rows, sample columns).
///
/// mean_free = true:  Cab = (T-1)^-1 * Abar Bbar^T with row-centered batches
/// mean_free = false: Cab = T^-1 * A B^T (plain second moments)
struct CovarianceSet {
    Matrix c00, c01, c11;
    Vector mean0, mean1;
    Index t_pairs = 0;
    bool mean_free = true;
};

enum class FrobeniusScaling { sum, mean };

struct ScoreConfig {
    Index k = 0;  // number of singular values scored; 0 = all
    double eps_rel = 1e-10;
    bool include_constant = true;
    FrobeniusScaling frobenius_scaling = FrobeniusScaling::sum;
};

struct GradientPair {
    Matrix grad_x;  // m x T
    Matrix grad_y;  // m x T
};

inline Matrix center_rows(const Matrix& x) {
    return x.colwise() - Vector(x.rowwise().mean());
}

inline CovarianceSet covariances(const Matrix& x, const Matrix& y, bool mean_free) {
    if (x.cols() != y.cols())
        throw DimensionError("covariances: batches have " + std::to_string(x.cols()) + " and " +
                             std::to_string(y.cols()) + " columns");
    const Index t = x.cols();
    if (t < 1 || (mean_free && t < 2))
        throw DataError("covariances: need at least " + std::string(mean_free ? "2" : "1") +
                        " pairs, got " + std::to_string(t));
    CovarianceSet cov;
    cov.t_pairs = t;
    cov.mean_free = mean_free;
    cov.mean0 = x.rowwise().mean();
    cov.mean1 = y.rowwise().mean();
    if (mean_free) {
        Matrix xb = x.colwise() - cov.mean0;
        Matrix yb = y.colwise() - cov.mean1;
        const double norm = 1.0 / static_cast<double>(t - 1);
        cov.c00 = norm * (xb * xb.transpose());
        cov.c01 = norm * (xb * yb.transpose());
        cov.c11 = norm * (yb * yb.transpose());
    } else {
        const double norm = 1.0 / static_cast<double>(t);
        cov.c00 = norm * (x * x.transpose());
        cov.c01 = norm * (x * y.transpose());
        cov.c11 = norm * (y * y.transpose());
    }
    cov.c00 = 0.5 * (cov.c00 + cov.c00.transpose());
    cov.c11 = 0.5 * (cov.c11 + cov.c11.transpose());
    return cov;
}

namespace detail {

/// Whitened cross-covariance S = C00^{-1/2} C01 C11^{-1/2}; rethrows rank
/// collapse naming the covariance that collapsed.
inline Matrix whitened_koopman(const CovarianceSet& cov, double eps_rel) {
    TruncatedInverse w0, w1;
    try {
        w0 = inv_sqrt_trunc(cov.c00, eps_rel);
    } catch (const RankError&) {
        throw RankError("vamp score: whitening of c00 has rank zero");
    }
    try {
        w1 = inv_sqrt_trunc(cov.c11, eps_rel);
    } catch (const RankError&) {
        throw RankError("vamp score: whitening of c11 has rank zero");
    }
    return w0.matrix * cov.c01 * w1.matrix;
}

inline double score_from_singulars(const Vector& sigma, const ScoreConfig& cfg, bool squared) {
    Index k = cfg.k > 0 ? std::min(cfg.k, sigma.size()) : sigma.size();
    double s = 0.0;
    for (Index i = 0; i < k; ++i) s += squared ? sigma(i) * sigma(i) : sigma(i);
    if (cfg.frobenius_scaling == FrobeniusScaling::mean && sigma.size() > 0)
        s /= static_cast<double>(sigma.size());
    return s + (cfg.include_constant ? 1.0 : 0.0);
}

}  // namespace detail

/// VAMP-2 score: sum over the k largest squared singular values of the
/// whitened cross-covariance, plus 1 for the constant singular function when
/// include_constant is set.
inline double vamp2_score(const CovarianceSet& cov, const ScoreConfig& cfg = {}) {
    Matrix s = detail::whitened_koopman(cov, cfg.eps_rel);
    return detail::score_from_singulars(svd(s).singular_values, cfg, true);
}

/// VAMP-1 score: nuclear norm of the whitened cross-covariance.
inline double vamp1_score(const CovarianceSet& cov, const ScoreConfig& cfg = {}) {
    Matrix s = detail::whitened_koopman(cov, cfg.eps_rel);
    return detail::score_from_singulars(svd(s).singular_values, cfg, false);
}

/// Gradients of the full-rank VAMP-2 score with respect to the raw batch
/// entries:
///   grad_X = 2 (T-1)^-1 C00^-1 C01 C11^-1 (Ybar - C01^T C00^-1 Xbar)
///   grad_Y = 2 (T-1)^-1 C11^-1 C01^T C00^-1 (Xbar - C01 C11^-1 Ybar)
/// Inverses use the same truncated pseudo-inverse as the score. The
/// centering Jacobian (I - T^-1 11^T) is applied on the right; for these
/// formulas it is idempotent since the factors are already row-centered.
inline GradientPair vamp2_gradients(const Matrix& xbar, const Matrix& ybar,
                                    const CovarianceSet& cov, double eps_rel = 1e-10) {
    if (xbar.rows() != cov.c00.rows() || ybar.rows() != cov.c11.rows() ||
        xbar.cols() != ybar.cols())
        throw DimensionError("vamp2_gradients: batch shapes do not match the covariance set");
    const double norm = 2.0 / static_cast<double>(cov.t_pairs - 1);
    const Matrix inv00 = pinv_trunc(cov.c00, eps_rel).matrix;
    const Matrix inv11 = pinv_trunc(cov.c11, eps_rel).matrix;
    GradientPair g;
    g.grad_x = norm * (inv00 * cov.c01 * inv11 * (ybar - cov.c01.transpose() * inv00 * xbar));
    g.grad_y = norm * (inv11 * cov.c01.transpose() * inv00 * (xbar - cov.c01 * inv11 * ybar));
    g.grad_x = center_rows(g.grad_x);
    g.grad_y = center_rows(g.grad_y);
    return g;
}

namespace detail {

/// Spectral machinery for differentiating through the truncated inverse
/// square root: C = Q diag(l) Q^T, f(l) = l^{-1/2} on retained eigenvalues
/// and 0 on truncated ones.
struct InvSqrtDiff {
    Matrix q;
    Vector lambda;
    Vector f;       // f(lambda_i)
    Matrix value;   // Q diag(f) Q^T
};

inline InvSqrtDiff inv_sqrt_diff(const Matrix& c, double eps_rel, const char* name) {
    SymmetricEigen eig = sym_eig(c);
    const double lmax = eig.eigenvalues.size() ? std::max(eig.eigenvalues(0), 0.0) : 0.0;
    const double thresh = eps_rel * lmax;
    InvSqrtDiff d;
    d.q = eig.eigenvectors;
    d.lambda = eig.eigenvalues;
    d.f = Vector::Zero(eig.eigenvalues.size());
    Index rank = 0;
    for (Index i = 0; i < d.lambda.size(); ++i)
        if (d.lambda(i) > thresh) {
            d.f(i) = 1.0 / std::sqrt(d.lambda(i));
            ++rank;
        }
    if (rank == 0) throw RankError(std::string("vamp score: whitening of ") + name + " has rank zero");
    d.value = d.q * d.f.asDiagonal() * d.q.transpose();
    return d;
}

/// Adjoint of C -> C^{-1/2} applied to a (not necessarily symmetric) upstream
/// matrix M: returns G with <G, dC> = <M, d(C^{-1/2})> for symmetric dC.
/// Uses the Loewner divided-difference matrix of f(l) = l^{-1/2}; for two
/// retained eigenvalues (f(a) - f(b)) / (a - b) = -1 / (sqrt(a) sqrt(b)
/// (sqrt(a) + sqrt(b))), which is stable for nearby eigenvalues and reduces
/// to f'(l) on the diagonal.
inline Matrix inv_sqrt_adjoint(const InvSqrtDiff& d, const Matrix& m) {
    const Index n = d.lambda.size();
    Matrix msym = 0.5 * (m + m.transpose());
    Matrix inner = d.q.transpose() * msym * d.q;
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) {
            double coeff;
            const bool ki = d.f(i) > 0.0, kj = d.f(j) > 0.0;
            if (ki && kj) {
                const double a = std::sqrt(d.lambda(i)), b = std::sqrt(d.lambda(j));
                coeff = -1.0 / (a * b * (a + b));
            } else if (!ki && !kj) {
                coeff = 0.0;
            } else {
                const double fi = ki ? d.f(i) : 0.0;
                const double fj = kj ? d.f(j) : 0.0;
                coeff = (fi - fj) / (d.lambda(i) - d.lambda(j));
            }
            inner(i, j) *= coeff;
        }
    }
    return d.q * inner * d.q.transpose();
}

}  // namespace detail

/// Gradients of the full-rank VAMP-1 score (nuclear norm of S), obtained by
/// the chain rule through S = C00^{-1/2} C01 C11^{-1/2} with dR1/dS = U V^T.
inline GradientPair vamp1_gradients(const Matrix& xbar, const Matrix& ybar,
                                    const CovarianceSet& cov, double eps_rel = 1e-10) {
    if (xbar.rows() != cov.c00.rows() || ybar.rows() != cov.c11.rows() ||
        xbar.cols() != ybar.cols())
        throw DimensionError("vamp1_gradients: batch shapes do not match the covariance set");
    const detail::InvSqrtDiff w0 = detail::inv_sqrt_diff(cov.c00, eps_rel, "c00");
    const detail::InvSqrtDiff w1 = detail::inv_sqrt_diff(cov.c11, eps_rel, "c11");
    const Matrix s = w0.value * cov.c01 * w1.value;
    SingularDecomposition dec = svd(s);
    const Matrix w = dec.left * dec.right.transpose();

    // dR1 = <G01, dC01> + <G00, dC00> + <G11, dC11>
    const Matrix g01 = w0.value * w * w1.value;
    const Matrix g00 = detail::inv_sqrt_adjoint(w0, w * w1.value * cov.c01.transpose());
    const Matrix g11 = detail::inv_sqrt_adjoint(w1, cov.c01.transpose() * w0.value * w);

    const double norm = 1.0 / static_cast<double>(cov.t_pairs - 1);
    GradientPair g;
    g.grad_x = norm * (g01 * ybar + (g00 + g00.transpose()) * xbar);
    g.grad_y = norm * (g01.transpose() * xbar + (g11 + g11.transpose()) * ybar);
    g.grad_x = center_rows(g.grad_x);
    g.grad_y = center_rows(g.grad_y);
    return g;
}

/// VAMP-2 score of transformed validation pairs, using validation-set
/// covariances only. A transform that collapses to the constant yields the
/// constant-only score rather than an error.
template <typename TransformFn>
double validation_score(TransformFn&& transform, const std::vector<Trajectory>& trajs,
                        const LaggedDataset& ds, const std::vector<Index>& val_indices,
                        const ScoreConfig& cfg = {}) {
    if (val_indices.empty()) throw DataError("validation_score: empty validation set");
    auto [xt, xtau] = gather_pairs(trajs, ds, val_indices);
    Matrix fx = transform(xt);    // T x m
    Matrix fy = transform(xtau);  // T x m
    CovarianceSet cov = covariances(fx.transpose(), fy.transpose(), true);
    try {
        return vamp2_score(cov, cfg);
    } catch (const RankError&) {
        return cfg.include_constant ? 1.0 : 0.0;
    }
}

}  // namespace vampnet
