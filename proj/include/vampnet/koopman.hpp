#pragma once

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "vampnet/errors.hpp"
#include "vampnet/linalg.hpp"
#include "vampnet/trajectory.hpp"
#include "vampnet/vamp.hpp"

namespace vampnet {

/// Feature-transformed trajectories: one T x m matrix per source trajectory.
using FeatureSet = std::vector<Matrix>;

/// Koopman / fuzzy-MSM model K(tau) with its spectral decomposition.
/// Eigenvalues are sorted by modulus, descending; right eigenvectors are
/// column-paired with them. Real eigenvectors are scaled so their largest-
/// magnitude entry is positive.
struct KoopmanModel {
    Matrix k_matrix;
    Index lag = 1;
    Eigen::VectorXcd eigenvalues;
    Eigen::MatrixXcd right_eigvecs;
    Vector mean0, mean1;
};

struct ITSCurve {
    std::vector<Index> lags;
    std::vector<Vector> timescales;  // per lag, k_eigs entries; +inf / 0 flags included
};

struct CKResult {
    std::vector<Index> n_values;
    std::vector<Matrix> predicted;  // K(tau)^n
    std::vector<Matrix> estimated;  // K(n tau)
};

template <typename TransformFn>
FeatureSet apply_transform(TransformFn&& transform, const std::vector<Trajectory>& trajs) {
    FeatureSet features;
    features.reserve(trajs.size());
    for (const Trajectory& t : trajs) features.push_back(transform(t.frames));
    return features;
}

/// Gather all (t, t+tau) feature pairs across trajectories as feature-major
/// (m x T) batches.
inline std::pair<Matrix, Matrix> lagged_feature_batches(const FeatureSet& features, Index tau) {
    if (tau < 1) throw DomainError("lagged_feature_batches: tau must be >= 1");
    Index total = 0;
    for (const Matrix& f : features) total += std::max<Index>(0, f.rows() - tau);
    if (total == 0)
        throw DataError("lagged_feature_batches: tau = " + std::to_string(tau) +
                        " leaves no transition pairs");
    const Index m = features.front().cols();
    Matrix x(m, total), y(m, total);
    Index col = 0;
    for (const Matrix& f : features) {
        for (Index t = 0; t + tau < f.rows(); ++t, ++col) {
            x.col(col) = f.row(t).transpose();
            y.col(col) = f.row(t + tau).transpose();
        }
    }
    return {std::move(x), std::move(y)};
}

/// Least-squares Koopman matrix K = pinv(C00) C01 from non-mean-free
/// covariances, with the spectral decomposition attached.
inline KoopmanModel estimate_k(const CovarianceSet& cov, Index lag) {
    if (cov.mean_free)
        throw DomainError("estimate_k: expects non-mean-free covariances");
    KoopmanModel model;
    model.lag = lag;
    model.mean0 = cov.mean0;
    model.mean1 = cov.mean1;
    model.k_matrix = pinv_trunc(cov.c00).matrix * cov.c01;

    Eigen::EigenSolver<Matrix> solver(model.k_matrix);
    if (solver.info() != Eigen::Success)
        throw NumericalError("estimate_k: eigendecomposition did not converge");
    Eigen::VectorXcd vals = solver.eigenvalues();
    Eigen::MatrixXcd vecs = solver.eigenvectors();
    std::vector<Index> order(vals.size());
    std::iota(order.begin(), order.end(), Index(0));
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return std::abs(vals(a)) > std::abs(vals(b)); });
    model.eigenvalues.resize(vals.size());
    model.right_eigvecs.resize(vecs.rows(), vecs.cols());
    for (Index i = 0; i < vals.size(); ++i) {
        model.eigenvalues(i) = vals(order[i]);
        model.right_eigvecs.col(i) = vecs.col(order[i]);
    }
    // Sign convention for (numerically) real eigenvectors: the entry of
    // largest magnitude is made positive.
    for (Index i = 0; i < model.eigenvalues.size(); ++i) {
        Eigen::VectorXcd v = model.right_eigvecs.col(i);
        if (v.imag().cwiseAbs().maxCoeff() < 1e-12 * v.real().cwiseAbs().maxCoeff()) {
            Index arg = 0;
            v.real().cwiseAbs().maxCoeff(&arg);
            if (v.real()(arg) < 0.0) model.right_eigvecs.col(i) = -v;
        }
    }
    return model;
}

inline KoopmanModel estimate_k(const FeatureSet& features, Index tau) {
    auto [x, y] = lagged_feature_batches(features, tau);
    return estimate_k(covariances(x, y, false), tau);
}

/// Implied timescale of one eigenvalue: t = -tau / ln|lambda|. Moduli >= 1
/// are flagged +infinity, vanishing moduli 0.
inline double implied_timescale(std::complex<double> lambda, Index tau) {
    const double mod = std::abs(lambda);
    if (mod >= 1.0) return std::numeric_limits<double>::infinity();
    if (mod <= 0.0) return 0.0;
    return -static_cast<double>(tau) / std::log(mod);
}

/// Implied timescales of the k_eigs largest nontrivial eigenvalues (the
/// stationary eigenvalue of largest modulus is skipped), recomputed at each
/// lag with the same frozen features.
inline ITSCurve implied_timescales(const FeatureSet& features, const std::vector<Index>& lags,
                                   Index k_eigs) {
    Index min_len = std::numeric_limits<Index>::max();
    for (const Matrix& f : features) min_len = std::min(min_len, f.rows());
    ITSCurve curve;
    for (Index tau : lags) {
        if (tau >= min_len)
            throw DomainError("implied_timescales: lag " + std::to_string(tau) +
                              " is not below the shortest trajectory length " +
                              std::to_string(min_len));
        KoopmanModel model = estimate_k(features, tau);
        const Index avail = std::max<Index>(0, model.eigenvalues.size() - 1);
        Vector ts(std::min(k_eigs, avail));
        for (Index i = 0; i < ts.size(); ++i)
            ts(i) = implied_timescale(model.eigenvalues(i + 1), tau);
        curve.lags.push_back(tau);
        curve.timescales.push_back(std::move(ts));
    }
    return curve;
}

/// Chapman-Kolmogorov test: K(tau)^n against a fresh estimate K(n tau) with
/// the same frozen features. The n = 1 slots reuse the same matrix and are
/// bit-identical by construction.
inline CKResult ck_test(const FeatureSet& features, Index tau, const std::vector<Index>& n_values) {
    Index min_len = std::numeric_limits<Index>::max();
    for (const Matrix& f : features) min_len = std::min(min_len, f.rows());
    for (Index n : n_values)
        if (n < 1 || n * tau >= min_len)
            throw DomainError("ck_test: n * tau = " + std::to_string(n * tau) +
                              " needs data longer than " + std::to_string(n * tau) + " frames");
    const Matrix k1 = estimate_k(features, tau).k_matrix;
    CKResult result;
    result.n_values = n_values;
    for (Index n : n_values) {
        if (n == 1) {
            result.predicted.push_back(k1);
            result.estimated.push_back(k1);
            continue;
        }
        Matrix power = k1;
        for (Index i = 1; i < n; ++i) power = power * k1;
        result.predicted.push_back(std::move(power));
        result.estimated.push_back(estimate_k(features, n * tau).k_matrix);
    }
    return result;
}

/// Values of the approximated eigenfunction psi_i(x) = sum_j r_ij chi_j(x)
/// on pre-transformed frames. Real eigenvalues give one column; a complex
/// eigenvalue gives the real and imaginary parts as two columns.
inline Matrix eigenfunction_values(const KoopmanModel& model, const Matrix& features, Index i) {
    if (i < 0 || i >= model.eigenvalues.size())
        throw DomainError("eigenfunction_values: eigenvector index out of range");
    if (features.cols() != model.right_eigvecs.rows())
        throw DimensionError("eigenfunction_values: feature width does not match eigenvectors");
    const Eigen::VectorXcd r = model.right_eigvecs.col(i);
    const bool is_real = r.imag().cwiseAbs().maxCoeff() < 1e-12 * (1.0 + r.real().cwiseAbs().maxCoeff());
    if (is_real) {
        Matrix out(features.rows(), 1);
        out.col(0) = features * r.real();
        return out;
    }
    Matrix out(features.rows(), 2);
    out.col(0) = features * r.real();
    out.col(1) = features * r.imag();
    return out;
}

/// Long-format CSV: run,lag,index,value (one row per timescale). Values are
/// printed with 17 significant digits so they round-trip exactly.
inline void write_its_csv(std::ostream& os, const ITSCurve& curve, Index run, bool header = true) {
    if (header) os << "run,lag,index,value\n";
    char buf[64];
    for (std::size_t j = 0; j < curve.lags.size(); ++j) {
        for (Index i = 0; i < curve.timescales[j].size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", curve.timescales[j](i));
            os << run << ',' << curve.lags[j] << ',' << i << ',' << buf << '\n';
        }
    }
}

/// Long-format CSV: run,n,row,col,predicted,estimated.
inline void write_ck_csv(std::ostream& os, const CKResult& result, Index run, bool header = true) {
    if (header) os << "run,n,row,col,predicted,estimated\n";
    char pb[64], eb[64];
    for (std::size_t j = 0; j < result.n_values.size(); ++j) {
        const Matrix& p = result.predicted[j];
        const Matrix& e = result.estimated[j];
        for (Index r = 0; r < p.rows(); ++r) {
            for (Index c = 0; c < p.cols(); ++c) {
                std::snprintf(pb, sizeof pb, "%.17g", p(r, c));
                std::snprintf(eb, sizeof eb, "%.17g", e(r, c));
                os << run << ',' << result.n_values[j] << ',' << r << ',' << c << ',' << pb << ','
                   << eb << '\n';
            }
        }
    }
}

}  // namespace vampnet
