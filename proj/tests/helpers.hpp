#pragma once

// Shared oracles for the test suites: discrete Markov chain simulation and
// the analytic covariance / score construction for indicator features.

#include <vector>

#include "vampnet/linalg.hpp"
#include "vampnet/rng.hpp"
#include "vampnet/vamp.hpp"

namespace testhelp {

using vampnet::Index;
using vampnet::Matrix;
using vampnet::Vector;

/// Sample a discrete Markov chain of length n from transition matrix p.
inline std::vector<Index> sample_chain(const Matrix& p, Index n, std::uint64_t seed,
                                       Index start = 0) {
    vampnet::Rng rng(seed);
    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(n));
    Index state = start;
    for (Index t = 0; t < n; ++t) {
        out.push_back(state);
        const double u = rng.uniform();
        double acc = 0.0;
        for (Index j = 0; j < p.cols(); ++j) {
            acc += p(state, j);
            if (u < acc) {
                state = j;
                break;
            }
        }
    }
    return out;
}

/// Transition counts at lag tau (sliding window).
inline Matrix count_matrix(const std::vector<Index>& dtraj, Index n_states, Index tau) {
    Matrix c = Matrix::Zero(n_states, n_states);
    for (std::size_t t = 0; t + static_cast<std::size_t>(tau) < dtraj.size(); ++t)
        c(dtraj[t], dtraj[t + static_cast<std::size_t>(tau)]) += 1.0;
    return c;
}

/// Stationary distribution of a row-stochastic matrix (power iteration).
inline Vector stationary(const Matrix& p) {
    Vector pi = Vector::Constant(p.rows(), 1.0 / static_cast<double>(p.rows()));
    for (int it = 0; it < 20000; ++it) {
        Vector next = p.transpose() * pi;
        next /= next.sum();
        if ((next - pi).cwiseAbs().maxCoeff() < 1e-15) return next;
        pi = next;
    }
    return pi;
}

/// Mean-free analytic covariances of indicator features of a stationary
/// chain: C00 = diag(pi) - pi pi^T, C01 = diag(pi) P - pi pi^T.
inline vampnet::CovarianceSet analytic_chain_covariances(const Matrix& p, Index t_pairs = 1000000) {
    Vector pi = stationary(p);
    vampnet::CovarianceSet cov;
    cov.mean_free = true;
    cov.t_pairs = t_pairs;
    cov.mean0 = pi;
    cov.mean1 = pi;
    cov.c00 = Matrix(pi.asDiagonal()) - pi * pi.transpose();
    cov.c11 = cov.c00;
    cov.c01 = Matrix(pi.asDiagonal()) * p - pi * pi.transpose();
    return cov;
}

/// Empirical covariances of indicator features built directly from pair
/// counts; identical arithmetic to feeding one-hot batches through
/// covariances(), without materializing the batches.
inline vampnet::CovarianceSet chain_covariances_from_counts(const Matrix& counts, bool mean_free) {
    const double total = counts.sum();
    Vector n0 = counts.rowwise().sum();
    Vector n1 = counts.colwise().sum().transpose();
    vampnet::CovarianceSet cov;
    cov.t_pairs = static_cast<Index>(total);
    cov.mean_free = mean_free;
    cov.mean0 = n0 / total;
    cov.mean1 = n1 / total;
    if (!mean_free) {
        cov.c00 = Matrix(Vector(n0 / total).asDiagonal());
        cov.c11 = Matrix(Vector(n1 / total).asDiagonal());
        cov.c01 = counts / total;
    } else {
        const double norm = total / (total - 1.0);
        cov.c00 = norm * (Matrix(Vector(n0 / total).asDiagonal()) - cov.mean0 * cov.mean0.transpose());
        cov.c11 = norm * (Matrix(Vector(n1 / total).asDiagonal()) - cov.mean1 * cov.mean1.transpose());
        cov.c01 = norm * (counts / total - cov.mean0 * cov.mean1.transpose());
    }
    return cov;
}

/// One-hot feature batches (m x T) of a discrete trajectory at lag tau.
inline std::pair<Matrix, Matrix> one_hot_batches(const std::vector<Index>& dtraj, Index n_states,
                                                 Index tau) {
    const Index t_pairs = static_cast<Index>(dtraj.size()) - tau;
    Matrix x = Matrix::Zero(n_states, t_pairs);
    Matrix y = Matrix::Zero(n_states, t_pairs);
    for (Index t = 0; t < t_pairs; ++t) {
        x(dtraj[static_cast<std::size_t>(t)], t) = 1.0;
        y(dtraj[static_cast<std::size_t>(t + tau)], t) = 1.0;
    }
    return {std::move(x), std::move(y)};
}

inline double pearson(const Vector& a, const Vector& b) {
    const double ma = a.mean(), mb = b.mean();
    Vector ca = a.array() - ma, cb = b.array() - mb;
    return ca.dot(cb) / std::sqrt(ca.squaredNorm() * cb.squaredNorm());
}

}  // namespace testhelp
