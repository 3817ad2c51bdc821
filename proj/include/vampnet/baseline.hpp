#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "vampnet/errors.hpp"
#include "vampnet/koopman.hpp"
#include "vampnet/linalg.hpp"
#include "vampnet/rng.hpp"
#include "vampnet/trajectory.hpp"
#include "vampnet/vamp.hpp"

namespace vampnet {

/// TICA with kinetic-map scaling. Components are columns; eigenvalues are
/// the lag-tau autocorrelations of the projections, sorted descending.
struct TICAModel {
    Vector mean;
    Matrix components;
    Vector eigenvalues;
    Index retained_dim = 0;
    bool kinetic_map = true;
};

struct MSMModel {
    Matrix transition_matrix;
    Index state_count = 0;
    Index lag = 1;
    std::vector<Index> active_states;  // row/col index -> original state label
};

/// Fit TICA from symmetrized time-lagged covariances. The retained
/// dimension is the smallest one whose cumulative squared-eigenvalue share
/// reaches variance_cutoff (the kinetic variance criterion).
inline TICAModel tica_fit(const std::vector<Trajectory>& trajs, Index tau,
                          double variance_cutoff = 0.95, bool kinetic_map = true,
                          double eps_rel = 1e-10) {
    if (!(variance_cutoff > 0.0 && variance_cutoff <= 1.0))
        throw DomainError("tica_fit: variance_cutoff must lie in (0, 1]");
    FeatureSet raw;
    for (const Trajectory& t : trajs) raw.push_back(t.frames);
    auto [x, y] = lagged_feature_batches(raw, tau);
    const Index t_pairs = x.cols();
    if (t_pairs < 2) throw DataError("tica_fit: need at least 2 transition pairs");

    TICAModel model;
    model.kinetic_map = kinetic_map;
    model.mean = 0.5 * (x.rowwise().mean() + y.rowwise().mean());
    Matrix xb = x.colwise() - model.mean;
    Matrix yb = y.colwise() - model.mean;
    const double norm = 1.0 / (2.0 * static_cast<double>(t_pairs - 1));
    Matrix c0 = norm * (xb * xb.transpose() + yb * yb.transpose());
    Matrix ct = norm * (xb * yb.transpose() + yb * xb.transpose());
    c0 = 0.5 * (c0 + c0.transpose());
    ct = 0.5 * (ct + ct.transpose());

    TruncatedInverse white = inv_sqrt_trunc(c0, eps_rel);
    SymmetricEigen eig = sym_eig(white.matrix * ct * white.matrix);
    model.eigenvalues = eig.eigenvalues;
    model.components = white.matrix * eig.eigenvectors;

    double total = model.eigenvalues.array().square().sum();
    if (total <= 0.0) {
        model.retained_dim = model.eigenvalues.size();
        return model;
    }
    double cum = 0.0;
    model.retained_dim = model.eigenvalues.size();
    for (Index i = 0; i < model.eigenvalues.size(); ++i) {
        cum += model.eigenvalues(i) * model.eigenvalues(i);
        if (cum / total >= variance_cutoff - 1e-12) {
            model.retained_dim = i + 1;
            break;
        }
    }
    return model;
}

/// Project frames (rows) onto the retained TICA components; kinetic-map
/// scaling multiplies each projection by its eigenvalue.
inline Matrix tica_transform(const TICAModel& model, const Matrix& frames) {
    if (frames.cols() != model.mean.size())
        throw DimensionError("tica_transform: frame dimension mismatch");
    Matrix centered = frames.rowwise() - model.mean.transpose();
    Matrix proj = centered * model.components.leftCols(model.retained_dim);
    if (model.kinetic_map)
        proj = proj * model.eigenvalues.head(model.retained_dim).asDiagonal();
    return proj;
}

struct KMeansResult {
    Matrix centers;
    std::vector<Index> assignments;
    double inertia = 0.0;
    Index iterations = 0;
};

namespace detail {

inline Index nearest_center(const Matrix& centers, Index k, const Eigen::RowVectorXd& p,
                            double* dist_out = nullptr) {
    Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index c = 0; c < k; ++c) {
        const double d = (centers.row(c) - p).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    if (dist_out) *dist_out = best_d;
    return best;
}

}  // namespace detail

/// Lloyd k-means with greedy farthest-point seeding from the given seed.
/// Deterministic per seed. An emptied cluster is re-seeded with the point
/// farthest from its assigned center.
inline KMeansResult kmeans(const Matrix& points, Index k, std::uint64_t seed,
                           Index max_iter = 200) {
    const Index n = points.rows();
    if (k < 1) throw DomainError("kmeans: k must be >= 1");
    std::vector<Index> distinct;
    for (Index i = 0; i < n && static_cast<Index>(distinct.size()) < k; ++i) {
        bool seen = false;
        for (Index j : distinct)
            if ((points.row(i) - points.row(j)).squaredNorm() == 0.0) {
                seen = true;
                break;
            }
        if (!seen) distinct.push_back(i);
    }
    if (static_cast<Index>(distinct.size()) < k)
        throw DataError("kmeans: fewer than k distinct points");

    KMeansResult result;
    result.centers.resize(k, points.cols());
    Rng rng(seed);
    result.centers.row(0) = points.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    Vector min_d = (points.rowwise() - result.centers.row(0)).rowwise().squaredNorm();
    for (Index c = 1; c < k; ++c) {
        Index far = 0;
        min_d.maxCoeff(&far);
        result.centers.row(c) = points.row(far);
        min_d = min_d.cwiseMin((points.rowwise() - result.centers.row(c)).rowwise().squaredNorm());
    }

    result.assignments.assign(static_cast<std::size_t>(n), 0);
    for (Index it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (Index i = 0; i < n; ++i) {
            Index a = detail::nearest_center(result.centers, k, points.row(i));
            if (a != result.assignments[static_cast<std::size_t>(i)]) {
                result.assignments[static_cast<std::size_t>(i)] = a;
                changed = true;
            }
        }
        result.iterations = it + 1;
        Matrix sums = Matrix::Zero(k, points.cols());
        std::vector<Index> counts(static_cast<std::size_t>(k), 0);
        for (Index i = 0; i < n; ++i) {
            sums.row(result.assignments[static_cast<std::size_t>(i)]) += points.row(i);
            ++counts[static_cast<std::size_t>(result.assignments[static_cast<std::size_t>(i)])];
        }
        for (Index c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                result.centers.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
            } else {
                // Re-seed an emptied cluster with the globally worst-fit point.
                Index far = 0;
                double worst = -1.0;
                for (Index i = 0; i < n; ++i) {
                    const double d =
                        (points.row(i) - result.centers.row(result.assignments[static_cast<std::size_t>(i)]))
                            .squaredNorm();
                    if (d > worst) {
                        worst = d;
                        far = i;
                    }
                }
                result.centers.row(c) = points.row(far);
                changed = true;
            }
        }
        if (!changed && it > 0) break;
    }
    result.inertia = 0.0;
    for (Index i = 0; i < n; ++i)
        result.inertia +=
            (points.row(i) - result.centers.row(result.assignments[static_cast<std::size_t>(i)])).squaredNorm();
    return result;
}

/// Assign frames of several trajectories to discrete states.
inline std::vector<std::vector<Index>> discretize(const KMeansResult& km,
                                                  const std::vector<Index>& traj_lengths) {
    std::vector<std::vector<Index>> dtrajs;
    std::size_t offset = 0;
    for (Index len : traj_lengths) {
        std::vector<Index> d(km.assignments.begin() + offset, km.assignments.begin() + offset + len);
        dtrajs.push_back(std::move(d));
        offset += static_cast<std::size_t>(len);
    }
    return dtrajs;
}

inline std::vector<Index> assign_to_centers(const Matrix& centers, const Matrix& points) {
    std::vector<Index> out(static_cast<std::size_t>(points.rows()));
    for (Index i = 0; i < points.rows(); ++i)
        out[static_cast<std::size_t>(i)] = detail::nearest_center(centers, centers.rows(), points.row(i));
    return out;
}

/// Count-based MSM: transition counts at lag tau (sliding window), row
/// normalized. States never observed as a source are dropped; the index map
/// from matrix row to the original state label is returned. Counts into a
/// dropped state are discarded (iterated to closure).
inline MSMModel msm_estimate(const std::vector<std::vector<Index>>& dtrajs, Index tau) {
    if (tau < 1) throw DomainError("msm_estimate: tau must be >= 1");
    Index max_state = -1;
    for (const auto& d : dtrajs)
        for (Index s : d) {
            if (s < 0) throw DomainError("msm_estimate: negative state label");
            max_state = std::max(max_state, s);
        }
    if (max_state < 0) throw DataError("msm_estimate: empty discrete trajectories");
    const Index n_all = max_state + 1;
    Matrix counts = Matrix::Zero(n_all, n_all);
    for (const auto& d : dtrajs)
        for (std::size_t t = 0; t + static_cast<std::size_t>(tau) < d.size(); ++t)
            counts(d[t], d[t + static_cast<std::size_t>(tau)]) += 1.0;
    if (counts.sum() == 0.0) throw DataError("msm_estimate: no transition counts at this lag");

    std::vector<bool> active(static_cast<std::size_t>(n_all), true);
    bool shrunk = true;
    while (shrunk) {
        shrunk = false;
        for (Index i = 0; i < n_all; ++i) {
            if (!active[static_cast<std::size_t>(i)]) continue;
            double row_sum = 0.0;
            for (Index j = 0; j < n_all; ++j)
                if (active[static_cast<std::size_t>(j)]) row_sum += counts(i, j);
            if (row_sum == 0.0) {
                active[static_cast<std::size_t>(i)] = false;
                shrunk = true;
            }
        }
    }
    MSMModel model;
    model.lag = tau;
    for (Index i = 0; i < n_all; ++i)
        if (active[static_cast<std::size_t>(i)]) model.active_states.push_back(i);
    model.state_count = static_cast<Index>(model.active_states.size());
    if (model.state_count == 0) throw DataError("msm_estimate: no active states survive");
    model.transition_matrix.resize(model.state_count, model.state_count);
    for (Index a = 0; a < model.state_count; ++a) {
        double row_sum = 0.0;
        for (Index b = 0; b < model.state_count; ++b)
            row_sum += counts(model.active_states[a], model.active_states[b]);
        for (Index b = 0; b < model.state_count; ++b)
            model.transition_matrix(a, b) =
                counts(model.active_states[a], model.active_states[b]) / row_sum;
    }
    return model;
}

/// Eigenvalues of the MSM transition matrix, sorted by modulus descending.
inline Eigen::VectorXcd msm_eigenvalues(const MSMModel& model) {
    Eigen::EigenSolver<Matrix> solver(model.transition_matrix, false);
    Eigen::VectorXcd vals = solver.eigenvalues();
    std::sort(vals.data(), vals.data() + vals.size(),
              [](std::complex<double> a, std::complex<double> b) { return std::abs(a) > std::abs(b); });
    return vals;
}

/// VAMP-2 score of the crisp discretization: one-hot features over the
/// observed states, scored exactly like a VAMPnet. A single-state
/// discretization carries only the constant function.
inline double msm_vamp2(const std::vector<std::vector<Index>>& dtrajs, Index tau,
                        const ScoreConfig& cfg = {}) {
    std::map<Index, Index> compact;
    for (const auto& d : dtrajs)
        for (Index s : d)
            if (!compact.count(s)) {
                const Index next = static_cast<Index>(compact.size());
                compact[s] = next;
            }
    const Index m = static_cast<Index>(compact.size());
    if (m == 0) throw DataError("msm_vamp2: empty discrete trajectories");
    Index total = 0;
    for (const auto& d : dtrajs) total += std::max<Index>(0, static_cast<Index>(d.size()) - tau);
    if (total == 0) throw DataError("msm_vamp2: no transition pairs at this lag");
    Matrix x = Matrix::Zero(m, total), y = Matrix::Zero(m, total);
    Index col = 0;
    for (const auto& d : dtrajs)
        for (std::size_t t = 0; t + static_cast<std::size_t>(tau) < d.size(); ++t, ++col) {
            x(compact[d[t]], col) = 1.0;
            y(compact[d[t + static_cast<std::size_t>(tau)]], col) = 1.0;
        }
    CovarianceSet cov = covariances(x, y, true);
    try {
        return vamp2_score(cov, cfg);
    } catch (const RankError&) {
        return cfg.include_constant ? 1.0 : 0.0;
    }
}

}  // namespace vampnet
