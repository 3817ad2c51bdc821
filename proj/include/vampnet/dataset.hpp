#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "vampnet/errors.hpp"
#include "vampnet/rng.hpp"
#include "vampnet/trajectory.hpp"

namespace vampnet {

/// Index of a transition pair: frame t and t+lag of trajectory traj.
struct PairIndex {
    std::uint32_t traj;
    std::uint32_t t;
};

/// Transition pairs (x_t, x_{t+tau}) over a set of trajectories. Pairs never
/// cross trajectory boundaries.
struct LaggedDataset {
    std::vector<PairIndex> pairs;
    Index lag = 1;

    Index t_pairs() const { return static_cast<Index>(pairs.size()); }
};

struct SplitIndices {
    std::vector<Index> train;
    std::vector<Index> validation;
    std::uint64_t seed = 0;
    double fraction = 0.1;
};

inline LaggedDataset lagged_pairs(const std::vector<Trajectory>& trajs, Index tau) {
    if (tau < 1) throw DomainError("lagged_pairs: tau must be >= 1");
    LaggedDataset ds;
    ds.lag = tau;
    for (std::size_t k = 0; k < trajs.size(); ++k) {
        const Index len = trajs[k].length();
        for (Index t = 0; t + tau < len; ++t)
            ds.pairs.push_back({static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(t)});
    }
    if (ds.pairs.empty())
        throw DataError("lagged_pairs: tau = " + std::to_string(tau) +
                        " leaves no transition pairs");
    return ds;
}

/// Random pair-level split into validation (round(fraction * T) pairs) and
/// training. Depends only on the flattened pair order and the seed.
inline SplitIndices split(const LaggedDataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw DomainError("split: fraction must lie in (0, 1)");
    const Index n = ds.t_pairs();
    const Index n_val = static_cast<Index>(std::llround(fraction * static_cast<double>(n)));
    if (n_val == 0 || n_val == n)
        throw DataError("split: fraction " + std::to_string(fraction) + " of " +
                        std::to_string(n) + " pairs leaves an empty set");
    std::vector<Index> order(n);
    std::iota(order.begin(), order.end(), Index(0));
    Rng rng(seed);
    rng.shuffle(order);
    SplitIndices out;
    out.seed = seed;
    out.fraction = fraction;
    out.validation.assign(order.begin(), order.begin() + n_val);
    out.train.assign(order.begin() + n_val, order.end());
    return out;
}

/// Shuffled batch index lists covering `indices` exactly once; the last
/// short batch is kept.
inline std::vector<std::vector<Index>> make_batches(std::vector<Index> indices, Index batch_size,
                                                    Rng& rng) {
    if (batch_size < 1) throw DomainError("make_batches: batch_size must be >= 1");
    rng.shuffle(indices);
    std::vector<std::vector<Index>> batches;
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        std::size_t stop = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
        batches.emplace_back(indices.begin() + start, indices.begin() + stop);
    }
    return batches;
}

/// Gather the (x_t, x_{t+tau}) rows of the selected pairs. Outputs are
/// sample-major: rows = pairs, columns = input dimensions.
inline std::pair<Matrix, Matrix> gather_pairs(const std::vector<Trajectory>& trajs,
                                              const LaggedDataset& ds,
                                              const std::vector<Index>& which) {
    if (which.empty()) throw DataError("gather_pairs: empty index set");
    const Index d = trajs.at(ds.pairs.at(0).traj).dim();
    Matrix xt(static_cast<Index>(which.size()), d);
    Matrix xtau(static_cast<Index>(which.size()), d);
    for (std::size_t i = 0; i < which.size(); ++i) {
        const PairIndex& p = ds.pairs.at(static_cast<std::size_t>(which[i]));
        xt.row(static_cast<Index>(i)) = trajs[p.traj].frames.row(p.t);
        xtau.row(static_cast<Index>(i)) = trajs[p.traj].frames.row(p.t + ds.lag);
    }
    return {std::move(xt), std::move(xtau)};
}

/// Contact featurization c = exp(-d), elementwise on nonnegative distances.
inline Vector contact_transform(const Vector& distances) {
    for (Index i = 0; i < distances.size(); ++i)
        if (distances(i) < 0.0)
            throw DomainError("contact_transform: negative distance at index " +
                              std::to_string(i));
    return (-distances.array()).exp();
}

/// Column means and the centered matrix.
inline std::pair<Vector, Matrix> remove_mean(const Matrix& x) {
    if (x.rows() < 1) throw DataError("remove_mean: need at least one row");
    Vector mean = x.colwise().mean();
    Matrix centered = x.rowwise() - mean.transpose();
    return {std::move(mean), std::move(centered)};
}

/// Per-side column means over the transition pairs: mu1 over the x_t rows,
/// mu2 over the x_{t+tau} rows.
inline std::pair<Vector, Vector> pair_column_means(const std::vector<Trajectory>& trajs,
                                                   const LaggedDataset& ds) {
    const Index d = trajs.at(ds.pairs.at(0).traj).dim();
    Vector mu1 = Vector::Zero(d), mu2 = Vector::Zero(d);
    for (const PairIndex& p : ds.pairs) {
        mu1 += trajs[p.traj].frames.row(p.t).transpose();
        mu2 += trajs[p.traj].frames.row(p.t + ds.lag).transpose();
    }
    const double n = static_cast<double>(ds.pairs.size());
    return {mu1 / n, mu2 / n};
}

}  // namespace vampnet
