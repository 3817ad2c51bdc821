#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "vampnet/dataset.hpp"
#include "vampnet/errors.hpp"
#include "vampnet/linalg.hpp"
#include "vampnet/rng.hpp"
#include "vampnet/trajectory.hpp"
#include "vampnet/vamp.hpp"

namespace vampnet {

/// Layer sizes [n_in, ..., n_out] plus per-hidden-layer dropout rates.
/// Hidden layers use ReLU, the output layer Softmax.
struct Topology {
    std::vector<Index> layer_sizes;
    std::vector<double> dropout_rates;

    Index n_layers() const { return static_cast<Index>(layer_sizes.size()) - 1; }
    Index n_in() const { return layer_sizes.front(); }
    Index n_out() const { return layer_sizes.back(); }
    Index n_hidden() const { return n_layers() - 1; }
};

/// One network lobe. Both lobes of the VAMPnet are this same parameter set
/// (identical clones), so a single model represents the pair.
struct NetworkModel {
    Topology topology;
    std::vector<Matrix> weights;  // weights[l]: n_{l+1} x n_l
    std::vector<Vector> biases;
    std::uint64_t rng_seed = 0;
};

struct ParamGrads {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;
};

/// Generate layer sizes with a constant per-layer reduction factor
/// r = (n_in / n_out)^(1/depth); the final layer is forced to n_out.
/// An explicit size list bypasses the rule (used for expanding nets).
inline Topology build_topology(Index n_in, Index n_out, Index depth,
                               const std::vector<Index>& explicit_sizes = {},
                               std::vector<double> dropout_rates = {}) {
    Topology topo;
    if (!explicit_sizes.empty()) {
        if (explicit_sizes.size() < 2)
            throw DomainError("build_topology: explicit size list needs at least 2 layers");
        for (Index s : explicit_sizes)
            if (s < 1) throw DomainError("build_topology: layer sizes must be >= 1");
        topo.layer_sizes = explicit_sizes;
    } else {
        if (n_in < n_out || n_out < 1 || depth < 1)
            throw DomainError("build_topology: need n_in >= n_out >= 1 and depth >= 1");
        const double ratio =
            std::pow(static_cast<double>(n_in) / static_cast<double>(n_out),
                     1.0 / static_cast<double>(depth));
        topo.layer_sizes.push_back(n_in);
        for (Index l = 1; l < depth; ++l) {
            const double prev = static_cast<double>(topo.layer_sizes.back());
            Index next = static_cast<Index>(std::llround(prev / ratio));
            topo.layer_sizes.push_back(std::max<Index>(next, n_out));
        }
        topo.layer_sizes.push_back(n_out);
    }
    if (dropout_rates.empty()) {
        // 10% dropout on the first two hidden layers, none elsewhere.
        dropout_rates.assign(static_cast<std::size_t>(topo.n_hidden()), 0.0);
        for (std::size_t l = 0; l < std::min<std::size_t>(2, dropout_rates.size()); ++l)
            dropout_rates[l] = 0.1;
    }
    if (dropout_rates.size() != static_cast<std::size_t>(topo.n_hidden()))
        throw DomainError("build_topology: need one dropout rate per hidden layer");
    for (double p : dropout_rates)
        if (p < 0.0 || p >= 1.0) throw DomainError("build_topology: dropout rate outside [0, 1)");
    topo.dropout_rates = std::move(dropout_rates);
    return topo;
}

/// Fan-in-scaled uniform initialization: variance 2/fan_in for the ReLU
/// layers, 1/fan_in for the Softmax layer.
inline NetworkModel init_network(const Topology& topo, std::uint64_t seed) {
    NetworkModel model;
    model.topology = topo;
    model.rng_seed = seed;
    Rng rng(derive_seed(seed, 0, 0));
    const Index L = topo.n_layers();
    for (Index l = 0; l < L; ++l) {
        const Index fan_in = topo.layer_sizes[l];
        const Index fan_out = topo.layer_sizes[l + 1];
        const double variance = (l + 1 == L) ? 1.0 / fan_in : 2.0 / fan_in;
        const double a = std::sqrt(3.0 * variance);
        Matrix w(fan_out, fan_in);
        for (Index i = 0; i < fan_out; ++i)
            for (Index j = 0; j < fan_in; ++j) w(i, j) = a * (2.0 * rng.uniform() - 1.0);
        model.weights.push_back(std::move(w));
        model.biases.push_back(Vector::Zero(fan_out));
    }
    return model;
}

namespace detail {

inline Matrix softmax_rows(Matrix z) {
    for (Index i = 0; i < z.rows(); ++i) {
        Eigen::RowVectorXd row = z.row(i);
        row.array() -= row.maxCoeff();
        Eigen::RowVectorXd e = row.array().exp();
        z.row(i) = e / e.sum();
    }
    return z;
}

}  // namespace detail

/// Per-layer activations cached by a training-mode forward pass.
struct ForwardCache {
    std::vector<Matrix> activations;  // activations[0] = input, size L+1
    std::vector<Matrix> pre_acts;     // pre_acts[l] = Z_{l+1}, size L
    std::vector<Matrix> masks;        // inverted-dropout masks per hidden layer (may be empty)
};

/// Forward pass with dropout masks drawn from `dropout_rng` (inverted
/// dropout: kept activations are scaled by 1/(1-p) at train time).
inline Matrix forward_train(const NetworkModel& model, const Matrix& batch, Rng& dropout_rng,
                            ForwardCache& cache) {
    const Topology& topo = model.topology;
    if (batch.cols() != topo.n_in())
        throw DimensionError("forward: batch width " + std::to_string(batch.cols()) +
                             " does not match n_in " + std::to_string(topo.n_in()));
    const Index L = topo.n_layers();
    cache.activations.assign(1, batch);
    cache.pre_acts.clear();
    cache.masks.assign(static_cast<std::size_t>(topo.n_hidden()), Matrix());
    Matrix a = batch;
    for (Index l = 0; l < L; ++l) {
        Matrix z = (a * model.weights[l].transpose()).rowwise() + model.biases[l].transpose();
        cache.pre_acts.push_back(z);
        if (l + 1 == L) {
            a = detail::softmax_rows(std::move(z));
        } else {
            a = z.cwiseMax(0.0);
            const double p = topo.dropout_rates[static_cast<std::size_t>(l)];
            if (p > 0.0) {
                Matrix mask(a.rows(), a.cols());
                const double scale = 1.0 / (1.0 - p);
                for (Index i = 0; i < mask.rows(); ++i)
                    for (Index j = 0; j < mask.cols(); ++j)
                        mask(i, j) = dropout_rng.bernoulli(p) ? 0.0 : scale;
                a = a.cwiseProduct(mask);
                cache.masks[static_cast<std::size_t>(l)] = std::move(mask);
            }
        }
        cache.activations.push_back(a);
        if (!a.allFinite())
            throw NumericalError("forward: non-finite activations in layer " + std::to_string(l + 1));
    }
    return a;
}

/// Deterministic inference pass: no dropout. Output rows are Softmax
/// activations, nonnegative and summing to 1.
inline Matrix forward(const NetworkModel& model, const Matrix& batch) {
    const Topology& topo = model.topology;
    if (batch.cols() != topo.n_in())
        throw DimensionError("forward: batch width " + std::to_string(batch.cols()) +
                             " does not match n_in " + std::to_string(topo.n_in()));
    const Index L = topo.n_layers();
    Matrix a = batch;
    for (Index l = 0; l < L; ++l) {
        Matrix z = (a * model.weights[l].transpose()).rowwise() + model.biases[l].transpose();
        a = (l + 1 == L) ? detail::softmax_rows(std::move(z)) : z.cwiseMax(0.0);
        if (!a.allFinite())
            throw NumericalError("forward: non-finite activations in layer " + std::to_string(l + 1));
    }
    return a;
}

namespace detail {

/// Backpropagate d(loss)/d(output) through one lobe, accumulating parameter
/// gradients. `upstream` is T x n_out.
inline void backprop_lobe(const NetworkModel& model, const ForwardCache& cache,
                          const Matrix& upstream, ParamGrads& grads) {
    const Topology& topo = model.topology;
    const Index L = topo.n_layers();
    // Softmax rows: dz_i = y_i * (g_i - sum_j g_j y_j)
    const Matrix& y = cache.activations[static_cast<std::size_t>(L)];
    Matrix delta(upstream.rows(), upstream.cols());
    for (Index i = 0; i < upstream.rows(); ++i) {
        const double dot = upstream.row(i).dot(y.row(i));
        delta.row(i) = y.row(i).array() * (upstream.row(i).array() - dot);
    }
    for (Index l = L - 1; l >= 0; --l) {
        grads.weights[static_cast<std::size_t>(l)] +=
            delta.transpose() * cache.activations[static_cast<std::size_t>(l)];
        grads.biases[static_cast<std::size_t>(l)] += delta.colwise().sum().transpose();
        if (l == 0) break;
        Matrix da = delta * model.weights[static_cast<std::size_t>(l)];
        const Matrix& mask = cache.masks[static_cast<std::size_t>(l - 1)];
        if (mask.size()) da = da.cwiseProduct(mask);
        const Matrix& z = cache.pre_acts[static_cast<std::size_t>(l - 1)];
        delta = da.cwiseProduct((z.array() > 0.0).cast<double>().matrix());
    }
}

}  // namespace detail

/// Parameter gradient of (-score + L2 penalty). Because the lobes are
/// clones, the t-batch contribution (via grad_x) and the lagged-batch
/// contribution (via grad_y) are summed into one gradient; the L2 penalty
/// (l2_hidden for ReLU layers, l2_output for the Softmax layer, weights
/// only) is added once.
inline ParamGrads backward(const NetworkModel& model, const ForwardCache& cache_t,
                           const ForwardCache& cache_tau, const GradientPair& upstream,
                           double l2_hidden, double l2_output) {
    const Index L = model.topology.n_layers();
    ParamGrads grads;
    for (Index l = 0; l < L; ++l) {
        grads.weights.emplace_back(Matrix::Zero(model.weights[l].rows(), model.weights[l].cols()));
        grads.biases.emplace_back(Vector::Zero(model.biases[l].size()));
    }
    // Maximizing the score means the loss sees -grad.
    detail::backprop_lobe(model, cache_t, -upstream.grad_x.transpose(), grads);
    detail::backprop_lobe(model, cache_tau, -upstream.grad_y.transpose(), grads);
    for (Index l = 0; l < L; ++l) {
        const double lambda = (l + 1 == L) ? l2_output : l2_hidden;
        if (lambda > 0.0) grads.weights[static_cast<std::size_t>(l)] += 2.0 * lambda * model.weights[l];
    }
    return grads;
}

/// Adam optimizer state and update (bias-corrected first/second moments).
struct AdamState {
    std::vector<Matrix> m_w, v_w;
    std::vector<Vector> m_b, v_b;
    Index step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    explicit AdamState(const NetworkModel& model) {
        for (std::size_t l = 0; l < model.weights.size(); ++l) {
            m_w.emplace_back(Matrix::Zero(model.weights[l].rows(), model.weights[l].cols()));
            v_w.emplace_back(Matrix::Zero(model.weights[l].rows(), model.weights[l].cols()));
            m_b.emplace_back(Vector::Zero(model.biases[l].size()));
            v_b.emplace_back(Vector::Zero(model.biases[l].size()));
        }
    }
};

inline void adam_step(NetworkModel& model, AdamState& state, const ParamGrads& grads, double lr) {
    if (grads.weights.size() != model.weights.size())
        throw DimensionError("adam_step: gradient/model layer count mismatch");
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        state.m_w[l] = state.beta1 * state.m_w[l] + (1.0 - state.beta1) * grads.weights[l];
        state.v_w[l] = state.beta2 * state.v_w[l] +
                       (1.0 - state.beta2) * grads.weights[l].cwiseProduct(grads.weights[l]);
        model.weights[l].array() -= lr * (state.m_w[l].array() / bc1) /
                                    ((state.v_w[l].array() / bc2).sqrt() + state.epsilon);
        state.m_b[l] = state.beta1 * state.m_b[l] + (1.0 - state.beta1) * grads.biases[l];
        state.v_b[l] = state.beta2 * state.v_b[l] +
                       (1.0 - state.beta2) * grads.biases[l].cwiseProduct(grads.biases[l]);
        model.biases[l].array() -= lr * (state.m_b[l].array() / bc1) /
                                   ((state.v_b[l].array() / bc2).sqrt() + state.epsilon);
    }
}

struct TrainConfig {
    Index lag = 1;
    Index batch_size = 4000;
    Index epochs = 100;
    double lr0 = 0.05;
    Index lr_patience = 10;
    double lr_decay = 10.0;
    double l2_hidden = 1e-7;
    double l2_output = 1e-8;
    double pretrain_fraction = 1.0 / 3.0;
    ScoreConfig score;
    std::uint64_t seed = 0;
    bool lr_check_per_batch = false;
};

struct EpochStats {
    double train_score = 0.0;  // epoch mean of the active objective
    double train_vamp2 = 0.0;  // epoch mean VAMP-2 score, recorded in both phases
    double val_score = 0.0;    // VAMP-2 on the validation split
    double lr = 0.0;
    bool pretrain = false;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    double best_val = 0.0;
    Index best_epoch = -1;
    bool diverged = false;
    std::string error;
    double wall_seconds = 0.0;
};

/// Train a VAMPnet: VAMP-1 objective for the first pretrain_fraction of the
/// epochs, VAMP-2 afterwards; Adam updates; learning rate divided by
/// lr_decay after lr_patience validation checks without improvement; the
/// returned model carries the best-validation-score parameters.
inline std::pair<NetworkModel, TrainReport> train(const std::vector<Trajectory>& trajs,
                                                  const LaggedDataset& ds,
                                                  const SplitIndices& split_idx,
                                                  const Topology& topo, const TrainConfig& cfg) {
    if (split_idx.train.empty() || split_idx.validation.empty())
        throw DataError("train: empty train or validation set");
    if (cfg.lag != ds.lag)
        throw DomainError("train: config lag " + std::to_string(cfg.lag) +
                          " does not match dataset lag " + std::to_string(ds.lag));
    if (cfg.epochs < 1 || cfg.batch_size < 1 || cfg.lr_patience < 1 || !(cfg.lr0 > 0.0) ||
        !(cfg.lr_decay > 0.0) || !(cfg.pretrain_fraction >= 0.0 && cfg.pretrain_fraction <= 1.0))
        throw DomainError("train: config values must be positive (pretrain_fraction in [0, 1])");
    const auto t_start = std::chrono::steady_clock::now();

    NetworkModel model = init_network(topo, derive_seed(cfg.seed, 0, 1));
    model.rng_seed = cfg.seed;
    Rng shuffle_rng(derive_seed(cfg.seed, 0, 2));
    Rng dropout_rng(derive_seed(cfg.seed, 0, 3));
    AdamState adam(model);
    TrainReport report;

    NetworkModel best = model;
    double best_val = -std::numeric_limits<double>::infinity();
    double lr = cfg.lr0;
    Index stagnant = 0;
    const Index pre_epochs =
        static_cast<Index>(std::llround(cfg.pretrain_fraction * static_cast<double>(cfg.epochs)));

    auto validate = [&]() {
        return validation_score([&](const Matrix& b) { return forward(model, b); }, trajs, ds,
                                split_idx.validation, cfg.score);
    };
    auto check_improvement = [&](double val, Index epoch) {
        if (val > best_val) {
            best_val = val;
            best = model;
            report.best_epoch = epoch;
            stagnant = 0;
        } else if (++stagnant >= cfg.lr_patience) {
            lr /= cfg.lr_decay;
            stagnant = 0;
        }
    };

    ForwardCache cache_t, cache_tau;
    for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
        const bool pretrain = epoch < pre_epochs;
        EpochStats stats;
        stats.pretrain = pretrain;
        auto batches = make_batches(split_idx.train, cfg.batch_size, shuffle_rng);
        double sum_active = 0.0, sum_vamp2 = 0.0;
        for (const auto& batch : batches) {
            auto [xt, xtau] = gather_pairs(trajs, ds, batch);
            Matrix fx = forward_train(model, xt, dropout_rng, cache_t);
            Matrix fy = forward_train(model, xtau, dropout_rng, cache_tau);
            Matrix x = fx.transpose();
            Matrix y = fy.transpose();
            CovarianceSet cov = covariances(x, y, true);
            Matrix xbar = x.colwise() - cov.mean0;
            Matrix ybar = y.colwise() - cov.mean1;
            double score_v2, score_active;
            GradientPair grad;
            try {
                score_v2 = vamp2_score(cov, cfg.score);
                if (pretrain) {
                    score_active = vamp1_score(cov, cfg.score);
                    grad = vamp1_gradients(xbar, ybar, cov, cfg.score.eps_rel);
                } else {
                    score_active = score_v2;
                    grad = vamp2_gradients(xbar, ybar, cov, cfg.score.eps_rel);
                }
            } catch (const Error& e) {
                report.diverged = true;
                report.error = e.what();
                break;
            }
            if (!std::isfinite(score_active)) {
                report.diverged = true;
                report.error = "non-finite training score";
                break;
            }
            sum_active += score_active;
            sum_vamp2 += score_v2;
            ParamGrads grads = backward(model, cache_t, cache_tau, grad, cfg.l2_hidden, cfg.l2_output);
            adam_step(model, adam, grads, lr);
            if (cfg.lr_check_per_batch) {
                try {
                    check_improvement(validate(), epoch);
                } catch (const Error& e) {
                    report.diverged = true;
                    report.error = e.what();
                    break;
                }
            }
        }
        if (report.diverged) break;
        stats.train_score = sum_active / static_cast<double>(batches.size());
        stats.train_vamp2 = sum_vamp2 / static_cast<double>(batches.size());
        stats.lr = lr;
        double val;
        try {
            val = validate();
        } catch (const Error& e) {
            report.diverged = true;
            report.error = e.what();
            break;
        }
        if (!std::isfinite(val)) {
            report.diverged = true;
            report.error = "non-finite validation score";
            break;
        }
        stats.val_score = val;
        report.epochs.push_back(stats);
        if (!cfg.lr_check_per_batch) check_improvement(val, epoch);
    }

    report.best_val = best_val;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    if (report.best_epoch < 0) {
        // Nothing ever validated successfully; hand back the initial model.
        best = model;
    }
    return {std::move(best), std::move(report)};
}

/// Fold an input shift into the first layer so the stored model acts on raw
/// inputs: W(x - mu) + b  ==  Wx + (b - W mu).
inline void fold_input_shift(NetworkModel& model, const Vector& mu) {
    if (mu.size() != model.topology.n_in())
        throw DimensionError("fold_input_shift: shift dimension mismatch");
    model.biases[0] -= model.weights[0] * mu;
}

namespace detail {

inline void put_u64(std::ofstream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::ifstream& is, const std::string& path) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        throw ParseError(path + ": truncated checkpoint");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

/// Checkpoint format VNET1: magic "VNET1", u64 LE rng seed, u32 LE layer
/// count, u32 LE sizes, f64 LE dropout rate per hidden layer, then per layer
/// the weight matrix row-major and the bias vector, all f64 LE.
inline void save_network(const NetworkModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write("VNET1", 5);
    detail::put_u64(os, model.rng_seed);
    detail::put_u32(os, static_cast<std::uint32_t>(model.topology.layer_sizes.size()));
    for (Index s : model.topology.layer_sizes) detail::put_u32(os, static_cast<std::uint32_t>(s));
    for (double p : model.topology.dropout_rates) detail::put_f64(os, p);
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        for (Index i = 0; i < model.weights[l].rows(); ++i)
            for (Index j = 0; j < model.weights[l].cols(); ++j)
                detail::put_f64(os, model.weights[l](i, j));
        for (Index i = 0; i < model.biases[l].size(); ++i) detail::put_f64(os, model.biases[l](i));
    }
    if (!os) throw IoError("write failed for " + path);
}

inline NetworkModel load_network(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[5];
    if (!is.read(magic, 5) || std::memcmp(magic, "VNET1", 5) != 0)
        throw ParseError(path + ": bad magic, not a VNET1 checkpoint");
    NetworkModel model;
    model.rng_seed = detail::get_u64(is, path);
    const std::uint32_t n_sizes = detail::get_u32(is, path);
    if (n_sizes < 2) throw ParseError(path + ": topology needs at least 2 layers");
    for (std::uint32_t i = 0; i < n_sizes; ++i)
        model.topology.layer_sizes.push_back(static_cast<Index>(detail::get_u32(is, path)));
    for (std::uint32_t l = 0; l + 2 < n_sizes; ++l)
        model.topology.dropout_rates.push_back(detail::get_f64(is, path, "dropout rate"));
    for (std::uint32_t l = 0; l + 1 < n_sizes; ++l) {
        const Index rows = model.topology.layer_sizes[l + 1];
        const Index cols = model.topology.layer_sizes[l];
        Matrix w(rows, cols);
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j) w(i, j) = detail::get_f64(is, path, "weights");
        model.weights.push_back(std::move(w));
        Vector b(rows);
        for (Index i = 0; i < rows; ++i) b(i) = detail::get_f64(is, path, "biases");
        model.biases.push_back(std::move(b));
    }
    if (is.peek() != EOF) throw ParseError(path + ": trailing bytes after parameters");
    return model;
}

}  // namespace vampnet
