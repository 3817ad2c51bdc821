#include <catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "helpers.hpp"
#include "vampnet/network.hpp"
#include "vampnet/simulate.hpp"

using namespace vampnet;

namespace {

Matrix random_input(Index t, Index d, std::uint64_t seed) {
    Rng rng(seed);
    Matrix x(t, d);
    for (Index i = 0; i < t; ++i)
        for (Index j = 0; j < d; ++j) x(i, j) = rng.normal();
    return x;
}

/// Loss the training step minimizes on a fixed batch pair, dropout off.
double full_loss(const NetworkModel& model, const Matrix& xt, const Matrix& xtau, double l2h,
                 double l2o) {
    Matrix x = forward(model, xt).transpose();
    Matrix y = forward(model, xtau).transpose();
    ScoreConfig cfg;  // full rank
    double loss = -vamp2_score(covariances(x, y, true), cfg);
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        const double lambda = (l + 1 == model.weights.size()) ? l2o : l2h;
        loss += lambda * model.weights[l].squaredNorm();
    }
    return loss;
}

ParamGrads analytic_loss_grads(const NetworkModel& model, const Matrix& xt, const Matrix& xtau,
                               double l2h, double l2o) {
    Rng dummy(0);
    ForwardCache c0, c1;
    Matrix fx = forward_train(model, xt, dummy, c0);
    Matrix fy = forward_train(model, xtau, dummy, c1);
    Matrix x = fx.transpose(), y = fy.transpose();
    CovarianceSet cov = covariances(x, y, true);
    GradientPair up = vamp2_gradients(x.colwise() - cov.mean0, y.colwise() - cov.mean1, cov);
    return backward(model, c0, c1, up, l2h, l2o);
}

/// Max |analytic - fd| over all parameters, relative to the gradient scale.
double grad_check(NetworkModel model, const Matrix& xt, const Matrix& xtau, double l2h,
                  double l2o, double h) {
    ParamGrads g = analytic_loss_grads(model, xt, xtau, l2h, l2o);
    double scale = 0.0, max_err = 0.0;
    for (const Matrix& w : g.weights) scale = std::max(scale, w.cwiseAbs().maxCoeff());
    for (const Vector& b : g.biases) scale = std::max(scale, b.cwiseAbs().maxCoeff());
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        for (Index i = 0; i < model.weights[l].rows(); ++i)
            for (Index j = 0; j < model.weights[l].cols(); ++j) {
                const double keep = model.weights[l](i, j);
                model.weights[l](i, j) = keep + h;
                const double up = full_loss(model, xt, xtau, l2h, l2o);
                model.weights[l](i, j) = keep - h;
                const double dn = full_loss(model, xt, xtau, l2h, l2o);
                model.weights[l](i, j) = keep;
                max_err = std::max(max_err, std::abs(g.weights[l](i, j) - (up - dn) / (2 * h)));
            }
        for (Index i = 0; i < model.biases[l].size(); ++i) {
            const double keep = model.biases[l](i);
            model.biases[l](i) = keep + h;
            const double up = full_loss(model, xt, xtau, l2h, l2o);
            model.biases[l](i) = keep - h;
            const double dn = full_loss(model, xt, xtau, l2h, l2o);
            model.biases[l](i) = keep;
            max_err = std::max(max_err, std::abs(g.biases[l](i) - (up - dn) / (2 * h)));
        }
    }
    return max_err / scale;
}

/// Smallest |pre-activation| across hidden layers for both batches; finite
/// differences across a ReLU kink are meaningless, so tests keep a margin.
double relu_margin(const NetworkModel& model, const Matrix& xt, const Matrix& xtau) {
    Rng dummy(0);
    ForwardCache c;
    double margin = std::numeric_limits<double>::infinity();
    for (const Matrix* b : {&xt, &xtau}) {
        forward_train(model, *b, dummy, c);
        for (std::size_t l = 0; l + 1 < c.pre_acts.size(); ++l)
            margin = std::min(margin, c.pre_acts[l].cwiseAbs().minCoeff());
    }
    return margin;
}

}  // namespace

TEST_CASE("layer sizing rule", "[network]") {
    Topology t = build_topology(30, 6, 5);
    REQUIRE(t.layer_sizes == std::vector<Index>{30, 22, 16, 12, 9, 6});
    CHECK(t.dropout_rates == std::vector<double>{0.1, 0.1, 0.0, 0.0});

    t = build_topology(8, 2, 2);
    CHECK(t.layer_sizes == std::vector<Index>{8, 4, 2});

    t = build_topology(0, 0, 0, {1, 5, 10, 5});
    CHECK(t.layer_sizes == std::vector<Index>{1, 5, 10, 5});

    CHECK_THROWS_AS(build_topology(0, 0, 0, {4}), DomainError);
    CHECK_THROWS_AS(build_topology(2, 6, 3), DomainError);
    CHECK_THROWS_AS(build_topology(30, 6, 5, {}, {0.1}), DomainError);
}

TEST_CASE("forward basics", "[network]") {
    Topology topo = build_topology(0, 0, 0, {3, 4, 3}, {0.0});
    NetworkModel model = init_network(topo, 5);

    // zero parameters: softmax of zeros is uniform
    for (Matrix& w : model.weights) w.setZero();
    Matrix out = forward(model, random_input(10, 3, 1));
    CHECK((out.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-15);

    // saturation: strongly scaled single-layer identity approaches one-hot
    Topology single = build_topology(0, 0, 0, {3, 3}, {});
    NetworkModel big = init_network(single, 6);
    big.weights[0] = 50.0 * Matrix::Identity(3, 3);
    big.biases[0].setZero();
    Matrix x(1, 3);
    x << 1.0, 0.2, -0.3;
    out = forward(big, x);
    CHECK(out(0, 0) > 0.99);

    // every forward pass row-normalizes
    NetworkModel rnd = init_network(topo, 7);
    out = forward(rnd, random_input(64, 3, 2));
    for (Index i = 0; i < out.rows(); ++i) {
        CHECK(std::abs(out.row(i).sum() - 1.0) < 1e-12);
        CHECK(out.row(i).minCoeff() >= 0.0);
    }

    // purity: identical inputs, identical outputs
    Matrix a = forward(rnd, x), b = forward(rnd, x);
    CHECK(a == b);

    CHECK_THROWS_AS(forward(rnd, random_input(5, 4, 3)), DimensionError);
}

TEST_CASE("backward special cases", "[network]") {
    Topology topo = build_topology(0, 0, 0, {2, 3, 2}, {0.0});
    NetworkModel model = init_network(topo, 11);
    Matrix xt = random_input(20, 2, 12), xtau = random_input(20, 2, 13);
    Rng dummy(0);
    ForwardCache c0, c1;
    forward_train(model, xt, dummy, c0);
    forward_train(model, xtau, dummy, c1);
    GradientPair zero;
    zero.grad_x = Matrix::Zero(2, 20);
    zero.grad_y = Matrix::Zero(2, 20);

    ParamGrads g = backward(model, c0, c1, zero, 0.0, 0.0);
    for (const Matrix& w : g.weights) CHECK(w.cwiseAbs().maxCoeff() == 0.0);
    for (const Vector& b : g.biases) CHECK(b.cwiseAbs().maxCoeff() == 0.0);

    // L2 only: gradient of w is 2 lambda w
    g = backward(model, c0, c1, zero, 1e-3, 1e-4);
    CHECK((g.weights[0] - 2e-3 * model.weights[0]).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((g.weights[1] - 2e-4 * model.weights[1]).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("end-to-end gradient matches finite differences on a [3,5,3] net", "[network]") {
    Topology topo = build_topology(0, 0, 0, {3, 5, 3}, {0.0});
    NetworkModel model = init_network(topo, 21);
    Matrix xt = random_input(100, 3, 22), xtau = random_input(100, 3, 23);
    xtau = 0.5 * xtau + 0.5 * xt;
    REQUIRE(relu_margin(model, xt, xtau) > 1e-4);
    CHECK(grad_check(model, xt, xtau, 1e-7, 1e-8, 1e-6) < 1e-5);
}

TEST_CASE("end-to-end gradient check holds across 20 seeds", "[network]") {
    // [1,5,3] lobes on correlated data; seeds whose pre-activations sit too
    // close to a ReLU kink are skipped (finite differences are undefined
    // there), keeping the first 20 admissible ones.
    int checked = 0;
    std::uint64_t seed = 1000;
    while (checked < 20) {
        ++seed;
        Topology topo = build_topology(0, 0, 0, {1, 5, 3}, {0.0});
        NetworkModel model = init_network(topo, seed);
        Matrix xt = random_input(60, 1, seed * 7 + 1);
        Matrix xtau = 0.7 * xt + 0.3 * random_input(60, 1, seed * 7 + 2);
        if (relu_margin(model, xt, xtau) < 1e-4) continue;
        INFO("seed " << seed);
        CHECK(grad_check(model, xt, xtau, 1e-7, 1e-8, 1e-6) < 1e-5);
        ++checked;
    }
}

TEST_CASE("adam update", "[network]") {
    Topology topo = build_topology(0, 0, 0, {2, 2}, {});
    NetworkModel model = init_network(topo, 31);
    NetworkModel before = model;
    AdamState state(model);
    ParamGrads g;
    g.weights = {Matrix::Zero(2, 2)};
    g.biases = {Vector::Zero(2)};

    adam_step(model, state, g, 0.1);
    CHECK(model.weights[0] == before.weights[0]);  // zero gradient is a fixed point

    // hand-computed first step: m_hat = g, v_hat = g^2
    g.weights[0] << 1.0, -2.0, 0.5, 0.0;
    model = before;
    state = AdamState(model);
    adam_step(model, state, g, 0.1);
    for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j < 2; ++j) {
            const double gr = g.weights[0](i, j);
            const double expect =
                before.weights[0](i, j) - 0.1 * gr / (std::sqrt(gr * gr) + 1e-8);
            CHECK(model.weights[0](i, j) == Catch::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("training is deterministic given the seed", "[network]") {
    PotentialSpec dw{PotentialKind::DoubleWell1D};
    BDConfig sim;
    sim.n_steps = 3000;
    sim.kT = 4.0;
    sim.seed = 41;
    std::vector<Trajectory> trajs = {bd_trajectory(dw, sim)};
    LaggedDataset ds = lagged_pairs(trajs, 1);
    SplitIndices sp = split(ds, 0.1, 42);
    Topology topo = build_topology(0, 0, 0, {1, 5, 5});
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 500;
    cfg.score.k = 4;
    cfg.seed = 43;

    auto [m1, r1] = train(trajs, ds, sp, topo, cfg);
    auto [m2, r2] = train(trajs, ds, sp, topo, cfg);
    for (std::size_t l = 0; l < m1.weights.size(); ++l) {
        CHECK(m1.weights[l] == m2.weights[l]);
        CHECK(m1.biases[l] == m2.biases[l]);
    }
    REQUIRE(r1.epochs.size() == r2.epochs.size());
    for (std::size_t e = 0; e < r1.epochs.size(); ++e)
        CHECK(r1.epochs[e].val_score == r2.epochs[e].val_score);
}

TEST_CASE("learning rate drops by the decay factor after stagnation", "[network]") {
    PotentialSpec dw{PotentialKind::DoubleWell1D};
    BDConfig sim;
    sim.n_steps = 2000;
    sim.kT = 4.0;
    sim.seed = 51;
    std::vector<Trajectory> trajs = {bd_trajectory(dw, sim)};
    LaggedDataset ds = lagged_pairs(trajs, 1);
    SplitIndices sp = split(ds, 0.1, 52);
    Topology topo = build_topology(0, 0, 0, {1, 4, 3});
    TrainConfig cfg;
    cfg.epochs = 13;
    cfg.batch_size = 1000;
    cfg.seed = 53;
    cfg.pretrain_fraction = 0.0;
    // updates far below double resolution: the validation score is exactly
    // constant, so every epoch after the first counts as stagnant
    cfg.lr0 = 1e-300;
    cfg.lr_patience = 10;
    cfg.lr_decay = 10.0;

    auto [model, report] = train(trajs, ds, sp, topo, cfg);
    REQUIRE(report.epochs.size() == 13);
    CHECK(report.epochs[10].lr == 1e-300);
    CHECK(report.epochs[11].lr == Catch::Approx(1e-301));
    CHECK(report.epochs[11].lr < report.epochs[10].lr);
}

TEST_CASE("per-batch learning-rate checks run", "[network]") {
    PotentialSpec dw{PotentialKind::DoubleWell1D};
    BDConfig sim;
    sim.n_steps = 1500;
    sim.kT = 4.0;
    sim.seed = 55;
    std::vector<Trajectory> trajs = {bd_trajectory(dw, sim)};
    LaggedDataset ds = lagged_pairs(trajs, 1);
    SplitIndices sp = split(ds, 0.1, 56);
    Topology topo = build_topology(0, 0, 0, {1, 4, 3});
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 400;
    cfg.seed = 57;
    cfg.lr_check_per_batch = true;
    cfg.lr_patience = 2;
    auto [model, report] = train(trajs, ds, sp, topo, cfg);
    CHECK(report.epochs.size() == 3);
    CHECK(report.best_epoch >= 0);
}

TEST_CASE("pretraining boundary fractions run", "[network]") {
    PotentialSpec dw{PotentialKind::DoubleWell1D};
    BDConfig sim;
    sim.n_steps = 2000;
    sim.kT = 4.0;
    sim.seed = 61;
    std::vector<Trajectory> trajs = {bd_trajectory(dw, sim)};
    LaggedDataset ds = lagged_pairs(trajs, 1);
    SplitIndices sp = split(ds, 0.1, 62);
    Topology topo = build_topology(0, 0, 0, {1, 4, 3});
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 1000;
    cfg.score.k = 2;
    cfg.seed = 63;

    cfg.pretrain_fraction = 0.0;
    auto [m0, r0] = train(trajs, ds, sp, topo, cfg);
    CHECK(!r0.epochs.front().pretrain);
    cfg.pretrain_fraction = 1.0;
    auto [m1, r1] = train(trajs, ds, sp, topo, cfg);
    CHECK(r1.epochs.front().pretrain);
    CHECK(r1.epochs.back().pretrain);
}

TEST_CASE("double-well training beats the sign discretization and ascends", "[network]") {
    PotentialSpec dw{PotentialKind::DoubleWell1D};
    BDConfig sim;
    sim.n_steps = 20000;
    sim.kT = 4.0;
    sim.seed = 71;
    Vector x0(1);
    x0(0) = -1.7;
    sim.x0 = x0;
    std::vector<Trajectory> trajs = {bd_trajectory(dw, sim)};
    auto [mean, centered] = remove_mean(trajs[0].frames);
    trajs[0].frames = centered;

    LaggedDataset ds = lagged_pairs(trajs, 1);
    SplitIndices sp = split(ds, 0.1, 72);
    Topology topo = build_topology(0, 0, 0, {1, 5, 10, 5}, {0.0, 0.0});
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 4000;
    cfg.score.k = 4;
    cfg.seed = 73;

    auto [model, report] = train(trajs, ds, sp, topo, cfg);
    REQUIRE(!report.diverged);

    // oracle: VAMP-2 of the naive sign(x) indicator features on the same
    // validation pairs (x was centered, so the well boundary is sign-based)
    auto [xt, xtau] = gather_pairs(trajs, ds, sp.validation);
    const Index t = xt.rows();
    Matrix sx = Matrix::Zero(2, t), sy = Matrix::Zero(2, t);
    const double thr = -mean(0);  // raw x = 0 in centered coordinates... sign(x_raw)
    for (Index i = 0; i < t; ++i) {
        sx(xt(i, 0) > thr ? 1 : 0, i) = 1.0;
        sy(xtau(i, 0) > thr ? 1 : 0, i) = 1.0;
    }
    const double sign_score = vamp2_score(covariances(sx, sy, true), cfg.score);
    CHECK(report.best_val > sign_score);

    // objective ascent over the run
    CHECK(report.epochs.back().train_vamp2 > report.epochs.front().train_vamp2);

    // a fresh split scores within 10% of the last training score
    SplitIndices fresh = split(ds, 0.1, 4242);
    const double fresh_val = validation_score(
        [&](const Matrix& b) { return forward(model, b); }, trajs, ds, fresh.validation,
        cfg.score);
    CHECK(std::abs(fresh_val - report.epochs.back().train_vamp2) /
              report.epochs.back().train_vamp2 <
          0.10);
}

TEST_CASE("checkpoint round trip and input-shift folding", "[network]") {
    Topology topo = build_topology(0, 0, 0, {2, 6, 3}, {0.25});
    NetworkModel model = init_network(topo, 81);
    model.rng_seed = 4242;
    const std::string path = (std::filesystem::temp_directory_path() /
                              ("vnet_" + std::to_string(::getpid()) + ".vnet"))
                                 .string();
    save_network(model, path);
    NetworkModel back = load_network(path);
    std::filesystem::remove(path);
    CHECK(back.rng_seed == 4242);
    CHECK(back.topology.layer_sizes == model.topology.layer_sizes);
    CHECK(back.topology.dropout_rates == model.topology.dropout_rates);
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        CHECK(back.weights[l] == model.weights[l]);
        CHECK(back.biases[l] == model.biases[l]);
    }

    Vector mu(2);
    mu << 0.3, -1.2;
    NetworkModel folded = model;
    fold_input_shift(folded, mu);
    Matrix x = random_input(7, 2, 82);
    Matrix shifted = x.rowwise() - mu.transpose();
    CHECK((forward(folded, x) - forward(model, shifted)).cwiseAbs().maxCoeff() < 1e-14);
}
