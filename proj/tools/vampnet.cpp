// Command-line front end: simulate the model systems, train VAMPnets,
// validate the resulting kinetic models and orchestrate multi-run
// experiments.

#include <CLI11.hpp>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "vampnet/vampnet.hpp"

namespace {

using namespace vampnet;

std::vector<Trajectory> load_trajectories(const std::vector<std::string>& paths,
                                          const std::string& format, bool contact) {
    const TrajectoryFormat fmt =
        format == "csv" ? TrajectoryFormat::csv : TrajectoryFormat::binary;
    std::vector<Trajectory> trajs;
    for (const std::string& p : paths) trajs.push_back(read_trajectory(p, fmt));
    if (contact)
        for (Trajectory& t : trajs)
            for (Index r = 0; r < t.frames.rows(); ++r)
                t.frames.row(r) = contact_transform(t.frames.row(r).transpose()).transpose();
    return trajs;
}

PotentialSpec parse_system(const std::string& name) {
    if (name == "doublewell") return {PotentialKind::DoubleWell1D};
    if (name == "folding5d") return {PotentialKind::RadialFolding5D};
    throw ConfigError("unknown system '" + name + "' (expected doublewell or folding5d)");
}

int cmd_simulate(const std::string& system, BDConfig cfg, const std::vector<double>& x0,
                 const std::string& out, const std::string& format) {
    PotentialSpec spec = parse_system(system);
    if (!x0.empty())
        cfg.x0 = Eigen::Map<const Vector>(x0.data(), static_cast<Index>(x0.size()));
    Trajectory traj = bd_trajectory(spec, cfg);
    write_trajectory(traj, out, format == "csv" ? TrajectoryFormat::csv : TrajectoryFormat::binary);
    std::cout << "wrote " << traj.length() << " frames (" << traj.dim() << "d) to " << out << "\n";
    return 0;
}

int cmd_train(const std::vector<std::string>& paths, const std::string& format, bool contact,
              bool center, const std::vector<Index>& layers, Index n_out, Index depth,
              const std::vector<double>& dropout, TrainConfig tc, double val_fraction,
              const std::string& out, const std::string& report_path) {
    std::vector<Trajectory> trajs = load_trajectories(paths, format, contact);
    Vector mean = Vector::Zero(trajs.front().dim());
    if (center) {
        Index total = 0;
        for (const Trajectory& t : trajs) {
            mean += t.frames.colwise().sum().transpose();
            total += t.length();
        }
        mean /= static_cast<double>(total);
        for (Trajectory& t : trajs) t.frames.rowwise() -= mean.transpose();
    }
    Topology topo = layers.empty() ? build_topology(trajs.front().dim(), n_out, depth, {}, dropout)
                                   : build_topology(0, 0, 0, layers, dropout);
    LaggedDataset ds = lagged_pairs(trajs, tc.lag);
    SplitIndices sp = split(ds, val_fraction, derive_seed(tc.seed, 0, 7));
    auto [model, report] = train(trajs, ds, sp, topo, tc);
    if (report.best_epoch < 0) {
        std::cerr << "training failed: " << report.error << "\n";
        return 1;
    }
    fold_input_shift(model, mean);
    save_network(model, out);
    std::cout << "best validation VAMP-2 score " << report.best_val << " (epoch "
              << report.best_epoch << "), model written to " << out << "\n";
    if (report.diverged)
        std::cerr << "warning: training stopped early: " << report.error << "\n";
    if (!report_path.empty()) {
        std::ofstream os(report_path);
        os << "epoch,phase,train_score,train_vamp2,val_score,lr\n";
        char buf[256];
        for (std::size_t e = 0; e < report.epochs.size(); ++e) {
            const EpochStats& s = report.epochs[e];
            std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g\n", e,
                          s.pretrain ? "vamp1" : "vamp2", s.train_score, s.train_vamp2, s.val_score,
                          s.lr);
            os << buf;
        }
    }
    return 0;
}

int cmd_its(const std::string& model_path, const std::vector<std::string>& paths,
            const std::string& format, bool contact, const std::vector<Index>& lags, Index k_eigs,
            const std::string& out) {
    NetworkModel model = load_network(model_path);
    std::vector<Trajectory> trajs = load_trajectories(paths, format, contact);
    FeatureSet features =
        apply_transform([&](const Matrix& f) { return forward(model, f); }, trajs);
    ITSCurve curve = implied_timescales(features, lags, k_eigs);
    std::ofstream os(out);
    if (!os) throw IoError("cannot open " + out + " for writing");
    write_its_csv(os, curve, 0);
    std::cout << "wrote implied timescales for " << lags.size() << " lags to " << out << "\n";
    return 0;
}

int cmd_cktest(const std::string& model_path, const std::vector<std::string>& paths,
               const std::string& format, bool contact, Index tau, Index n_max,
               const std::string& out) {
    NetworkModel model = load_network(model_path);
    std::vector<Trajectory> trajs = load_trajectories(paths, format, contact);
    FeatureSet features =
        apply_transform([&](const Matrix& f) { return forward(model, f); }, trajs);
    std::vector<Index> ns;
    for (Index n = 1; n <= n_max; ++n) ns.push_back(n);
    CKResult result = ck_test(features, tau, ns);
    std::ofstream os(out);
    if (!os) throw IoError("cannot open " + out + " for writing");
    write_ck_csv(os, result, 0);
    std::cout << "wrote Chapman-Kolmogorov test (n = 1.." << n_max << ") to " << out << "\n";
    return 0;
}

int cmd_baseline(const std::vector<std::string>& paths, const std::string& format, bool contact,
                 Index tau, Index clusters, double cutoff, Index score_k, std::uint64_t seed,
                 const std::string& out) {
    std::vector<Trajectory> trajs = load_trajectories(paths, format, contact);
    TICAModel tica = tica_fit(trajs, tau, cutoff);
    Index total = 0;
    for (const Trajectory& t : trajs) total += t.length();
    Matrix projected(total, tica.retained_dim);
    std::vector<Index> lengths;
    Index offset = 0;
    for (const Trajectory& t : trajs) {
        projected.middleRows(offset, t.length()) = tica_transform(tica, t.frames);
        offset += t.length();
        lengths.push_back(t.length());
    }
    KMeansResult km = kmeans(projected, clusters, seed);
    std::vector<std::vector<Index>> dtrajs = discretize(km, lengths);
    MSMModel msm = msm_estimate(dtrajs, tau);
    ScoreConfig sc;
    sc.k = score_k;
    const double score = msm_vamp2(dtrajs, tau, sc);

    Json j;
    j["tica"] = {{"retained_dim", tica.retained_dim},
                 {"eigenvalues", std::vector<double>(tica.eigenvalues.data(),
                                                     tica.eigenvalues.data() + tica.eigenvalues.size())}};
    j["kmeans"] = {{"clusters", clusters}, {"inertia", km.inertia}, {"iterations", km.iterations}};
    j["msm"] = {{"states", msm.state_count}, {"lag", msm.lag}};
    Eigen::VectorXcd evals = msm_eigenvalues(msm);
    std::vector<double> ts;
    for (Index i = 1; i < std::min<Index>(evals.size(), 1 + score_k); ++i)
        ts.push_back(implied_timescale(evals(i), tau));
    j["msm"]["timescales"] = ts;
    j["vamp2_score"] = score;
    std::ofstream os(out);
    if (!os) throw IoError("cannot open " + out + " for writing");
    os << j.dump(2) << '\n';
    std::cout << "baseline MSM (" << msm.state_count << " states): VAMP-2 score " << score
              << ", report in " << out << "\n";
    return 0;
}

int cmd_experiment(const std::string& config_path, const std::string& out_dir, Index runs_override,
                   std::int64_t seed_override, Index workers_override) {
    ExperimentConfig cfg = parse_config_file(config_path);
    if (runs_override > 0) cfg.runs = runs_override;
    if (seed_override >= 0) cfg.master_seed = static_cast<std::uint64_t>(seed_override);
    if (workers_override > 0) cfg.workers = workers_override;
    RunSummary summary = run_experiment(cfg, out_dir);
    emit_report(summary, "csv", out_dir + "/report.csv");
    std::cout << "experiment finished: " << summary.aggregate["runs_completed"] << "/" << cfg.runs
              << " runs completed, success rate " << summary.success_rate << "\n"
              << "aggregate report: " << out_dir << "/aggregate.json\n";
    return 0;
}

int cmd_report(const std::string& dir, const std::string& format, const std::string& out) {
    Json recomputed = recompute_report(dir);
    if (format == "json") {
        std::ofstream os(out);
        if (!os) throw IoError("cannot open " + out + " for writing");
        os << recomputed.dump(2) << '\n';
    } else if (format == "csv") {
        std::ofstream os(out);
        if (!os) throw IoError("cannot open " + out + " for writing");
        os << "metric,lag,index,mean,lo,hi\n";
        char buf[256];
        for (const auto& e : recomputed["implied_timescales"]) {
            std::snprintf(buf, sizeof buf, "timescale,%lld,%lld,%.17g,%.17g,%.17g\n",
                          e["lag"].get<long long>(), e["index"].get<long long>(),
                          e["aggregate"]["mean"].get<double>(), e["aggregate"]["lo"].get<double>(),
                          e["aggregate"]["hi"].get<double>());
            os << buf;
        }
    } else {
        throw ConfigError("unknown report format '" + format + "'");
    }
    std::cout << "recomputed aggregate report written to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"VAMPnet kinetic modeling toolkit"};
    app.require_subcommand(1);

    // simulate
    auto* sim = app.add_subcommand("simulate", "Generate a Brownian-dynamics trajectory");
    std::string sim_system = "doublewell", sim_out = "traj.vtrj", sim_format = "binary";
    BDConfig sim_cfg;
    sim_cfg.n_steps = 50000;
    std::vector<double> sim_x0;
    sim->add_option("--system", sim_system, "doublewell or folding5d");
    sim->add_option("--steps", sim_cfg.n_steps, "frames to record");
    sim->add_option("--dt", sim_cfg.dt, "integrator time step");
    sim->add_option("--kt", sim_cfg.kT, "thermal energy kT");
    sim->add_option("--diffusion", sim_cfg.diffusion, "diffusion constant D");
    sim->add_option("--stride", sim_cfg.stride, "integrator steps per recorded frame");
    sim->add_option("--burn-in", sim_cfg.burn_in, "discarded initial steps");
    sim->add_option("--seed", sim_cfg.seed, "random seed");
    sim->add_option("--x0", sim_x0, "initial position components");
    sim->add_option("--out", sim_out, "output trajectory path");
    sim->add_option("--format", sim_format, "binary or csv");

    // train
    auto* tr = app.add_subcommand("train", "Train a VAMPnet on trajectories");
    std::vector<std::string> tr_paths;
    std::string tr_format = "binary", tr_out = "model.vnet", tr_report;
    std::vector<Index> tr_layers;
    std::vector<double> tr_dropout;
    Index tr_nout = 5, tr_depth = 3;
    bool tr_contact = false, tr_no_center = false;
    TrainConfig tr_cfg;
    double tr_val = 0.1;
    tr->add_option("--traj", tr_paths, "trajectory files")->required();
    tr->add_option("--format", tr_format, "binary or csv");
    tr->add_flag("--contact", tr_contact, "apply exp(-d) contact featurization");
    tr->add_flag("--no-center", tr_no_center, "skip input mean removal");
    tr->add_option("--layers", tr_layers, "explicit layer sizes");
    tr->add_option("--n-out", tr_nout, "output states (rule-based topology)");
    tr->add_option("--dropout", tr_dropout, "per-hidden-layer dropout rates");
    tr->add_option("--depth", tr_depth, "network depth (rule-based topology)");
    tr->add_option("--lag", tr_cfg.lag, "training lag in frames");
    tr->add_option("--k", tr_cfg.score.k, "singular values scored (0 = all)");
    tr->add_option("--batch", tr_cfg.batch_size, "batch size");
    tr->add_option("--epochs", tr_cfg.epochs, "training epochs");
    tr->add_option("--lr0", tr_cfg.lr0, "initial learning rate");
    tr->add_option("--pretrain", tr_cfg.pretrain_fraction, "fraction of epochs on VAMP-1");
    tr->add_option("--val", tr_val, "validation fraction");
    tr->add_option("--seed", tr_cfg.seed, "training seed");
    tr->add_option("--out", tr_out, "checkpoint path");
    tr->add_option("--train-report", tr_report, "per-epoch CSV report path");

    // its
    auto* its = app.add_subcommand("its", "Implied timescales with a frozen model");
    std::string its_model, its_out = "its.csv", its_format = "binary";
    std::vector<std::string> its_paths;
    std::vector<Index> its_lags = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    Index its_k = 4;
    bool its_contact = false;
    its->add_option("--model", its_model, "VNET1 checkpoint")->required();
    its->add_option("--traj", its_paths, "trajectory files")->required();
    its->add_option("--format", its_format, "binary or csv");
    its->add_flag("--contact", its_contact, "apply exp(-d) contact featurization");
    its->add_option("--lags", its_lags, "lags in frames");
    its->add_option("--k-eigs", its_k, "timescales per lag");
    its->add_option("--out", its_out, "output CSV path");

    // cktest
    auto* ck = app.add_subcommand("cktest", "Chapman-Kolmogorov test with a frozen model");
    std::string ck_model, ck_out = "ck.csv", ck_format = "binary";
    std::vector<std::string> ck_paths;
    Index ck_tau = 1, ck_nmax = 5;
    bool ck_contact = false;
    ck->add_option("--model", ck_model, "VNET1 checkpoint")->required();
    ck->add_option("--traj", ck_paths, "trajectory files")->required();
    ck->add_option("--format", ck_format, "binary or csv");
    ck->add_flag("--contact", ck_contact, "apply exp(-d) contact featurization");
    ck->add_option("--lag", ck_tau, "base lag tau");
    ck->add_option("--n-max", ck_nmax, "test n = 1..n_max");
    ck->add_option("--out", ck_out, "output CSV path");

    // baseline
    auto* bl = app.add_subcommand("baseline", "TICA + k-means + MSM comparison pipeline");
    std::vector<std::string> bl_paths;
    std::string bl_format = "binary", bl_out = "baseline.json";
    Index bl_tau = 1, bl_clusters = 50, bl_k = 4;
    double bl_cutoff = 0.95;
    std::uint64_t bl_seed = 0;
    bool bl_contact = false;
    bl->add_option("--traj", bl_paths, "trajectory files")->required();
    bl->add_option("--format", bl_format, "binary or csv");
    bl->add_flag("--contact", bl_contact, "apply exp(-d) contact featurization");
    bl->add_option("--lag", bl_tau, "MSM lag tau");
    bl->add_option("--clusters", bl_clusters, "k-means cluster count");
    bl->add_option("--cutoff", bl_cutoff, "kinetic variance cutoff");
    bl->add_option("--k", bl_k, "singular values scored");
    bl->add_option("--seed", bl_seed, "k-means seed");
    bl->add_option("--out", bl_out, "output JSON path");

    // experiment
    auto* ex = app.add_subcommand("experiment", "Multi-run training protocol from a config file");
    std::string ex_config, ex_out = "experiment_out";
    Index ex_runs = 0, ex_workers = 0;
    std::int64_t ex_seed = -1;
    ex->add_option("--config", ex_config, "experiment config file")->required();
    ex->add_option("--out", ex_out, "output directory");
    ex->add_option("--runs", ex_runs, "override run count");
    ex->add_option("--seed", ex_seed, "override master seed");
    ex->add_option("--workers", ex_workers, "override worker count");

    // report
    auto* rp = app.add_subcommand("report", "Recompute aggregates from per-run CSV artifacts");
    std::string rp_dir, rp_format = "json", rp_out = "report_recomputed.json";
    rp->add_option("--dir", rp_dir, "experiment output directory")->required();
    rp->add_option("--format", rp_format, "csv or json");
    rp->add_option("--out", rp_out, "output path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim->parsed())
            return cmd_simulate(sim_system, sim_cfg, sim_x0, sim_out, sim_format);
        if (tr->parsed())
            return cmd_train(tr_paths, tr_format, tr_contact, !tr_no_center, tr_layers, tr_nout,
                             tr_depth, tr_dropout, tr_cfg, tr_val, tr_out, tr_report);
        if (its->parsed())
            return cmd_its(its_model, its_paths, its_format, its_contact, its_lags, its_k, its_out);
        if (ck->parsed())
            return cmd_cktest(ck_model, ck_paths, ck_format, ck_contact, ck_tau, ck_nmax, ck_out);
        if (bl->parsed())
            return cmd_baseline(bl_paths, bl_format, bl_contact, bl_tau, bl_clusters, bl_cutoff,
                                bl_k, bl_seed, bl_out);
        if (ex->parsed())
            return cmd_experiment(ex_config, ex_out, ex_runs, ex_seed, ex_workers);
        if (rp->parsed())
            return cmd_report(rp_dir, rp_format, rp_out);
    } catch (const vampnet::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const vampnet::ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 2;
    } catch (const vampnet::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
