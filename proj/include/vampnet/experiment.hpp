#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "vampnet/baseline.hpp"
#include "vampnet/dataset.hpp"
#include "vampnet/errors.hpp"
#include "vampnet/koopman.hpp"
#include "vampnet/network.hpp"
#include "vampnet/simulate.hpp"
#include "vampnet/trajectory.hpp"
#include "vampnet/vamp.hpp"

namespace vampnet {

using Json = nlohmann::ordered_json;

/// Full description of one experiment: system, simulation settings, network
/// topology, training settings, validation protocol and aggregation rules.
struct ExperimentConfig {
    // [system]
    std::string system = "doublewell";  // doublewell | folding5d | external
    std::vector<std::string> trajectories;
    std::string format = "binary";
    bool center_input = true;
    bool contact_features = false;

    // [simulate]
    BDConfig sim;
    bool sim_seed_set = false;

    // [topology]
    std::vector<Index> layers;
    Index n_out = 5;
    Index depth = 3;
    std::vector<double> dropout;

    // [train]
    TrainConfig train;
    double val_fraction = 0.1;

    // [its]
    std::vector<Index> its_lags = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    Index k_eigs = 4;

    // [ck]
    std::vector<Index> ck_n = {1, 2, 3, 4, 5};

    // [experiment]
    Index runs = 100;
    Index workers = 1;
    std::uint64_t master_seed = 1;
    double trim = 0.05;
    double ci = 0.95;

    // [success]
    std::vector<double> min_timescales;
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) {
        std::size_t a = item.find_first_not_of(" \t");
        std::size_t b = item.find_last_not_of(" \t");
        if (a == std::string::npos) continue;
        out.push_back(item.substr(a, b - a + 1));
    }
    return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "': cannot parse number '" + v + "'");
    }
}

inline long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "': cannot parse integer '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: key '" + key + "': cannot parse boolean '" + v + "'");
}

template <typename T>
std::vector<T> parse_num_list(const std::string& key, const std::string& v) {
    std::vector<T> out;
    for (const std::string& item : split_list(v)) {
        if constexpr (std::is_integral_v<T>)
            out.push_back(static_cast<T>(parse_int(key, item)));
        else
            out.push_back(static_cast<T>(parse_double(key, item)));
    }
    return out;
}

}  // namespace detail

/// Parse the flat key=value config format: [section] headers, one key per
/// line, '#' comments. Unknown sections or keys are rejected.
inline ExperimentConfig parse_config(std::istream& is, const std::string& origin = "<config>") {
    ExperimentConfig cfg;
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::size_t a = line.find_first_not_of(" \t\r");
        if (a == std::string::npos) continue;
        std::size_t b = line.find_last_not_of(" \t\r");
        line = line.substr(a, b - a + 1);
        const std::string where = origin + ":" + std::to_string(lineno);
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": malformed section header");
            section = line.substr(1, line.size() - 2);
            if (section != "system" && section != "simulate" && section != "topology" &&
                section != "train" && section != "its" && section != "ck" &&
                section != "experiment" && section != "success")
                throw ConfigError(where + ": unknown section [" + section + "]");
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        key.erase(key.find_last_not_of(" \t") + 1);
        value.erase(0, value.find_first_not_of(" \t"));
        if (key.empty() || value.empty()) throw ConfigError(where + ": empty key or value");
        const std::string qualified = section + "." + key;

        if (qualified == "system.kind") {
            if (value != "doublewell" && value != "folding5d" && value != "external")
                throw ConfigError(where + ": unknown system '" + value + "'");
            cfg.system = value;
        } else if (qualified == "system.trajectories") {
            cfg.trajectories = detail::split_list(value);
        } else if (qualified == "system.format") {
            if (value != "binary" && value != "csv")
                throw ConfigError(where + ": unknown trajectory format '" + value + "'");
            cfg.format = value;
        } else if (qualified == "system.center_input") {
            cfg.center_input = detail::parse_bool(qualified, value);
        } else if (qualified == "system.contact_features") {
            cfg.contact_features = detail::parse_bool(qualified, value);
        } else if (qualified == "simulate.dt") {
            cfg.sim.dt = detail::parse_double(qualified, value);
        } else if (qualified == "simulate.diffusion") {
            cfg.sim.diffusion = detail::parse_double(qualified, value);
        } else if (qualified == "simulate.kT") {
            cfg.sim.kT = detail::parse_double(qualified, value);
        } else if (qualified == "simulate.n_steps") {
            cfg.sim.n_steps = detail::parse_int(qualified, value);
        } else if (qualified == "simulate.burn_in") {
            cfg.sim.burn_in = detail::parse_int(qualified, value);
        } else if (qualified == "simulate.stride") {
            cfg.sim.stride = detail::parse_int(qualified, value);
        } else if (qualified == "simulate.seed") {
            cfg.sim.seed = static_cast<std::uint64_t>(detail::parse_int(qualified, value));
            cfg.sim_seed_set = true;
        } else if (qualified == "simulate.x0") {
            auto xs = detail::parse_num_list<double>(qualified, value);
            cfg.sim.x0 = Eigen::Map<Vector>(xs.data(), static_cast<Index>(xs.size()));
        } else if (qualified == "topology.layers") {
            cfg.layers = detail::parse_num_list<Index>(qualified, value);
        } else if (qualified == "topology.n_out") {
            cfg.n_out = detail::parse_int(qualified, value);
        } else if (qualified == "topology.depth") {
            cfg.depth = detail::parse_int(qualified, value);
        } else if (qualified == "topology.dropout") {
            cfg.dropout = detail::parse_num_list<double>(qualified, value);
        } else if (qualified == "train.lag") {
            cfg.train.lag = detail::parse_int(qualified, value);
        } else if (qualified == "train.batch_size") {
            cfg.train.batch_size = detail::parse_int(qualified, value);
        } else if (qualified == "train.epochs") {
            cfg.train.epochs = detail::parse_int(qualified, value);
        } else if (qualified == "train.lr0") {
            cfg.train.lr0 = detail::parse_double(qualified, value);
        } else if (qualified == "train.lr_patience") {
            cfg.train.lr_patience = detail::parse_int(qualified, value);
        } else if (qualified == "train.lr_decay") {
            cfg.train.lr_decay = detail::parse_double(qualified, value);
        } else if (qualified == "train.l2_hidden") {
            cfg.train.l2_hidden = detail::parse_double(qualified, value);
        } else if (qualified == "train.l2_output") {
            cfg.train.l2_output = detail::parse_double(qualified, value);
        } else if (qualified == "train.pretrain_fraction") {
            cfg.train.pretrain_fraction = detail::parse_double(qualified, value);
        } else if (qualified == "train.k") {
            cfg.train.score.k = detail::parse_int(qualified, value);
        } else if (qualified == "train.eps_rel") {
            cfg.train.score.eps_rel = detail::parse_double(qualified, value);
        } else if (qualified == "train.include_constant") {
            cfg.train.score.include_constant = detail::parse_bool(qualified, value);
        } else if (qualified == "train.frobenius_scaling") {
            if (value == "sum")
                cfg.train.score.frobenius_scaling = FrobeniusScaling::sum;
            else if (value == "mean")
                cfg.train.score.frobenius_scaling = FrobeniusScaling::mean;
            else
                throw ConfigError(where + ": frobenius_scaling must be sum or mean");
        } else if (qualified == "train.lr_check") {
            if (value == "epoch")
                cfg.train.lr_check_per_batch = false;
            else if (value == "batch")
                cfg.train.lr_check_per_batch = true;
            else
                throw ConfigError(where + ": lr_check must be epoch or batch");
        } else if (qualified == "train.val_fraction") {
            cfg.val_fraction = detail::parse_double(qualified, value);
        } else if (qualified == "its.lags") {
            cfg.its_lags = detail::parse_num_list<Index>(qualified, value);
        } else if (qualified == "its.k_eigs") {
            cfg.k_eigs = detail::parse_int(qualified, value);
        } else if (qualified == "ck.n") {
            cfg.ck_n = detail::parse_num_list<Index>(qualified, value);
        } else if (qualified == "experiment.runs") {
            cfg.runs = detail::parse_int(qualified, value);
        } else if (qualified == "experiment.workers") {
            cfg.workers = detail::parse_int(qualified, value);
        } else if (qualified == "experiment.seed") {
            cfg.master_seed = static_cast<std::uint64_t>(detail::parse_int(qualified, value));
        } else if (qualified == "experiment.trim") {
            cfg.trim = detail::parse_double(qualified, value);
        } else if (qualified == "experiment.ci") {
            cfg.ci = detail::parse_double(qualified, value);
        } else if (qualified == "success.min_timescales") {
            cfg.min_timescales = detail::parse_num_list<double>(qualified, value);
        } else {
            throw ConfigError(where + ": unknown key '" + key + "' in section [" + section + "]");
        }
    }
    return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    return parse_config(is, path);
}

struct Aggregate {
    double mean = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    Index n_retained = 0;
};

namespace detail {

inline double percentile_sorted(const std::vector<double>& sorted, double q) {
    const std::size_t n = sorted.size();
    if (n == 1) return sorted[0];
    const double pos = q * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= n) return sorted[n - 1];
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace detail

/// Trimmed mean and percentile confidence interval: sort, drop
/// ceil(trim * N) values at each end, report the mean of the retained
/// values and their [(1-ci)/2, (1+ci)/2] percentiles (linear interpolation).
inline Aggregate aggregate_runs(std::vector<double> values, double trim_fraction,
                                double ci_level) {
    if (!(trim_fraction >= 0.0 && trim_fraction < 0.5))
        throw DomainError("aggregate_runs: trim fraction must lie in [0, 0.5)");
    if (!(ci_level > 0.0 && ci_level < 1.0))
        throw DomainError("aggregate_runs: ci level must lie in (0, 1)");
    std::sort(values.begin(), values.end());
    const Index n = static_cast<Index>(values.size());
    const Index g = static_cast<Index>(std::ceil(trim_fraction * static_cast<double>(n)));
    if (n - 2 * g < 3)
        throw DataError("aggregate_runs: fewer than 3 values remain after trimming");
    std::vector<double> retained(values.begin() + g, values.end() - g);
    Aggregate agg;
    agg.n_retained = static_cast<Index>(retained.size());
    double sum = 0.0;
    for (double v : retained) sum += v;
    agg.mean = sum / static_cast<double>(retained.size());
    const double q = (1.0 - ci_level) / 2.0;
    agg.lo = detail::percentile_sorted(retained, q);
    agg.hi = detail::percentile_sorted(retained, 1.0 - q);
    return agg;
}

/// Everything recorded about one optimization run.
struct RunRecord {
    Index run = 0;
    std::uint64_t split_seed = 0;
    std::uint64_t train_seed = 0;
    bool completed = false;
    bool success = false;
    bool diverged = false;
    std::string error;
    double val_score = 0.0;
    Vector timescales;  // at the training lag
    double wall_seconds = 0.0;
    Index epochs_run = 0;
    ITSCurve its;
    CKResult ck;
};

struct RunSummary {
    ExperimentConfig config;
    std::vector<RunRecord> runs;
    double success_rate = 0.0;
    Json aggregate;
};

namespace detail {

inline Json config_echo(const ExperimentConfig& cfg) {
    Json j;
    j["system"] = {{"kind", cfg.system},
                   {"trajectories", cfg.trajectories},
                   {"format", cfg.format},
                   {"center_input", cfg.center_input},
                   {"contact_features", cfg.contact_features}};
    std::vector<double> x0(cfg.sim.x0.data(), cfg.sim.x0.data() + cfg.sim.x0.size());
    j["simulate"] = {{"dt", cfg.sim.dt},         {"diffusion", cfg.sim.diffusion},
                     {"kT", cfg.sim.kT},         {"n_steps", cfg.sim.n_steps},
                     {"burn_in", cfg.sim.burn_in}, {"stride", cfg.sim.stride},
                     {"x0", x0}};
    j["topology"] = {{"layers", cfg.layers},
                     {"n_out", cfg.n_out},
                     {"depth", cfg.depth},
                     {"dropout", cfg.dropout}};
    j["train"] = {{"lag", cfg.train.lag},
                  {"batch_size", cfg.train.batch_size},
                  {"epochs", cfg.train.epochs},
                  {"lr0", cfg.train.lr0},
                  {"lr_patience", cfg.train.lr_patience},
                  {"lr_decay", cfg.train.lr_decay},
                  {"l2_hidden", cfg.train.l2_hidden},
                  {"l2_output", cfg.train.l2_output},
                  {"pretrain_fraction", cfg.train.pretrain_fraction},
                  {"k", cfg.train.score.k},
                  {"eps_rel", cfg.train.score.eps_rel},
                  {"include_constant", cfg.train.score.include_constant},
                  {"val_fraction", cfg.val_fraction}};
    j["its"] = {{"lags", cfg.its_lags}, {"k_eigs", cfg.k_eigs}};
    j["ck"] = {{"n", cfg.ck_n}};
    // workers is omitted: it cannot affect any emitted number
    j["experiment"] = {{"runs", cfg.runs},
                       {"seed", cfg.master_seed},
                       {"trim", cfg.trim},
                       {"ci", cfg.ci}};
    j["success"] = {{"min_timescales", cfg.min_timescales}};
    j["units"] = {{"timescales", "frames"}, {"lags", "frames"}};
    return j;
}

inline Json finite_or_null(double v) {
    if (std::isfinite(v)) return Json(v);
    return Json(nullptr);
}

/// Aggregate of a value collection, or null when too few values survive the
/// trim. This single code path keeps emitted and recomputed reports
/// bit-identical.
inline Json aggregate_or_null(std::vector<double> vals, double trim, double ci) {
    const Index n = static_cast<Index>(vals.size());
    const Index g = static_cast<Index>(std::ceil(trim * static_cast<double>(n)));
    if (n - 2 * g < 3) return Json(nullptr);
    Aggregate a = aggregate_runs(std::move(vals), trim, ci);
    return Json{{"mean", finite_or_null(a.mean)},
                {"lo", finite_or_null(a.lo)},
                {"hi", finite_or_null(a.hi)},
                {"n_retained", a.n_retained}};
}

}  // namespace detail

/// Build the input data for an experiment: simulate the configured system
/// or load external trajectories, then apply the configured featurization.
inline std::vector<Trajectory> prepare_trajectories(const ExperimentConfig& cfg) {
    std::vector<Trajectory> trajs;
    if (cfg.system == "external") {
        if (cfg.trajectories.empty())
            throw ConfigError("external system needs system.trajectories");
        const TrajectoryFormat fmt =
            cfg.format == "csv" ? TrajectoryFormat::csv : TrajectoryFormat::binary;
        for (const std::string& p : cfg.trajectories) trajs.push_back(read_trajectory(p, fmt));
    } else {
        PotentialSpec spec{cfg.system == "doublewell" ? PotentialKind::DoubleWell1D
                                                      : PotentialKind::RadialFolding5D};
        BDConfig sim = cfg.sim;
        if (!cfg.sim_seed_set) sim.seed = derive_seed(cfg.master_seed, 0x51D, 0);
        trajs.push_back(bd_trajectory(spec, sim));
    }
    if (cfg.contact_features)
        for (Trajectory& t : trajs)
            for (Index r = 0; r < t.frames.rows(); ++r)
                t.frames.row(r) = contact_transform(t.frames.row(r).transpose()).transpose();
    return trajs;
}

/// Run one training run plus its Koopman validation; pure given the seeds.
inline RunRecord single_run(const std::vector<Trajectory>& raw_trajs,
                            const std::vector<Trajectory>& centered_trajs, const Vector& input_mean,
                            const Topology& topo, const ExperimentConfig& cfg, Index run,
                            const std::string& run_dir) {
    RunRecord rec;
    rec.run = run;
    rec.split_seed = derive_seed(cfg.master_seed, static_cast<std::uint64_t>(run) + 1, 1);
    rec.train_seed = derive_seed(cfg.master_seed, static_cast<std::uint64_t>(run) + 1, 2);
    try {
        LaggedDataset ds = lagged_pairs(centered_trajs, cfg.train.lag);
        SplitIndices sp = split(ds, cfg.val_fraction, rec.split_seed);
        TrainConfig tc = cfg.train;
        tc.seed = rec.train_seed;
        auto [model, report] = train(centered_trajs, ds, sp, topo, tc);
        rec.diverged = report.diverged;
        rec.error = report.error;
        rec.epochs_run = static_cast<Index>(report.epochs.size());
        rec.wall_seconds = report.wall_seconds;
        if (report.best_epoch < 0)
            throw NumericalError("training produced no validated model: " + report.error);
        rec.val_score = report.best_val;

        // Fold the input centering into the first layer so the stored model
        // and all downstream evaluation act on raw coordinates.
        fold_input_shift(model, input_mean);
        FeatureSet features =
            apply_transform([&](const Matrix& f) { return forward(model, f); }, raw_trajs);
        KoopmanModel km = estimate_k(features, cfg.train.lag);
        const Index avail = std::max<Index>(0, km.eigenvalues.size() - 1);
        rec.timescales.resize(std::min(cfg.k_eigs, avail));
        for (Index i = 0; i < rec.timescales.size(); ++i)
            rec.timescales(i) = implied_timescale(km.eigenvalues(i + 1), cfg.train.lag);
        rec.its = implied_timescales(features, cfg.its_lags, cfg.k_eigs);
        rec.ck = ck_test(features, cfg.train.lag, cfg.ck_n);

        rec.success = true;
        for (std::size_t i = 0; i < cfg.min_timescales.size(); ++i) {
            if (static_cast<Index>(i) >= rec.timescales.size() ||
                !(rec.timescales(static_cast<Index>(i)) >= cfg.min_timescales[i]))
                rec.success = false;
        }
        rec.completed = true;

        if (!run_dir.empty()) {
            std::filesystem::create_directories(run_dir);
            save_network(model, run_dir + "/model.vnet");
            std::ofstream its_os(run_dir + "/its.csv");
            write_its_csv(its_os, rec.its, run);
            std::ofstream ck_os(run_dir + "/ck.csv");
            write_ck_csv(ck_os, rec.ck, run);
            std::ofstream tr(run_dir + "/train_report.csv");
            tr << "epoch,phase,train_score,train_vamp2,val_score,lr\n";
            char buf[256];
            for (std::size_t e = 0; e < report.epochs.size(); ++e) {
                const EpochStats& s = report.epochs[e];
                std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g\n", e,
                              s.pretrain ? "vamp1" : "vamp2", s.train_score, s.train_vamp2,
                              s.val_score, s.lr);
                tr << buf;
            }
            Json j;
            j["run"] = run;
            j["split_seed"] = rec.split_seed;
            j["train_seed"] = rec.train_seed;
            j["val_score"] = rec.val_score;
            std::vector<Json> ts;
            for (Index i = 0; i < rec.timescales.size(); ++i)
                ts.push_back(detail::finite_or_null(rec.timescales(i)));
            j["timescales"] = ts;
            j["success"] = rec.success;
            j["diverged"] = rec.diverged;
            j["epochs_run"] = rec.epochs_run;
            j["wall_seconds"] = rec.wall_seconds;
            std::ofstream js(run_dir + "/summary.json");
            js << j.dump(2) << '\n';
        }
    } catch (const Error& e) {
        rec.completed = false;
        rec.success = false;
        rec.error = e.what();
    }
    return rec;
}

/// The multi-run protocol: one shared dataset, `runs` independent training
/// runs with derived seeds, per-run artifacts on disk, trimmed-mean and
/// percentile-CI aggregation. Individual run failures are recorded; the
/// experiment fails only if every run fails.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
    if (cfg.runs < 1) throw ConfigError("experiment.runs must be >= 1");
    RunSummary summary;
    summary.config = cfg;

    std::vector<Trajectory> raw = prepare_trajectories(cfg);
    Vector input_mean = Vector::Zero(raw.front().dim());
    if (cfg.center_input) {
        Index total = 0;
        Vector sum = Vector::Zero(raw.front().dim());
        for (const Trajectory& t : raw) {
            sum += t.frames.colwise().sum().transpose();
            total += t.length();
        }
        input_mean = sum / static_cast<double>(total);
    }
    std::vector<Trajectory> centered = raw;
    if (cfg.center_input)
        for (Trajectory& t : centered) t.frames.rowwise() -= input_mean.transpose();

    Topology topo;
    if (!cfg.layers.empty()) {
        if (cfg.layers.front() != raw.front().dim())
            throw ConfigError("topology.layers input width does not match the data dimension");
        topo = build_topology(0, 0, 0, cfg.layers, cfg.dropout);
    } else {
        topo = build_topology(raw.front().dim(), cfg.n_out, cfg.depth, {}, cfg.dropout);
    }

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
    summary.runs.resize(static_cast<std::size_t>(cfg.runs));
    std::atomic<Index> next{0};
    const Index n_workers = std::max<Index>(1, std::min(cfg.workers, cfg.runs));
    auto worker = [&]() {
        while (true) {
            const Index r = next.fetch_add(1);
            if (r >= cfg.runs) break;
            const std::string run_dir =
                out_dir.empty() ? std::string() : out_dir + "/run_" + std::to_string(r);
            summary.runs[static_cast<std::size_t>(r)] =
                single_run(raw, centered, input_mean, topo, cfg, r, run_dir);
        }
    };
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (Index w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }

    Index n_completed = 0, n_success = 0;
    for (const RunRecord& r : summary.runs) {
        n_completed += r.completed;
        n_success += r.success;
    }
    if (n_completed == 0)
        throw NumericalError("experiment: all " + std::to_string(cfg.runs) + " runs failed; first error: " +
                             summary.runs.front().error);
    summary.success_rate = static_cast<double>(n_success) / static_cast<double>(cfg.runs);

    // Aggregates over completed runs (plus successful-runs variants).
    Json agg;
    agg["config"] = detail::config_echo(cfg);
    agg["runs_total"] = cfg.runs;
    agg["runs_completed"] = n_completed;
    agg["runs_successful"] = n_success;
    agg["success_rate"] = summary.success_rate;

    auto collect = [&](auto&& getter, bool successful_only) {
        std::vector<double> vals;
        for (const RunRecord& r : summary.runs)
            if (r.completed && (!successful_only || r.success)) vals.push_back(getter(r));
        return vals;
    };
    auto aggregate_json = [&](std::vector<double> vals) -> Json {
        return detail::aggregate_or_null(std::move(vals), cfg.trim, cfg.ci);
    };

    agg["val_score"] = aggregate_json(collect([](const RunRecord& r) { return r.val_score; }, false));
    agg["val_score_successful"] =
        aggregate_json(collect([](const RunRecord& r) { return r.val_score; }, true));

    auto its_aggregate = [&](bool successful_only) {
        Json its = Json::array();
        for (std::size_t li = 0; li < cfg.its_lags.size(); ++li) {
            Index n_ts = 0;
            for (const RunRecord& r : summary.runs)
                if (r.completed && li < r.its.timescales.size())
                    n_ts = std::max(n_ts, r.its.timescales[li].size());
            for (Index i = 0; i < n_ts; ++i) {
                std::vector<double> vals;
                for (const RunRecord& r : summary.runs)
                    if (r.completed && (!successful_only || r.success) &&
                        li < r.its.timescales.size() && i < r.its.timescales[li].size())
                        vals.push_back(r.its.timescales[li](i));
                Json entry;
                entry["lag"] = cfg.its_lags[li];
                entry["index"] = i;
                entry["aggregate"] = aggregate_json(vals);
                its.push_back(entry);
            }
        }
        return its;
    };
    agg["implied_timescales"] = its_aggregate(false);
    agg["implied_timescales_successful"] = its_aggregate(true);

    Json ck = Json::array();
    if (n_completed > 0) {
        for (std::size_t ni = 0; ni < cfg.ck_n.size(); ++ni) {
            const RunRecord* first = nullptr;
            for (const RunRecord& r : summary.runs)
                if (r.completed && ni < r.ck.predicted.size()) {
                    first = &r;
                    break;
                }
            if (!first) continue;
            const Index m = first->ck.predicted[ni].rows();
            for (Index a = 0; a < m; ++a) {
                for (Index b = 0; b < m; ++b) {
                    std::vector<double> pred, est;
                    for (const RunRecord& r : summary.runs)
                        if (r.completed && ni < r.ck.predicted.size()) {
                            pred.push_back(r.ck.predicted[ni](a, b));
                            est.push_back(r.ck.estimated[ni](a, b));
                        }
                    Json entry;
                    entry["n"] = cfg.ck_n[ni];
                    entry["row"] = a;
                    entry["col"] = b;
                    entry["predicted"] = aggregate_json(pred);
                    entry["estimated"] = aggregate_json(est);
                    ck.push_back(entry);
                }
            }
        }
    }
    agg["ck_test"] = ck;
    summary.aggregate = std::move(agg);

    if (!out_dir.empty()) {
        std::ofstream js(out_dir + "/aggregate.json");
        js << summary.aggregate.dump(2) << '\n';
        std::ofstream its_os(out_dir + "/its_long.csv");
        bool header = true;
        for (const RunRecord& r : summary.runs) {
            if (!r.completed) continue;
            write_its_csv(its_os, r.its, r.run, header);
            header = false;
        }
        std::ofstream ck_os(out_dir + "/ck_long.csv");
        header = true;
        for (const RunRecord& r : summary.runs) {
            if (!r.completed) continue;
            write_ck_csv(ck_os, r.ck, r.run, header);
            header = false;
        }
    }
    return summary;
}

/// Emit a report for a summary. CSV uses the long format
/// metric,run,lag,index,value; JSON re-emits the aggregate document.
inline void emit_report(const RunSummary& summary, const std::string& format,
                        const std::string& path) {
    bool any = false;
    for (const RunRecord& r : summary.runs) any = any || r.completed;
    if (!any) throw DataError("emit_report: summary contains no completed runs");
    if (format == "json") {
        std::ofstream os(path);
        if (!os) throw IoError("cannot open " + path + " for writing");
        os << summary.aggregate.dump(2) << '\n';
        if (!os) throw IoError("write failed for " + path);
        return;
    }
    if (format != "csv") throw ConfigError("emit_report: unknown format '" + format + "'");
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "metric,run,lag,index,value\n";
    char buf[64];
    for (const RunRecord& r : summary.runs) {
        if (!r.completed) continue;
        std::snprintf(buf, sizeof buf, "%.17g", r.val_score);
        os << "val_score," << r.run << ',' << summary.config.train.lag << ",0," << buf << '\n';
        for (std::size_t li = 0; li < r.its.lags.size(); ++li)
            for (Index i = 0; i < r.its.timescales[li].size(); ++i) {
                std::snprintf(buf, sizeof buf, "%.17g", r.its.timescales[li](i));
                os << "timescale," << r.run << ',' << r.its.lags[li] << ',' << i << ',' << buf
                   << '\n';
            }
        for (std::size_t ni = 0; ni < r.ck.n_values.size(); ++ni) {
            const Matrix& p = r.ck.predicted[ni];
            const Matrix& e = r.ck.estimated[ni];
            for (Index a = 0; a < p.rows(); ++a)
                for (Index b = 0; b < p.cols(); ++b) {
                    std::snprintf(buf, sizeof buf, "%.17g", p(a, b));
                    os << "ck_predicted," << r.run << ',' << r.ck.n_values[ni] << ','
                       << a * p.cols() + b << ',' << buf << '\n';
                    std::snprintf(buf, sizeof buf, "%.17g", e(a, b));
                    os << "ck_estimated," << r.run << ',' << r.ck.n_values[ni] << ','
                       << a * p.cols() + b << ',' << buf << '\n';
                }
        }
    }
    if (!os) throw IoError("write failed for " + path);
}

/// Independent re-computation of the aggregate statistics from the per-run
/// long-format CSV of an experiment directory. Uses the trim and CI settings
/// echoed in aggregate.json and reproduces its aggregate entries exactly
/// (CSV values are written with 17 significant digits and round-trip).
inline Json recompute_report(const std::string& dir) {
    std::ifstream ag(dir + "/aggregate.json");
    if (!ag) throw IoError("cannot open " + dir + "/aggregate.json");
    Json orig = Json::parse(ag);
    const double trim = orig["config"]["experiment"]["trim"].get<double>();
    const double ci = orig["config"]["experiment"]["ci"].get<double>();

    std::ifstream rc(dir + "/report.csv");
    if (!rc) throw IoError("cannot open " + dir + "/report.csv");
    std::string line;
    if (!std::getline(rc, line) || line != "metric,run,lag,index,value")
        throw ParseError(dir + "/report.csv: unexpected header '" + line + "'");
    std::vector<double> val_scores;
    std::map<std::pair<long long, long long>, std::vector<double>> its_vals;
    std::map<std::pair<long long, long long>, std::vector<double>> ck_pred, ck_est;
    std::size_t lineno = 1;
    while (std::getline(rc, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string metric, run_s, lag_s, index_s, value_s;
        if (!std::getline(ls, metric, ',') || !std::getline(ls, run_s, ',') ||
            !std::getline(ls, lag_s, ',') || !std::getline(ls, index_s, ',') ||
            !std::getline(ls, value_s))
            throw ParseError(dir + "/report.csv: malformed line " + std::to_string(lineno));
        const long long lag = std::stoll(lag_s);
        const long long index = std::stoll(index_s);
        const double value = std::strtod(value_s.c_str(), nullptr);
        if (metric == "val_score")
            val_scores.push_back(value);
        else if (metric == "timescale")
            its_vals[{lag, index}].push_back(value);
        else if (metric == "ck_predicted")
            ck_pred[{lag, index}].push_back(value);
        else if (metric == "ck_estimated")
            ck_est[{lag, index}].push_back(value);
        else
            throw ParseError(dir + "/report.csv: unknown metric '" + metric + "' at line " +
                             std::to_string(lineno));
    }

    Json out;
    out["val_score"] = detail::aggregate_or_null(val_scores, trim, ci);
    Json its = Json::array();
    for (const auto& entry : orig["implied_timescales"]) {
        const long long lag = entry["lag"].get<long long>();
        const long long index = entry["index"].get<long long>();
        Json e;
        e["lag"] = lag;
        e["index"] = index;
        e["aggregate"] = detail::aggregate_or_null(its_vals[{lag, index}], trim, ci);
        its.push_back(e);
    }
    out["implied_timescales"] = its;
    Json ck = Json::array();
    std::map<long long, long long> m_per_n;
    for (const auto& entry : orig["ck_test"]) ++m_per_n[entry["n"].get<long long>()];
    for (const auto& entry : orig["ck_test"]) {
        const long long n = entry["n"].get<long long>();
        const long long row = entry["row"].get<long long>();
        const long long col = entry["col"].get<long long>();
        const long long m = static_cast<long long>(std::llround(std::sqrt(
            static_cast<double>(m_per_n[n]))));
        const long long flat = row * m + col;
        Json e;
        e["n"] = n;
        e["row"] = row;
        e["col"] = col;
        e["predicted"] = detail::aggregate_or_null(ck_pred[{n, flat}], trim, ci);
        e["estimated"] = detail::aggregate_or_null(ck_est[{n, flat}], trim, ci);
        ck.push_back(e);
    }
    out["ck_test"] = ck;
    return out;
}

}  // namespace vampnet
