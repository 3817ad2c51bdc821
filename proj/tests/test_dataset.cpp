#include <catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "vampnet/dataset.hpp"
#include "vampnet/trajectory.hpp"

using namespace vampnet;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("vampnet_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

Trajectory make_traj(Index t, Index d, std::uint64_t seed) {
    Rng rng(seed);
    Trajectory traj;
    traj.frames.resize(t, d);
    for (Index i = 0; i < t; ++i)
        for (Index j = 0; j < d; ++j) traj.frames(i, j) = rng.normal();
    traj.dt_per_frame = 0.25;
    traj.label = "test";
    return traj;
}

}  // namespace

TEST_CASE("binary trajectory round-trip is bit-exact", "[dataset]") {
    TempDir tmp;
    Trajectory traj = make_traj(100, 5, 17);
    write_trajectory(traj, tmp.file("t.vtrj"));
    Trajectory back = read_trajectory(tmp.file("t.vtrj"));
    REQUIRE(back.frames.rows() == 100);
    REQUIRE(back.frames.cols() == 5);
    CHECK(back.frames == traj.frames);  // exact bits
    CHECK(back.dt_per_frame == traj.dt_per_frame);
}

TEST_CASE("csv round trip and parse errors", "[dataset]") {
    TempDir tmp;
    Trajectory traj = make_traj(20, 3, 18);
    write_trajectory(traj, tmp.file("t.csv"), TrajectoryFormat::csv);
    Trajectory back = read_trajectory(tmp.file("t.csv"), TrajectoryFormat::csv);
    CHECK((back.frames - traj.frames).cwiseAbs().maxCoeff() < 1e-15);

    {
        std::ofstream os(tmp.file("ragged.csv"));
        os << "# comment line\n1.0,2.0,3.0\n1.0,2.0\n";
    }
    try {
        read_trajectory(tmp.file("ragged.csv"), TrajectoryFormat::csv);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }

    { std::ofstream os(tmp.file("empty.csv")); }
    CHECK_THROWS_AS(read_trajectory(tmp.file("empty.csv"), TrajectoryFormat::csv), ParseError);
    { std::ofstream os(tmp.file("empty.vtrj")); }
    CHECK_THROWS_AS(read_trajectory(tmp.file("empty.vtrj")), ParseError);

    {
        std::ofstream os(tmp.file("nan.csv"));
        os << "1.0\nnan\n";
    }
    CHECK_THROWS_AS(read_trajectory(tmp.file("nan.csv"), TrajectoryFormat::csv), ParseError);
}

TEST_CASE("lagged pair construction", "[dataset]") {
    std::vector<Trajectory> one = {make_traj(5, 2, 1)};
    LaggedDataset ds = lagged_pairs(one, 2);
    CHECK(ds.t_pairs() == 3);

    std::vector<Trajectory> two = {make_traj(5, 2, 1), make_traj(4, 2, 2)};
    ds = lagged_pairs(two, 3);
    CHECK(ds.t_pairs() == 3);  // 2 + 1
    for (const PairIndex& p : ds.pairs)
        CHECK(static_cast<Index>(p.t) + ds.lag < two[p.traj].length());

    CHECK_THROWS_AS(lagged_pairs(one, 5), DataError);
    CHECK_THROWS_AS(lagged_pairs(one, 0), DomainError);
}

TEST_CASE("pair-level split sizes and determinism", "[dataset]") {
    std::vector<Trajectory> trajs = {make_traj(101, 1, 3)};
    LaggedDataset ds = lagged_pairs(trajs, 1);
    REQUIRE(ds.t_pairs() == 100);

    SplitIndices s1 = split(ds, 0.1, 99);
    CHECK(s1.validation.size() == 10);
    CHECK(s1.train.size() == 90);
    SplitIndices s2 = split(ds, 0.1, 99);
    CHECK(s1.validation == s2.validation);
    CHECK(s1.train == s2.train);

    SplitIndices s3 = split(ds, 0.9, 99);
    CHECK(s3.validation.size() == 90);
    CHECK(s3.train.size() == 10);

    // disjoint and exhaustive
    std::vector<bool> seen(100, false);
    for (Index i : s1.train) seen[static_cast<std::size_t>(i)] = true;
    for (Index i : s1.validation) {
        CHECK(!seen[static_cast<std::size_t>(i)]);
        seen[static_cast<std::size_t>(i)] = true;
    }
    for (bool b : seen) CHECK(b);

    CHECK_THROWS_AS(split(ds, 0.001, 1), DataError);
    CHECK_THROWS_AS(split(ds, 1.5, 1), DomainError);
}

TEST_CASE("split depends only on the flattened pair order", "[dataset]") {
    std::vector<Trajectory> a = {make_traj(30, 1, 4), make_traj(20, 1, 5)};
    std::vector<Trajectory> b = a;
    b[0].label = "renamed";
    b[1].label = "also_renamed";
    SplitIndices sa = split(lagged_pairs(a, 2), 0.2, 11);
    SplitIndices sb = split(lagged_pairs(b, 2), 0.2, 11);
    CHECK(sa.train == sb.train);
    CHECK(sa.validation == sb.validation);
}

TEST_CASE("shuffled batches partition the pair set exactly", "[dataset]") {
    std::vector<Index> idx(100);
    std::iota(idx.begin(), idx.end(), Index(0));
    Rng rng(5);
    auto batches = make_batches(idx, 7, rng);
    REQUIRE(batches.size() == 15);
    CHECK(batches.back().size() == 2);  // last short batch kept
    std::vector<Index> flat;
    for (const auto& b : batches) flat.insert(flat.end(), b.begin(), b.end());
    std::sort(flat.begin(), flat.end());
    for (Index i = 0; i < 100; ++i) CHECK(flat[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("per-side pair means", "[dataset]") {
    // a linearly drifting trajectory has different t and t+tau column means
    Trajectory traj;
    traj.frames.resize(11, 1);
    for (Index t = 0; t < 11; ++t) traj.frames(t, 0) = static_cast<double>(t);
    std::vector<Trajectory> trajs = {traj};
    LaggedDataset ds = lagged_pairs(trajs, 2);
    auto [mu1, mu2] = pair_column_means(trajs, ds);
    CHECK(mu1(0) == Catch::Approx(4.0));  // mean of 0..8
    CHECK(mu2(0) == Catch::Approx(6.0));  // mean of 2..10
}

TEST_CASE("contact transform", "[dataset]") {
    Vector d(3);
    d << 0.0, 1.0, 2.0;
    Vector c = contact_transform(d);
    CHECK(c(0) == 1.0);
    CHECK(c(1) == Catch::Approx(std::exp(-1.0)));
    CHECK(c(1) > c(2));  // monotone
    d(1) = -0.5;
    CHECK_THROWS_AS(contact_transform(d), DomainError);
}

TEST_CASE("remove_mean", "[dataset]") {
    Matrix x(2, 1);
    x << 0.0, 2.0;
    auto [mean, centered] = remove_mean(x);
    CHECK(mean(0) == 1.0);
    CHECK(centered(0, 0) == -1.0);
    CHECK(centered(1, 0) == 1.0);

    auto [mean2, centered2] = remove_mean(centered);
    CHECK((centered2 - centered).cwiseAbs().maxCoeff() < 1e-12);

    Matrix row(1, 3);
    row << 5.0, -1.0, 2.0;
    auto [mean3, centered3] = remove_mean(row);
    CHECK(centered3.cwiseAbs().maxCoeff() == 0.0);

    // column means of the output vanish
    Matrix big = make_traj(50, 4, 9).frames;
    auto [m4, c4] = remove_mean(big);
    CHECK(c4.colwise().mean().cwiseAbs().maxCoeff() < 1e-12);
}
