#pragma once

#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vampnet/errors.hpp"
#include "vampnet/linalg.hpp"

namespace vampnet {

/// A stored trajectory: one configuration per row.
struct Trajectory {
    Matrix frames;             // T x d
    double dt_per_frame = 1.0; // physical time per saved frame (labeling only)
    std::string label;

    Index length() const { return frames.rows(); }
    Index dim() const { return frames.cols(); }
};

enum class TrajectoryFormat { binary, csv };

namespace detail {

inline void put_u32(std::ofstream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ofstream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::ifstream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw ParseError(path + ": truncated header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline double get_f64(std::ifstream& is, const std::string& path, const char* what) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        throw ParseError(path + ": truncated while reading " + what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

/// Binary format VTRJ1: magic "VTRJ1", u32 LE frame count T, u32 LE
/// dimension d, f64 LE dt_per_frame, then T*d f64 LE values row-major.
inline void write_trajectory(const Trajectory& traj, const std::string& path,
                             TrajectoryFormat format = TrajectoryFormat::binary) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw IoError("cannot open " + path + " for writing");
    if (format == TrajectoryFormat::binary) {
        os.write("VTRJ1", 5);
        detail::put_u32(os, static_cast<std::uint32_t>(traj.length()));
        detail::put_u32(os, static_cast<std::uint32_t>(traj.dim()));
        detail::put_f64(os, traj.dt_per_frame);
        for (Index t = 0; t < traj.length(); ++t)
            for (Index j = 0; j < traj.dim(); ++j) detail::put_f64(os, traj.frames(t, j));
    } else {
        os.precision(17);
        for (Index t = 0; t < traj.length(); ++t) {
            for (Index j = 0; j < traj.dim(); ++j) {
                if (j) os << ',';
                os << traj.frames(t, j);
            }
            os << '\n';
        }
    }
    if (!os)
        throw IoError("write failed for " + path);
}

inline Trajectory read_trajectory(const std::string& path,
                                  TrajectoryFormat format = TrajectoryFormat::binary) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError("cannot open " + path);
    Trajectory traj;
    traj.label = std::filesystem::path(path).stem().string();
    if (format == TrajectoryFormat::binary) {
        char magic[5];
        if (!is.read(magic, 5) || std::memcmp(magic, "VTRJ1", 5) != 0)
            throw ParseError(path + ": bad magic, not a VTRJ1 file");
        const std::uint32_t rows = detail::get_u32(is, path);
        const std::uint32_t cols = detail::get_u32(is, path);
        traj.dt_per_frame = detail::get_f64(is, path, "dt_per_frame");
        if (rows < 2 || cols < 1)
            throw ParseError(path + ": degenerate shape " + std::to_string(rows) + "x" +
                             std::to_string(cols));
        traj.frames.resize(rows, cols);
        for (std::uint32_t t = 0; t < rows; ++t)
            for (std::uint32_t j = 0; j < cols; ++j)
                traj.frames(t, j) = detail::get_f64(is, path, "frame data");
        if (is.peek() != EOF)
            throw ParseError(path + ": trailing bytes after frame data");
    } else {
        std::vector<std::vector<double>> rows;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            std::size_t start = line.find_first_not_of(" \t\r");
            if (start == std::string::npos || line[start] == '#') continue;
            std::vector<double> row;
            const char* p = line.data() + start;
            const char* end = line.data() + line.size();
            while (p < end && *p != '\r') {
                double v;
                auto [next, ec] = std::from_chars(p, end, v);
                if (ec != std::errc())
                    throw ParseError(path + ": line " + std::to_string(lineno) +
                                     ": cannot parse number");
                if (!std::isfinite(v))
                    throw ParseError(path + ": line " + std::to_string(lineno) +
                                     ": non-finite value");
                row.push_back(v);
                p = next;
                while (p < end && (*p == ' ' || *p == '\t')) ++p;
                if (p < end && *p == ',') {
                    ++p;
                    while (p < end && (*p == ' ' || *p == '\t')) ++p;
                }
            }
            if (!rows.empty() && row.size() != rows.front().size())
                throw ParseError(path + ": line " + std::to_string(lineno) + ": expected " +
                                 std::to_string(rows.front().size()) + " columns, got " +
                                 std::to_string(row.size()));
            rows.push_back(std::move(row));
        }
        if (rows.size() < 2)
            throw ParseError(path + ": trajectory needs at least 2 frames, got " +
                             std::to_string(rows.size()));
        traj.frames.resize(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
        for (std::size_t t = 0; t < rows.size(); ++t)
            for (std::size_t j = 0; j < rows.front().size(); ++j)
                traj.frames(static_cast<Index>(t), static_cast<Index>(j)) = rows[t][j];
    }
    if (!traj.frames.allFinite())
        throw ParseError(path + ": non-finite values in frame data");
    return traj;
}

}  // namespace vampnet
