#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "vampnet/errors.hpp"
#include "vampnet/linalg.hpp"
#include "vampnet/rng.hpp"
#include "vampnet/trajectory.hpp"

namespace vampnet {

/// The two model potentials. Both are fully fixed; there are no free
/// parameters.
///
///   DoubleWell1D:     U(x) = x^4 - 6x^2 + 2x
///   RadialFolding5D:  U(r) = -2.5 (r-3)^2            for r < 3
///                            0.5 (r-3)^3 - (r-3)^2   for r >= 3,   r = |x|
enum class PotentialKind { DoubleWell1D, RadialFolding5D };

struct PotentialSpec {
    PotentialKind kind = PotentialKind::DoubleWell1D;

    Index dim() const { return kind == PotentialKind::DoubleWell1D ? 1 : 5; }
};

/// Over-damped Langevin (Brownian dynamics) integration settings.
/// `n_steps` is the number of recorded frames; with `stride` > 1 each frame
/// advances `stride` integrator steps, so the time per frame is dt * stride.
struct BDConfig {
    double dt = 0.01;
    double diffusion = 1.0;
    double kT = 1.0;
    Index n_steps = 1;
    Vector x0;
    std::uint64_t seed = 0;
    Index burn_in = 0;
    Index stride = 1;
};

inline double potential_energy(const PotentialSpec& spec, const Vector& x) {
    if (x.size() != spec.dim())
        throw DimensionError("potential_energy: position has dimension " +
                             std::to_string(x.size()) + ", potential expects " +
                             std::to_string(spec.dim()));
    if (spec.kind == PotentialKind::DoubleWell1D) {
        const double v = x(0);
        return v * v * v * v - 6.0 * v * v + 2.0 * v;
    }
    const double r = x.norm();
    const double s = r - 3.0;
    if (r < 3.0) return -2.5 * s * s;
    return 0.5 * s * s * s - s * s;
}

inline Vector potential_gradient(const PotentialSpec& spec, const Vector& x) {
    if (x.size() != spec.dim())
        throw DimensionError("potential_gradient: position has dimension " +
                             std::to_string(x.size()) + ", potential expects " +
                             std::to_string(spec.dim()));
    if (spec.kind == PotentialKind::DoubleWell1D) {
        const double v = x(0);
        Vector g(1);
        g(0) = 4.0 * v * v * v - 12.0 * v + 2.0;
        return g;
    }
    const double r = x.norm();
    if (r == 0.0) return Vector::Zero(x.size());  // dU/dr has no direction at the origin
    const double s = r - 3.0;
    const double du_dr = (r < 3.0) ? -5.0 * s : 1.5 * s * s - 2.0 * s;
    return (du_dr / r) * x;
}

/// One forward-Euler step with an injected standard-normal vector w:
///   x' = x - dt * grad U(x)/kT + sqrt(2 dt D) * w
inline Vector bd_step(const PotentialSpec& spec, const Vector& x, double dt, double diffusion,
                      double kT, const Vector& w) {
    return x - (dt / kT) * potential_gradient(spec, x) + std::sqrt(2.0 * dt * diffusion) * w;
}

namespace detail {

template <typename GradFn>
Matrix integrate_bd(GradFn&& grad, Index dim, const BDConfig& cfg, const Vector& x0) {
    if (cfg.dt <= 0.0) throw DomainError("bd_trajectory: dt must be positive");
    if (cfg.diffusion <= 0.0) throw DomainError("bd_trajectory: diffusion must be positive");
    if (cfg.kT <= 0.0) throw DomainError("bd_trajectory: kT must be positive");
    if (cfg.n_steps < 1) throw DomainError("bd_trajectory: n_steps must be >= 1");
    if (cfg.stride < 1) throw DomainError("bd_trajectory: stride must be >= 1");

    Rng rng(cfg.seed);
    const double noise = std::sqrt(2.0 * cfg.dt * cfg.diffusion);
    const double drift = cfg.dt / cfg.kT;
    Vector x = x0;
    Vector w(dim);

    auto advance = [&](Index steps, Index frame) {
        for (Index s = 0; s < steps; ++s) {
            Vector g = grad(x);
            for (Index j = 0; j < dim; ++j) w(j) = rng.normal();
            x = x - drift * g + noise * w;
            if (!x.allFinite())
                throw NumericalError("bd_trajectory: non-finite state at recorded step " +
                                     std::to_string(frame) + ", integrator substep " +
                                     std::to_string(s));
        }
    };

    advance(cfg.burn_in, -1);
    Matrix frames(cfg.n_steps, dim);
    frames.row(0) = x.transpose();
    for (Index t = 1; t < cfg.n_steps; ++t) {
        advance(cfg.stride, t);
        frames.row(t) = x.transpose();
    }
    return frames;
}

}  // namespace detail

/// Generate a Brownian-dynamics trajectory. Identical seeds give
/// bit-identical trajectories. Frame 0 is the (post burn-in) initial state.
inline Trajectory bd_trajectory(const PotentialSpec& spec, const BDConfig& cfg) {
    Vector x0 = cfg.x0;
    if (x0.size() == 0) {
        x0 = Vector::Zero(spec.dim());
        if (spec.kind == PotentialKind::DoubleWell1D)
            x0(0) = -1.7;
        else
            x0(0) = 3.0;
    }
    if (x0.size() != spec.dim())
        throw DimensionError("bd_trajectory: x0 has dimension " + std::to_string(x0.size()) +
                             ", potential expects " + std::to_string(spec.dim()));
    Trajectory traj;
    traj.frames = detail::integrate_bd([&](const Vector& x) { return potential_gradient(spec, x); },
                                       spec.dim(), cfg, x0);
    traj.dt_per_frame = cfg.dt * static_cast<double>(cfg.stride);
    traj.label = spec.kind == PotentialKind::DoubleWell1D ? "doublewell" : "folding5d";
    return traj;
}

}  // namespace vampnet
