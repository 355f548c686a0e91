#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "flowgen/errors.hpp"
#include "flowgen/mesh.hpp"
#include "flowgen/rng.hpp"

namespace flowgen {

/// Desk-scale unstructured mesh for the wake generator: a jittered lattice over
/// [-4,30] x [-5,5] with cells inside the cylinder (r < 0.7) removed and
/// 4-neighborhood adjacency in both directions.
inline std::shared_ptr<Mesh> make_wake_mesh(std::size_t nx, std::size_t ny, std::uint64_t seed) {
    if (nx < 4 || ny < 4) throw ContractError("wake mesh needs nx, ny >= 4");
    Rng rng(seed);
    const double x0 = -4.0, x1 = 30.0, y0 = -5.0, y1 = 5.0;
    const double hx = (x1 - x0) / static_cast<double>(nx);
    const double hy = (y1 - y0) / static_cast<double>(ny);

    std::vector<std::ptrdiff_t> cell_id(nx * ny, -1);
    std::vector<double> coords;
    std::size_t count = 0;
    for (std::size_t iy = 0; iy < ny; ++iy)
        for (std::size_t ix = 0; ix < nx; ++ix) {
            const double cx = x0 + (ix + 0.5) * hx + rng.uniform(-0.3, 0.3) * hx;
            const double cy = y0 + (iy + 0.5) * hy + rng.uniform(-0.3, 0.3) * hy;
            if (cx * cx + cy * cy < 0.7 * 0.7) continue; // inside the cylinder
            cell_id[iy * nx + ix] = static_cast<std::ptrdiff_t>(count++);
            coords.push_back(cx);
            coords.push_back(cy);
        }

    auto mesh = std::make_shared<Mesh>();
    mesh->centroids = Tensor(Shape{count, 2}, std::move(coords));
    for (std::size_t iy = 0; iy < ny; ++iy)
        for (std::size_t ix = 0; ix < nx; ++ix) {
            const auto a = cell_id[iy * nx + ix];
            if (a < 0) continue;
            auto link = [&](std::size_t jx, std::size_t jy) {
                const auto b = cell_id[jy * nx + jx];
                if (b >= 0) mesh->edges.emplace_back(static_cast<std::size_t>(b),
                                                     static_cast<std::size_t>(a));
            };
            if (ix + 1 < nx) link(ix + 1, iy);
            if (ix > 0) link(ix - 1, iy);
            if (iy + 1 < ny) link(ix, iy + 1);
            if (iy > 0) link(ix, iy - 1);
        }
    mesh->build_default_edge_features();
    mesh->validate();
    return mesh;
}

/// Analytic laminar-wake stand-in on an unstructured 2-D mesh: steady base flow
/// plus a downstream-advected oscillatory wake with shedding frequency
/// f(mu) = 0.05*mu1 cycles/step and decay length 8/mu1. Components (u, v, p).
inline MicroSequence gen_synthetic_wake(std::shared_ptr<const Mesh> mesh, const Params& mu,
                                        std::size_t n_len, std::uint64_t seed) {
    mu.validate();
    if (!mesh || mesh->dim() != 2) throw ContractError("wake generator requires a 2-D mesh");
    if (n_len == 0) throw ContractError("n_len must be >= 1");
    const double mu1 = mu.mu[0];
    if (mu1 < 0.5 || mu1 > 4.0)
        throw ContractError("wake generator expects mu1 in [0.5, 4.0]");

    const double freq = 0.05 * mu1;    // cycles per macro step
    const double decay = 8.0 / mu1;    // wake decay length
    Rng rng(seed);
    const double phase0 = rng.uniform(0.0, 2.0 * M_PI);

    const std::size_t nc = mesh->cell_count();
    const auto& c = mesh->centroids.raw();

    MicroSequence seq;
    seq.params = mu;
    seq.dt = 1.0;
    for (std::size_t t = 0; t < n_len; ++t) {
        Tensor f(Shape{nc, 3});
        auto& d = f.raw();
        for (std::size_t i = 0; i < nc; ++i) {
            const double x = c[2 * i], y = c[2 * i + 1];
            const double r2 = x * x + y * y;
            const double bump = std::exp(-r2 / 1.125); // 2*(0.75)^2
            const double base_u = 1.0 - 0.8 * bump;
            const double base_p = 0.6 * bump;
            double env = 0.0;
            if (x > 0.0) env = (1.0 - std::exp(-2.0 * x)) * std::exp(-x / decay);
            env *= std::exp(-0.5 * y * y);
            const double theta = 2.0 * M_PI * freq * (static_cast<double>(t) - x) + phase0;
            d[3 * i + 0] = base_u + 0.18 * env * std::sin(theta);
            d[3 * i + 1] = 0.30 * env * std::cos(theta);
            d[3 * i + 2] = base_p + 0.12 * env * std::sin(theta + 0.25 * M_PI);
        }
        seq.snapshots.push_back(MicroState::unstructured(std::move(f), mesh));
    }
    return seq;
}

/// Random-Fourier channel-flow stand-in on a structured grid. Streamwise
/// spectrum per row is E(k) = k^4 exp(-2 (k/k_p)^2) with k_p = 4*mu1, frozen
/// advection in time, mean profile m(y; mu) = mu1*y*(2-y)/10 on the first
/// component, and wall-damped fluctuation envelope. Components (u, v, w).
struct ChannelGenConfig {
    double fluc_scale = 0.02;  // per-component fluctuation std ~ fluc_scale*mu1
    double advect_cells = 1.5; // cells per macro step
    double uv_corr = -0.3;     // u'v' correlation
};

inline MicroSequence gen_synthetic_channel(std::size_t nh, std::size_t nw, const Params& mu,
                                           std::size_t n_len, std::uint64_t seed,
                                           const ChannelGenConfig& cfg = {}) {
    mu.validate();
    auto pow2 = [](std::size_t v) { return v >= 2 && (v & (v - 1)) == 0; };
    if (!pow2(nh) || !pow2(nw))
        throw ContractError("channel generator requires power-of-two extents");
    if (n_len == 0) throw ContractError("n_len must be >= 1");
    const double mu1 = mu.mu[0];
    if (mu1 < 0.5 || mu1 > 4.0)
        throw ContractError("channel generator expects mu1 in [0.5, 4.0]");

    const double kp = 4.0 * mu1;
    const std::size_t kmax = nw / 2 - 1;
    Rng rng(seed);

    // per-mode amplitudes: A_k^2/2 sums to unit variance, scaled later
    std::vector<double> amp(kmax + 1, 0.0);
    double total = 0.0;
    for (std::size_t k = 1; k <= kmax; ++k) {
        const double kk = static_cast<double>(k);
        const double e = std::pow(kk, 4.0) * std::exp(-2.0 * (kk / kp) * (kk / kp));
        amp[k] = e;
        total += e / 2.0;
    }
    const double sigma = cfg.fluc_scale * mu1;
    for (std::size_t k = 1; k <= kmax; ++k) amp[k] = std::sqrt(amp[k] / total) * sigma;

    // random per-mode phases and a smooth wall-normal phase modulation, one
    // set per component; v is phase-locked to u by uv_corr
    struct ModeSet {
        std::vector<double> phase, mod_amp, mod_phase;
    };
    auto draw_modes = [&]() {
        ModeSet m;
        m.phase.resize(kmax + 1);
        m.mod_amp.resize(kmax + 1);
        m.mod_phase.resize(kmax + 1);
        for (std::size_t k = 1; k <= kmax; ++k) {
            m.phase[k] = rng.uniform(0.0, 2.0 * M_PI);
            m.mod_amp[k] = rng.uniform(0.3, 1.0);
            m.mod_phase[k] = rng.uniform(0.0, 2.0 * M_PI);
        }
        return m;
    };
    const ModeSet mu_modes = draw_modes();
    const ModeSet mv_modes = draw_modes();
    const ModeSet mw_modes = draw_modes();

    const double rho = cfg.uv_corr;
    const double rho_c = std::sqrt(std::max(0.0, 1.0 - rho * rho));

    MicroSequence seq;
    seq.params = mu;
    seq.dt = 1.0;
    const double two_pi = 2.0 * M_PI;
    for (std::size_t t = 0; t < n_len; ++t) {
        Tensor f(Shape{nh, nw, 3});
        auto& d = f.raw();
        for (std::size_t iy = 0; iy < nh; ++iy) {
            const double y = (static_cast<double>(iy) + 0.5) / static_cast<double>(nh) * 2.0;
            const double mean_u = mu1 * y * (2.0 - y) / 10.0;
            const double env = std::sin(0.5 * M_PI * y); // fluc vanish at walls
            auto fluc = [&](const ModeSet& m, double x_cells) {
                double acc = 0.0;
                for (std::size_t k = 1; k <= kmax; ++k) {
                    const double ph = m.phase[k] + m.mod_amp[k] * std::sin(M_PI * y + m.mod_phase[k]);
                    acc += amp[k] * std::cos(two_pi * static_cast<double>(k) *
                                                 (x_cells - cfg.advect_cells * static_cast<double>(t)) /
                                                 static_cast<double>(nw) +
                                             ph);
                }
                return acc;
            };
            for (std::size_t ix = 0; ix < nw; ++ix) {
                const double x = static_cast<double>(ix);
                const double fu = fluc(mu_modes, x);
                const double fv = rho * fu + rho_c * fluc(mv_modes, x);
                const double fw = fluc(mw_modes, x);
                double* cell = d.data() + (iy * nw + ix) * 3;
                cell[0] = mean_u + env * fu;
                cell[1] = env * fv;
                cell[2] = env * fw;
            }
        }
        seq.snapshots.push_back(MicroState::structured(std::move(f)));
    }
    return seq;
}

} // namespace flowgen
