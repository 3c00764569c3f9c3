#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "saoc/errors.hpp"
#include "saoc/geometry.hpp"
#include "saoc/meshing.hpp"
#include "saoc/network.hpp"
#include "saoc/parallel.hpp"
#include "saoc/pipeline.hpp"

namespace saoc {

// Index ranges over the global occupancy lattice (global_res + 1 points per
// axis). Cores tile the lattice exactly; inputs are cores dilated by the
// margin and clipped to the lattice.
struct Window {
    std::array<int64_t, 3> core_lo{}, core_hi{};  // half-open lattice ranges
    std::array<int64_t, 3> in_lo{}, in_hi{};
};

struct WindowPlan {
    int64_t global_res = 0;  // lattice has global_res + 1 points per axis
    int64_t core = 0;
    int64_t margin = 0;
    std::vector<Window> windows;
};

inline WindowPlan plan_windows(int64_t global_res, int64_t core, int64_t margin) {
    if (global_res < 1 || core < 1 || margin < 0)
        throw ContractError("plan_windows: need global_res >= 1, core >= 1, margin >= 0");
    WindowPlan plan;
    plan.global_res = global_res;
    plan.core = core;
    plan.margin = margin;
    const int64_t lattice = global_res + 1;
    const int64_t tiles = (lattice + core - 1) / core;  // last tile truncated
    for (int64_t tx = 0; tx < tiles; ++tx)
        for (int64_t ty = 0; ty < tiles; ++ty)
            for (int64_t tz = 0; tz < tiles; ++tz) {
                Window w;
                const int64_t t3[3] = {tx, ty, tz};
                for (int a = 0; a < 3; ++a) {
                    w.core_lo[static_cast<size_t>(a)] = t3[a] * core;
                    w.core_hi[static_cast<size_t>(a)] = std::min(lattice, (t3[a] + 1) * core);
                    w.in_lo[static_cast<size_t>(a)] =
                        std::max<int64_t>(0, w.core_lo[static_cast<size_t>(a)] - margin);
                    w.in_hi[static_cast<size_t>(a)] =
                        std::min(lattice, w.core_hi[static_cast<size_t>(a)] + margin);
                }
                plan.windows.push_back(w);
            }
    return plan;
}

inline std::string plan_to_text(const WindowPlan& plan) {
    std::ostringstream os;
    os << "global_res " << plan.global_res << " core " << plan.core << " margin " << plan.margin
       << " windows " << plan.windows.size() << "\n";
    for (const auto& w : plan.windows) {
        os << "core [" << w.core_lo[0] << "," << w.core_hi[0] << ")x[" << w.core_lo[1] << ","
           << w.core_hi[1] << ")x[" << w.core_lo[2] << "," << w.core_hi[2] << ")  input ["
           << w.in_lo[0] << "," << w.in_hi[0] << ")x[" << w.in_lo[1] << "," << w.in_hi[1] << ")x["
           << w.in_lo[2] << "," << w.in_hi[2] << ")\n";
    }
    return os.str();
}

struct SceneResult {
    TriMesh mesh;
    std::vector<double> grid;  // assembled occupancy lattice
    int64_t empty_windows = 0;
};

// Crop, optimize (or feed forward), and evaluate each window independently,
// writing only its core lattice points; one marching-cubes pass afterwards.
// The cloud must already live in the unit cube. Windows with no points leave
// their core at occupancy 0 (free space).
inline SceneResult reconstruct_scene(const ConvOccNet& model, const PointCloud& pc,
                                     const WindowPlan& plan, const SAOptConfig* sa_cfg,
                                     uint64_t seed = 0) {
    if (pc.points.empty()) throw ContractError("reconstruct_scene: point cloud is empty");
    if (plan.windows.empty()) throw ContractError("reconstruct_scene: empty window plan");
    const int64_t G = plan.global_res;
    const int64_t L = G + 1;
    const double voxel = 1.0 / static_cast<double>(G);
    const int64_t align = int64_t(1) << model.cfg.unet_depth;
    if (G % align != 0)
        throw ContractError("reconstruct_scene: global_res must be divisible by 2^unet_depth");

    SceneResult out;
    out.grid.assign(static_cast<size_t>(L * L * L), 0.0);
    std::vector<int64_t> empties(plan.windows.size(), 0);

    parallel_for(static_cast<int64_t>(plan.windows.size()), [&](int64_t wi) {
        const Window& w = plan.windows[static_cast<size_t>(wi)];
        // feature-voxel range: cover the input lattice points, then round
        // outward so the pooling blocks align with the global lattice
        std::array<int64_t, 3> vlo{}, vhi{};
        std::array<int64_t, 3> res{};
        for (int a = 0; a < 3; ++a) {
            int64_t lo = w.in_lo[static_cast<size_t>(a)];
            int64_t hi = std::max(lo + 1, w.in_hi[static_cast<size_t>(a)] - 1);
            lo = (lo / align) * align;
            hi = ((hi + align - 1) / align) * align;
            hi = std::min(hi, G);
            lo = std::min(lo, hi - align);
            vlo[static_cast<size_t>(a)] = lo;
            vhi[static_cast<size_t>(a)] = hi;
            res[static_cast<size_t>(a)] = hi - lo;
        }
        const Box3 box{{vlo[0] * voxel, vlo[1] * voxel, vlo[2] * voxel},
                       {vhi[0] * voxel, vhi[1] * voxel, vhi[2] * voxel}};

        PointCloud local;
        for (const auto& p : pc.points)
            if (box.contains(p)) local.points.push_back(p);

        std::vector<Vec3> cores;
        for (int64_t i = w.core_lo[0]; i < w.core_hi[0]; ++i)
            for (int64_t j = w.core_lo[1]; j < w.core_hi[1]; ++j)
                for (int64_t k = w.core_lo[2]; k < w.core_hi[2]; ++k)
                    cores.push_back({i * voxel, j * voxel, k * voxel});

        if (local.points.empty()) {
            empties[static_cast<size_t>(wi)] = 1;
            return;  // grid already holds occupancy 0
        }

        ConvOccNet work = model.clone();
        if (sa_cfg) {
            SAOptConfig cfg = *sa_cfg;
            cfg.seed = Rng::stream(seed, static_cast<uint64_t>(wi)).next_u64();
            sa_optimize(work, local, cfg, box, res);
        }

        Tape t;
        BoundParams bp = bind_params(t, work, BindMode::frozen);
        const auto frame = detail::GridFrame::make(box, res);
        Tape::Id vol = encode_on_tape(t, bp, work.cfg, local, frame);
        Tape::Id occ = t.sigmoid(query_logits_on_tape(t, bp, work.cfg, vol, frame, cores));
        const auto& values = t.value(occ);

        size_t n = 0;
        for (int64_t i = w.core_lo[0]; i < w.core_hi[0]; ++i)
            for (int64_t j = w.core_lo[1]; j < w.core_hi[1]; ++j)
                for (int64_t k = w.core_lo[2]; k < w.core_hi[2]; ++k)
                    out.grid[static_cast<size_t>((i * L + j) * L + k)] = values[n++];
    });

    for (int64_t e : empties) out.empty_windows += e;
    out.mesh = marching_cubes(out.grid, {L, L, L}, 0.5, voxel, {0.0, 0.0, 0.0});
    return out;
}

}  // namespace saoc
