#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "saoc/errors.hpp"
#include "saoc/geometry.hpp"

namespace saoc {

struct TriMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int64_t, 3>> faces;

    bool empty() const { return faces.empty(); }

    void validate() const {
        for (const auto& v : vertices)
            if (!v.finite()) throw ContractError("mesh holds a non-finite vertex");
        for (const auto& f : faces) {
            for (int64_t idx : f)
                if (idx < 0 || idx >= static_cast<int64_t>(vertices.size()))
                    throw IndexError("mesh face index out of range");
            if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2])
                throw ContractError("mesh holds a degenerate face");
        }
    }
};

// Undirected edges referenced by exactly one face. Zero for watertight
// interior surfaces.
inline int64_t boundary_edge_count(const TriMesh& mesh) {
    std::map<std::pair<int64_t, int64_t>, int> uses;
    for (const auto& f : mesh.faces)
        for (int e = 0; e < 3; ++e) {
            int64_t a = f[static_cast<size_t>(e)], b = f[static_cast<size_t>((e + 1) % 3)];
            if (a > b) std::swap(a, b);
            uses[{a, b}]++;
        }
    int64_t boundary = 0;
    for (const auto& [edge, n] : uses)
        if (n == 1) ++boundary;
    return boundary;
}

inline int64_t euler_characteristic(const TriMesh& mesh) {
    std::unordered_set<int64_t> used_vertices;
    std::map<std::pair<int64_t, int64_t>, int> edges;
    for (const auto& f : mesh.faces)
        for (int e = 0; e < 3; ++e) {
            used_vertices.insert(f[static_cast<size_t>(e)]);
            int64_t a = f[static_cast<size_t>(e)], b = f[static_cast<size_t>((e + 1) % 3)];
            if (a > b) std::swap(a, b);
            edges[{a, b}]++;
        }
    return static_cast<int64_t>(used_vertices.size()) - static_cast<int64_t>(edges.size()) +
           static_cast<int64_t>(mesh.faces.size());
}

namespace mc {

// Corner c sits at ((c>>0)&1, (c>>1)&1, (c>>2)&1).
// Edges 0..3 run along x, 4..7 along y, 8..11 along z.
inline constexpr int kEdgeCorner[12][2] = {{0, 1}, {2, 3}, {4, 5}, {6, 7},
                                           {0, 2}, {1, 3}, {4, 6}, {5, 7},
                                           {0, 4}, {1, 5}, {2, 6}, {3, 7}};
inline constexpr int kEdgeAxis[12] = {0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2};

// 256-case triangle table, derived at startup by tracing the iso-surface
// polygons of every sign configuration. On each cube face the crossings of
// every maximal run of inside corners are joined by one chord, so an
// ambiguous face (diagonal pattern) always caps its two inside corners
// separately. The pairing depends only on the face's own corner signs, which
// both adjacent cubes share, so patches agree across faces and interior
// surfaces come out closed.
class Tables {
public:
    static const Tables& get() {
        static const Tables t;
        return t;
    }

    const std::vector<std::array<int, 3>>& triangles(int config) const {
        return tris_[static_cast<size_t>(config)];
    }

private:
    Tables() {
        // face loops in CCW order as seen from outside the cube
        struct Face {
            std::array<int, 4> loop;
        };
        std::array<Face, 6> faces;
        int fi = 0;
        for (int axis = 0; axis < 3; ++axis) {
            const int u = (axis + 1) % 3, v = (axis + 2) % 3;
            for (int side = 0; side < 2; ++side) {
                // side 1: (u,v) = (0,0),(1,0),(1,1),(0,1); side 0 reversed
                const int uv1[4][2] = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
                const int uv0[4][2] = {{0, 0}, {0, 1}, {1, 1}, {1, 0}};
                Face f{};
                for (int i = 0; i < 4; ++i) {
                    const int* uv = side ? uv1[i] : uv0[i];
                    int corner = 0;
                    if (side) corner |= 1 << axis;
                    if (uv[0]) corner |= 1 << u;
                    if (uv[1]) corner |= 1 << v;
                    f.loop[static_cast<size_t>(i)] = corner;
                }
                faces[static_cast<size_t>(fi++)] = f;
            }
        }

        auto edge_of = [](int a, int b) {
            for (int e = 0; e < 12; ++e)
                if ((kEdgeCorner[e][0] == a && kEdgeCorner[e][1] == b) ||
                    (kEdgeCorner[e][0] == b && kEdgeCorner[e][1] == a))
                    return e;
            return -1;
        };

        for (int config = 0; config < 256; ++config) {
            // directed chords: for each maximal inside arc on a face, go from
            // the arc's exit crossing back to its entry crossing
            std::array<int, 12> next;
            next.fill(-1);
            for (const Face& f : faces) {
                int entry_pos[4], exit_pos[4], n_entry = 0, n_exit = 0;
                for (int i = 0; i < 4; ++i) {
                    const int a = f.loop[static_cast<size_t>(i)];
                    const int b = f.loop[static_cast<size_t>((i + 1) % 4)];
                    const bool ia = (config >> a) & 1, ib = (config >> b) & 1;
                    if (ia && !ib) exit_pos[n_exit++] = i;
                    else if (!ia && ib) entry_pos[n_entry++] = i;
                }
                for (int e = 0; e < n_entry; ++e) {
                    const int i = entry_pos[e];
                    // next transition after the entry is the arc's exit
                    int best = -1, best_d = 5;
                    for (int x = 0; x < n_exit; ++x) {
                        const int d = ((exit_pos[x] - i) + 4) % 4;
                        if (d > 0 && d < best_d) {
                            best_d = d;
                            best = exit_pos[x];
                        }
                    }
                    const int entry_edge = edge_of(f.loop[static_cast<size_t>(i)],
                                                   f.loop[static_cast<size_t>((i + 1) % 4)]);
                    const int exit_edge = edge_of(f.loop[static_cast<size_t>(best)],
                                                  f.loop[static_cast<size_t>((best + 1) % 4)]);
                    next[static_cast<size_t>(exit_edge)] = entry_edge;
                }
            }
            // trace cycles, fan-triangulate; order reversed so normals point
            // toward decreasing occupancy
            std::array<bool, 12> seen{};
            for (int start = 0; start < 12; ++start) {
                if (next[static_cast<size_t>(start)] < 0 || seen[static_cast<size_t>(start)])
                    continue;
                std::vector<int> cycle;
                int cur = start;
                do {
                    cycle.push_back(cur);
                    seen[static_cast<size_t>(cur)] = true;
                    cur = next[static_cast<size_t>(cur)];
                } while (cur != start);
                for (size_t i = 1; i + 1 < cycle.size(); ++i)
                    tris_[static_cast<size_t>(config)].push_back(
                        {cycle[0], cycle[i + 1], cycle[i]});
            }
        }
    }

    std::array<std::vector<std::array<int, 3>>, 256> tris_;
};

}  // namespace mc

// Standard marching cubes over a lattice of occupancy values (dims = lattice
// points per axis). Vertices interpolate edge crossings linearly and are
// deduplicated by exact lattice-edge key.
inline TriMesh marching_cubes(const std::vector<double>& grid, std::array<int64_t, 3> dims,
                              double iso, double cell_size, Vec3 origin = {}) {
    const int64_t nx = dims[0], ny = dims[1], nz = dims[2];
    if (nx < 2 || ny < 2 || nz < 2)
        throw DimensionError("marching_cubes: lattice needs >= 2 points per axis");
    if (static_cast<int64_t>(grid.size()) != nx * ny * nz)
        throw DimensionError("marching_cubes: grid size does not match dims");
    for (double v : grid)
        if (!std::isfinite(v)) throw ContractError("marching_cubes: non-finite grid value");

    const auto& tables = mc::Tables::get();
    auto at = [&](int64_t i, int64_t j, int64_t k) {
        return grid[static_cast<size_t>((i * ny + j) * nz + k)];
    };

    TriMesh mesh;
    std::unordered_map<int64_t, int64_t> vertex_of_edge;
    const int64_t plane = (ny + 1) * (nz + 1);  // key stride, generous bound

    auto vertex_id = [&](int64_t ci, int64_t cj, int64_t ck, int edge) {
        const int a = mc::kEdgeCorner[edge][0];
        const int axis = mc::kEdgeAxis[edge];
        const int64_t bi = ci + (a & 1), bj = cj + ((a >> 1) & 1), bk = ck + ((a >> 2) & 1);
        const int64_t key = ((static_cast<int64_t>(axis) * (nx + 1) + bi) * plane) +
                            bj * (nz + 1) + bk;
        auto it = vertex_of_edge.find(key);
        if (it != vertex_of_edge.end()) return it->second;
        // work in differences from iso so adding a constant to both the grid
        // and the iso value cannot change anything
        const double da = at(bi, bj, bk) - iso;
        const int64_t oi = bi + (axis == 0), oj = bj + (axis == 1), ok = bk + (axis == 2);
        const double db = at(oi, oj, ok) - iso;
        const double t = da / (da - db);
        Vec3 p{origin.x + cell_size * (static_cast<double>(bi) + (axis == 0 ? t : 0.0)),
               origin.y + cell_size * (static_cast<double>(bj) + (axis == 1 ? t : 0.0)),
               origin.z + cell_size * (static_cast<double>(bk) + (axis == 2 ? t : 0.0))};
        const int64_t id = static_cast<int64_t>(mesh.vertices.size());
        mesh.vertices.push_back(p);
        vertex_of_edge.emplace(key, id);
        return id;
    };

    for (int64_t i = 0; i + 1 < nx; ++i)
        for (int64_t j = 0; j + 1 < ny; ++j)
            for (int64_t k = 0; k + 1 < nz; ++k) {
                int config = 0;
                for (int c = 0; c < 8; ++c)
                    if (at(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)) - iso >= 0.0)
                        config |= 1 << c;
                if (config == 0 || config == 255) continue;
                for (const auto& tri : tables.triangles(config)) {
                    const int64_t v0 = vertex_id(i, j, k, tri[0]);
                    const int64_t v1 = vertex_id(i, j, k, tri[1]);
                    const int64_t v2 = vertex_id(i, j, k, tri[2]);
                    if (v0 == v1 || v1 == v2 || v0 == v2) continue;  // zero-length crossing
                    mesh.faces.push_back({v0, v1, v2});
                }
            }
    return mesh;
}

inline TriMesh marching_cubes(const std::vector<double>& grid, int64_t lattice, double iso,
                              double cell_size, Vec3 origin = {}) {
    return marching_cubes(grid, {lattice, lattice, lattice}, iso, cell_size, origin);
}

struct MiseConfig {
    int64_t initial_res = 32;
    int64_t final_res = 128;
    double iso = 0.5;

    void validate() const {
        if (initial_res < 2 || final_res < initial_res)
            throw ContractError("mise: need 2 <= initial_res <= final_res");
        int64_t r = initial_res;
        while (r < final_res) r *= 2;
        if (r != final_res)
            throw ContractError("mise: final_res must be initial_res * 2^k");
    }
};

struct MiseResult {
    TriMesh mesh;
    int64_t evaluations = 0;
};

using BatchQuery = std::function<std::vector<double>(const std::vector<Vec3>&)>;

// Multiresolution iso-surface extraction: evaluate a coarse lattice, refine
// only cells whose corners straddle the iso value (plus one ring of face
// neighbors as a safety margin), and let unevaluated fine lattice points
// inherit their floor coarse ancestor's value. Features thinner than one
// initial-resolution cell can be missed, matching the underlying algorithm.
inline MiseResult mise(const BatchQuery& query, const MiseConfig& cfg, const Box3& domain) {
    cfg.validate();
    if (domain.degenerate()) throw ContractError("mise: degenerate domain");
    const int64_t F = cfg.final_res;
    const int64_t L = F + 1;
    const Vec3 ext = domain.extent();
    const double cell = ext.x / static_cast<double>(F);

    std::vector<double> val(static_cast<size_t>(L * L * L), 0.0);
    std::vector<uint8_t> known(static_cast<size_t>(L * L * L), 0);
    auto flat = [L](int64_t i, int64_t j, int64_t k) { return (i * L + j) * L + k; };
    auto pos = [&](int64_t i, int64_t j, int64_t k) {
        return Vec3{domain.lo.x + ext.x * static_cast<double>(i) / static_cast<double>(F),
                    domain.lo.y + ext.y * static_cast<double>(j) / static_cast<double>(F),
                    domain.lo.z + ext.z * static_cast<double>(k) / static_cast<double>(F)};
    };

    int64_t evaluations = 0;
    auto evaluate = [&](const std::vector<std::array<int64_t, 3>>& idx) {
        if (idx.empty()) return;
        std::vector<Vec3> coords;
        coords.reserve(idx.size());
        for (const auto& p : idx) coords.push_back(pos(p[0], p[1], p[2]));
        const std::vector<double> out = query(coords);
        if (out.size() != idx.size()) throw ContractError("mise: query returned wrong count");
        for (size_t n = 0; n < idx.size(); ++n) {
            const auto& p = idx[n];
            val[static_cast<size_t>(flat(p[0], p[1], p[2]))] = out[n];
            known[static_cast<size_t>(flat(p[0], p[1], p[2]))] = 1;
        }
        evaluations += static_cast<int64_t>(idx.size());
    };

    // inherited lookup: walk to coarser lattices (floor) until a known point
    auto value_at = [&](int64_t i, int64_t j, int64_t k, int64_t stride) {
        int64_t s = stride;
        while (!known[static_cast<size_t>(flat(i, j, k))]) {
            s *= 2;
            i = (i / s) * s;
            j = (j / s) * s;
            k = (k / s) * s;
        }
        return val[static_cast<size_t>(flat(i, j, k))];
    };

    // initial lattice
    int64_t res = cfg.initial_res;
    int64_t stride = F / res;
    {
        std::vector<std::array<int64_t, 3>> idx;
        for (int64_t i = 0; i <= res; ++i)
            for (int64_t j = 0; j <= res; ++j)
                for (int64_t k = 0; k <= res; ++k)
                    idx.push_back({i * stride, j * stride, k * stride});
        evaluate(idx);
    }

    std::vector<std::array<int64_t, 3>> cells;  // cell indices at current res
    cells.reserve(static_cast<size_t>(res * res * res));
    for (int64_t i = 0; i < res; ++i)
        for (int64_t j = 0; j < res; ++j)
            for (int64_t k = 0; k < res; ++k) cells.push_back({i, j, k});

    while (res < F) {
        // straddling cells among the candidates
        auto straddles = [&](const std::array<int64_t, 3>& c) {
            bool lo = false, hi = false;
            for (int b = 0; b < 8; ++b) {
                const double v = value_at((c[0] + (b & 1)) * stride,
                                          (c[1] + ((b >> 1) & 1)) * stride,
                                          (c[2] + ((b >> 2) & 1)) * stride, stride);
                (v >= cfg.iso ? hi : lo) = true;
            }
            return lo && hi;
        };
        std::unordered_set<int64_t> active;
        auto cell_key = [res](const std::array<int64_t, 3>& c) {
            return (c[0] * res + c[1]) * res + c[2];
        };
        std::vector<std::array<int64_t, 3>> active_list;
        for (const auto& c : cells)
            if (straddles(c)) {
                if (active.insert(cell_key(c)).second) active_list.push_back(c);
                // dilate by face neighbors
                for (int a = 0; a < 3; ++a)
                    for (int d = -1; d <= 1; d += 2) {
                        auto n = c;
                        n[static_cast<size_t>(a)] += d;
                        if (n[static_cast<size_t>(a)] < 0 || n[static_cast<size_t>(a)] >= res)
                            continue;
                        if (active.insert(cell_key(n)).second) active_list.push_back(n);
                    }
            }

        // evaluate the refined lattice points inside active cells
        const int64_t half = stride / 2;
        std::vector<std::array<int64_t, 3>> fresh;
        for (const auto& c : active_list)
            for (int64_t di = 0; di <= 2; ++di)
                for (int64_t dj = 0; dj <= 2; ++dj)
                    for (int64_t dk = 0; dk <= 2; ++dk) {
                        const int64_t i = c[0] * stride + di * half;
                        const int64_t j = c[1] * stride + dj * half;
                        const int64_t k = c[2] * stride + dk * half;
                        if (!known[static_cast<size_t>(flat(i, j, k))]) {
                            known[static_cast<size_t>(flat(i, j, k))] = 2;  // pending
                            fresh.push_back({i, j, k});
                        }
                    }
        for (const auto& p : fresh) known[static_cast<size_t>(flat(p[0], p[1], p[2]))] = 0;
        evaluate(fresh);

        // next level works on the children of the active cells
        std::vector<std::array<int64_t, 3>> next_cells;
        next_cells.reserve(active_list.size() * 8);
        for (const auto& c : active_list)
            for (int b = 0; b < 8; ++b)
                next_cells.push_back(
                    {2 * c[0] + (b & 1), 2 * c[1] + ((b >> 1) & 1), 2 * c[2] + ((b >> 2) & 1)});
        cells = std::move(next_cells);
        res *= 2;
        stride = half;
    }

    // assemble the dense grid with inheritance for everything unevaluated
    for (int64_t i = 0; i <= F; ++i)
        for (int64_t j = 0; j <= F; ++j)
            for (int64_t k = 0; k <= F; ++k)
                if (!known[static_cast<size_t>(flat(i, j, k))])
                    val[static_cast<size_t>(flat(i, j, k))] = value_at(i, j, k, 1);

    MiseResult out;
    out.evaluations = evaluations;
    out.mesh = marching_cubes(val, {L, L, L}, cfg.iso, cell, domain.lo);
    return out;
}

}  // namespace saoc
