#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "saoc/geometry.hpp"
#include "saoc/meshing.hpp"
#include "saoc/rng.hpp"

using namespace saoc;

namespace {

// smooth occupancy field of a shape: ~1 inside, ~0 outside, 0.5 on surface
std::vector<double> occupancy_grid(const ShapeSpec& shape, int64_t R, double sharpness = 20.0) {
    std::vector<double> grid(static_cast<size_t>((R + 1) * (R + 1) * (R + 1)));
    for (int64_t i = 0; i <= R; ++i)
        for (int64_t j = 0; j <= R; ++j)
            for (int64_t k = 0; k <= R; ++k) {
                const Vec3 p{static_cast<double>(i) / R, static_cast<double>(j) / R,
                             static_cast<double>(k) / R};
                const double d = sdf(shape, p);
                grid[static_cast<size_t>(((i * (R + 1)) + j) * (R + 1) + k)] =
                    1.0 / (1.0 + std::exp(sharpness * d));
            }
    return grid;
}

std::vector<std::array<double, 9>> canonical_triangles(const TriMesh& m) {
    std::vector<std::array<double, 9>> tris;
    tris.reserve(m.faces.size());
    for (const auto& f : m.faces) {
        std::array<Vec3, 3> v{m.vertices[static_cast<size_t>(f[0])],
                              m.vertices[static_cast<size_t>(f[1])],
                              m.vertices[static_cast<size_t>(f[2])]};
        std::sort(v.begin(), v.end(), [](const Vec3& a, const Vec3& b) {
            if (a.x != b.x) return a.x < b.x;
            if (a.y != b.y) return a.y < b.y;
            return a.z < b.z;
        });
        tris.push_back({v[0].x, v[0].y, v[0].z, v[1].x, v[1].y, v[1].z, v[2].x, v[2].y, v[2].z});
    }
    std::sort(tris.begin(), tris.end());
    return tris;
}

}  // namespace

TEST(MarchingCubes, ConstantGridGivesEmptyMesh) {
    std::vector<double> grid(static_cast<size_t>(9 * 9 * 9), 0.2);
    const auto mesh = marching_cubes(grid, 9, 0.5, 1.0 / 8.0);
    EXPECT_TRUE(mesh.empty());
    EXPECT_TRUE(mesh.vertices.empty());
}

TEST(MarchingCubes, NonFiniteGridRejected) {
    std::vector<double> grid(static_cast<size_t>(3 * 3 * 3), 0.0);
    grid[5] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(marching_cubes(grid, 3, 0.5, 0.5), ContractError);
}

TEST(MarchingCubes, SphereFieldGeometryTopologyOrientation) {
    const int64_t R = 64;
    const double cell = 1.0 / static_cast<double>(R);
    const Vec3 c{0.5, 0.5, 0.5};
    const double r = 0.3;
    const auto grid = occupancy_grid(ShapeSpec::sphere(c, r), R);
    const auto mesh = marching_cubes(grid, R + 1, 0.5, cell);
    ASSERT_FALSE(mesh.empty());
    mesh.validate();

    for (const auto& v : mesh.vertices)
        EXPECT_LE(std::fabs((v - c).norm() - r), std::sqrt(3.0) * cell);

    EXPECT_EQ(boundary_edge_count(mesh), 0);
    EXPECT_EQ(euler_characteristic(mesh), 2);

    // occupancy decreases outward, so face normals must point away from c
    for (const auto& f : mesh.faces) {
        const Vec3 a = mesh.vertices[static_cast<size_t>(f[0])];
        const Vec3 b = mesh.vertices[static_cast<size_t>(f[1])];
        const Vec3 d = mesh.vertices[static_cast<size_t>(f[2])];
        const Vec3 n = (b - a).cross(d - a);
        const Vec3 centroid = (a + b + d) / 3.0;
        EXPECT_GT(n.dot(centroid - c), 0.0);
    }
}

TEST(MarchingCubes, InvariantUnderConstantShift) {
    const int64_t R = 16;
    auto grid = occupancy_grid(ShapeSpec::sphere({0.5, 0.5, 0.5}, 0.25), R);
    // quantize so the constant shift below is exactly representable
    for (auto& v : grid) v = std::round(v * 1048576.0) / 1048576.0;
    const auto base = marching_cubes(grid, R + 1, 0.5, 1.0 / R);
    for (auto& v : grid) v += 7.25;
    const auto shifted = marching_cubes(grid, R + 1, 0.5 + 7.25, 1.0 / R);
    const auto a = canonical_triangles(base);
    const auto b = canonical_triangles(shifted);
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i)
        for (int j = 0; j < 9; ++j) EXPECT_EQ(a[i][j], b[i][j]);
}

TEST(MarchingCubes, VerticesInterpolateIsoExactly) {
    const int64_t R = 16;
    const double cell = 1.0 / static_cast<double>(R);
    const auto grid = occupancy_grid(ShapeSpec::sphere({0.47, 0.52, 0.5}, 0.27), R);
    const auto mesh = marching_cubes(grid, R + 1, 0.5, cell);
    auto at = [&](int64_t i, int64_t j, int64_t k) {
        return grid[static_cast<size_t>((i * (R + 1) + j) * (R + 1) + k)];
    };
    for (const auto& v : mesh.vertices) {
        // locate the lattice edge this vertex lies on
        const double gi = v.x * R, gj = v.y * R, gk = v.z * R;
        int on_axis = -1;
        int64_t idx[3] = {static_cast<int64_t>(std::floor(gi + 1e-9)),
                          static_cast<int64_t>(std::floor(gj + 1e-9)),
                          static_cast<int64_t>(std::floor(gk + 1e-9))};
        const double frac[3] = {gi - std::floor(gi + 1e-9), gj - std::floor(gj + 1e-9),
                                gk - std::floor(gk + 1e-9)};
        int off_lattice = 0;
        for (int a = 0; a < 3; ++a)
            if (std::fabs(frac[a]) > 1e-9 && std::fabs(frac[a] - 1.0) > 1e-9) {
                ++off_lattice;
                on_axis = a;
            }
        ASSERT_LE(off_lattice, 1);
        if (on_axis < 0) continue;  // vertex exactly at a lattice point
        const double va = at(idx[0], idx[1], idx[2]);
        const double vb = at(idx[0] + (on_axis == 0), idx[1] + (on_axis == 1),
                             idx[2] + (on_axis == 2));
        EXPECT_TRUE((va >= 0.5) != (vb >= 0.5));
        const double t = frac[on_axis];
        EXPECT_NEAR(va + t * (vb - va), 0.5, 1e-12);
    }
}

TEST(MarchingCubes, RandomCsgFieldsAreWatertight) {
    for (uint64_t seed : {11ull, 22ull, 33ull, 44ull, 55ull}) {
        const auto shape = random_shape(seed);
        const auto grid = occupancy_grid(shape, 32);
        const auto mesh = marching_cubes(grid, 33, 0.5, 1.0 / 32.0);
        ASSERT_FALSE(mesh.empty());
        mesh.validate();
        EXPECT_EQ(boundary_edge_count(mesh), 0) << "seed " << seed;
    }
}

TEST(Mise, DegenerateRecursionEqualsDenseMarchingCubes) {
    const auto shape = ShapeSpec::sphere({0.5, 0.5, 0.5}, 0.3);
    const int64_t R = 32;
    auto query = [&](const std::vector<Vec3>& pts) {
        std::vector<double> out;
        out.reserve(pts.size());
        for (const auto& p : pts) out.push_back(1.0 / (1.0 + std::exp(20.0 * sdf(shape, p))));
        return out;
    };
    MiseConfig cfg;
    cfg.initial_res = R;
    cfg.final_res = R;
    const auto res = mise(query, cfg, unit_box());
    EXPECT_EQ(res.evaluations, (R + 1) * (R + 1) * (R + 1));

    const auto dense = marching_cubes(occupancy_grid(shape, R), R + 1, 0.5, 1.0 / R);
    const auto a = canonical_triangles(res.mesh);
    const auto b = canonical_triangles(dense);
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i)
        for (int j = 0; j < 9; ++j) EXPECT_NEAR(a[i][j], b[i][j], 1e-15);
}

TEST(Mise, RefinementMatchesDenseAndSavesEvaluations) {
    const auto shape = ShapeSpec::sphere({0.5, 0.5, 0.5}, 0.3);
    auto query = [&](const std::vector<Vec3>& pts) {
        std::vector<double> out;
        out.reserve(pts.size());
        for (const auto& p : pts) out.push_back(1.0 / (1.0 + std::exp(20.0 * sdf(shape, p))));
        return out;
    };
    MiseConfig cfg;
    cfg.initial_res = 32;
    cfg.final_res = 128;
    const auto res = mise(query, cfg, unit_box());

    const auto dense = marching_cubes(occupancy_grid(shape, 128), 129, 0.5, 1.0 / 128.0);
    const auto a = canonical_triangles(res.mesh);
    const auto b = canonical_triangles(dense);
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i)
        for (int j = 0; j < 9; ++j) EXPECT_NEAR(a[i][j], b[i][j], 1e-9);

    EXPECT_LT(res.evaluations, (129ll * 129 * 129) * 2 / 5);
}

TEST(Mise, InvalidResolutionsRejected) {
    MiseConfig cfg;
    cfg.initial_res = 32;
    cfg.final_res = 96;  // not a power-of-two multiple
    auto query = [](const std::vector<Vec3>& pts) {
        return std::vector<double>(pts.size(), 0.0);
    };
    EXPECT_THROW(mise(query, cfg, unit_box()), ContractError);
}
