#include <gtest/gtest.h>

#include <cmath>

#include "saoc/geometry.hpp"
#include "saoc/kdtree.hpp"
#include "saoc/meshing.hpp"
#include "saoc/metrics.hpp"
#include "saoc/rng.hpp"

using namespace saoc;

namespace {

TriMesh two_triangle_mesh() {
    // areas 0.5 and 1.5 (ratio 1:3)
    TriMesh m;
    m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {3, 0, 1}, {4, 0, 1}, {3, 3, 1}};
    m.faces = {{0, 1, 2}, {3, 4, 5}};
    return m;
}

SampledSurface random_surface(int n, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    SampledSurface s;
    for (int i = 0; i < n; ++i) {
        s.points.push_back({rng.uniform(0.0, scale), rng.uniform(0.0, scale),
                            rng.uniform(0.0, scale)});
        Vec3 nrm{rng.normal(), rng.normal(), rng.normal()};
        s.normals.push_back(nrm.normalized());
    }
    return s;
}

}  // namespace

TEST(KdTree, MatchesBruteForceExactly) {
    Rng rng(3);
    std::vector<Vec3> pts;
    for (int i = 0; i < 500; ++i)
        pts.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    const KdTree3 tree(pts);
    for (int q = 0; q < 500; ++q) {
        const Vec3 query{rng.uniform(-0.2, 1.2), rng.uniform(-0.2, 1.2), rng.uniform(-0.2, 1.2)};
        double best = std::numeric_limits<double>::infinity();
        int64_t best_i = -1;
        for (size_t i = 0; i < pts.size(); ++i) {
            const double d = (pts[i] - query).norm();
            if (d < best) {
                best = d;
                best_i = static_cast<int64_t>(i);
            }
        }
        const auto hit = tree.nearest(query);
        EXPECT_EQ(hit.index, best_i);
        EXPECT_DOUBLE_EQ(hit.distance, best);
    }
}

TEST(SampleMesh, CountOnFaceAndAreaWeighting) {
    const auto mesh = two_triangle_mesh();
    const int n = 10000;
    const auto s = sample_mesh(mesh, n, 11);
    ASSERT_EQ(s.points.size(), static_cast<size_t>(n));
    int on_first = 0;
    for (size_t i = 0; i < s.points.size(); ++i) {
        const Vec3& p = s.points[i];
        if (std::fabs(p.z) < 1e-12) {
            ++on_first;
            // within the first triangle: x,y >= 0 and x + y <= 1
            EXPECT_GE(p.x, -1e-12);
            EXPECT_GE(p.y, -1e-12);
            EXPECT_LE(p.x + p.y, 1.0 + 1e-12);
            EXPECT_NEAR(std::fabs(s.normals[i].z), 1.0, 1e-12);
        } else {
            EXPECT_NEAR(p.z, 1.0, 1e-12);
        }
    }
    // expected fraction 0.25; 4-sigma binomial band
    const double sigma = std::sqrt(0.25 * 0.75 * n);
    EXPECT_NEAR(on_first, 0.25 * n, 4.0 * sigma);
}

TEST(SampleMesh, DegenerateMeshRejected) {
    TriMesh m;
    m.vertices = {{0, 0, 0}, {1, 1, 1}, {2, 2, 2}};
    m.faces = {{0, 1, 2}};  // zero area
    EXPECT_THROW(sample_mesh(m, 10, 1), ContractError);
    TriMesh empty;
    EXPECT_THROW(sample_mesh(empty, 10, 1), ContractError);
}

TEST(Metrics, IdenticalSetsArePerfect) {
    const auto s = random_surface(400, 7);
    const auto rep = compute_metrics(s, s, 0.01);
    EXPECT_DOUBLE_EQ(rep.cd, 0.0);
    EXPECT_DOUBLE_EQ(rep.nc, 1.0);
    EXPECT_DOUBLE_EQ(rep.fs_tau, 1.0);
    EXPECT_DOUBLE_EQ(rep.fs_2tau, 1.0);
}

TEST(Metrics, SinglePointPairAnchors) {
    SampledSurface a, b;
    a.points = {{0, 0, 0}};
    a.normals = {{0, 0, 1}};
    b.normals = {{0, 0, 1}};
    for (double d : {0.005, 0.02, 0.5}) {
        b.points = {{d, 0, 0}};
        const auto rep = compute_metrics(a, b, 0.01);
        EXPECT_NEAR(rep.cd, d, 1e-15);
        EXPECT_DOUBLE_EQ(rep.fs_tau, d <= 0.01 ? 1.0 : 0.0);
        EXPECT_DOUBLE_EQ(rep.fs_2tau, d <= 0.02 ? 1.0 : 0.0);
    }
}

TEST(Metrics, SymmetricUnderSwap) {
    const auto a = random_surface(300, 13);
    const auto b = random_surface(350, 17);
    const auto ab = compute_metrics(a, b, 0.05);
    const auto ba = compute_metrics(b, a, 0.05);
    EXPECT_DOUBLE_EQ(ab.cd, ba.cd);
    EXPECT_DOUBLE_EQ(ab.nc, ba.nc);
    EXPECT_DOUBLE_EQ(ab.fs_tau, ba.fs_tau);
    EXPECT_DOUBLE_EQ(ab.fs_2tau, ba.fs_2tau);
}

TEST(Metrics, RigidInvariance) {
    const auto a = random_surface(200, 19);
    const auto b = random_surface(200, 23);
    const auto base = compute_metrics(a, b, 0.05);

    const auto rt = RigidTransform::rotation_from_quat(0.9, 0.2, -0.3, 0.1, {0.4, -1.0, 2.0});
    auto apply = [&](const SampledSurface& s) {
        SampledSurface out;
        for (const auto& p : s.points) out.points.push_back(rt.apply(p));
        for (const auto& n : s.normals) {
            // rotate the normal without translating
            RigidTransform rot = rt;
            rot.trans = {0, 0, 0};
            out.normals.push_back(rot.apply(n));
        }
        return out;
    };
    const auto moved = compute_metrics(apply(a), apply(b), 0.05);
    EXPECT_NEAR(base.cd, moved.cd, 1e-9);
    EXPECT_NEAR(base.nc, moved.nc, 1e-9);
    EXPECT_NEAR(base.fs_tau, moved.fs_tau, 1e-9);
    EXPECT_NEAR(base.fs_2tau, moved.fs_2tau, 1e-9);
}

TEST(Metrics, FscoreMonotoneInTau) {
    Rng seeds(29);
    for (int it = 0; it < 100; ++it) {
        const auto a = random_surface(120, seeds.next_u64());
        const auto b = random_surface(130, seeds.next_u64());
        const auto rep = compute_metrics(a, b, 0.1);
        EXPECT_GE(rep.fs_2tau, rep.fs_tau);
    }
}

TEST(Metrics, InvalidInputsRejected) {
    const auto a = random_surface(10, 31);
    EXPECT_THROW(compute_metrics(a, a, 0.0), ContractError);
    SampledSurface empty;
    EXPECT_THROW(compute_metrics(a, empty, 0.01), ContractError);
}

TEST(Metrics, ReportJsonCarriesPaperScale) {
    MetricsReport rep;
    rep.cd = 0.00522;
    rep.nc = 0.9351;
    rep.fs_tau = 0.9716;
    rep.fs_2tau = 0.999;
    const auto j = rep.to_json();
    EXPECT_NEAR(j["paper_scale"]["cd"].get<double>(), 0.522, 1e-12);
    EXPECT_NEAR(j["paper_scale"]["nc"].get<double>(), 93.51, 1e-12);
}
