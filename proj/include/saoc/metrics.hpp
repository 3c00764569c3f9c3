#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "saoc/errors.hpp"
#include "saoc/geometry.hpp"
#include "saoc/kdtree.hpp"
#include "saoc/meshing.hpp"
#include "saoc/rng.hpp"

namespace saoc {

struct SampledSurface {
    std::vector<Vec3> points;
    std::vector<Vec3> normals;  // unit, same length as points
};

// Area-weighted face choice, uniform barycentric placement; normals are the
// face normals.
inline SampledSurface sample_mesh(const TriMesh& mesh, int64_t n, uint64_t seed) {
    if (n < 1) throw ContractError("sample_mesh: need n >= 1");
    std::vector<double> cumulative;
    std::vector<size_t> face_of;
    cumulative.reserve(mesh.faces.size());
    double total = 0.0;
    std::vector<Vec3> face_normal(mesh.faces.size());
    for (size_t f = 0; f < mesh.faces.size(); ++f) {
        const Vec3 a = mesh.vertices[static_cast<size_t>(mesh.faces[f][0])];
        const Vec3 b = mesh.vertices[static_cast<size_t>(mesh.faces[f][1])];
        const Vec3 c = mesh.vertices[static_cast<size_t>(mesh.faces[f][2])];
        const Vec3 cross = (b - a).cross(c - a);
        const double area = 0.5 * cross.norm();
        if (area > 0.0) {
            total += area;
            cumulative.push_back(total);
            face_of.push_back(f);
            face_normal[f] = cross.normalized();
        }
    }
    if (cumulative.empty())
        throw ContractError("sample_mesh: mesh has no face with positive area");

    Rng rng(seed);
    SampledSurface out;
    out.points.reserve(static_cast<size_t>(n));
    out.normals.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double u = rng.uniform(0.0, total);
        const size_t pick = static_cast<size_t>(
            std::lower_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
        const size_t f = face_of[std::min(pick, face_of.size() - 1)];
        const Vec3 a = mesh.vertices[static_cast<size_t>(mesh.faces[f][0])];
        const Vec3 b = mesh.vertices[static_cast<size_t>(mesh.faces[f][1])];
        const Vec3 c = mesh.vertices[static_cast<size_t>(mesh.faces[f][2])];
        // uniform barycentric via the sqrt trick
        const double r1 = std::sqrt(rng.uniform());
        const double r2 = rng.uniform();
        const Vec3 p = a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
        out.points.push_back(p);
        out.normals.push_back(face_normal[f]);
    }
    return out;
}

struct MetricsReport {
    double cd = 0.0;       // Euclidean chamfer distance, world units
    double nc = 0.0;       // normal consistency in [0,1]
    double fs_tau = 0.0;   // F-score at tau
    double fs_2tau = 0.0;  // F-score at 2*tau
    double tau = 0.01;

    nlohmann::json to_json() const {
        return {{"cd", cd},
                {"nc", nc},
                {"fs_tau", fs_tau},
                {"fs_2tau", fs_2tau},
                {"tau", tau},
                {"paper_scale",
                 {{"cd", cd * 100.0}, {"nc", nc * 100.0}, {"fs_tau", fs_tau * 100.0},
                  {"fs_2tau", fs_2tau * 100.0}}}};
    }
};

inline MetricsReport compute_metrics(const SampledSurface& pred, const SampledSurface& gt,
                                     double tau);

// Metrics in normalized unit-cube coordinates anchored to the ground truth,
// so tau keeps the paper's scale in any world units.
inline MetricsReport compute_metrics_normalized(const SampledSurface& pred,
                                                const SampledSurface& gt, double tau = 0.01) {
    PointCloud gt_pc;
    gt_pc.points = gt.points;
    auto [gt_cube, xf] = normalize_to_unit_cube(gt_pc, 0.0);
    SampledSurface gt_n{gt_cube.points, gt.normals};
    SampledSurface pred_n;
    pred_n.normals = pred.normals;
    pred_n.points.reserve(pred.points.size());
    for (const auto& p : pred.points) pred_n.points.push_back(xf.to_cube(p));
    return compute_metrics(pred_n, gt_n, tau);
}

// CD = half-sum of directed mean Euclidean NN distances; NC uses the absolute
// normal dot product; F-score is the harmonic precision/recall mean at tau.
inline MetricsReport compute_metrics(const SampledSurface& pred, const SampledSurface& gt,
                                     double tau = 0.01) {
    if (tau <= 0.0) throw ContractError("compute_metrics: tau must be positive");
    if (pred.points.empty() || gt.points.empty())
        throw ContractError("compute_metrics: point sets must be non-empty");
    if (pred.normals.size() != pred.points.size() || gt.normals.size() != gt.points.size())
        throw DimensionError("compute_metrics: normals must accompany every point");

    const KdTree3 tree_gt(gt.points);
    const KdTree3 tree_pred(pred.points);

    auto directed = [](const SampledSurface& from, const SampledSurface& to, const KdTree3& tree,
                       double tau, double& mean_dist, double& mean_absdot, double& frac_tau,
                       double& frac_2tau) {
        double dist_acc = 0.0, dot_acc = 0.0;
        int64_t hit_tau = 0, hit_2tau = 0;
        for (size_t i = 0; i < from.points.size(); ++i) {
            const auto hit = tree.nearest(from.points[i]);
            dist_acc += hit.distance;
            dot_acc += std::fabs(from.normals[i].dot(to.normals[static_cast<size_t>(hit.index)]));
            if (hit.distance <= tau) ++hit_tau;
            if (hit.distance <= 2.0 * tau) ++hit_2tau;
        }
        const double n = static_cast<double>(from.points.size());
        mean_dist = dist_acc / n;
        mean_absdot = dot_acc / n;
        frac_tau = static_cast<double>(hit_tau) / n;
        frac_2tau = static_cast<double>(hit_2tau) / n;
    };

    double d_pg, n_pg, p_tau, p_2tau;
    double d_gp, n_gp, r_tau, r_2tau;
    directed(pred, gt, tree_gt, tau, d_pg, n_pg, p_tau, p_2tau);
    directed(gt, pred, tree_pred, tau, d_gp, n_gp, r_tau, r_2tau);

    auto fscore = [](double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; };

    MetricsReport rep;
    rep.tau = tau;
    rep.cd = 0.5 * (d_pg + d_gp);
    rep.nc = 0.5 * (n_pg + n_gp);
    rep.fs_tau = fscore(p_tau, r_tau);
    rep.fs_2tau = fscore(p_2tau, r_2tau);
    return rep;
}

}  // namespace saoc
