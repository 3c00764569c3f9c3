#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "saoc/errors.hpp"
#include "saoc/rng.hpp"

namespace saoc {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(x * x + y * y + z * z); }
    Vec3 normalized() const {
        const double n = norm();
        return n > 0.0 ? Vec3{x / n, y / n, z / n} : Vec3{0.0, 0.0, 0.0};
    }
    double operator[](int i) const { return i == 0 ? x : i == 1 ? y : z; }
    bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

inline Vec3 min(const Vec3& a, const Vec3& b) {
    return {std::min(a.x, b.x), std::min(a.y, b.y), std::min(a.z, b.z)};
}
inline Vec3 max(const Vec3& a, const Vec3& b) {
    return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)};
}

struct Box3 {
    Vec3 lo, hi;
    Vec3 extent() const { return hi - lo; }
    Vec3 center() const { return (lo + hi) * 0.5; }
    bool contains(const Vec3& p) const {
        return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z &&
               p.z <= hi.z;
    }
    bool degenerate() const {
        const Vec3 e = extent();
        return !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0);
    }
};

inline Box3 unit_box() { return {{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}}; }

// Row-major rotation matrix plus translation; maps local -> world as
// p_world = R * p_local + t.
struct RigidTransform {
    std::array<double, 9> rot{1, 0, 0, 0, 1, 0, 0, 0, 1};
    Vec3 trans;

    Vec3 apply(const Vec3& p) const {
        return {rot[0] * p.x + rot[1] * p.y + rot[2] * p.z + trans.x,
                rot[3] * p.x + rot[4] * p.y + rot[5] * p.z + trans.y,
                rot[6] * p.x + rot[7] * p.y + rot[8] * p.z + trans.z};
    }
    // Rotation is orthonormal, so the inverse uses the transpose.
    Vec3 apply_inverse(const Vec3& p) const {
        const Vec3 q = p - trans;
        return {rot[0] * q.x + rot[3] * q.y + rot[6] * q.z,
                rot[1] * q.x + rot[4] * q.y + rot[7] * q.z,
                rot[2] * q.x + rot[5] * q.y + rot[8] * q.z};
    }

    static RigidTransform rotation_from_quat(double w, double x, double y, double z, Vec3 t = {}) {
        const double n = std::sqrt(w * w + x * x + y * y + z * z);
        w /= n; x /= n; y /= n; z /= n;
        RigidTransform r;
        r.rot = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
                 2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                 2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
        r.trans = t;
        return r;
    }
};

// CSG tree over three primitives. Every node may carry a rigid transform.
// The min/max composition yields the exact sign everywhere (what occupancy
// supervision needs) even where the off-surface distance is only a bound.
struct ShapeSpec {
    enum class Kind { sphere, box, torus, csg_union, csg_intersection, csg_difference };

    Kind kind = Kind::sphere;
    Vec3 center;
    double radius = 0.0;        // sphere
    Vec3 half_extents;          // box
    double major_radius = 0.0;  // torus (axis = local z)
    double minor_radius = 0.0;
    std::vector<ShapeSpec> children;
    std::optional<RigidTransform> transform;

    static ShapeSpec sphere(Vec3 c, double r) {
        if (r <= 0.0) throw ContractError("sphere radius must be positive");
        ShapeSpec s;
        s.kind = Kind::sphere;
        s.center = c;
        s.radius = r;
        return s;
    }
    static ShapeSpec box(Vec3 c, Vec3 he) {
        if (he.x <= 0.0 || he.y <= 0.0 || he.z <= 0.0)
            throw ContractError("box half extents must be positive");
        ShapeSpec s;
        s.kind = Kind::box;
        s.center = c;
        s.half_extents = he;
        return s;
    }
    static ShapeSpec torus(Vec3 c, double major, double minor) {
        if (major <= 0.0 || minor <= 0.0 || minor >= major)
            throw ContractError("torus requires 0 < minor < major");
        ShapeSpec s;
        s.kind = Kind::torus;
        s.center = c;
        s.major_radius = major;
        s.minor_radius = minor;
        return s;
    }
    static ShapeSpec combine(Kind op, ShapeSpec a, ShapeSpec b) {
        ShapeSpec s;
        s.kind = op;
        s.children.push_back(std::move(a));
        s.children.push_back(std::move(b));
        return s;
    }

    bool is_primitive() const {
        return kind == Kind::sphere || kind == Kind::box || kind == Kind::torus;
    }

    int primitive_count() const {
        if (is_primitive()) return 1;
        int n = 0;
        for (const auto& c : children) n += c.primitive_count();
        return n;
    }
};

inline double sdf(const ShapeSpec& s, Vec3 q) {
    if (!q.finite()) throw ContractError("sdf: query point must be finite");
    if (s.transform) q = s.transform->apply_inverse(q);
    switch (s.kind) {
        case ShapeSpec::Kind::sphere:
            return (q - s.center).norm() - s.radius;
        case ShapeSpec::Kind::box: {
            const Vec3 p = q - s.center;
            const Vec3 d{std::fabs(p.x) - s.half_extents.x, std::fabs(p.y) - s.half_extents.y,
                         std::fabs(p.z) - s.half_extents.z};
            const Vec3 dpos{std::max(d.x, 0.0), std::max(d.y, 0.0), std::max(d.z, 0.0)};
            return dpos.norm() + std::min(std::max(d.x, std::max(d.y, d.z)), 0.0);
        }
        case ShapeSpec::Kind::torus: {
            const Vec3 p = q - s.center;
            const double ring = std::sqrt(p.x * p.x + p.y * p.y) - s.major_radius;
            return std::sqrt(ring * ring + p.z * p.z) - s.minor_radius;
        }
        case ShapeSpec::Kind::csg_union: {
            double d = sdf(s.children.at(0), q);
            for (size_t i = 1; i < s.children.size(); ++i) d = std::min(d, sdf(s.children[i], q));
            return d;
        }
        case ShapeSpec::Kind::csg_intersection: {
            double d = sdf(s.children.at(0), q);
            for (size_t i = 1; i < s.children.size(); ++i) d = std::max(d, sdf(s.children[i], q));
            return d;
        }
        case ShapeSpec::Kind::csg_difference: {
            // first child minus the rest
            double d = sdf(s.children.at(0), q);
            for (size_t i = 1; i < s.children.size(); ++i) d = std::max(d, -sdf(s.children[i], q));
            return d;
        }
    }
    throw ContractError("sdf: unknown shape kind");
}

// Occupancy convention: 1 = inside (sdf < 0).
inline bool occupied(const ShapeSpec& s, const Vec3& q) { return sdf(s, q) < 0.0; }

inline Vec3 sdf_gradient(const ShapeSpec& s, const Vec3& q, double h = 1e-6) {
    const double inv = 0.5 / h;
    return {(sdf(s, {q.x + h, q.y, q.z}) - sdf(s, {q.x - h, q.y, q.z})) * inv,
            (sdf(s, {q.x, q.y + h, q.z}) - sdf(s, {q.x, q.y - h, q.z})) * inv,
            (sdf(s, {q.x, q.y, q.z + h}) - sdf(s, {q.x, q.y, q.z - h})) * inv};
}

struct PointCloud {
    std::vector<Vec3> points;
    std::vector<Vec3> normals;  // empty or same length as points, unit rows

    size_t size() const { return points.size(); }
    bool has_normals() const { return !normals.empty(); }

    void validate() const {
        for (const auto& p : points)
            if (!p.finite()) throw ContractError("point cloud holds a non-finite coordinate");
        if (!normals.empty()) {
            if (normals.size() != points.size())
                throw DimensionError("normals count does not match point count");
            for (const auto& n : normals)
                if (std::fabs(n.norm() - 1.0) > 1e-9)
                    throw ContractError("point cloud normal is not unit length");
        }
    }
};

inline Box3 bounding_box(const std::vector<Vec3>& pts) {
    if (pts.empty()) throw ContractError("bounding_box: empty point set");
    Box3 b{pts[0], pts[0]};
    for (const auto& p : pts) {
        b.lo = min(b.lo, p);
        b.hi = max(b.hi, p);
    }
    return b;
}

// Uniform scale + translation: cube = world * scale + offset.
struct DomainTransform {
    double scale = 1.0;
    Vec3 offset;

    Vec3 to_cube(const Vec3& p) const { return p * scale + offset; }
    Vec3 to_world(const Vec3& p) const { return (p - offset) / scale; }
};

// Fits the tight bounding box centered into [0,1]^3 shrunk by `padding` per
// side; the longest axis maps exactly to 1 - 2*padding.
inline std::pair<PointCloud, DomainTransform> normalize_to_unit_cube(const PointCloud& pc,
                                                                     double padding = 0.05) {
    if (pc.points.size() < 2) throw ContractError("normalize: need at least 2 points");
    if (padding < 0.0 || padding >= 0.5) throw ContractError("normalize: padding must be in [0,0.5)");
    const Box3 bb = bounding_box(pc.points);
    const Vec3 ext = bb.extent();
    const double longest = std::max(ext.x, std::max(ext.y, ext.z));
    if (longest <= 0.0) throw DegenerateError("normalize: all points coincide");
    DomainTransform t;
    t.scale = (1.0 - 2.0 * padding) / longest;
    const Vec3 c = bb.center();
    t.offset = Vec3{0.5, 0.5, 0.5} - c * t.scale;
    PointCloud out;
    out.points.reserve(pc.points.size());
    for (const auto& p : pc.points) out.points.push_back(t.to_cube(p));
    out.normals = pc.normals;  // rigid-free similarity keeps directions
    return {std::move(out), t};
}

inline std::vector<Vec3> sample_uniform(const Box3& bbox, int64_t n, uint64_t seed) {
    if (bbox.degenerate()) throw ContractError("sample_uniform: degenerate bounding box");
    Rng rng(seed);
    std::vector<Vec3> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        out.push_back({rng.uniform(bbox.lo.x, bbox.hi.x), rng.uniform(bbox.lo.y, bbox.hi.y),
                       rng.uniform(bbox.lo.z, bbox.hi.z)});
    return out;
}

// Gaussian perturbation of every coordinate. Normals are dropped: the noisy
// points no longer lie on the surface they were sampled from.
inline PointCloud add_noise(const PointCloud& pc, double sigma, uint64_t seed) {
    if (sigma < 0.0) throw ContractError("add_noise: sigma must be non-negative");
    Rng rng(seed);
    PointCloud out;
    out.points.reserve(pc.points.size());
    for (const auto& p : pc.points)
        out.points.push_back(
            {p.x + rng.normal(0.0, sigma), p.y + rng.normal(0.0, sigma), p.z + rng.normal(0.0, sigma)});
    return out;
}

namespace detail {

enum class ProjectResult { converged, off_surface, stalled };

// Damped Newton projection along the numerical sdf gradient, finished by a
// sign-bracket bisection. The CSG min/max field has positive local minima of
// |sdf| along difference/intersection creases ("phantom valleys"); a
// candidate that cannot bracket a sign change sits in such a valley and is
// reported off_surface rather than as a projection failure — the sign of the
// field is exact, so any point actually near the surface brackets.
inline ProjectResult project_to_surface(const ShapeSpec& s, Vec3& p, double tol,
                                        int max_iter = 20) {
    double d = sdf(s, p);
    for (int it = 0; it < max_iter; ++it) {
        if (std::fabs(d) <= tol) return ProjectResult::converged;
        const Vec3 g = sdf_gradient(s, p);
        const double g2 = g.dot(g);
        if (g2 < 1e-18) break;
        double step = 1.0;
        bool improved = false;
        // min/max values can overestimate distance inside overlaps;
        // backtrack whenever the full step does not reduce |sdf|.
        for (int bt = 0; bt < 6; ++bt) {
            const Vec3 cand = p - g * (step * d / g2);
            const double dc = sdf(s, cand);
            if (std::fabs(dc) < std::fabs(d)) {
                p = cand;
                d = dc;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if (!improved) break;
    }
    if (std::fabs(d) <= tol) return ProjectResult::converged;

    const Vec3 dir = sdf_gradient(s, p).normalized() * (d > 0.0 ? -1.0 : 1.0);
    if (dir.norm() < 0.5) return ProjectResult::stalled;
    double t_lo = 0.0, t_hi = 0.0;
    bool bracketed = false;
    double t = std::max(std::fabs(d), 4.0 * tol);
    for (int i = 0; i < 12; ++i) {
        const double dt = sdf(s, p + dir * t);
        if ((dt > 0.0) != (d > 0.0)) {
            t_hi = t;
            bracketed = true;
            break;
        }
        t_lo = t;
        t *= 1.7;
    }
    if (!bracketed) return ProjectResult::off_surface;
    for (int i = 0; i < 80; ++i) {
        const double tm = 0.5 * (t_lo + t_hi);
        const double dm = sdf(s, p + dir * tm);
        if (std::fabs(dm) <= tol) {
            p = p + dir * tm;
            return ProjectResult::converged;
        }
        if ((dm > 0.0) == (d > 0.0)) t_lo = tm;
        else t_hi = tm;
    }
    p = p + dir * (0.5 * (t_lo + t_hi));
    return std::fabs(sdf(s, p)) <= tol ? ProjectResult::converged : ProjectResult::stalled;
}

}  // namespace detail

// Rejection sampling near the surface followed by Newton projection; normals
// are the normalized numerical sdf gradient at the projected point.
inline PointCloud sample_surface(const ShapeSpec& spec, int64_t n, uint64_t seed,
                                 const Box3& domain = unit_box()) {
    if (n < 1) throw ContractError("sample_surface: need n >= 1");
    const double scale = std::max(domain.extent().x,
                                  std::max(domain.extent().y, domain.extent().z));
    const double tol = 1e-6 * scale;
    const double band = 0.25 * scale;  // candidates start within this |sdf| band
    Rng rng(seed);
    PointCloud out;
    out.points.reserve(static_cast<size_t>(n));
    out.normals.reserve(static_cast<size_t>(n));
    int64_t attempts = 0, failures = 0;
    const int64_t max_draws = 20000 * n + 100000;
    int64_t draws = 0;
    while (static_cast<int64_t>(out.points.size()) < n) {
        if (++draws > max_draws)
            throw DegenerateError("sample_surface: surface appears empty within the domain");
        Vec3 p{rng.uniform(domain.lo.x, domain.hi.x), rng.uniform(domain.lo.y, domain.hi.y),
               rng.uniform(domain.lo.z, domain.hi.z)};
        if (std::fabs(sdf(spec, p)) > band) continue;
        ++attempts;
        const auto res = detail::project_to_surface(spec, p, tol);
        if (res == detail::ProjectResult::off_surface) continue;  // phantom valley, re-draw
        if (res == detail::ProjectResult::stalled) {
            ++failures;
            if (attempts >= 100 && failures * 100 > attempts)
                throw DegenerateError("sample_surface: >1% of projections failed to converge");
            continue;
        }
        if (!domain.contains(p)) continue;
        const Vec3 g = sdf_gradient(spec, p);
        const double gn = g.norm();
        if (gn < 1e-12) {
            ++failures;
            continue;
        }
        out.points.push_back(p);
        out.normals.push_back(g / gn);
    }
    if (attempts >= 100 && failures * 100 > attempts)
        throw DegenerateError("sample_surface: >1% of projections failed to converge");
    return out;
}

struct ShapeGenConfig {
    int min_primitives = 1;
    int max_primitives = 4;
    double min_radius = 0.10;  // fraction of the unit cube
    double max_radius = 0.35;
    double p_union = 0.6;      // remaining mass split evenly between the other ops
    int max_retries = 64;
};

namespace detail {

inline ShapeSpec random_primitive(Rng& rng, const ShapeGenConfig& cfg) {
    const Vec3 c{rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65)};
    const double r = rng.uniform(cfg.min_radius, cfg.max_radius);
    const int kind = static_cast<int>(rng.uniform_index(3));
    ShapeSpec s;
    if (kind == 0) {
        s = ShapeSpec::sphere(c, r);
    } else if (kind == 1) {
        const Vec3 he{r * rng.uniform(0.5, 1.0), r * rng.uniform(0.5, 1.0),
                      r * rng.uniform(0.5, 1.0)};
        s = ShapeSpec::box({0, 0, 0}, he);
        s.transform = RigidTransform::rotation_from_quat(rng.normal(), rng.normal(), rng.normal(),
                                                         rng.normal(), c);
    } else {
        const double minor = r * rng.uniform(0.2, 0.45);
        s = ShapeSpec::torus({0, 0, 0}, r * 0.8, std::min(minor, r * 0.8 * 0.9));
        s.transform = RigidTransform::rotation_from_quat(rng.normal(), rng.normal(), rng.normal(),
                                                         rng.normal(), c);
    }
    return s;
}

// A usable training shape has both sides represented and a reachable surface
// strictly inside the unit cube.
inline bool shape_is_valid(const ShapeSpec& s, Rng& rng) {
    int inside = 0;
    const int probes = 4096;
    for (int i = 0; i < probes; ++i) {
        const Vec3 p{rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)};
        const double d = sdf(s, p);
        if (d < 0.0) {
            ++inside;
            if (!unit_box().contains(p)) return false;
        }
    }
    if (inside < probes / 200 || inside > probes * 9 / 10) return false;
    // surface must stay clear of the cube faces
    try {
        const PointCloud probe = sample_surface(s, 64, rng.next_u64());
        for (const auto& p : probe.points)
            if (p.x < 0.02 || p.x > 0.98 || p.y < 0.02 || p.y > 0.98 || p.z < 0.02 || p.z > 0.98)
                return false;
    } catch (const DegenerateError&) {
        return false;
    }
    return true;
}

}  // namespace detail

// Deterministic per seed. Resamples until valid; falls back to a plain
// sphere if the retry budget runs out, so it never fails.
inline ShapeSpec random_shape(uint64_t seed, const ShapeGenConfig& cfg = {}) {
    if (cfg.min_primitives < 1 || cfg.max_primitives < cfg.min_primitives)
        throw ContractError("random_shape: invalid primitive count bounds");
    Rng rng(seed);
    for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
        const int count = cfg.min_primitives +
                          static_cast<int>(rng.uniform_index(
                              static_cast<uint64_t>(cfg.max_primitives - cfg.min_primitives + 1)));
        ShapeSpec shape = detail::random_primitive(rng, cfg);
        for (int i = 1; i < count; ++i) {
            ShapeSpec next = detail::random_primitive(rng, cfg);
            const double u = rng.uniform();
            ShapeSpec::Kind op = ShapeSpec::Kind::csg_union;
            if (u > cfg.p_union) {
                op = (u > cfg.p_union + 0.5 * (1.0 - cfg.p_union))
                         ? ShapeSpec::Kind::csg_difference
                         : ShapeSpec::Kind::csg_intersection;
            }
            shape = ShapeSpec::combine(op, std::move(shape), std::move(next));
        }
        if (detail::shape_is_valid(shape, rng)) return shape;
    }
    return ShapeSpec::sphere({0.5, 0.5, 0.5}, 0.25);
}

}  // namespace saoc
