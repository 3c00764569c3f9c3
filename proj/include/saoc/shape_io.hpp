#pragma once

#include <cmath>
#include <fstream>
#include <string>

#include <json.hpp>

#include "saoc/errors.hpp"
#include "saoc/geometry.hpp"

namespace saoc {

// JSON schema (see docs/formats.md):
//   { "type": "sphere"|"box"|"torus"|"union"|"intersection"|"difference",
//     "params": {...},          primitives only
//     "children": [...],        boolean nodes only
//     "transform": { "rotation": [9 row-major], "translation": [3] } }   optional

namespace detail {

inline nlohmann::json vec_to_json(const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); }

inline Vec3 vec_from_json(const nlohmann::json& j, const char* what) {
    if (!j.is_array() || j.size() != 3)
        throw ParseError(std::string("shape json: ") + what + " must be an array of 3 numbers");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace detail

inline nlohmann::json shape_to_json(const ShapeSpec& s) {
    nlohmann::json j;
    switch (s.kind) {
        case ShapeSpec::Kind::sphere:
            j["type"] = "sphere";
            j["params"] = {{"center", detail::vec_to_json(s.center)}, {"radius", s.radius}};
            break;
        case ShapeSpec::Kind::box:
            j["type"] = "box";
            j["params"] = {{"center", detail::vec_to_json(s.center)},
                           {"half_extents", detail::vec_to_json(s.half_extents)}};
            break;
        case ShapeSpec::Kind::torus:
            j["type"] = "torus";
            j["params"] = {{"center", detail::vec_to_json(s.center)},
                           {"major_radius", s.major_radius},
                           {"minor_radius", s.minor_radius}};
            break;
        case ShapeSpec::Kind::csg_union: j["type"] = "union"; break;
        case ShapeSpec::Kind::csg_intersection: j["type"] = "intersection"; break;
        case ShapeSpec::Kind::csg_difference: j["type"] = "difference"; break;
    }
    if (!s.children.empty()) {
        j["children"] = nlohmann::json::array();
        for (const auto& c : s.children) j["children"].push_back(shape_to_json(c));
    }
    if (s.transform) {
        j["transform"] = {{"rotation", s.transform->rot},
                          {"translation", detail::vec_to_json(s.transform->trans)}};
    }
    return j;
}

inline ShapeSpec shape_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("type"))
        throw ParseError("shape json: node must be an object with a \"type\" field");
    const std::string type = j["type"].get<std::string>();
    ShapeSpec s;
    auto params = [&]() -> const nlohmann::json& {
        if (!j.contains("params")) throw ParseError("shape json: primitive \"" + type + "\" missing params");
        return j["params"];
    };
    if (type == "sphere") {
        const auto& p = params();
        s = ShapeSpec::sphere(detail::vec_from_json(p.at("center"), "center"),
                              p.at("radius").get<double>());
    } else if (type == "box") {
        const auto& p = params();
        s = ShapeSpec::box(detail::vec_from_json(p.at("center"), "center"),
                           detail::vec_from_json(p.at("half_extents"), "half_extents"));
    } else if (type == "torus") {
        const auto& p = params();
        s = ShapeSpec::torus(detail::vec_from_json(p.at("center"), "center"),
                             p.at("major_radius").get<double>(), p.at("minor_radius").get<double>());
    } else if (type == "union" || type == "intersection" || type == "difference") {
        s.kind = type == "union" ? ShapeSpec::Kind::csg_union
                 : type == "intersection" ? ShapeSpec::Kind::csg_intersection
                                          : ShapeSpec::Kind::csg_difference;
        if (!j.contains("children") || !j["children"].is_array() || j["children"].size() < 2)
            throw ParseError("shape json: \"" + type + "\" needs at least 2 children");
        for (const auto& c : j["children"]) s.children.push_back(shape_from_json(c));
    } else {
        throw ParseError("shape json: unknown type \"" + type + "\"");
    }
    if (j.contains("transform")) {
        const auto& t = j["transform"];
        RigidTransform rt;
        const auto& rot = t.at("rotation");
        if (!rot.is_array() || rot.size() != 9)
            throw ParseError("shape json: transform.rotation must hold 9 numbers (row-major)");
        for (int i = 0; i < 9; ++i) rt.rot[static_cast<size_t>(i)] = rot[i].get<double>();
        // orthonormality check: R * R^T = I
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int k = 0; k < 3; ++k) acc += rt.rot[r * 3 + k] * rt.rot[c * 3 + k];
                if (std::fabs(acc - (r == c ? 1.0 : 0.0)) > 1e-6)
                    throw ParseError("shape json: transform.rotation is not orthonormal");
            }
        rt.trans = detail::vec_from_json(t.at("translation"), "transform.translation");
        s.transform = rt;
    }
    return s;
}

inline void save_shape(const ShapeSpec& s, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << shape_to_json(s).dump(2) << "\n";
    if (!f) throw IoError("write failed for " + path);
}

inline ShapeSpec load_shape(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("shape json: " + path + ": " + e.what());
    }
    return shape_from_json(j);
}

}  // namespace saoc
