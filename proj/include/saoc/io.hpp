#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "saoc/errors.hpp"
#include "saoc/geometry.hpp"
#include "saoc/meshing.hpp"
#include "saoc/network.hpp"
#include "saoc/pipeline.hpp"

namespace saoc {

// ---- point clouds ----------------------------------------------------------

namespace detail {

inline double parse_real(const std::string& tok, const std::string& path, int64_t line) {
    try {
        size_t used = 0;
        const double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw ParseError(path + ":" + std::to_string(line) + ": expected a number, got \"" + tok +
                         "\"");
    }
}

inline std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream is(s);
    std::vector<std::string> toks;
    std::string t;
    while (is >> t) toks.push_back(t);
    return toks;
}

}  // namespace detail

inline PointCloud load_xyz(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    PointCloud pc;
    std::string line;
    int64_t lineno = 0;
    bool with_normals = false;
    while (std::getline(f, line)) {
        ++lineno;
        const auto toks = detail::split_ws(line);
        if (toks.empty()) continue;
        if (toks.size() != 3 && toks.size() != 6)
            throw ParseError(path + ":" + std::to_string(lineno) +
                             ": expected 3 or 6 values per line, got " +
                             std::to_string(toks.size()));
        if (pc.points.empty()) with_normals = toks.size() == 6;
        if ((toks.size() == 6) != with_normals)
            throw ParseError(path + ":" + std::to_string(lineno) +
                             ": inconsistent column count");
        pc.points.push_back({detail::parse_real(toks[0], path, lineno),
                             detail::parse_real(toks[1], path, lineno),
                             detail::parse_real(toks[2], path, lineno)});
        if (with_normals) {
            Vec3 n{detail::parse_real(toks[3], path, lineno),
                   detail::parse_real(toks[4], path, lineno),
                   detail::parse_real(toks[5], path, lineno)};
            pc.normals.push_back(n.normalized());
        }
    }
    if (pc.points.empty()) throw ParseError(path + ": no points found");
    pc.validate();
    return pc;
}

inline PointCloud load_ply(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::string line;
    int64_t lineno = 0;
    auto next_line = [&]() {
        if (!std::getline(f, line)) throw ParseError(path + ": unexpected end of file");
        ++lineno;
        return detail::split_ws(line);
    };

    auto toks = next_line();
    if (toks.size() != 1 || toks[0] != "ply")
        throw ParseError(path + ":1: expected \"ply\" magic line");
    toks = next_line();
    if (toks.size() != 3 || toks[0] != "format" || toks[1] != "ascii")
        throw ParseError(path + ":" + std::to_string(lineno) + ": only ascii PLY is supported");

    int64_t vertex_count = -1;
    std::vector<std::string> props;
    while (true) {
        toks = next_line();
        if (toks.empty()) continue;
        if (toks[0] == "comment") continue;
        if (toks[0] == "element") {
            if (toks.size() == 3 && toks[1] == "vertex")
                vertex_count = detail::parse_real(toks[2], path, lineno) >= 0
                                   ? static_cast<int64_t>(std::stoll(toks[2]))
                                   : -1;
            else
                throw ParseError(path + ":" + std::to_string(lineno) +
                                 ": only the vertex element is supported");
        } else if (toks[0] == "property") {
            if (toks.size() != 3 || (toks[1] != "double" && toks[1] != "float"))
                throw ParseError(path + ":" + std::to_string(lineno) +
                                 ": expected \"property double|float <name>\"");
            props.push_back(toks[2]);
        } else if (toks[0] == "end_header") {
            break;
        } else {
            throw ParseError(path + ":" + std::to_string(lineno) + ": unsupported header line \"" +
                             toks[0] + "\"");
        }
    }
    const std::vector<std::string> plain{"x", "y", "z"};
    const std::vector<std::string> with_n{"x", "y", "z", "nx", "ny", "nz"};
    const bool has_normals = props == with_n;
    if (!has_normals && props != plain)
        throw ParseError(path + ": vertex properties must be x y z [nx ny nz]");
    if (vertex_count < 1) throw ParseError(path + ": missing or invalid vertex count");

    PointCloud pc;
    pc.points.reserve(static_cast<size_t>(vertex_count));
    for (int64_t i = 0; i < vertex_count; ++i) {
        toks = next_line();
        if (static_cast<int64_t>(toks.size()) != (has_normals ? 6 : 3))
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected " +
                             std::to_string(has_normals ? 6 : 3) + " values");
        pc.points.push_back({detail::parse_real(toks[0], path, lineno),
                             detail::parse_real(toks[1], path, lineno),
                             detail::parse_real(toks[2], path, lineno)});
        if (has_normals) {
            Vec3 n{detail::parse_real(toks[3], path, lineno),
                   detail::parse_real(toks[4], path, lineno),
                   detail::parse_real(toks[5], path, lineno)};
            pc.normals.push_back(n.normalized());
        }
    }
    pc.validate();
    return pc;
}

inline PointCloud load_point_cloud(const std::string& path) {
    const auto dot = path.rfind('.');
    const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    if (ext == "ply") return load_ply(path);
    if (ext == "xyz" || ext == "txt") return load_xyz(path);
    throw IoError("unsupported point cloud extension \"" + ext + "\" (want .ply or .xyz)");
}

inline void save_ply(const PointCloud& pc, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "ply\nformat ascii 1.0\nelement vertex " << pc.points.size() << "\n";
    f << "property double x\nproperty double y\nproperty double z\n";
    if (pc.has_normals())
        f << "property double nx\nproperty double ny\nproperty double nz\n";
    f << "end_header\n";
    f << std::setprecision(17);
    for (size_t i = 0; i < pc.points.size(); ++i) {
        const Vec3& p = pc.points[i];
        f << p.x << " " << p.y << " " << p.z;
        if (pc.has_normals()) {
            const Vec3& n = pc.normals[i];
            f << " " << n.x << " " << n.y << " " << n.z;
        }
        f << "\n";
    }
    if (!f) throw IoError("write failed for " + path);
}

// ---- meshes ----------------------------------------------------------------

inline void save_mesh(const TriMesh& mesh, const std::string& path) {
    mesh.validate();
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "# triangle mesh, " << mesh.vertices.size() << " vertices, " << mesh.faces.size()
      << " faces\n";
    f << std::setprecision(17);
    for (const auto& v : mesh.vertices) f << "v " << v.x << " " << v.y << " " << v.z << "\n";
    for (const auto& face : mesh.faces)
        f << "f " << face[0] + 1 << " " << face[1] + 1 << " " << face[2] + 1 << "\n";
    if (!f) throw IoError("write failed for " + path);
}

inline TriMesh load_mesh(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    TriMesh mesh;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        auto toks = detail::split_ws(line);
        if (toks.empty() || toks[0] == "#") continue;
        if (toks[0] == "v") {
            if (toks.size() < 4)
                throw ParseError(path + ":" + std::to_string(lineno) + ": vertex needs 3 coords");
            mesh.vertices.push_back({detail::parse_real(toks[1], path, lineno),
                                     detail::parse_real(toks[2], path, lineno),
                                     detail::parse_real(toks[3], path, lineno)});
        } else if (toks[0] == "f") {
            if (toks.size() != 4)
                throw ParseError(path + ":" + std::to_string(lineno) +
                                 ": only triangle faces are supported");
            std::array<int64_t, 3> face{};
            for (int i = 0; i < 3; ++i) {
                std::string tok = toks[static_cast<size_t>(i + 1)];
                const auto slash = tok.find('/');
                if (slash != std::string::npos) tok = tok.substr(0, slash);
                const int64_t idx = static_cast<int64_t>(detail::parse_real(tok, path, lineno));
                if (idx < 1 || idx > static_cast<int64_t>(mesh.vertices.size()))
                    throw ParseError(path + ":" + std::to_string(lineno) +
                                     ": face index out of range");
                face[static_cast<size_t>(i)] = idx - 1;
            }
            mesh.faces.push_back(face);
        }
        // other directives (vn, vt, o, ...) are ignored
    }
    return mesh;
}

// ---- checkpoints -----------------------------------------------------------
//
// Binary layout (little-endian):
//   magic "SAOC" | version u32 | 7 x u32 net config | tensor count u32 |
//   per tensor: name_len u32, name bytes, rank u32, dims u64[rank], f64 data

inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void require_little_endian() {
    const uint32_t probe = 1;
    uint8_t first;
    std::memcpy(&first, &probe, 1);
    if (first != 1) throw IoError("checkpoint io requires a little-endian host");
}

template <typename T>
void write_pod(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f, const std::string& path) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw ParseError(path + ": truncated checkpoint");
    return v;
}

}  // namespace detail

inline void save_checkpoint(const ConvOccNet& model, const std::string& path) {
    detail::require_little_endian();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write("SAOC", 4);
    detail::write_pod<uint32_t>(f, kCheckpointVersion);
    const NetConfig& c = model.cfg;
    for (int64_t v : {c.grid_res, c.feature_dim, c.pointnet_blocks, c.unet_depth, c.unet_width,
                      c.decoder_blocks, c.decoder_hidden})
        detail::write_pod<uint32_t>(f, static_cast<uint32_t>(v));
    detail::write_pod<uint32_t>(f, static_cast<uint32_t>(model.named_params().size()));
    for (const auto& [name, t] : model.named_params()) {
        detail::write_pod<uint32_t>(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<uint32_t>(f, static_cast<uint32_t>(t.shape().size()));
        for (int64_t d : t.shape()) detail::write_pod<uint64_t>(f, static_cast<uint64_t>(d));
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!f) throw IoError("write failed for " + path);
}

inline ConvOccNet load_checkpoint(const std::string& path) {
    detail::require_little_endian();
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "SAOC", 4) != 0)
        throw VersionError(path + ": not a SAOC checkpoint (bad magic)");
    const uint32_t version = detail::read_pod<uint32_t>(f, path);
    if (version != kCheckpointVersion)
        throw VersionError(path + ": checkpoint version " + std::to_string(version) +
                           ", expected " + std::to_string(kCheckpointVersion));
    NetConfig cfg;
    cfg.grid_res = detail::read_pod<uint32_t>(f, path);
    cfg.feature_dim = detail::read_pod<uint32_t>(f, path);
    cfg.pointnet_blocks = detail::read_pod<uint32_t>(f, path);
    cfg.unet_depth = detail::read_pod<uint32_t>(f, path);
    cfg.unet_width = detail::read_pod<uint32_t>(f, path);
    cfg.decoder_blocks = detail::read_pod<uint32_t>(f, path);
    cfg.decoder_hidden = detail::read_pod<uint32_t>(f, path);

    ConvOccNet model(cfg);
    const uint32_t count = detail::read_pod<uint32_t>(f, path);
    if (count != model.named_params().size())
        throw SchemaError(path + ": checkpoint holds " + std::to_string(count) +
                          " tensors, model expects " +
                          std::to_string(model.named_params().size()));
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = detail::read_pod<uint32_t>(f, path);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        if (!f) throw ParseError(path + ": truncated checkpoint");
        auto& expected = model.named_params()[i];
        if (expected.first != name)
            throw SchemaError(path + ": unexpected tensor \"" + name + "\" (expected \"" +
                              expected.first + "\")");
        const uint32_t rank = detail::read_pod<uint32_t>(f, path);
        Shape shape(rank);
        for (uint32_t r = 0; r < rank; ++r)
            shape[r] = static_cast<int64_t>(detail::read_pod<uint64_t>(f, path));
        if (shape != expected.second.shape())
            throw SchemaError(path + ": tensor \"" + name + "\" has shape " + shape_str(shape) +
                              ", expected " + shape_str(expected.second.shape()));
        f.read(reinterpret_cast<char*>(expected.second.data()),
               static_cast<std::streamsize>(expected.second.numel() * sizeof(double)));
        if (!f) throw ParseError(path + ": truncated checkpoint");
    }
    char extra;
    if (f.read(&extra, 1))
        throw SchemaError(path + ": trailing bytes after the last tensor");
    return model;
}

// ---- loss traces -----------------------------------------------------------

inline void save_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "iteration,loss,lr\n" << std::setprecision(17);
    for (const auto& row : trace) f << row.iteration << "," << row.loss << "," << row.lr << "\n";
    if (!f) throw IoError("write failed for " + path);
}

// ---- run configuration ------------------------------------------------------
//
// Flat key=value text with '#' comments; unknown keys are rejected and every
// value is validated before any work starts. Keys are listed in
// docs/formats.md.

struct RunConfig {
    NetConfig net;
    PretrainConfig pretrain;
    SAOptConfig sa;
    MiseConfig mise;
    double eval_tau = 0.01;
    uint64_t seed = 0;
};

inline RunConfig parse_run_config(std::istream& in, const std::string& path = "<config>") {
    RunConfig cfg;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::string trimmed;
        for (char ch : line)
            if (!std::isspace(static_cast<unsigned char>(ch)) || !trimmed.empty()) trimmed += ch;
        while (!trimmed.empty() && std::isspace(static_cast<unsigned char>(trimmed.back())))
            trimmed.pop_back();
        if (trimmed.empty()) continue;
        const auto eq = trimmed.find('=');
        if (eq == std::string::npos)
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected key=value");
        std::string key = trimmed.substr(0, eq);
        std::string value = trimmed.substr(eq + 1);
        while (!key.empty() && std::isspace(static_cast<unsigned char>(key.back()))) key.pop_back();
        size_t vstart = 0;
        while (vstart < value.size() && std::isspace(static_cast<unsigned char>(value[vstart])))
            ++vstart;
        value = value.substr(vstart);

        auto as_int = [&] { return static_cast<int64_t>(detail::parse_real(value, path, lineno)); };
        auto as_real = [&] { return detail::parse_real(value, path, lineno); };
        auto as_reduction = [&] {
            if (value == "mean") return Reduction::mean;
            if (value == "sum") return Reduction::sum;
            throw ParseError(path + ":" + std::to_string(lineno) +
                             ": reduction must be mean or sum");
        };

        if (key == "net.grid_res") cfg.net.grid_res = as_int();
        else if (key == "net.feature_dim") cfg.net.feature_dim = as_int();
        else if (key == "net.pointnet_blocks") cfg.net.pointnet_blocks = as_int();
        else if (key == "net.unet_depth") cfg.net.unet_depth = as_int();
        else if (key == "net.unet_width") cfg.net.unet_width = as_int();
        else if (key == "net.decoder_blocks") cfg.net.decoder_blocks = as_int();
        else if (key == "net.decoder_hidden") cfg.net.decoder_hidden = as_int();
        else if (key == "pretrain.batch_size") cfg.pretrain.batch_size = as_int();
        else if (key == "pretrain.lr") cfg.pretrain.lr = as_real();
        else if (key == "pretrain.iterations") cfg.pretrain.iterations = as_int();
        else if (key == "pretrain.queries_per_shape") cfg.pretrain.queries_per_shape = as_int();
        else if (key == "pretrain.surface_points") cfg.pretrain.surface_points_per_shape = as_int();
        else if (key == "pretrain.noise_sigma") cfg.pretrain.noise_sigma = as_real();
        else if (key == "pretrain.seed") cfg.pretrain.seed = static_cast<uint64_t>(as_int());
        else if (key == "pretrain.reduction") cfg.pretrain.reduction = as_reduction();
        else if (key == "sa.iterations") cfg.sa.iterations = as_int();
        else if (key == "sa.batch") cfg.sa.batch = as_int();
        else if (key == "sa.lr0") cfg.sa.lr0 = as_real();
        else if (key == "sa.decay") cfg.sa.decay = as_real();
        else if (key == "sa.decay_every") cfg.sa.decay_every = as_int();
        else if (key == "sa.n_surface") cfg.sa.n_surface = as_int();
        else if (key == "sa.n_nonsurface") cfg.sa.n_nonsurface = as_int();
        else if (key == "sa.encode_points") cfg.sa.encode_points = as_int();
        else if (key == "sa.reduction") cfg.sa.reduction = as_reduction();
        else if (key == "sa.mode") {
            if (value == "full") cfg.sa.mode = SAOptConfig::Mode::full;
            else if (value == "encoder_only") cfg.sa.mode = SAOptConfig::Mode::encoder_only;
            else
                throw ParseError(path + ":" + std::to_string(lineno) +
                                 ": sa.mode must be full or encoder_only");
        } else if (key == "sa.seed") cfg.sa.seed = static_cast<uint64_t>(as_int());
        else if (key == "mise.initial_res") cfg.mise.initial_res = as_int();
        else if (key == "mise.final_res") cfg.mise.final_res = as_int();
        else if (key == "eval.tau") cfg.eval_tau = as_real();
        else if (key == "seed") cfg.seed = static_cast<uint64_t>(as_int());
        else
            throw ParseError(path + ":" + std::to_string(lineno) + ": unknown key \"" + key + "\"");
    }
    cfg.net.validate();
    cfg.pretrain.validate();
    cfg.sa.validate();
    cfg.mise.validate();
    if (cfg.eval_tau <= 0.0) throw ParseError(path + ": eval.tau must be positive");
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    return parse_run_config(f, path);
}

}  // namespace saoc
