// Command-line front end: shape/cloud generation, occupancy pretraining,
// sign-agnostic reconstruction, sliding-window scenes, and metric reports.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "saoc/io.hpp"
#include "saoc/metrics.hpp"
#include "saoc/network.hpp"
#include "saoc/parallel.hpp"
#include "saoc/pipeline.hpp"
#include "saoc/scene.hpp"
#include "saoc/shape_io.hpp"

namespace fs = std::filesystem;
using namespace saoc;

namespace {

std::string index_name(const char* stem, int64_t i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%03lld.%s", stem, static_cast<long long>(i), ext);
    return buf;
}

int cmd_gen_shapes(int64_t count, uint64_t seed, const std::string& out_dir, int64_t points,
                   double noise) {
    fs::create_directories(out_dir);
    for (int64_t i = 0; i < count; ++i) {
        Rng stream = Rng::stream(seed, static_cast<uint64_t>(i));
        const ShapeSpec shape = random_shape(stream.next_u64());
        save_shape(shape, (fs::path(out_dir) / index_name("shape", i, "json")).string());
        PointCloud cloud = sample_surface(shape, points, stream.next_u64());
        if (noise > 0.0) cloud = add_noise(cloud, noise, stream.next_u64());
        save_ply(cloud, (fs::path(out_dir) / index_name("cloud", i, "ply")).string());
    }
    std::cout << "wrote " << count << " shapes + clouds to " << out_dir << "\n";
    return 0;
}

std::vector<ShapeSpec> load_shape_dir(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("shape_", 0) == 0 && entry.path().extension() == ".json")
            files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no shape_*.json files in " + dir);
    std::vector<ShapeSpec> shapes;
    shapes.reserve(files.size());
    for (const auto& f : files) shapes.push_back(load_shape(f));
    return shapes;
}

int cmd_pretrain(const std::string& shapes_dir, const std::string& config_path,
                 const std::string& out_ckpt, const std::string& trace_path) {
    const RunConfig cfg = load_run_config(config_path);
    const auto shapes = load_shape_dir(shapes_dir);
    std::cout << "pretraining on " << shapes.size() << " shapes, " << cfg.pretrain.iterations
              << " iterations\n";
    auto result = pretrain(shapes, cfg.net, cfg.pretrain);
    save_checkpoint(result.model, out_ckpt);
    if (!trace_path.empty()) save_trace_csv(result.trace, trace_path);
    double tail = 0.0;
    const size_t window = std::min<size_t>(100, result.trace.size());
    for (size_t i = result.trace.size() - window; i < result.trace.size(); ++i)
        tail += result.trace[i].loss;
    std::cout << "final loss (window " << window << "): " << tail / static_cast<double>(window)
              << "\nwrote " << out_ckpt << "\n";
    return 0;
}

int cmd_reconstruct(const std::string& ckpt, const std::string& input, const std::string& mode,
                    int64_t sa_iters, double sa_lr0, uint64_t seed, const std::string& out_mesh,
                    const std::string& trace_path, int64_t mise_res0, int64_t mise_res1,
                    int64_t encode_points) {
    ConvOccNet model = load_checkpoint(ckpt);
    const PointCloud cloud = load_point_cloud(input);

    MiseConfig mise_cfg;
    mise_cfg.initial_res = mise_res0;
    mise_cfg.final_res = mise_res1;

    SAOptConfig sa;
    sa.iterations = sa_iters;
    sa.lr0 = sa_lr0;
    sa.seed = seed;
    sa.encode_points = encode_points;
    sa.mode = mode == "encoder-only" ? SAOptConfig::Mode::encoder_only : SAOptConfig::Mode::full;

    const bool with_sa = mode != "feedforward" && sa_iters > 0;
    const auto result = reconstruct(model, cloud, with_sa ? &sa : nullptr, mise_cfg);
    save_mesh(result.mesh, out_mesh);
    if (!trace_path.empty()) save_trace_csv(result.sa_trace, trace_path);
    std::cout << "mesh: " << result.mesh.vertices.size() << " vertices, "
              << result.mesh.faces.size() << " faces -> " << out_mesh << "\n";
    if (with_sa && !result.sa_trace.empty())
        std::cout << "uce: " << result.sa_trace.front().loss << " -> "
                  << result.sa_trace.back().loss << "\n";
    return 0;
}

int cmd_scene(const std::string& ckpt, const std::string& input, int64_t core, int64_t margin,
              int64_t global_res, int64_t sa_iters, double sa_lr0, uint64_t seed,
              const std::string& out_mesh, bool dump_plan) {
    ConvOccNet model = load_checkpoint(ckpt);
    const PointCloud cloud = load_point_cloud(input);
    auto [cube_pc, xf] = normalize_to_unit_cube(cloud, 0.05);

    if (margin < 0) margin = model.cfg.margin_for_equivalence();
    const WindowPlan plan = plan_windows(global_res, core, margin);
    if (dump_plan) std::cout << plan_to_text(plan);

    SAOptConfig sa;
    sa.iterations = sa_iters;
    sa.lr0 = sa_lr0;
    sa.seed = seed;
    auto result = reconstruct_scene(model, cube_pc, plan, sa_iters > 0 ? &sa : nullptr, seed);
    for (auto& v : result.mesh.vertices) v = xf.to_world(v);
    save_mesh(result.mesh, out_mesh);
    std::cout << "windows: " << plan.windows.size() << " (" << result.empty_windows
              << " empty)\nmesh: " << result.mesh.vertices.size() << " vertices, "
              << result.mesh.faces.size() << " faces -> " << out_mesh << "\n";
    return 0;
}

int cmd_eval(const std::string& mesh_path, const std::string& gt_shape_path, double tau,
             uint64_t seed, const std::string& report_path) {
    const TriMesh mesh = load_mesh(mesh_path);
    const ShapeSpec shape = load_shape(gt_shape_path);
    const PointCloud gt_cloud = sample_surface(shape, 10000, seed);
    const SampledSurface pred = sample_mesh(mesh, 10000, seed + 1);
    const SampledSurface gt{gt_cloud.points, gt_cloud.normals};
    const MetricsReport rep = compute_metrics_normalized(pred, gt, tau);
    const auto j = rep.to_json();
    if (!report_path.empty()) {
        std::ofstream f(report_path);
        if (!f) throw IoError("cannot open " + report_path + " for writing");
        f << j.dump(2) << "\n";
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sign-agnostic convolutional occupancy reconstruction"};
    app.require_subcommand(1);
    int threads = std::min(4u, std::max(1u, std::thread::hardware_concurrency()));
    app.add_option("--threads", threads, "worker threads for heavy kernels");

    auto* gen = app.add_subcommand("gen-shapes", "generate analytic shapes and sampled clouds");
    int64_t gen_count = 10, gen_points = 30000;
    uint64_t gen_seed = 0;
    double gen_noise = 0.0;
    std::string gen_out;
    gen->add_option("--count", gen_count, "number of shapes");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--points", gen_points, "surface points per cloud");
    gen->add_option("--noise", gen_noise, "gaussian noise sigma for clouds");

    auto* pre = app.add_subcommand("pretrain", "train the occupancy network on shape files");
    std::string pre_shapes, pre_config, pre_out, pre_trace;
    pre->add_option("--shapes", pre_shapes, "directory of shape_*.json")->required();
    pre->add_option("--config", pre_config, "key=value run config")->required();
    pre->add_option("--out", pre_out, "output checkpoint")->required();
    pre->add_option("--trace", pre_trace, "loss trace csv");

    auto* rec = app.add_subcommand("reconstruct", "reconstruct a mesh from a point cloud");
    std::string rec_ckpt, rec_input, rec_out, rec_trace, rec_mode = "full";
    int64_t rec_sa_iters = 1000, rec_res0 = 32, rec_res1 = 128, rec_encode_points = 3000;
    double rec_lr0 = 3e-5;
    uint64_t rec_seed = 0;
    rec->add_option("--ckpt", rec_ckpt, "model checkpoint")->required();
    rec->add_option("--input", rec_input, "input point cloud (.ply/.xyz)")->required();
    rec->add_option("--mode", rec_mode, "feedforward | full | encoder-only")
        ->check(CLI::IsMember({"feedforward", "full", "encoder-only"}));
    rec->add_option("--sa-iters", rec_sa_iters, "sign-agnostic optimization iterations");
    rec->add_option("--sa-lr0", rec_lr0, "initial sign-agnostic learning rate");
    rec->add_option("--encode-points", rec_encode_points,
                    "encoder input points per step (0 = whole cloud)");
    rec->add_option("--seed", rec_seed, "seed for all randomness");
    rec->add_option("--out", rec_out, "output mesh (.obj)")->required();
    rec->add_option("--trace", rec_trace, "sign-agnostic loss trace csv");
    rec->add_option("--mise-res0", rec_res0, "initial extraction resolution");
    rec->add_option("--mise-res1", rec_res1, "final extraction resolution");

    auto* scn = app.add_subcommand("scene", "sliding-window reconstruction");
    std::string scn_ckpt, scn_input, scn_out;
    int64_t scn_core = 16, scn_margin = -1, scn_global = 64, scn_sa_iters = 0;
    double scn_lr0 = 3e-5;
    uint64_t scn_seed = 0;
    bool scn_dump = false;
    scn->add_option("--ckpt", scn_ckpt, "model checkpoint")->required();
    scn->add_option("--input", scn_input, "input point cloud")->required();
    scn->add_option("--core", scn_core, "core size in lattice points");
    scn->add_option("--margin", scn_margin, "window margin (default: receptive field / 2)");
    scn->add_option("--global-res", scn_global, "global occupancy grid resolution");
    scn->add_option("--sa-iters", scn_sa_iters, "per-window optimization iterations (0 = off)");
    scn->add_option("--sa-lr0", scn_lr0, "initial per-window learning rate");
    scn->add_option("--seed", scn_seed, "seed for all randomness");
    scn->add_option("--out", scn_out, "output mesh (.obj)")->required();
    scn->add_flag("--dump-plan", scn_dump, "print the window plan");

    auto* ev = app.add_subcommand("eval", "compare a mesh against an analytic shape");
    std::string ev_mesh, ev_shape, ev_report;
    double ev_tau = 0.01;
    uint64_t ev_seed = 0;
    ev->add_option("--mesh", ev_mesh, "reconstructed mesh (.obj)")->required();
    ev->add_option("--gt-shape", ev_shape, "ground-truth shape json")->required();
    ev->add_option("--tau", ev_tau, "f-score threshold");
    ev->add_option("--seed", ev_seed, "sampling seed");
    ev->add_option("--report", ev_report, "output metrics json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\nrun with --help for usage\n";
        return 1;
    }

    set_max_threads(threads);
    try {
        if (*gen) return cmd_gen_shapes(gen_count, gen_seed, gen_out, gen_points, gen_noise);
        if (*pre) return cmd_pretrain(pre_shapes, pre_config, pre_out, pre_trace);
        if (*rec)
            return cmd_reconstruct(rec_ckpt, rec_input, rec_mode, rec_sa_iters, rec_lr0, rec_seed,
                                   rec_out, rec_trace, rec_res0, rec_res1, rec_encode_points);
        if (*scn)
            return cmd_scene(scn_ckpt, scn_input, scn_core, scn_margin, scn_global, scn_sa_iters,
                             scn_lr0, scn_seed, scn_out, scn_dump);
        if (*ev) return cmd_eval(ev_mesh, ev_shape, ev_tau, ev_seed, ev_report);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
