#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "saoc/adam.hpp"
#include "saoc/errors.hpp"
#include "saoc/geometry.hpp"
#include "saoc/meshing.hpp"
#include "saoc/network.hpp"
#include "saoc/rng.hpp"
#include "saoc/tape.hpp"

namespace saoc {

struct TraceRow {
    int64_t iteration = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct PretrainConfig {
    int64_t batch_size = 8;
    double lr = 1e-4;
    int64_t iterations = 5000;
    int64_t queries_per_shape = 1024;
    int64_t surface_points_per_shape = 3000;
    double noise_sigma = 0.05;
    uint64_t seed = 0;
    Reduction reduction = Reduction::mean;  // Reduction::sum gives the literal summed loss

    void validate() const {
        if (batch_size < 1 || iterations < 1 || queries_per_shape < 1 ||
            surface_points_per_shape < 1)
            throw ContractError("pretrain config: all counts must be >= 1");
        if (lr <= 0.0) throw ContractError("pretrain config: lr must be positive");
        if (noise_sigma < 0.0) throw ContractError("pretrain config: sigma must be >= 0");
    }
};

struct SAOptConfig {
    int64_t iterations = 1000;
    int64_t batch = 16;        // per-step query batch is n_surface + n_nonsurface
    double lr0 = 3e-5;
    double decay = 0.3;
    int64_t decay_every = 400;
    int64_t n_surface = 512;
    int64_t n_nonsurface = 1536;
    enum class Mode { full, encoder_only } mode = Mode::full;
    uint64_t seed = 0;
    // cap on encoder input points per step (0 = use the whole cloud); the
    // subset is redrawn every iteration
    int64_t encode_points = 3000;
    Reduction reduction = Reduction::mean;

    void validate() const {
        if (iterations < 1 || n_surface < 0 || n_nonsurface < 0 ||
            n_surface + n_nonsurface < 1)
            throw ContractError("sa config: need n_surface + n_nonsurface >= 1");
        if (lr0 <= 0.0 || decay <= 0.0 || decay > 1.0 || decay_every < 1)
            throw ContractError("sa config: invalid learning-rate schedule");
    }

    double lr_at(int64_t iteration) const {
        return lr0 * std::pow(decay, static_cast<double>(iteration / decay_every));
    }
};

// UCE on the tape: mean (or sum) BCE between sigmoid(|logit|) and targets of
// 0.5 for the first n_surface entries, 1.0 for the rest. Uses the fused
// logit-space form so saturated fields keep usable gradients.
inline Tape::Id uce_on_tape(Tape& t, Tape::Id logits, int64_t n_surface,
                            Reduction reduction = Reduction::mean) {
    const int64_t total = shape_numel(t.shape(logits));
    if (n_surface < 0 || n_surface > total)
        throw ContractError("uce: n_surface outside [0, total]");
    std::vector<double> targets(static_cast<size_t>(total), 1.0);
    for (int64_t i = 0; i < n_surface; ++i) targets[static_cast<size_t>(i)] = 0.5;
    return t.bce_logits(t.abs(logits), t.constant({total}, std::move(targets)), reduction);
}

// Value-level UCE over raw logit vectors.
inline double uce_loss(const std::vector<double>& surface_logits,
                       const std::vector<double>& nonsurface_logits,
                       Reduction reduction = Reduction::mean) {
    const int64_t s = static_cast<int64_t>(surface_logits.size());
    const int64_t k = static_cast<int64_t>(nonsurface_logits.size());
    if (s + k < 1) throw ContractError("uce: need at least one logit");
    std::vector<double> all(surface_logits);
    all.insert(all.end(), nonsurface_logits.begin(), nonsurface_logits.end());
    Tape t;
    return t.scalar(uce_on_tape(t, t.constant({s + k}, std::move(all)), s, reduction));
}

struct PretrainResult {
    ConvOccNet model;
    std::vector<TraceRow> trace;
};

// Eq.-2-style pretraining: per iteration, draw shapes, sample a fresh noisy
// surface cloud per shape as the encoder input, supervise uniformly sampled
// queries with the analytic occupancy oracle, and take one Adam step on the
// batch-mean BCE. Each training cloud goes through the same unit-cube
// normalization that reconstruction applies, with oracle queries mapped back
// through the transform, so the two stages see one input distribution.
inline PretrainResult pretrain(const std::vector<ShapeSpec>& shapes, const NetConfig& netcfg,
                               const PretrainConfig& cfg) {
    if (shapes.empty()) throw ContractError("pretrain: need at least one shape");
    cfg.validate();
    PretrainResult res{ConvOccNet(netcfg), {}};
    ConvOccNet& model = res.model;
    model.init_random(cfg.seed);
    AdamState adam;
    const auto params = model.param_ptrs();
    const auto frame = detail::GridFrame::make(
        unit_box(), {netcfg.grid_res, netcfg.grid_res, netcfg.grid_res});
    res.trace.reserve(static_cast<size_t>(cfg.iterations));

    for (int64_t iter = 0; iter < cfg.iterations; ++iter) {
        model.zero_grads();
        double loss_acc = 0.0;
        for (int64_t item = 0; item < cfg.batch_size; ++item) {
            Rng rng = Rng::stream(cfg.seed, static_cast<uint64_t>(iter),
                                  static_cast<uint64_t>(item));
            const auto& shape = shapes[rng.uniform_index(shapes.size())];
            PointCloud cloud =
                sample_surface(shape, cfg.surface_points_per_shape, rng.next_u64());
            cloud = add_noise(cloud, cfg.noise_sigma, rng.next_u64());
            auto [cube_cloud, xf] = normalize_to_unit_cube(cloud, 0.05);
            cloud = std::move(cube_cloud);

            const auto queries = sample_uniform(unit_box(), cfg.queries_per_shape, rng.next_u64());
            std::vector<double> targets;
            targets.reserve(queries.size());
            for (const auto& q : queries)
                targets.push_back(occupied(shape, xf.to_world(q)) ? 1.0 : 0.0);

            Tape t;
            BoundParams bp = bind_params(t, model, BindMode::all);
            Tape::Id vol = encode_on_tape(t, bp, netcfg, cloud, frame);
            Tape::Id logits = query_logits_on_tape(t, bp, netcfg, vol, frame, queries);
            Tape::Id loss = t.bce_logits(
                logits, t.constant({cfg.queries_per_shape}, std::move(targets)), cfg.reduction);
            const double value = t.scalar(loss);
            if (!std::isfinite(value))
                throw ContractError("pretrain: non-finite loss at iteration " +
                                    std::to_string(iter) + " (lr " + std::to_string(cfg.lr) + ")");
            loss_acc += value;
            t.backward(loss);
        }
        const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
        for (Tensor* p : params)
            for (auto& g : p->grad()) g *= inv_batch;
        adam.step(params, cfg.lr);
        res.trace.push_back({iter, loss_acc * inv_batch, cfg.lr});
    }
    return res;
}

// Optional per-iteration hook; called after the Adam step with the 1-based
// iteration count.
using SAOptCallback = std::function<void(int64_t completed_iterations, ConvOccNet& model)>;

// Sign-agnostic test-time optimization of the (pretrained or geometrically
// initialized) model against one observed cloud. Re-encodes the cloud every
// step since the encoder itself is being optimized. Returns the loss trace;
// the model is adapted in place.
inline std::vector<TraceRow> sa_optimize(ConvOccNet& model, const PointCloud& pc,
                                         const SAOptConfig& cfg,
                                         const Box3& domain = unit_box(),
                                         std::array<int64_t, 3> res = {0, 0, 0},
                                         const SAOptCallback& callback = {}) {
    if (pc.points.empty()) throw ContractError("sa_optimize: point cloud is empty");
    cfg.validate();
    for (auto& r : res)
        if (r == 0) r = model.cfg.grid_res;
    const auto frame = detail::GridFrame::make(domain, res);

    AdamState adam;
    const auto params = cfg.mode == SAOptConfig::Mode::encoder_only ? model.encoder_param_ptrs()
                                                                    : model.param_ptrs();
    const BindMode bind_mode = cfg.mode == SAOptConfig::Mode::encoder_only
                                   ? BindMode::encoder_only
                                   : BindMode::all;
    const int64_t N = static_cast<int64_t>(pc.points.size());
    std::vector<int64_t> order(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i) order[static_cast<size_t>(i)] = i;

    std::vector<TraceRow> trace;
    trace.reserve(static_cast<size_t>(cfg.iterations));
    for (int64_t iter = 0; iter < cfg.iterations; ++iter) {
        const double lr = cfg.lr_at(iter);
        Rng rng = Rng::stream(cfg.seed, static_cast<uint64_t>(iter), 0x5a);

        // encoder input: the whole cloud, or a fresh random subset
        PointCloud encode_cloud;
        if (cfg.encode_points > 0 && N > cfg.encode_points) {
            for (int64_t i = 0; i < cfg.encode_points; ++i) {
                const int64_t j =
                    i + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(N - i)));
                std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
                encode_cloud.points.push_back(pc.points[static_cast<size_t>(order[i])]);
            }
        } else {
            encode_cloud.points = pc.points;
        }

        std::vector<Vec3> queries;
        queries.reserve(static_cast<size_t>(cfg.n_surface + cfg.n_nonsurface));
        for (int64_t i = 0; i < cfg.n_surface; ++i)
            queries.push_back(pc.points[rng.uniform_index(static_cast<uint64_t>(N))]);
        const auto uniform = sample_uniform(frame.box, cfg.n_nonsurface, rng.next_u64());
        queries.insert(queries.end(), uniform.begin(), uniform.end());

        model.zero_grads();
        Tape t;
        BoundParams bp = bind_params(t, model, bind_mode);
        Tape::Id vol = encode_on_tape(t, bp, model.cfg, encode_cloud, frame);
        Tape::Id logits = query_logits_on_tape(t, bp, model.cfg, vol, frame, queries);
        Tape::Id loss = uce_on_tape(t, logits, cfg.n_surface, cfg.reduction);
        const double value = t.scalar(loss);
        if (!std::isfinite(value))
            throw ContractError("sa_optimize: non-finite loss at iteration " +
                                std::to_string(iter) + " (lr " + std::to_string(lr) + ")");
        t.backward(loss);
        adam.step(params, lr);
        trace.push_back({iter, value, lr});
        if (callback) callback(iter + 1, model);
    }
    return trace;
}

struct ReconstructResult {
    TriMesh mesh;
    std::vector<TraceRow> sa_trace;
    DomainTransform transform;  // world -> normalized cube
};

// Query helper: batched occupancy over a fixed feature volume. Large batches
// are evaluated in chunks to keep the decoder's activation graphs small.
inline BatchQuery occupancy_query(ConvOccNet& model, const FeatureVolume& vol) {
    return [&model, &vol](const std::vector<Vec3>& pts) {
        constexpr size_t kChunk = 32768;
        if (pts.size() <= kChunk) return query_occupancy(model, vol, pts);
        std::vector<double> out;
        out.reserve(pts.size());
        for (size_t lo = 0; lo < pts.size(); lo += kChunk) {
            const size_t hi = std::min(pts.size(), lo + kChunk);
            const std::vector<Vec3> part(pts.begin() + static_cast<int64_t>(lo),
                                         pts.begin() + static_cast<int64_t>(hi));
            const auto vals = query_occupancy(model, vol, part);
            out.insert(out.end(), vals.begin(), vals.end());
        }
        return out;
    };
}

// Normalize, optionally adapt by sign-agnostic optimization, extract the 0.5
// level set with MISE, and map the mesh back to world coordinates. The model
// is never mutated; adaptation runs on an internal clone.
inline ReconstructResult reconstruct(const ConvOccNet& model, const PointCloud& pc,
                                     const SAOptConfig* sa_cfg, const MiseConfig& mise_cfg,
                                     double padding = 0.05) {
    if (pc.points.empty()) throw ContractError("reconstruct: point cloud is empty");
    auto [cube_pc, xf] = normalize_to_unit_cube(pc, padding);

    ReconstructResult out;
    out.transform = xf;
    ConvOccNet work = model.clone();
    if (sa_cfg) out.sa_trace = sa_optimize(work, cube_pc, *sa_cfg);

    const FeatureVolume vol = encode(work, cube_pc);
    const auto result = mise(occupancy_query(work, vol), mise_cfg, unit_box());
    out.mesh = result.mesh;
    for (auto& v : out.mesh.vertices) v = xf.to_world(v);
    return out;
}

}  // namespace saoc
