#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "saoc/errors.hpp"
#include "saoc/geometry.hpp"
#include "saoc/rng.hpp"
#include "saoc/tape.hpp"
#include "saoc/tensor.hpp"

namespace saoc {

struct NetConfig {
    int64_t grid_res = 32;       // R
    int64_t feature_dim = 32;    // C
    int64_t pointnet_blocks = 5;
    int64_t unet_depth = 2;
    int64_t unet_width = 0;      // channels at the top level; 0 means feature_dim
    int64_t decoder_blocks = 5;
    int64_t decoder_hidden = 32;

    int64_t width() const { return unet_width > 0 ? unet_width : feature_dim; }

    void validate() const {
        if (grid_res < 4 || (grid_res & (grid_res - 1)) != 0)
            throw ContractError("net config: grid_res must be a power of 2, >= 4");
        if (unet_depth < 1 || (int64_t(1) << unet_depth) > grid_res)
            throw ContractError("net config: unet_depth must satisfy 2^depth <= grid_res");
        if (feature_dim < 1 || pointnet_blocks < 1 || decoder_blocks < 1 || decoder_hidden < 1)
            throw ContractError("net config: all dimensions must be >= 1");
    }

    // Receptive-field diameter of the volumetric net in voxels; the window
    // margin for exact sliding-window equivalence is half of this, rounded up.
    int64_t receptive_field() const {
        int64_t rf = 1;
        rf += 2;  // input conv
        int64_t s = 1;
        for (int64_t l = 1; l <= unet_depth; ++l) {
            rf += s;       // 2x average pooling at scale s
            s *= 2;
            rf += 2 * s;   // down conv at scale s
        }
        for (int64_t l = unet_depth; l >= 1; --l) {
            s /= 2;
            rf += 2 * s;   // fusion conv after upsampling
        }
        rf += 2;  // output conv
        return rf;
    }
    // Half the receptive field plus the worst-case pooling alignment slack,
    // rounded up so window origins stay pooling-aligned.
    int64_t margin_for_equivalence() const {
        const int64_t align = int64_t(1) << unet_depth;
        const int64_t m = (receptive_field() + 1) / 2 + align - 1;
        return ((m + align - 1) / align) * align;
    }
};

// Named parameter store. Order is creation order and is part of the
// checkpoint contract, so construction must stay deterministic.
class ConvOccNet {
public:
    NetConfig cfg;

    explicit ConvOccNet(NetConfig config) : cfg(config) {
        cfg.validate();
        build_parameters();
    }

    Tensor& param(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw SchemaError("unknown parameter: " + name);
        return params_[it->second].second;
    }
    const Tensor& param(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw SchemaError("unknown parameter: " + name);
        return params_[it->second].second;
    }
    bool has_param(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<std::pair<std::string, Tensor>>& named_params() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }

    std::vector<Tensor*> param_ptrs() {
        std::vector<Tensor*> out;
        out.reserve(params_.size());
        for (auto& [name, t] : params_) out.push_back(&t);
        return out;
    }

    // Parameters owned by the point encoder + volumetric net (everything
    // except the occupancy decoder).
    std::vector<Tensor*> encoder_param_ptrs() {
        std::vector<Tensor*> out;
        for (auto& [name, t] : params_)
            if (name.rfind("dec.", 0) != 0) out.push_back(&t);
        return out;
    }

    int64_t total_parameter_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    // Kaiming-style fan-in init, deterministic per seed: every parameter is
    // drawn in construction order from one stream.
    void init_random(uint64_t seed) {
        Rng rng(seed);
        for (auto& [name, t] : params_) fill_kaiming(name, t, rng, 1.0);
    }

    // Decoder wired so that with zero volume features the logit approximates
    // a scaled signed distance to the sphere of radius r at the cube center:
    // positive outside, negative inside. The rest of the decoder is damped
    // random so gradients stay alive; the encoder is initialized normally.
    void init_geometric(double r, uint64_t seed = 0) {
        if (!(r > 0.0 && r < 0.5)) throw ContractError("geometric init: r must be in (0, 0.5)");
        Rng rng(seed);
        for (auto& [name, t] : params_) {
            const double damp = name.rfind("dec.", 0) == 0 ? 0.02 : 1.0;
            fill_kaiming(name, t, rng, damp);
        }
        const int64_t h = cfg.decoder_hidden;
        if (h < 7) throw ContractError("geometric init: decoder_hidden must be >= 7");
        const Vec3 c{0.5, 0.5, 0.5};
        Tensor& liftW = param("dec.lift.W");  // [h, 3+C]
        Tensor& liftB = param("dec.lift.b");
        const int64_t in = 3 + cfg.feature_dim;
        // units 0..2 hold q - c, units 3..5 hold c - q
        for (int64_t i = 0; i < 3; ++i) {
            for (int64_t j = 0; j < 3; ++j) {
                liftW[i * in + j] = (i == j) ? 1.0 : 0.0;
                liftW[(3 + i) * in + j] = (i == j) ? -1.0 : 0.0;
            }
            liftB[i] = -c[static_cast<int>(i)];
            liftB[3 + i] = c[static_cast<int>(i)];
        }
        // block 0 collects sum(relu(+/- (q - c))) = |q - c|_1 into unit 6
        Tensor& fc1W = param("dec.block0.fc1.W");  // [h, h]
        Tensor& fc1B = param("dec.block0.fc1.b");
        Tensor& fc2W = param("dec.block0.fc2.W");
        for (int64_t i = 0; i < 6; ++i) {
            for (int64_t j = 0; j < h; ++j) fc1W[i * h + j] = (i == j) ? 1.0 : 0.0;
            fc1B[i] = 0.0;
            fc2W[6 * h + i] = 1.0;
        }
        // head reads unit 6: logit = s * (|q-c|_1 - a); the L1 radius a is
        // volume-matched to the Euclidean ball of radius r (a = r * pi^(1/3))
        const double s = 4.0;
        const double a = r * std::cbrt(3.14159265358979323846);
        Tensor& headW = param("dec.head.W");  // [1, h]
        Tensor& headB = param("dec.head.b");
        for (int64_t j = 0; j < h; ++j) headW[j] *= 0.1;  // keep damped noise small
        headW[6] = s;
        headB[0] = -s * a;
    }

    ConvOccNet clone() const { return *this; }

private:
    void build_parameters() {
        const int64_t C = cfg.feature_dim;
        const int64_t W = cfg.width();
        // point encoder: lift 3 -> 2C, then blocks mapping 2C -> C with a
        // projection skip; grid pooling + concat restores 2C between blocks
        add("enc.lift.W", {2 * C, 3});
        add("enc.lift.b", {2 * C});
        for (int64_t b = 0; b < cfg.pointnet_blocks; ++b) {
            const std::string p = "enc.block" + std::to_string(b) + ".";
            add(p + "fc1.W", {C, 2 * C});
            add(p + "fc1.b", {C});
            add(p + "fc2.W", {C, C});
            add(p + "fc2.b", {C});
            add(p + "skip.W", {C, 2 * C});
            add(p + "skip.b", {C});
        }
        // hourglass: channels double per down level; up path fuses the
        // upsampled coarse features with the skip by concatenation + conv
        add("unet.in.W", {W, C, 3, 3, 3});
        add("unet.in.b", {W});
        for (int64_t l = 1; l <= cfg.unet_depth; ++l) {
            const int64_t cin = W << (l - 1), cout = W << l;
            add("unet.down" + std::to_string(l) + ".W", {cout, cin, 3, 3, 3});
            add("unet.down" + std::to_string(l) + ".b", {cout});
        }
        for (int64_t l = cfg.unet_depth; l >= 1; --l) {
            const int64_t cup = W << l, cskip = W << (l - 1);
            add("unet.up" + std::to_string(l) + ".W", {cskip, cup + cskip, 3, 3, 3});
            add("unet.up" + std::to_string(l) + ".b", {cskip});
        }
        add("unet.out.W", {C, W, 3, 3, 3});
        add("unet.out.b", {C});
        // occupancy decoder on [q || f_q]
        const int64_t h = cfg.decoder_hidden;
        add("dec.lift.W", {h, 3 + C});
        add("dec.lift.b", {h});
        for (int64_t b = 0; b < cfg.decoder_blocks; ++b) {
            const std::string p = "dec.block" + std::to_string(b) + ".";
            add(p + "fc1.W", {h, h});
            add(p + "fc1.b", {h});
            add(p + "fc2.W", {h, h});
            add(p + "fc2.b", {h});
        }
        add("dec.head.W", {1, h});
        add("dec.head.b", {1});
    }

    void add(const std::string& name, Shape shape) {
        index_[name] = params_.size();
        params_.emplace_back(name, Tensor(std::move(shape)));
    }

    static void fill_kaiming(const std::string& name, Tensor& t, Rng& rng, double damp) {
        const auto& s = t.shape();
        if (name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0) {
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
            return;
        }
        int64_t fan_in = s.size() >= 2 ? s[1] : 1;
        if (s.size() == 5) fan_in = s[1] * s[2] * s[3] * s[4];
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in)) * damp;
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
    }

    std::vector<std::pair<std::string, Tensor>> params_;
    std::unordered_map<std::string, size_t> index_;
};

struct FeatureVolume {
    Tensor features;  // [C, Rx, Ry, Rz]
    Box3 box = unit_box();

    void validate() const {
        if (features.shape().size() != 4)
            throw DimensionError("feature volume must be [C,Rx,Ry,Rz]");
        if (box.degenerate()) throw ContractError("feature volume box is degenerate");
        features.check_finite();
    }
};

// Tape-side handle to all model parameters. In encoder_only mode the decoder
// parameters are bound as constants, so backward cannot touch them.
struct BoundParams {
    Tape* tape = nullptr;
    std::unordered_map<std::string, Tape::Id> ids;

    Tape::Id operator()(const std::string& name) const {
        auto it = ids.find(name);
        if (it == ids.end()) throw SchemaError("parameter not bound: " + name);
        return it->second;
    }
};

enum class BindMode { all, encoder_only, frozen };

inline BoundParams bind_params(Tape& tape, ConvOccNet& model, BindMode mode = BindMode::all) {
    BoundParams bp;
    bp.tape = &tape;
    for (auto& [name, t] : model.named_params()) {
        const bool train = mode == BindMode::all ||
                           (mode == BindMode::encoder_only && name.rfind("dec.", 0) != 0);
        bp.ids[name] = train ? tape.watch(t) : tape.constant(t);
    }
    return bp;
}

namespace detail {

// linear -> relu -> linear with an additive skip; the skip is a projection
// when the widths differ, identity otherwise.
inline Tape::Id resnet_fc_block(Tape& t, const BoundParams& bp, const std::string& prefix,
                                Tape::Id x, bool projected_skip) {
    Tape::Id h = t.relu(t.linear(x, bp(prefix + "fc1.W"), bp(prefix + "fc1.b")));
    Tape::Id y = t.linear(h, bp(prefix + "fc2.W"), bp(prefix + "fc2.b"));
    Tape::Id s = projected_skip ? t.linear(x, bp(prefix + "skip.W"), bp(prefix + "skip.b")) : x;
    return t.add(s, y);
}

struct GridFrame {
    Box3 box;
    std::array<int64_t, 3> res;
    Vec3 cell;  // per-axis voxel size

    static GridFrame make(const Box3& box, std::array<int64_t, 3> res) {
        if (box.degenerate()) throw ContractError("grid frame: degenerate box");
        for (int64_t r : res)
            if (r < 2) throw ContractError("grid frame: resolution must be >= 2 per axis");
        GridFrame f;
        f.box = box;
        f.res = res;
        const Vec3 e = box.extent();
        f.cell = {e.x / static_cast<double>(res[0]), e.y / static_cast<double>(res[1]),
                  e.z / static_cast<double>(res[2])};
        return f;
    }

    std::array<int64_t, 3> cell_of(const Vec3& p) const {
        std::array<int64_t, 3> idx{};
        const Vec3 rel = p - box.lo;
        const double u[3] = {rel.x / cell.x, rel.y / cell.y, rel.z / cell.z};
        for (int a = 0; a < 3; ++a)
            idx[a] = std::clamp<int64_t>(static_cast<int64_t>(std::floor(u[a])), 0, res[a] - 1);
        return idx;
    }

    int64_t flat(const std::array<int64_t, 3>& i) const {
        return (i[0] * res[1] + i[1]) * res[2] + i[2];
    }

    // continuous grid coordinate for trilinear lookup over cell centers
    Vec3 grid_coord(const Vec3& p) const {
        const Vec3 rel = p - box.lo;
        return {rel.x / cell.x - 0.5, rel.y / cell.y - 0.5, rel.z / cell.z - 0.5};
    }
};

}  // namespace detail

// Per-point encoder + hourglass on an arbitrary grid frame. Returns the node
// holding V [C,Rx,Ry,Rz]. The per-point input is the offset within the
// point's voxel cell, which keeps the whole encoder translation-equivariant
// at the cell level.
inline Tape::Id encode_on_tape(Tape& t, const BoundParams& bp, const NetConfig& cfg,
                               const PointCloud& pc, const detail::GridFrame& frame) {
    if (pc.points.empty()) throw ContractError("encode: point cloud is empty");
    const int64_t N = static_cast<int64_t>(pc.points.size());
    const int64_t C = cfg.feature_dim;

    auto cells = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N));
    auto local = std::make_shared<std::vector<double>>(static_cast<size_t>(N * 3));
    for (int64_t n = 0; n < N; ++n) {
        Vec3 p = pc.points[static_cast<size_t>(n)];
        p = max(frame.box.lo, min(frame.box.hi, p));  // clamp into the frame
        const auto idx = frame.cell_of(p);
        (*cells)[static_cast<size_t>(n)] = frame.flat(idx);
        const Vec3 rel = p - frame.box.lo;
        (*local)[n * 3 + 0] = rel.x / frame.cell.x - static_cast<double>(idx[0]) - 0.5;
        (*local)[n * 3 + 1] = rel.y / frame.cell.y - static_cast<double>(idx[1]) - 0.5;
        (*local)[n * 3 + 2] = rel.z / frame.cell.z - static_cast<double>(idx[2]) - 0.5;
    }

    Tape::Id x = t.linear(t.constant({N, 3}, *local), bp("enc.lift.W"), bp("enc.lift.b"));
    Tape::Id feat = 0;
    for (int64_t b = 0; b < cfg.pointnet_blocks; ++b) {
        feat = detail::resnet_fc_block(t, bp, "enc.block" + std::to_string(b) + ".", x, true);
        if (b + 1 < cfg.pointnet_blocks) {
            Tape::Id pooled = t.gather_cells(
                t.scatter_mean(feat, cells, frame.res[0], frame.res[1], frame.res[2]), cells);
            x = t.concat_cols(feat, pooled);
        }
    }
    Tape::Id v0 = t.scatter_mean(feat, cells, frame.res[0], frame.res[1], frame.res[2]);

    // hourglass
    Tape::Id cur = t.reshape(v0, {1, C, frame.res[0], frame.res[1], frame.res[2]});
    cur = t.relu(t.conv3d(cur, bp("unet.in.W"), bp("unet.in.b")));
    std::vector<Tape::Id> skips{cur};
    for (int64_t l = 1; l <= cfg.unet_depth; ++l) {
        const std::string p = "unet.down" + std::to_string(l);
        cur = t.relu(t.conv3d(t.avg_down2(cur), bp(p + ".W"), bp(p + ".b")));
        if (l < cfg.unet_depth) skips.push_back(cur);
    }
    for (int64_t l = cfg.unet_depth; l >= 1; --l) {
        const std::string p = "unet.up" + std::to_string(l);
        Tape::Id up = t.nearest_up2(cur);
        cur = t.relu(t.conv3d(t.concat_channels(up, skips[static_cast<size_t>(l - 1)]),
                              bp(p + ".W"), bp(p + ".b")));
    }
    Tape::Id v = t.conv3d(cur, bp("unet.out.W"), bp("unet.out.b"));
    return t.reshape(v, {C, frame.res[0], frame.res[1], frame.res[2]});
}

// Decoder logits at the given world-frame coordinates. The decoder consumes
// the raw coordinates plus the trilinear feature lookup.
inline Tape::Id query_logits_on_tape(Tape& t, const BoundParams& bp, const NetConfig& cfg,
                                     Tape::Id vol, const detail::GridFrame& frame,
                                     const std::vector<Vec3>& coords) {
    if (coords.empty()) throw ContractError("query_logits: need at least one query");
    const int64_t M = static_cast<int64_t>(coords.size());
    auto grid_coords = std::make_shared<std::vector<double>>(static_cast<size_t>(M * 3));
    std::vector<double> raw(static_cast<size_t>(M * 3));
    for (int64_t m = 0; m < M; ++m) {
        const Vec3& p = coords[static_cast<size_t>(m)];
        if (!p.finite()) throw ContractError("query_logits: non-finite coordinate");
        const Vec3 u = frame.grid_coord(p);
        (*grid_coords)[m * 3 + 0] = u.x;
        (*grid_coords)[m * 3 + 1] = u.y;
        (*grid_coords)[m * 3 + 2] = u.z;
        raw[m * 3 + 0] = p.x;
        raw[m * 3 + 1] = p.y;
        raw[m * 3 + 2] = p.z;
    }
    Tape::Id f = t.trilinear(vol, grid_coords);
    Tape::Id input = t.concat_cols(t.constant({M, 3}, std::move(raw)), f);
    Tape::Id h = t.linear(input, bp("dec.lift.W"), bp("dec.lift.b"));
    for (int64_t b = 0; b < cfg.decoder_blocks; ++b)
        h = detail::resnet_fc_block(t, bp, "dec.block" + std::to_string(b) + ".", h, false);
    Tape::Id logits = t.linear(h, bp("dec.head.W"), bp("dec.head.b"));
    return t.reshape(logits, {M});
}

// ---- inference wrappers (no gradients kept) -------------------------------

inline FeatureVolume encode(ConvOccNet& model, const PointCloud& pc,
                            const Box3& box = unit_box(), int64_t res = 0) {
    const int64_t r = res > 0 ? res : model.cfg.grid_res;
    Tape t;
    BoundParams bp = bind_params(t, model, BindMode::frozen);
    const auto frame = detail::GridFrame::make(box, {r, r, r});
    Tape::Id v = encode_on_tape(t, bp, model.cfg, pc, frame);
    FeatureVolume out;
    out.features = Tensor(t.shape(v), t.value(v));
    out.box = box;
    out.validate();
    return out;
}

inline std::vector<double> query_logits(ConvOccNet& model, const FeatureVolume& vol,
                                        const std::vector<Vec3>& coords) {
    Tape t;
    BoundParams bp = bind_params(t, model, BindMode::frozen);
    const auto& s = vol.features.shape();
    const auto frame = detail::GridFrame::make(vol.box, {s[1], s[2], s[3]});
    Tape::Id v = t.constant(vol.features);
    Tape::Id logits = query_logits_on_tape(t, bp, model.cfg, v, frame, coords);
    return t.value(logits);
}

inline std::vector<double> query_occupancy(ConvOccNet& model, const FeatureVolume& vol,
                                           const std::vector<Vec3>& coords) {
    Tape t;
    BoundParams bp = bind_params(t, model, BindMode::frozen);
    const auto& s = vol.features.shape();
    const auto frame = detail::GridFrame::make(vol.box, {s[1], s[2], s[3]});
    Tape::Id v = t.constant(vol.features);
    Tape::Id occ = t.sigmoid(query_logits_on_tape(t, bp, model.cfg, v, frame, coords));
    return t.value(occ);
}

}  // namespace saoc
