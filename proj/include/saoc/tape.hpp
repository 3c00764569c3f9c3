#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "saoc/errors.hpp"
#include "saoc/parallel.hpp"
#include "saoc/tensor.hpp"

namespace saoc {

enum class Elementwise { relu, sigmoid, abs };
enum class Resample { avg_down2, nearest_up2 };
enum class Reduction { mean, sum };

// Log-argument clamp for binary cross-entropy.
inline constexpr double kBceEps = 1e-7;

// Reverse-mode tape. Nodes are appended in creation order, which is also a
// topological order; backward() walks them once in reverse. One backward per
// tape. Leaves created through watch() push their gradients back into the
// owning Tensor, so the optimizer never touches tape internals.
class Tape {
public:
    using Id = int32_t;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- leaves ---------------------------------------------------------

    Id watch(Tensor& param) {
        Id id = push(param.shape(), param.values());
        nodes_[id].leaf = &param;
        return id;
    }

    Id constant(const Tensor& t) { return push(t.shape(), t.values()); }

    Id constant(Shape shape, std::vector<double> data) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw DimensionError("constant data does not match shape " + shape_str(shape));
        return push(std::move(shape), std::move(data));
    }

    // ---- inspection ------------------------------------------------------

    const Shape& shape(Id id) const { return nodes_[id].shape; }
    const std::vector<double>& value(Id id) const { return nodes_[id].val; }
    double scalar(Id id) const {
        if (nodes_[id].val.size() != 1) throw ContractError("node is not a scalar");
        return nodes_[id].val[0];
    }
    const std::vector<double>& grad(Id id) const {
        static const std::vector<double> empty;
        return nodes_[id].grad.empty() ? empty : nodes_[id].grad;
    }

    // ---- elementwise -----------------------------------------------------

    Id elementwise(Id x, Elementwise kind) {
        switch (kind) {
            case Elementwise::relu: return relu(x);
            case Elementwise::sigmoid: return sigmoid(x);
            case Elementwise::abs: return abs(x);
        }
        throw ContractError("unknown elementwise kind");
    }

    Id relu(Id x) {
        const auto& xv = nodes_[x].val;
        std::vector<double> out(xv.size());
        for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
        Id id = push(nodes_[x].shape, std::move(out));
        nodes_[id].back = [this, id, x] {
            auto& g = grad_buf(x);
            const auto& go = nodes_[id].grad;
            const auto& xv = nodes_[x].val;
            for (size_t i = 0; i < g.size(); ++i)
                if (xv[i] > 0.0) g[i] += go[i];
        };
        return id;
    }

    Id sigmoid(Id x) {
        const auto& xv = nodes_[x].val;
        std::vector<double> out(xv.size());
        for (size_t i = 0; i < xv.size(); ++i) out[i] = stable_sigmoid(xv[i]);
        Id id = push(nodes_[x].shape, std::move(out));
        nodes_[id].back = [this, id, x] {
            auto& g = grad_buf(x);
            const auto& go = nodes_[id].grad;
            const auto& yv = nodes_[id].val;
            for (size_t i = 0; i < g.size(); ++i) g[i] += go[i] * yv[i] * (1.0 - yv[i]);
        };
        return id;
    }

    // Subgradient at 0 is 0.
    Id abs(Id x) {
        const auto& xv = nodes_[x].val;
        std::vector<double> out(xv.size());
        for (size_t i = 0; i < xv.size(); ++i) out[i] = std::fabs(xv[i]);
        Id id = push(nodes_[x].shape, std::move(out));
        nodes_[id].back = [this, id, x] {
            auto& g = grad_buf(x);
            const auto& go = nodes_[id].grad;
            const auto& xv = nodes_[x].val;
            for (size_t i = 0; i < g.size(); ++i) {
                if (xv[i] > 0.0) g[i] += go[i];
                else if (xv[i] < 0.0) g[i] -= go[i];
            }
        };
        return id;
    }

    // ---- dense algebra ---------------------------------------------------

    // x:[B,I] W:[O,I] b:[O] -> [B,O]
    Id linear(Id x, Id W, Id b) {
        const Shape& xs = nodes_[x].shape;
        const Shape& ws = nodes_[W].shape;
        const Shape& bs = nodes_[b].shape;
        if (xs.size() != 2 || ws.size() != 2 || bs.size() != 1 || xs[1] != ws[1] || ws[0] != bs[0])
            throw DimensionError("linear: incompatible shapes x" + shape_str(xs) + " W" +
                                 shape_str(ws) + " b" + shape_str(bs));
        const int64_t B = xs[0], I = xs[1], O = ws[0];
        std::vector<double> out(static_cast<size_t>(B * O));
        {
            const double* xp = nodes_[x].val.data();
            const double* wp = nodes_[W].val.data();
            const double* bp = nodes_[b].val.data();
            double* op = out.data();
            parallel_for(B, [&](int64_t r) {
                const double* xr = xp + r * I;
                double* orow = op + r * O;
                for (int64_t o = 0; o < O; ++o) {
                    const double* wrow = wp + o * I;
                    double acc = bp[o];
                    for (int64_t i = 0; i < I; ++i) acc += wrow[i] * xr[i];
                    orow[o] = acc;
                }
            });
        }
        Id id = push({B, O}, std::move(out));
        nodes_[id].back = [this, id, x, W, b, B, I, O] {
            const auto& go = nodes_[id].grad;
            const double* gp = go.data();
            const double* xp = nodes_[x].val.data();
            const double* wp = nodes_[W].val.data();
            {
                auto& gx = grad_buf(x);
                double* gxp = gx.data();
                parallel_for(B, [&](int64_t r) {
                    const double* grow = gp + r * O;
                    double* gxr = gxp + r * I;
                    for (int64_t o = 0; o < O; ++o) {
                        const double g = grow[o];
                        if (g == 0.0) continue;
                        const double* wrow = wp + o * I;
                        for (int64_t i = 0; i < I; ++i) gxr[i] += g * wrow[i];
                    }
                });
            }
            {
                auto& gw = grad_buf(W);
                double* gwp = gw.data();
                parallel_for(O, [&](int64_t o) {
                    double* gwrow = gwp + o * I;
                    for (int64_t r = 0; r < B; ++r) {
                        const double g = gp[r * O + o];
                        if (g == 0.0) continue;
                        const double* xr = xp + r * I;
                        for (int64_t i = 0; i < I; ++i) gwrow[i] += g * xr[i];
                    }
                });
            }
            {
                auto& gb = grad_buf(b);
                for (int64_t r = 0; r < B; ++r)
                    for (int64_t o = 0; o < O; ++o) gb[o] += gp[r * O + o];
            }
        };
        return id;
    }

    // x:[B,C,H,W,D] k:[O,C,3,3,3] b:[O] -> [B,O,H,W,D]; stride 1, zero pad 1.
    Id conv3d(Id x, Id k, Id b) {
        const Shape& xs = nodes_[x].shape;
        const Shape& ks = nodes_[k].shape;
        const Shape& bs = nodes_[b].shape;
        if (xs.size() != 5 || ks.size() != 5 || bs.size() != 1)
            throw DimensionError("conv3d: expected x[B,C,H,W,D] k[O,C,3,3,3] b[O]");
        if (ks[2] != 3 || ks[3] != 3 || ks[4] != 3)
            throw DimensionError("conv3d: kernel spatial size must be 3, got " + shape_str(ks));
        if (ks[1] != xs[1] || bs[0] != ks[0])
            throw DimensionError("conv3d: channel mismatch x" + shape_str(xs) + " k" + shape_str(ks));
        const int64_t B = xs[0], C = xs[1], H = xs[2], Wd = xs[3], D = xs[4], O = ks[0];
        std::vector<double> out(static_cast<size_t>(B * O * H * Wd * D));
        conv3d_forward(nodes_[x].val.data(), nodes_[k].val.data(), nodes_[b].val.data(),
                       out.data(), B, C, O, H, Wd, D);
        Id id = push({B, O, H, Wd, D}, std::move(out));
        nodes_[id].back = [this, id, x, k, b, B, C, O, H, Wd, D] {
            const double* go = nodes_[id].grad.data();
            conv3d_backward_input(go, nodes_[k].val.data(), grad_buf(x).data(), B, C, O, H, Wd, D);
            conv3d_backward_kernel(go, nodes_[x].val.data(), grad_buf(k).data(), B, C, O, H, Wd, D);
            auto& gb = grad_buf(b);
            const int64_t vol = H * Wd * D;
            for (int64_t bb = 0; bb < B; ++bb)
                for (int64_t o = 0; o < O; ++o) {
                    const double* src = go + (bb * O + o) * vol;
                    double acc = 0.0;
                    for (int64_t i = 0; i < vol; ++i) acc += src[i];
                    gb[o] += acc;
                }
        };
        return id;
    }

    Id resample3d(Id x, Resample mode) {
        return mode == Resample::avg_down2 ? avg_down2(x) : nearest_up2(x);
    }

    Id avg_down2(Id x) {
        const Shape& xs = nodes_[x].shape;
        if (xs.size() != 5) throw DimensionError("avg_down2: expected [B,C,H,W,D]");
        const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3], D = xs[4];
        if (H % 2 || W % 2 || D % 2)
            throw DimensionError("avg_down2: spatial dims must be even, got " + shape_str(xs));
        const int64_t h = H / 2, w = W / 2, d = D / 2;
        std::vector<double> out(static_cast<size_t>(B * C * h * w * d));
        const double* xp = nodes_[x].val.data();
        for (int64_t bc = 0; bc < B * C; ++bc) {
            const double* src = xp + bc * H * W * D;
            double* dst = out.data() + bc * h * w * d;
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j)
                    for (int64_t l = 0; l < d; ++l) {
                        double acc = 0.0;
                        for (int64_t di = 0; di < 2; ++di)
                            for (int64_t dj = 0; dj < 2; ++dj)
                                for (int64_t dl = 0; dl < 2; ++dl)
                                    acc += src[((2 * i + di) * W + 2 * j + dj) * D + 2 * l + dl];
                        dst[(i * w + j) * d + l] = acc * 0.125;
                    }
        }
        Id id = push({B, C, h, w, d}, std::move(out));
        nodes_[id].back = [this, id, x, B, C, H, W, D, h, w, d] {
            auto& gx = grad_buf(x);
            const double* go = nodes_[id].grad.data();
            for (int64_t bc = 0; bc < B * C; ++bc) {
                double* dst = gx.data() + bc * H * W * D;
                const double* src = go + bc * h * w * d;
                for (int64_t i = 0; i < h; ++i)
                    for (int64_t j = 0; j < w; ++j)
                        for (int64_t l = 0; l < d; ++l) {
                            const double g = src[(i * w + j) * d + l] * 0.125;
                            for (int64_t di = 0; di < 2; ++di)
                                for (int64_t dj = 0; dj < 2; ++dj)
                                    for (int64_t dl = 0; dl < 2; ++dl)
                                        dst[((2 * i + di) * W + 2 * j + dj) * D + 2 * l + dl] += g;
                        }
            }
        };
        return id;
    }

    Id nearest_up2(Id x) {
        const Shape& xs = nodes_[x].shape;
        if (xs.size() != 5) throw DimensionError("nearest_up2: expected [B,C,H,W,D]");
        const int64_t B = xs[0], C = xs[1], h = xs[2], w = xs[3], d = xs[4];
        const int64_t H = 2 * h, W = 2 * w, D = 2 * d;
        std::vector<double> out(static_cast<size_t>(B * C * H * W * D));
        const double* xp = nodes_[x].val.data();
        for (int64_t bc = 0; bc < B * C; ++bc) {
            const double* src = xp + bc * h * w * d;
            double* dst = out.data() + bc * H * W * D;
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j)
                    for (int64_t l = 0; l < D; ++l)
                        dst[(i * W + j) * D + l] = src[((i / 2) * w + j / 2) * d + l / 2];
        }
        Id id = push({B, C, H, W, D}, std::move(out));
        nodes_[id].back = [this, id, x, B, C, h, w, d, H, W, D] {
            auto& gx = grad_buf(x);
            const double* go = nodes_[id].grad.data();
            for (int64_t bc = 0; bc < B * C; ++bc) {
                double* dst = gx.data() + bc * h * w * d;
                const double* src = go + bc * H * W * D;
                for (int64_t i = 0; i < H; ++i)
                    for (int64_t j = 0; j < W; ++j)
                        for (int64_t l = 0; l < D; ++l)
                            dst[((i / 2) * w + j / 2) * d + l / 2] += src[(i * W + j) * D + l];
            }
        };
        return id;
    }

    // feats:[N,C] cells:[N] -> [C,Rx,Ry,Rz]; empty cells are exactly 0.
    Id scatter_mean(Id feats, std::shared_ptr<const std::vector<int64_t>> cells,
                    int64_t rx, int64_t ry, int64_t rz) {
        const Shape& fs = nodes_[feats].shape;
        if (fs.size() != 2) throw DimensionError("scatter_mean: expected feats [N,C]");
        const int64_t N = fs[0], C = fs[1], G = rx * ry * rz;
        if (static_cast<int64_t>(cells->size()) != N)
            throw DimensionError("scatter_mean: cell index count does not match N");
        for (int64_t idx : *cells)
            if (idx < 0 || idx >= G)
                throw IndexError("scatter_mean: cell index " + std::to_string(idx) +
                                 " outside [0," + std::to_string(G) + ")");
        auto counts = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(G), 0);
        for (int64_t idx : *cells) (*counts)[static_cast<size_t>(idx)]++;
        // Canonical accumulation: rows of each cell are summed in sorted order
        // with duplicates merged into integer multiplicities. This makes the
        // result bit-exactly invariant under permuting or duplicating the
        // input points.
        std::vector<int64_t> order(static_cast<size_t>(N));
        for (int64_t n = 0; n < N; ++n) order[static_cast<size_t>(n)] = n;
        const double* fp = nodes_[feats].val.data();
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            const int64_t ca = (*cells)[static_cast<size_t>(a)];
            const int64_t cb = (*cells)[static_cast<size_t>(b)];
            if (ca != cb) return ca < cb;
            return std::lexicographical_compare(fp + a * C, fp + (a + 1) * C, fp + b * C,
                                                fp + (b + 1) * C);
        });
        std::vector<double> out(static_cast<size_t>(C * G), 0.0);
        size_t i = 0;
        while (i < order.size()) {
            const int64_t cell = (*cells)[static_cast<size_t>(order[i])];
            size_t j = i;
            while (j < order.size() && (*cells)[static_cast<size_t>(order[j])] == cell) ++j;
            for (size_t a = i; a < j;) {
                const double* row = fp + order[a] * C;
                size_t b = a + 1;
                while (b < j && std::equal(row, row + C, fp + order[b] * C)) ++b;
                const double mult = static_cast<double>(b - a);
                for (int64_t c = 0; c < C; ++c) out[c * G + cell] += mult * row[c];
                a = b;
            }
            const double cnt = static_cast<double>((*counts)[static_cast<size_t>(cell)]);
            if (cnt > 1.0)
                for (int64_t c = 0; c < C; ++c) out[c * G + cell] /= cnt;
            i = j;
        }
        Id id = push({C, rx, ry, rz}, std::move(out));
        nodes_[id].back = [this, id, feats, cells, counts, N, C, G] {
            auto& gf = grad_buf(feats);
            const double* go = nodes_[id].grad.data();
            for (int64_t n = 0; n < N; ++n) {
                const int64_t cell = (*cells)[static_cast<size_t>(n)];
                const double inv = 1.0 / (*counts)[static_cast<size_t>(cell)];
                double* grow = gf.data() + n * C;
                for (int64_t c = 0; c < C; ++c) grow[c] += go[c * G + cell] * inv;
            }
        };
        return id;
    }

    // vol:[C,Rx,Ry,Rz] cells:[N] -> [N,C]; per-point lookup of its cell value.
    Id gather_cells(Id vol, std::shared_ptr<const std::vector<int64_t>> cells) {
        const Shape& vs = nodes_[vol].shape;
        if (vs.size() != 4) throw DimensionError("gather_cells: expected vol [C,Rx,Ry,Rz]");
        const int64_t C = vs[0], G = vs[1] * vs[2] * vs[3];
        const int64_t N = static_cast<int64_t>(cells->size());
        for (int64_t idx : *cells)
            if (idx < 0 || idx >= G) throw IndexError("gather_cells: cell index outside grid");
        std::vector<double> out(static_cast<size_t>(N * C));
        const double* vp = nodes_[vol].val.data();
        for (int64_t n = 0; n < N; ++n) {
            const int64_t cell = (*cells)[static_cast<size_t>(n)];
            for (int64_t c = 0; c < C; ++c) out[n * C + c] = vp[c * G + cell];
        }
        Id id = push({N, C}, std::move(out));
        nodes_[id].back = [this, id, vol, cells, N, C, G] {
            auto& gv = grad_buf(vol);
            const double* go = nodes_[id].grad.data();
            for (int64_t n = 0; n < N; ++n) {
                const int64_t cell = (*cells)[static_cast<size_t>(n)];
                for (int64_t c = 0; c < C; ++c) gv[c * G + cell] += go[n * C + c];
            }
        };
        return id;
    }

    // vol:[C,Rx,Ry,Rz] with lattice sites at voxel centers of the unit box
    // [0,1]^3 scaled per axis; coords are given in grid frame u = p*R - 0.5
    // by the caller. Differentiable w.r.t. vol only. Out-of-range coords are
    // clamped to the center lattice hull.
    Id trilinear(Id vol, std::shared_ptr<const std::vector<double>> grid_coords) {
        const Shape& vs = nodes_[vol].shape;
        if (vs.size() != 4) throw DimensionError("trilinear: expected vol [C,Rx,Ry,Rz]");
        const int64_t C = vs[0], RX = vs[1], RY = vs[2], RZ = vs[3];
        if (RX < 2 || RY < 2 || RZ < 2)
            throw DimensionError("trilinear: every grid dim must be >= 2, got " + shape_str(vs));
        if (grid_coords->size() % 3 != 0) throw DimensionError("trilinear: coords must be [M,3]");
        const int64_t M = static_cast<int64_t>(grid_coords->size() / 3);
        auto corners = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(M));
        auto weights = std::make_shared<std::vector<double>>(static_cast<size_t>(M * 3));
        const double* cp = grid_coords->data();
        for (int64_t m = 0; m < M; ++m) {
            for (int axis = 0; axis < 3; ++axis) {
                const int64_t R = axis == 0 ? RX : axis == 1 ? RY : RZ;
                double u = cp[m * 3 + axis];
                if (!std::isfinite(u)) throw ContractError("trilinear: non-finite query coordinate");
                u = std::clamp(u, 0.0, static_cast<double>(R - 1));
                int64_t i0 = static_cast<int64_t>(std::floor(u));
                if (i0 > R - 2) i0 = R - 2;
                (*weights)[m * 3 + axis] = u - static_cast<double>(i0);
                if (axis == 0) (*corners)[m] = i0 * RY * RZ;
                else if (axis == 1) (*corners)[m] += i0 * RZ;
                else (*corners)[m] += i0;
            }
        }
        std::vector<double> out(static_cast<size_t>(M * C));
        const double* vp = nodes_[vol].val.data();
        const int64_t G = RX * RY * RZ;
        const int64_t sx = RY * RZ, sy = RZ;
        for (int64_t m = 0; m < M; ++m) {
            const int64_t base = (*corners)[m];
            const double tx = (*weights)[m * 3 + 0], ty = (*weights)[m * 3 + 1], tz = (*weights)[m * 3 + 2];
            double w8[8];
            corner_weights(tx, ty, tz, w8);
            for (int64_t c = 0; c < C; ++c) {
                const double* v = vp + c * G + base;
                out[m * C + c] = w8[0] * v[0] + w8[1] * v[1] + w8[2] * v[sy] + w8[3] * v[sy + 1] +
                                 w8[4] * v[sx] + w8[5] * v[sx + 1] + w8[6] * v[sx + sy] +
                                 w8[7] * v[sx + sy + 1];
            }
        }
        Id id = push({M, C}, std::move(out));
        nodes_[id].back = [this, id, vol, corners, weights, M, C, G, sx, sy] {
            auto& gv = grad_buf(vol);
            const double* go = nodes_[id].grad.data();
            for (int64_t m = 0; m < M; ++m) {
                const int64_t base = (*corners)[m];
                const double tx = (*weights)[m * 3 + 0], ty = (*weights)[m * 3 + 1], tz = (*weights)[m * 3 + 2];
                double w8[8];
                corner_weights(tx, ty, tz, w8);
                for (int64_t c = 0; c < C; ++c) {
                    const double g = go[m * C + c];
                    if (g == 0.0) continue;
                    double* v = gv.data() + c * G + base;
                    v[0] += g * w8[0];
                    v[1] += g * w8[1];
                    v[sy] += g * w8[2];
                    v[sy + 1] += g * w8[3];
                    v[sx] += g * w8[4];
                    v[sx + 1] += g * w8[5];
                    v[sx + sy] += g * w8[6];
                    v[sx + sy + 1] += g * w8[7];
                }
            }
        };
        return id;
    }

    // ---- glue ------------------------------------------------------------

    Id add(Id a, Id b) {
        if (nodes_[a].shape != nodes_[b].shape)
            throw DimensionError("add: shape mismatch " + shape_str(nodes_[a].shape) + " vs " +
                                 shape_str(nodes_[b].shape));
        const auto& av = nodes_[a].val;
        const auto& bv = nodes_[b].val;
        std::vector<double> out(av.size());
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
        Id id = push(nodes_[a].shape, std::move(out));
        nodes_[id].back = [this, id, a, b] {
            const auto& go = nodes_[id].grad;
            auto& ga = grad_buf(a);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            auto& gb = grad_buf(b);
            for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
        };
        return id;
    }

    Id mul_elem(Id a, Id b) {
        if (nodes_[a].shape != nodes_[b].shape)
            throw DimensionError("mul_elem: shape mismatch " + shape_str(nodes_[a].shape) +
                                 " vs " + shape_str(nodes_[b].shape));
        const auto& av = nodes_[a].val;
        const auto& bv = nodes_[b].val;
        std::vector<double> out(av.size());
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
        Id id = push(nodes_[a].shape, std::move(out));
        nodes_[id].back = [this, id, a, b] {
            const auto& go = nodes_[id].grad;
            const auto& av = nodes_[a].val;
            const auto& bv = nodes_[b].val;
            auto& ga = grad_buf(a);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
            auto& gb = grad_buf(b);
            for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
        };
        return id;
    }

    Id scale(Id x, double factor) {
        const auto& xv = nodes_[x].val;
        std::vector<double> out(xv.size());
        for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factor;
        Id id = push(nodes_[x].shape, std::move(out));
        nodes_[id].back = [this, id, x, factor] {
            const auto& go = nodes_[id].grad;
            auto& gx = grad_buf(x);
            for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factor;
        };
        return id;
    }

    // a:[N,Ca] b:[N,Cb] -> [N,Ca+Cb]
    Id concat_cols(Id a, Id b) {
        const Shape& as = nodes_[a].shape;
        const Shape& bs = nodes_[b].shape;
        if (as.size() != 2 || bs.size() != 2 || as[0] != bs[0])
            throw DimensionError("concat_cols: need matching row counts, got " + shape_str(as) +
                                 " and " + shape_str(bs));
        const int64_t N = as[0], Ca = as[1], Cb = bs[1];
        std::vector<double> out(static_cast<size_t>(N * (Ca + Cb)));
        const double* ap = nodes_[a].val.data();
        const double* bp = nodes_[b].val.data();
        for (int64_t n = 0; n < N; ++n) {
            std::copy(ap + n * Ca, ap + (n + 1) * Ca, out.begin() + n * (Ca + Cb));
            std::copy(bp + n * Cb, bp + (n + 1) * Cb, out.begin() + n * (Ca + Cb) + Ca);
        }
        Id id = push({N, Ca + Cb}, std::move(out));
        nodes_[id].back = [this, id, a, b, N, Ca, Cb] {
            const double* go = nodes_[id].grad.data();
            auto& ga = grad_buf(a);
            auto& gb = grad_buf(b);
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t c = 0; c < Ca; ++c) ga[n * Ca + c] += go[n * (Ca + Cb) + c];
                for (int64_t c = 0; c < Cb; ++c) gb[n * Cb + c] += go[n * (Ca + Cb) + Ca + c];
            }
        };
        return id;
    }

    // a:[B,Ca,H,W,D] b:[B,Cb,H,W,D] -> [B,Ca+Cb,H,W,D]
    Id concat_channels(Id a, Id b) {
        const Shape& as = nodes_[a].shape;
        const Shape& bs = nodes_[b].shape;
        if (as.size() != 5 || bs.size() != 5 || as[0] != bs[0] || as[2] != bs[2] ||
            as[3] != bs[3] || as[4] != bs[4])
            throw DimensionError("concat_channels: incompatible shapes " + shape_str(as) + " and " +
                                 shape_str(bs));
        const int64_t B = as[0], Ca = as[1], Cb = bs[1], vol = as[2] * as[3] * as[4];
        std::vector<double> out(static_cast<size_t>(B * (Ca + Cb) * vol));
        const double* ap = nodes_[a].val.data();
        const double* bp = nodes_[b].val.data();
        for (int64_t bb = 0; bb < B; ++bb) {
            std::copy(ap + bb * Ca * vol, ap + (bb + 1) * Ca * vol,
                      out.begin() + bb * (Ca + Cb) * vol);
            std::copy(bp + bb * Cb * vol, bp + (bb + 1) * Cb * vol,
                      out.begin() + bb * (Ca + Cb) * vol + Ca * vol);
        }
        Id id = push({B, Ca + Cb, as[2], as[3], as[4]}, std::move(out));
        nodes_[id].back = [this, id, a, b, B, Ca, Cb, vol] {
            const double* go = nodes_[id].grad.data();
            auto& ga = grad_buf(a);
            auto& gb = grad_buf(b);
            for (int64_t bb = 0; bb < B; ++bb) {
                double* gap = ga.data() + bb * Ca * vol;
                double* gbp = gb.data() + bb * Cb * vol;
                const double* src = go + bb * (Ca + Cb) * vol;
                for (int64_t i = 0; i < Ca * vol; ++i) gap[i] += src[i];
                for (int64_t i = 0; i < Cb * vol; ++i) gbp[i] += src[Ca * vol + i];
            }
        };
        return id;
    }

    // Same data, new shape.
    Id reshape(Id x, Shape shape) {
        if (shape_numel(shape) != static_cast<int64_t>(nodes_[x].val.size()))
            throw DimensionError("reshape: element count mismatch for " + shape_str(shape));
        Id id = push(std::move(shape), nodes_[x].val);
        nodes_[id].back = [this, id, x] {
            const auto& go = nodes_[id].grad;
            auto& gx = grad_buf(x);
            for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        };
        return id;
    }

    // ---- losses ----------------------------------------------------------

    // Mean (or sum) of -y log x - (1-y) log(1-x); x clamped to
    // [kBceEps, 1-kBceEps] before the logs.
    Id bce(Id pred, Id target, Reduction reduction = Reduction::mean) {
        if (nodes_[pred].shape != nodes_[target].shape)
            throw DimensionError("bce: shape mismatch " + shape_str(nodes_[pred].shape) + " vs " +
                                 shape_str(nodes_[target].shape));
        const auto& xv = nodes_[pred].val;
        const auto& yv = nodes_[target].val;
        const int64_t n = static_cast<int64_t>(xv.size());
        const double w = reduction == Reduction::mean ? 1.0 / static_cast<double>(n) : 1.0;
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const double x = std::clamp(xv[static_cast<size_t>(i)], kBceEps, 1.0 - kBceEps);
            const double y = yv[static_cast<size_t>(i)];
            acc += -y * std::log(x) - (1.0 - y) * std::log(1.0 - x);
        }
        Id id = push({1}, {acc * w});
        nodes_[id].back = [this, id, pred, target, n, w] {
            const double g = nodes_[id].grad[0] * w;
            auto& gx = grad_buf(pred);
            const auto& xv = nodes_[pred].val;
            const auto& yv = nodes_[target].val;
            for (int64_t i = 0; i < n; ++i) {
                // straight-through at the clamp: the slope is evaluated at the
                // clamped value so saturated predictions keep a restoring
                // gradient instead of freezing
                const double x = std::clamp(xv[static_cast<size_t>(i)], kBceEps, 1.0 - kBceEps);
                const double y = yv[static_cast<size_t>(i)];
                gx[static_cast<size_t>(i)] += g * (-y / x + (1.0 - y) / (1.0 - x));
            }
        };
        return id;
    }

    // Fused sigmoid + binary cross-entropy on raw logits:
    //   loss_i = softplus(z_i) - y_i * z_i,  d loss_i / d z_i = sigmoid(z_i) - y_i.
    // Value-identical to bce(sigmoid(z), y) away from the clamp, but the
    // gradient never vanishes under saturation.
    Id bce_logits(Id logits, Id target, Reduction reduction = Reduction::mean) {
        if (nodes_[logits].shape != nodes_[target].shape)
            throw DimensionError("bce_logits: shape mismatch " + shape_str(nodes_[logits].shape) +
                                 " vs " + shape_str(nodes_[target].shape));
        const auto& zv = nodes_[logits].val;
        const auto& yv = nodes_[target].val;
        const int64_t n = static_cast<int64_t>(zv.size());
        const double w = reduction == Reduction::mean ? 1.0 / static_cast<double>(n) : 1.0;
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const double z = zv[static_cast<size_t>(i)];
            const double y = yv[static_cast<size_t>(i)];
            // softplus(z) = log(1 + e^z), computed without overflow
            const double sp = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
            acc += sp - y * z;
        }
        Id id = push({1}, {acc * w});
        nodes_[id].back = [this, id, logits, target, n, w] {
            const double g = nodes_[id].grad[0] * w;
            auto& gz = grad_buf(logits);
            const auto& zv = nodes_[logits].val;
            const auto& yv = nodes_[target].val;
            for (int64_t i = 0; i < n; ++i)
                gz[static_cast<size_t>(i)] +=
                    g * (stable_sigmoid(zv[static_cast<size_t>(i)]) - yv[static_cast<size_t>(i)]);
        };
        return id;
    }

    Id mean_all(Id x) {
        const auto& xv = nodes_[x].val;
        const int64_t n = static_cast<int64_t>(xv.size());
        double acc = 0.0;
        for (double v : xv) acc += v;
        Id id = push({1}, {acc / static_cast<double>(n)});
        nodes_[id].back = [this, id, x, n] {
            const double g = nodes_[id].grad[0] / static_cast<double>(n);
            auto& gx = grad_buf(x);
            for (auto& v : gx) v += g;
        };
        return id;
    }

    // ---- backward --------------------------------------------------------

    // Accumulates d(loss)/d(leaf) into each watched Tensor's grad. Single use.
    void backward(Id loss) {
        if (consumed_) throw ContractError("backward: tape already consumed");
        if (nodes_[static_cast<size_t>(loss)].val.size() != 1)
            throw ContractError("backward: loss must be a scalar node");
        consumed_ = true;
        nodes_[static_cast<size_t>(loss)].grad.assign(1, 1.0);
        for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
            Node& node = nodes_[static_cast<size_t>(i)];
            if (node.grad.empty()) continue;  // not reachable from the loss
            if (node.back) node.back();
            if (node.leaf) {
                auto& g = node.leaf->grad();
                for (size_t j = 0; j < g.size(); ++j) g[j] += node.grad[j];
            }
        }
    }

    bool consumed() const { return consumed_; }
    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Shape shape;
        std::vector<double> val;
        std::vector<double> grad;
        std::function<void()> back;
        Tensor* leaf = nullptr;
    };

    Id push(Shape shape, std::vector<double> val) {
        if (consumed_) throw ContractError("tape already consumed; build a fresh one");
        nodes_.push_back(Node{std::move(shape), std::move(val), {}, {}, nullptr});
        return static_cast<Id>(nodes_.size() - 1);
    }

    std::vector<double>& grad_buf(Id id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty()) n.grad.assign(n.val.size(), 0.0);
        return n.grad;
    }

    static double stable_sigmoid(double x) {
        double y;
        if (x >= 0.0) {
            const double e = std::exp(-x);
            y = 1.0 / (1.0 + e);
        } else {
            const double e = std::exp(x);
            y = e / (1.0 + e);
        }
        // keep the output strictly inside (0,1) even under saturation
        if (y >= 1.0) y = std::nextafter(1.0, 0.0);
        if (y <= 0.0) y = std::numeric_limits<double>::min();
        return y;
    }

    static void corner_weights(double tx, double ty, double tz, double w[8]) {
        const double ux = 1.0 - tx, uy = 1.0 - ty, uz = 1.0 - tz;
        w[0] = ux * uy * uz;
        w[1] = ux * uy * tz;
        w[2] = ux * ty * uz;
        w[3] = ux * ty * tz;
        w[4] = tx * uy * uz;
        w[5] = tx * uy * tz;
        w[6] = tx * ty * uz;
        w[7] = tx * ty * tz;
    }

    // Direct 3^3 convolution, z innermost and contiguous so the per-tap
    // update out[z] += w * in[z+dz] vectorizes without reassociation.
    static void conv3d_forward(const double* x, const double* k, const double* bias, double* out,
                               int64_t B, int64_t C, int64_t O, int64_t H, int64_t W, int64_t D) {
        const int64_t vol = H * W * D;
        parallel_for(B * O, [&](int64_t bo) {
            const int64_t b = bo / O, o = bo % O;
            double* obase = out + (b * O + o) * vol;
            std::fill(obase, obase + vol, bias[o]);
            for (int64_t c = 0; c < C; ++c) {
                const double* xbase = x + (b * C + c) * vol;
                const double* kbase = k + (o * C + c) * 27;
                for (int64_t h = 0; h < H; ++h) {
                    for (int64_t dh = -1; dh <= 1; ++dh) {
                        const int64_t hs = h + dh;
                        if (hs < 0 || hs >= H) continue;
                        for (int64_t w = 0; w < W; ++w) {
                            double* orow = obase + (h * W + w) * D;
                            for (int64_t dw = -1; dw <= 1; ++dw) {
                                const int64_t ws = w + dw;
                                if (ws < 0 || ws >= W) continue;
                                const double* xrow = xbase + (hs * W + ws) * D;
                                const double* kk = kbase + ((dh + 1) * 3 + (dw + 1)) * 3;
                                const double k0 = kk[0], k1 = kk[1], k2 = kk[2];
                                // dz = -1, 0, +1 fused in one pass over z
                                if (D == 1) {
                                    orow[0] += k1 * xrow[0];
                                    continue;
                                }
                                orow[0] += k1 * xrow[0] + k2 * xrow[1];
                                for (int64_t z = 1; z < D - 1; ++z)
                                    orow[z] += k0 * xrow[z - 1] + k1 * xrow[z] + k2 * xrow[z + 1];
                                orow[D - 1] += k0 * xrow[D - 2] + k1 * xrow[D - 1];
                            }
                        }
                    }
                }
            }
        });
    }

    // d/dx: correlation of dOut with the flipped kernel.
    static void conv3d_backward_input(const double* gout, const double* k, double* gx, int64_t B,
                                      int64_t C, int64_t O, int64_t H, int64_t W, int64_t D) {
        const int64_t vol = H * W * D;
        parallel_for(B * C, [&](int64_t bc) {
            const int64_t b = bc / C, c = bc % C;
            double* gbase = gx + (b * C + c) * vol;
            for (int64_t o = 0; o < O; ++o) {
                const double* gobase = gout + (b * O + o) * vol;
                const double* kbase = k + (o * C + c) * 27;
                for (int64_t h = 0; h < H; ++h) {
                    for (int64_t dh = -1; dh <= 1; ++dh) {
                        const int64_t hs = h + dh;  // output row pulling from input row h
                        if (hs < 0 || hs >= H) continue;
                        for (int64_t w = 0; w < W; ++w) {
                            double* grow = gbase + (h * W + w) * D;
                            for (int64_t dw = -1; dw <= 1; ++dw) {
                                const int64_t ws = w + dw;
                                if (ws < 0 || ws >= W) continue;
                                const double* gorow = gobase + (hs * W + ws) * D;
                                // output (hs,ws,zs) reads input (h,w,z) with tap
                                // (h-hs, w-ws, z-zs), so flip all three offsets.
                                const double* kk = kbase + ((1 - dh) * 3 + (1 - dw)) * 3;
                                const double k0 = kk[0], k1 = kk[1], k2 = kk[2];
                                if (D == 1) {
                                    grow[0] += k1 * gorow[0];
                                    continue;
                                }
                                grow[0] += k1 * gorow[0] + k0 * gorow[1];
                                for (int64_t z = 1; z < D - 1; ++z)
                                    grow[z] += k2 * gorow[z - 1] + k1 * gorow[z] + k0 * gorow[z + 1];
                                grow[D - 1] += k2 * gorow[D - 2] + k1 * gorow[D - 1];
                            }
                        }
                    }
                }
            }
        });
    }

    static void conv3d_backward_kernel(const double* gout, const double* x, double* gk, int64_t B,
                                       int64_t C, int64_t O, int64_t H, int64_t W, int64_t D) {
        const int64_t vol = H * W * D;
        parallel_for(O * C, [&](int64_t oc) {
            const int64_t o = oc / C, c = oc % C;
            double* kslot = gk + oc * 27;
            for (int64_t b = 0; b < B; ++b) {
                const double* gobase = gout + (b * O + o) * vol;
                const double* xbase = x + (b * C + c) * vol;
                // One pass per (dh,dw); the three dz taps share the row loads.
                // Fixed 8-lane partial sums keep the reduction vectorizable
                // with a schedule-independent summation order.
                for (int64_t dh = -1; dh <= 1; ++dh) {
                    const int64_t h0 = std::max<int64_t>(0, -dh);
                    const int64_t h1 = std::min(H, H - dh);
                    for (int64_t dw = -1; dw <= 1; ++dw) {
                        const int64_t w0 = std::max<int64_t>(0, -dw);
                        const int64_t w1 = std::min(W, W - dw);
                        double l0[8] = {0}, l1[8] = {0}, l2[8] = {0};
                        double e0 = 0.0, e1 = 0.0, e2 = 0.0;
                        for (int64_t h = h0; h < h1; ++h)
                            for (int64_t w = w0; w < w1; ++w) {
                                const double* go = gobase + (h * W + w) * D;
                                const double* xr = xbase + ((h + dh) * W + (w + dw)) * D;
                                e1 += go[0] * xr[0];
                                if (D > 1) {
                                    e2 += go[0] * xr[1];
                                    e0 += go[D - 1] * xr[D - 2];
                                    e1 += go[D - 1] * xr[D - 1];
                                }
                                int64_t z = 1;
                                for (; z + 8 <= D - 1; z += 8)
                                    for (int j = 0; j < 8; ++j) {
                                        l0[j] += go[z + j] * xr[z + j - 1];
                                        l1[j] += go[z + j] * xr[z + j];
                                        l2[j] += go[z + j] * xr[z + j + 1];
                                    }
                                for (; z < D - 1; ++z) {
                                    l0[0] += go[z] * xr[z - 1];
                                    l1[0] += go[z] * xr[z];
                                    l2[0] += go[z] * xr[z + 1];
                                }
                            }
                        for (int j = 0; j < 8; ++j) {
                            e0 += l0[j];
                            e1 += l1[j];
                            e2 += l2[j];
                        }
                        double* taps = kslot + ((dh + 1) * 3 + (dw + 1)) * 3;
                        taps[0] += e0;
                        taps[1] += e1;
                        taps[2] += e2;
                    }
                }
            }
        });
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

}  // namespace saoc
