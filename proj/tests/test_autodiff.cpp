#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numeric>
#include <vector>

#include "saoc/adam.hpp"
#include "saoc/rng.hpp"
#include "saoc/tape.hpp"
#include "saoc/tensor.hpp"
#include "support/fd.hpp"

using namespace saoc;

namespace {

Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    return Tensor::randn(std::move(shape), rng, stddev);
}

// Inputs kept away from the relu/abs kinks so the FD oracle stays valid.
Tensor randn_away_from_zero(Shape shape, Rng& rng, double margin = 1e-3) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) {
        double v = rng.normal();
        while (std::fabs(v) < margin) v = rng.normal();
        t[i] = v;
    }
    return t;
}

}  // namespace

TEST(Elementwise, AnalyticAnchors) {
    Tape tape;
    Tensor x({3}, {0.0, -1.0, 2.0});
    auto id = tape.sigmoid(tape.constant(x));
    EXPECT_DOUBLE_EQ(tape.value(id)[0], 0.5);

    Tape t2;
    auto r = t2.relu(t2.constant(x));
    EXPECT_DOUBLE_EQ(t2.value(r)[1], 0.0);
    EXPECT_DOUBLE_EQ(t2.value(r)[2], 2.0);
}

TEST(Elementwise, AbsGradientAtNegativeInput) {
    Tensor x({1}, {-2.0});
    Tape tape;
    auto loss = tape.abs(tape.watch(x));
    EXPECT_DOUBLE_EQ(tape.scalar(loss), 2.0);
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], -1.0);
}

TEST(Elementwise, SigmoidStrictlyInsideUnitInterval) {
    Rng rng(7);
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.uniform(-800.0, 800.0);
        Tape tape;
        auto y = tape.sigmoid(tape.constant(Tensor({1}, {v})));
        EXPECT_GT(tape.value(y)[0], 0.0);
        EXPECT_LT(tape.value(y)[0], 1.0);
    }
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
    Rng rng(11);
    for (int inst = 0; inst < 100; ++inst) {
        Tensor x = randn_away_from_zero({7}, rng);
        for (auto kind : {Elementwise::relu, Elementwise::sigmoid, Elementwise::abs}) {
            auto forward = [&] {
                Tape t;
                return t.scalar(t.mean_all(t.elementwise(t.constant(x), kind)));
            };
            auto backward = [&] {
                x.zero_grad();
                Tape t;
                t.backward(t.mean_all(t.elementwise(t.watch(x), kind)));
            };
            const double tol = kind == Elementwise::sigmoid ? 1e-6 : 1e-4;
            EXPECT_LE(test::fd_max_rel_err({&x}, forward, backward), tol);
        }
    }
}

TEST(Linear, IdentityAndTinyAnchor) {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor W({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor b({3}, {0, 0, 0});
    Tape t;
    auto y = t.linear(t.constant(x), t.constant(W), t.constant(b));
    for (int i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(t.value(y)[i], x[i]);

    Tensor x1({1, 1}, {3.0});
    Tensor W1({1, 1}, {2.0});
    Tensor b1({1}, {1.0});
    Tape t1;
    auto y1 = t1.linear(t1.constant(x1), t1.constant(W1), t1.constant(b1));
    EXPECT_DOUBLE_EQ(t1.value(y1)[0], 7.0);
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
    Tensor x({2, 3});
    Tensor W({4, 5});
    Tensor b({4});
    Tape t;
    try {
        t.linear(t.constant(x), t.constant(W), t.constant(b));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[4,5]"), std::string::npos);
    }
}

TEST(Linear, GradientsMatchFiniteDifferences) {
    Rng rng(13);
    for (int inst = 0; inst < 100; ++inst) {
        Tensor x = randn({3, 4}, rng);
        Tensor W = randn({2, 4}, rng);
        Tensor b = randn({2}, rng);
        auto forward = [&] {
            Tape t;
            return t.scalar(t.mean_all(t.linear(t.constant(x), t.constant(W), t.constant(b))));
        };
        auto backward = [&] {
            x.zero_grad();
            W.zero_grad();
            b.zero_grad();
            Tape t;
            t.backward(t.mean_all(t.linear(t.watch(x), t.watch(W), t.watch(b))));
        };
        EXPECT_LE(test::fd_max_rel_err({&x, &W, &b}, forward, backward), 1e-6);
    }
}

TEST(Conv3d, DiracKernelIsIdentity) {
    Rng rng(17);
    Tensor x = randn({1, 2, 4, 4, 4}, rng);
    Tensor k({2, 2, 3, 3, 3});
    // channel-preserving Dirac: k[o][o][center] = 1
    for (int o = 0; o < 2; ++o) k[((o * 2 + o) * 27) + 13] = 1.0;
    Tensor b({2});
    Tape t;
    auto y = t.conv3d(t.constant(x), t.constant(k), t.constant(b));
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(t.value(y)[i], x[i]);
}

TEST(Conv3d, AllOnesKernelCountsInteriorNeighborhood) {
    Tensor x({1, 1, 4, 4, 4});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = 1.0;
    Tensor k({1, 1, 3, 3, 3});
    for (int64_t i = 0; i < 27; ++i) k[i] = 1.0;
    Tensor b({1});
    Tape t;
    auto y = t.conv3d(t.constant(x), t.constant(k), t.constant(b));
    // interior voxel (1,1,1)
    EXPECT_DOUBLE_EQ(t.value(y)[(1 * 4 + 1) * 4 + 1], 27.0);
    // corner voxel sees a 2x2x2 neighborhood
    EXPECT_DOUBLE_EQ(t.value(y)[0], 8.0);
}

TEST(Conv3d, GradientsMatchFiniteDifferences) {
    Rng rng(19);
    for (int inst = 0; inst < 100; ++inst) {
        Tensor x = randn({1, 2, 3, 4, 5}, rng);
        Tensor k = randn({2, 2, 3, 3, 3}, rng, 0.5);
        Tensor b = randn({2}, rng);
        Tensor w = randn({1, 2, 3, 4, 5}, rng);  // fixed projection weights
        auto forward = [&] {
            Tape t;
            auto y = t.conv3d(t.constant(x), t.constant(k), t.constant(b));
            // weighted sum so every output entry has a distinct contribution
            double acc = 0.0;
            const auto& yv = t.value(y);
            for (int64_t i = 0; i < w.numel(); ++i) acc += yv[i] * w[i];
            return acc;
        };
        auto backward = [&] {
            x.zero_grad();
            k.zero_grad();
            b.zero_grad();
            Tape t;
            auto y = t.conv3d(t.watch(x), t.watch(k), t.watch(b));
            // same weighted sum, expressed on the tape
            auto wconst = t.constant(w);
            auto weighted = t.mean_all(t.mul_elem(y, wconst));
            t.backward(t.scale(weighted, static_cast<double>(w.numel())));
        };
        EXPECT_LE(test::fd_max_rel_err({&x, &k, &b}, forward, backward), 1e-4);
    }
}

TEST(Resample, AvgDownOnConstantFieldIsConstant) {
    Tensor x({1, 1, 4, 4, 4});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = 3.25;
    Tape t;
    auto y = t.avg_down2(t.constant(x));
    for (int64_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(t.value(y)[i], 3.25);
}

TEST(Resample, AvgDownOfCountingBlock) {
    Tensor x({1, 1, 2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
    Tape t;
    auto y = t.avg_down2(t.constant(x));
    EXPECT_DOUBLE_EQ(t.value(y)[0], 3.5);
}

TEST(Resample, UpThenDownIsIdentity) {
    Rng rng(23);
    Tensor x = randn({1, 2, 2, 2, 2}, rng);
    Tape t;
    auto y = t.avg_down2(t.nearest_up2(t.constant(x)));
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(t.value(y)[i], x[i]);
}

TEST(Resample, OddDimensionRejected) {
    Tensor x({1, 1, 3, 4, 4});
    Tape t;
    EXPECT_THROW(t.avg_down2(t.constant(x)), DimensionError);
}

TEST(Resample, GradientsMatchFiniteDifferences) {
    Rng rng(29);
    for (int inst = 0; inst < 100; ++inst) {
        Tensor x = randn({1, 1, 2, 2, 4}, rng);
        for (auto mode : {Resample::avg_down2, Resample::nearest_up2}) {
            auto forward = [&] {
                Tape t;
                return t.scalar(t.mean_all(t.resample3d(t.constant(x), mode)));
            };
            auto backward = [&] {
                x.zero_grad();
                Tape t;
                t.backward(t.mean_all(t.resample3d(t.watch(x), mode)));
            };
            EXPECT_LE(test::fd_max_rel_err({&x}, forward, backward), 1e-4);
        }
    }
}

TEST(ScatterMean, MeanAndEmptyCells) {
    Tensor feats({2, 1}, {1.0, 3.0});
    auto cells = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{5, 5});
    Tape t;
    auto v = t.scatter_mean(t.constant(feats), cells, 2, 2, 2);
    EXPECT_DOUBLE_EQ(t.value(v)[5], 2.0);
    for (int64_t i = 0; i < 8; ++i)
        if (i != 5) EXPECT_DOUBLE_EQ(t.value(v)[i], 0.0);
}

TEST(ScatterMean, PermutationInvariant) {
    Rng rng(31);
    Tensor feats = randn({6, 3}, rng);
    auto cells = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{0, 3, 3, 7, 1, 0});
    Tape t1;
    auto v1 = t1.scatter_mean(t1.constant(feats), cells, 2, 2, 2);

    // apply a permutation to rows and indices together
    std::vector<int> perm{4, 0, 5, 2, 1, 3};
    Tensor pf({6, 3});
    auto pcells = std::make_shared<std::vector<int64_t>>(6);
    for (int i = 0; i < 6; ++i) {
        (*pcells)[i] = (*cells)[static_cast<size_t>(perm[i])];
        for (int c = 0; c < 3; ++c) pf[i * 3 + c] = feats[perm[i] * 3 + c];
    }
    Tape t2;
    auto v2 = t2.scatter_mean(t2.constant(pf), pcells, 2, 2, 2);
    for (size_t i = 0; i < t1.value(v1).size(); ++i)
        EXPECT_NEAR(t1.value(v1)[i], t2.value(v2)[i], 1e-15);
}

TEST(ScatterMean, OutOfRangeIndexRejected) {
    Tensor feats({1, 1}, {1.0});
    auto cells = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{8});
    Tape t;
    EXPECT_THROW(t.scatter_mean(t.constant(feats), cells, 2, 2, 2), IndexError);
}

TEST(ScatterMean, GradientSplitsEquallyAmongContributors) {
    Rng rng(37);
    for (int inst = 0; inst < 100; ++inst) {
        Tensor feats = randn({5, 2}, rng);
        auto cells = std::make_shared<std::vector<int64_t>>(5);
        for (auto& c : *cells) c = static_cast<int64_t>(rng.uniform_index(8));
        auto forward = [&] {
            Tape t;
            return t.scalar(t.mean_all(t.scatter_mean(t.constant(feats), cells, 2, 2, 2)));
        };
        auto backward = [&] {
            feats.zero_grad();
            Tape t;
            t.backward(t.mean_all(t.scatter_mean(t.watch(feats), cells, 2, 2, 2)));
        };
        EXPECT_LE(test::fd_max_rel_err({&feats}, forward, backward), 1e-4);
    }
}

TEST(Trilinear, LatticeCornerAndCellCenter) {
    Rng rng(41);
    Tensor vol = randn({2, 3, 3, 3}, rng);
    // grid-frame coordinates: lattice site (1,2,0)
    auto coords = std::make_shared<std::vector<double>>(std::vector<double>{1.0, 2.0, 0.0});
    Tape t;
    auto f = t.trilinear(t.constant(vol), coords);
    EXPECT_DOUBLE_EQ(t.value(f)[0], vol[(1 * 3 + 2) * 3 + 0]);
    EXPECT_DOUBLE_EQ(t.value(f)[1], vol[27 + (1 * 3 + 2) * 3 + 0]);

    // center of the cell spanned by lattice sites 0..1 per axis
    auto mid = std::make_shared<std::vector<double>>(std::vector<double>{0.5, 0.5, 0.5});
    Tape t2;
    auto g = t2.trilinear(t2.constant(vol), mid);
    double mean = 0.0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k) mean += vol[(i * 3 + j) * 3 + k];
    mean /= 8.0;
    EXPECT_NEAR(t2.value(g)[0], mean, 1e-15);
}

TEST(Trilinear, ReproducesAffineFieldExactly) {
    // grid holds f(x,y,z) = x + 2y + 3z sampled at lattice sites
    const int64_t R = 5;
    Tensor vol({1, R, R, R});
    for (int64_t i = 0; i < R; ++i)
        for (int64_t j = 0; j < R; ++j)
            for (int64_t k = 0; k < R; ++k)
                vol[(i * R + j) * R + k] =
                    static_cast<double>(i) + 2.0 * static_cast<double>(j) + 3.0 * static_cast<double>(k);
    Rng rng(43);
    auto coords = std::make_shared<std::vector<double>>();
    std::vector<double> expected;
    for (int q = 0; q < 1000; ++q) {
        const double x = rng.uniform(0.0, static_cast<double>(R - 1));
        const double y = rng.uniform(0.0, static_cast<double>(R - 1));
        const double z = rng.uniform(0.0, static_cast<double>(R - 1));
        coords->insert(coords->end(), {x, y, z});
        expected.push_back(x + 2.0 * y + 3.0 * z);
    }
    Tape t;
    auto f = t.trilinear(t.constant(vol), coords);
    for (size_t i = 0; i < expected.size(); ++i)
        EXPECT_NEAR(t.value(f)[i], expected[i], 1e-12);
}

TEST(Trilinear, OutOfBoxQueriesClampToFaces) {
    Rng rng(47);
    Tensor vol = randn({1, 3, 3, 3}, rng);
    auto outside = std::make_shared<std::vector<double>>(std::vector<double>{-5.0, 1.0, 1.0});
    auto face = std::make_shared<std::vector<double>>(std::vector<double>{0.0, 1.0, 1.0});
    Tape t;
    auto a = t.trilinear(t.constant(vol), outside);
    auto b = t.trilinear(t.constant(vol), face);
    EXPECT_DOUBLE_EQ(t.value(a)[0], t.value(b)[0]);
}

TEST(Trilinear, GradientsMatchFiniteDifferences) {
    Rng rng(53);
    for (int inst = 0; inst < 100; ++inst) {
        Tensor vol = randn({2, 3, 3, 3}, rng);
        auto coords = std::make_shared<std::vector<double>>();
        for (int q = 0; q < 4; ++q)
            coords->insert(coords->end(),
                           {rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)});
        auto forward = [&] {
            Tape t;
            return t.scalar(t.mean_all(t.trilinear(t.constant(vol), coords)));
        };
        auto backward = [&] {
            vol.zero_grad();
            Tape t;
            t.backward(t.mean_all(t.trilinear(t.watch(vol), coords)));
        };
        EXPECT_LE(test::fd_max_rel_err({&vol}, forward, backward), 1e-6);
    }
}

TEST(Bce, AnalyticAnchors) {
    Tape t;
    auto half = t.constant(Tensor({1}, {0.5}));
    EXPECT_NEAR(t.scalar(t.bce(half, half)), std::log(2.0), 1e-12);

    // bce(p, 1) = -ln p
    Tape t2;
    auto p = t2.constant(Tensor({1}, {0.37}));
    auto one = t2.constant(Tensor({1}, {1.0}));
    EXPECT_NEAR(t2.scalar(t2.bce(p, one)), -std::log(0.37), 1e-12);

    // clamp keeps the log finite: bce(1e-12, 1) = -ln(1e-7)
    Tape t3;
    auto tiny = t3.constant(Tensor({1}, {1e-12}));
    auto one3 = t3.constant(Tensor({1}, {1.0}));
    EXPECT_NEAR(t3.scalar(t3.bce(tiny, one3)), -std::log(1e-7), 1e-9);
}

TEST(Bce, ShapeMismatchRejected) {
    Tape t;
    auto a = t.constant(Tensor({2}, {0.5, 0.5}));
    auto b = t.constant(Tensor({3}, {1.0, 1.0, 1.0}));
    EXPECT_THROW(t.bce(a, b), DimensionError);
}

TEST(Bce, GradientsMatchFiniteDifferences) {
    Rng rng(59);
    for (int inst = 0; inst < 100; ++inst) {
        Tensor pred({5});
        Tensor target({5});
        for (int i = 0; i < 5; ++i) {
            pred[i] = rng.uniform(0.05, 0.95);
            target[i] = rng.uniform(0.0, 1.0);
        }
        auto forward = [&] {
            Tape t;
            return t.scalar(t.bce(t.constant(pred), t.constant(target)));
        };
        auto backward = [&] {
            pred.zero_grad();
            Tape t;
            t.backward(t.bce(t.watch(pred), t.constant(target)));
        };
        EXPECT_LE(test::fd_max_rel_err({&pred}, forward, backward), 1e-6);
    }
}

TEST(BceLogits, MatchesSigmoidBceComposition) {
    Rng rng(71);
    for (int i = 0; i < 200; ++i) {
        Tensor z({4});
        Tensor y({4});
        for (int j = 0; j < 4; ++j) {
            z[j] = rng.normal(0.0, 3.0);
            y[j] = rng.uniform();
        }
        Tape a;
        const double fused = a.scalar(a.bce_logits(a.constant(z), a.constant(y)));
        Tape b;
        const double composed = b.scalar(b.bce(b.sigmoid(b.constant(z)), b.constant(y)));
        EXPECT_NEAR(fused, composed, 1e-12);
    }
}

TEST(BceLogits, GradientSurvivesSaturation) {
    // at |logit| far past the bce clamp the composed path loses precision,
    // but the fused gradient stays the exact sigmoid(z) - y
    Tensor z({2}, {40.0, -40.0});
    Tensor y({2}, {0.0, 1.0});
    Tape t;
    t.backward(t.bce_logits(t.watch(z), t.constant(y), Reduction::sum));
    EXPECT_NEAR(z.grad()[0], 1.0, 1e-12);
    EXPECT_NEAR(z.grad()[1], -1.0, 1e-12);
}

TEST(BceLogits, GradientsMatchFiniteDifferences) {
    Rng rng(73);
    for (int inst = 0; inst < 100; ++inst) {
        Tensor z = randn({6}, rng);
        Tensor y({6});
        for (int j = 0; j < 6; ++j) y[j] = rng.uniform();
        auto forward = [&] {
            Tape t;
            return t.scalar(t.bce_logits(t.constant(z), t.constant(y)));
        };
        auto backward = [&] {
            z.zero_grad();
            Tape t;
            t.backward(t.bce_logits(t.watch(z), t.constant(y)));
        };
        EXPECT_LE(test::fd_max_rel_err({&z}, forward, backward), 1e-6);
    }
}

TEST(Backward, SigmoidGradAtZeroIsQuarter) {
    Tensor x({1}, {0.0});
    Tape t;
    t.backward(t.sigmoid(t.watch(x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Backward, ChainMatchesFiniteDifferences) {
    Rng rng(61);
    for (int inst = 0; inst < 100; ++inst) {
        Tensor w = randn({1, 1}, rng);
        Tensor x({1, 1}, {rng.normal()});
        Tensor b({1});
        Tensor one({1, 1}, {1.0});
        auto forward = [&] {
            Tape t;
            auto pred = t.sigmoid(t.linear(t.constant(x), t.constant(w), t.constant(b)));
            return t.scalar(t.bce(pred, t.constant(one)));
        };
        auto backward = [&] {
            w.zero_grad();
            Tape t;
            auto pred = t.sigmoid(t.linear(t.constant(x), t.watch(w), t.constant(b)));
            t.backward(t.bce(pred, t.constant(one)));
        };
        EXPECT_LE(test::fd_max_rel_err({&w}, forward, backward), 1e-6);
    }
}

TEST(Backward, UnusedParameterGetsZeroGrad) {
    Tensor used({1}, {0.3});
    Tensor unused({1}, {0.7});
    used.zero_grad();
    unused.zero_grad();
    Tape t;
    auto loss = t.sigmoid(t.watch(used));
    (void)t.watch(unused);
    t.backward(loss);
    EXPECT_NE(used.grad()[0], 0.0);
    EXPECT_DOUBLE_EQ(unused.grad()[0], 0.0);
}

TEST(Backward, ContractViolationsRejected) {
    Tensor x({2}, {1.0, 2.0});
    Tape t;
    auto y = t.relu(t.watch(x));
    EXPECT_THROW(t.backward(y), ContractError);  // non-scalar loss

    Tape t2;
    auto loss = t2.mean_all(t2.relu(t2.watch(x)));
    t2.backward(loss);
    EXPECT_THROW(t2.backward(loss), ContractError);  // tape consumed
}

TEST(Backward, SumOfLossesEqualsSumOfBackwards) {
    Rng rng(67);
    Tensor x = randn({4}, rng);

    x.zero_grad();
    {
        Tape t;
        auto w = t.watch(x);
        auto loss = t.add(t.mean_all(t.sigmoid(w)), t.mean_all(t.relu(w)));
        t.backward(loss);
    }
    const std::vector<double> combined = x.grad();

    x.zero_grad();
    {
        Tape t;
        t.backward(t.mean_all(t.sigmoid(t.watch(x))));
    }
    {
        Tape t;
        t.backward(t.mean_all(t.relu(t.watch(x))));
    }
    for (size_t i = 0; i < combined.size(); ++i)
        EXPECT_NEAR(combined[i], x.grad()[i], 1e-12);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
    Tensor p({3}, {1.0, -2.0, 0.5});
    auto& g = p.grad();
    g = {0.3, -0.7, 2.0};
    AdamState st;
    st.step({&p}, 1e-2);
    EXPECT_NEAR(p[0], 1.0 - 1e-2, 1e-8);
    EXPECT_NEAR(p[1], -2.0 + 1e-2, 1e-8);
    EXPECT_NEAR(p[2], 0.5 - 1e-2, 1e-8);
    EXPECT_EQ(st.step_count(), 1);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Tensor p({2}, {0.25, -0.75});
    p.zero_grad();
    AdamState st;
    st.step({&p}, 1e-3);
    EXPECT_DOUBLE_EQ(p[0], 0.25);
    EXPECT_DOUBLE_EQ(p[1], -0.75);
}

TEST(Adam, DeterministicAcrossIdenticalRuns) {
    auto run = [] {
        Rng rng(101);
        Tensor p = Tensor::randn({8}, rng, 1.0);
        AdamState st;
        for (int it = 0; it < 25; ++it) {
            p.zero_grad();
            Tape t;
            t.backward(t.mean_all(t.sigmoid(t.watch(p))));
            st.step({&p}, 1e-3);
        }
        return p.values();
    };
    const auto a = run();
    const auto b = run();
    for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}
