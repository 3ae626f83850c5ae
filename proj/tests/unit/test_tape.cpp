#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"

using namespace trajprior;
using testutil::random_tensor;
using TD = BasicTensor<double>;

namespace {

constexpr double kGradTol = 1e-3;

// Direct nested-loop convolution, the oracle for conv2d.
TD naive_conv(const TD& x, const TD& w, const TD& b, std::size_t stride, std::size_t pad) {
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), K = w.dim(2), L = w.dim(3);
    const std::size_t oh = (H + 2 * pad - K) / stride + 1, ow = (W + 2 * pad - L) / stride + 1;
    TD out({N, O, oh, ow});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = b[o];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t k = 0; k < K; ++k)
                            for (std::size_t l = 0; l < L; ++l) {
                                const long r = static_cast<long>(i * stride + k) - static_cast<long>(pad);
                                const long s = static_cast<long>(j * stride + l) - static_cast<long>(pad);
                                if (r < 0 || s < 0 || r >= static_cast<long>(H) || s >= static_cast<long>(W)) continue;
                                acc += x.at(n, c, r, s) * w.at(o, c, k, l);
                            }
                    out.at(n, o, i, j) = acc;
                }
    return out;
}

} // namespace

TEST(Tape, MatmulAddAndScaleForward) {
    Tape<double> t;
    auto a = t.parameter("a", TD({2, 3}, {1, 2, 3, 4, 5, 6}));
    auto b = t.parameter("b", TD({3, 2}, {1, 0, 0, 1, 1, 1}));
    auto y = t.scale(t.matmul(a, b), 2.0);
    auto z = t.add_row_vector(y, t.constant(TD({2}, {1, -1})));
    t.evaluate();
    EXPECT_EQ(t.value(y).storage(), (std::vector<double>{8, 10, 20, 22}));
    EXPECT_EQ(t.value(z).storage(), (std::vector<double>{9, 9, 21, 21}));
}

TEST(Tape, ElementwiseGradients) {
    Tape<double> t;
    auto a = t.parameter("a", random_tensor({3, 4}, 1));
    auto b = t.parameter("b", random_tensor({3, 4}, 2));
    auto y = t.add(t.mul(t.sigmoid(a), b), t.sub(a, t.scale(b, 0.5)));
    auto loss = testutil::weighted_sum(t, y, 3);
    EXPECT_LT(testutil::check(t, loss), kGradTol);
}

TEST(Tape, MatmulAndBiasGradients) {
    Tape<double> t;
    auto x = t.parameter("x", random_tensor({4, 5}, 4));
    auto w = t.parameter("w", random_tensor({5, 3}, 5));
    auto b = t.parameter("b", random_tensor({3}, 6));
    auto loss = testutil::weighted_sum(t, t.add_row_vector(t.matmul(x, w), b), 7);
    EXPECT_LT(testutil::check(t, loss), kGradTol);
}

TEST(Tape, ReluForwardAndGradientAwayFromKink) {
    Tape<double> t;
    auto x = t.parameter("x", TD({1, 4}, {-1.0, -0.2, 0.3, 2.0}));
    auto y = t.relu(x);
    auto loss = testutil::weighted_sum(t, y, 8);
    t.evaluate();
    EXPECT_EQ(t.value(y).storage(), (std::vector<double>{0, 0, 0.3, 2.0}));
    EXPECT_LT(testutil::check(t, loss), kGradTol);
}

TEST(Tape, ConvMatchesNaiveLoopsAndGradients) {
    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 0}, {4, 0}, {2, 1}}) {
        Tape<double> t;
        const TD xv = random_tensor({2, 3, 8, 8}, 10 + stride);
        const TD wv = random_tensor({4, 3, 3, 3}, 11 + pad);
        const TD bv = random_tensor({4}, 12);
        auto x = t.parameter("x", xv);
        auto w = t.parameter("w", wv);
        auto b = t.parameter("b", bv);
        auto y = t.conv2d(x, w, b, stride, pad);
        auto loss = testutil::weighted_sum(t, y, 13);
        t.evaluate();
        const TD ref = naive_conv(xv, wv, bv, stride, pad);
        ASSERT_EQ(t.value(y).shape(), ref.shape());
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(t.value(y)[i], ref[i], 1e-12);
        EXPECT_LT(testutil::check(t, loss), kGradTol) << "stride " << stride << " pad " << pad;
    }
}

TEST(Tape, UpsampleBilinearForwardAndGradient) {
    Tape<double> t;
    auto x = t.parameter("x", TD({1, 1, 2, 2}, {0, 1, 2, 3}));
    auto y = t.upsample_bilinear(x, 4, 4);
    t.evaluate();
    // half-pixel centres, edge clamped: row 0 of the output
    const auto& v = t.value(y);
    EXPECT_NEAR(v[0], 0.0, 1e-12);
    EXPECT_NEAR(v[1], 0.25, 1e-12);
    EXPECT_NEAR(v[2], 0.75, 1e-12);
    EXPECT_NEAR(v[3], 1.0, 1e-12);
    EXPECT_NEAR(v[15], 3.0, 1e-12);

    Tape<double> g;
    auto gx = g.parameter("x", random_tensor({2, 3, 4, 4}, 20));
    auto loss = testutil::weighted_sum(g, g.upsample_bilinear(gx, 8, 16), 21);
    EXPECT_LT(testutil::check(g, loss), kGradTol);
}

TEST(Tape, UpsampleToSameSizeIsIdentity) {
    Tape<double> t;
    const TD xv = random_tensor({1, 2, 4, 4}, 22);
    auto y = t.upsample_bilinear(t.parameter("x", xv), 4, 4);
    t.evaluate();
    for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_NEAR(t.value(y)[i], xv[i], 1e-12);
}

TEST(Tape, GlobalPoolAndPatchScale) {
    Tape<double> t;
    auto x = t.parameter("x", random_tensor({2, 1, 8, 8}, 30));
    auto w = t.parameter("w", random_tensor({2, 4}, 31, 0.0, 1.0));
    auto scaled = t.patch_scale(x, w, 4);
    auto pooled = t.global_avg_pool(scaled);
    auto loss = testutil::weighted_sum(t, pooled, 32);
    t.evaluate();
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    // pixel (5, 2) of image 1 sits in patch row 1, col 0 -> patch index 2
    EXPECT_NEAR(t.value(scaled).at(1, 0, 5, 2), xv.at(1, 0, 5, 2) * wv[1 * 4 + 2], 1e-12);
    EXPECT_EQ(t.value(pooled).shape(), (Shape{2, 1}));
    EXPECT_LT(testutil::check(t, loss), kGradTol);
}

TEST(Tape, BatchNormTrainModeNormalizesAndUpdatesRunningStats) {
    Tape<double> t;
    const TD xv = random_tensor({6, 3}, 40, 0.0, 4.0);
    auto x = t.parameter("x", xv);
    auto rm = t.parameter("rm", TD({3}), false);
    auto rv = t.parameter("rv", TD::full({3}, 1.0), false);
    auto y = t.batch_norm(x, t.parameter("g", TD::full({3}, 1.0)), t.parameter("b", TD({3})), rm, rv, BatchNormMode::Train);
    t.evaluate();
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::size_t r = 0; r < 6; ++r) mean += xv[r * 3 + c] / 6.0;
        for (std::size_t r = 0; r < 6; ++r) var += (xv[r * 3 + c] - mean) * (xv[r * 3 + c] - mean) / 6.0;
        double out_mean = 0.0;
        for (std::size_t r = 0; r < 6; ++r) out_mean += t.value(y)[r * 3 + c] / 6.0;
        EXPECT_NEAR(out_mean, 0.0, 1e-9);
        EXPECT_NEAR(t.value(y)[c], (xv[c] - mean) / std::sqrt(var + 1e-5), 1e-9);
        EXPECT_NEAR(t.value(rm)[c], 0.1 * mean, 1e-12);
        // running variance uses the unbiased estimate
        EXPECT_NEAR(t.value(rv)[c], 0.9 + 0.1 * var * 6.0 / 5.0, 1e-12);
    }
}

TEST(Tape, BatchNormGradientsBothModesAndRanks) {
    for (BatchNormMode mode : {BatchNormMode::Train, BatchNormMode::Inference}) {
        for (bool rank4 : {false, true}) {
            Tape<double> t;
            const Shape s = rank4 ? Shape{3, 2, 4, 4} : Shape{5, 2};
            auto x = t.parameter("x", random_tensor(s, 41));
            auto y = t.batch_norm(x, t.parameter("g", random_tensor({2}, 42, 0.5, 1.5)),
                                  t.parameter("b", random_tensor({2}, 43)), t.parameter("rm", random_tensor({2}, 44), false),
                                  t.parameter("rv", random_tensor({2}, 45, 0.5, 2.0), false), mode);
            auto loss = testutil::weighted_sum(t, y, 46);
            EXPECT_LT(testutil::check(t, loss), kGradTol) << "rank4=" << rank4;
        }
    }
}

TEST(Tape, LayerNormSoftmaxL2Gradients) {
    Tape<double> t;
    auto x = t.parameter("x", random_tensor({4, 6}, 50));
    auto ln = t.layer_norm(x, t.parameter("g", random_tensor({6}, 51, 0.5, 1.5)), t.parameter("b", random_tensor({6}, 52)));
    auto sm = t.softmax(ln);
    auto l2 = t.l2_normalize(t.add(ln, sm));
    auto loss = testutil::weighted_sum(t, l2, 53);
    t.evaluate();
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0, n = 0.0, m = 0.0;
        for (std::size_t c = 0; c < 6; ++c) {
            s += t.value(sm)[r * 6 + c];
            n += t.value(l2)[r * 6 + c] * t.value(l2)[r * 6 + c];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
        EXPECT_NEAR(n, 1.0, 1e-12);
        (void)m;
    }
    EXPECT_LT(testutil::check(t, loss), kGradTol);
}

TEST(Tape, ConcatGatherReshapeGradients) {
    Tape<double> t;
    auto a = t.parameter("a", random_tensor({2, 3}, 60));
    auto b = t.parameter("b", random_tensor({4, 3}, 61));
    auto c = t.concat({a, b}, 0);
    auto g = t.gather_rows(c, {5, 0, 0, 3});
    auto r = t.reshape(g, {2, 6});
    auto w = t.concat({r, t.parameter("d", random_tensor({2, 2}, 62))}, 1);
    auto loss = testutil::weighted_sum(t, w, 63);
    t.evaluate();
    EXPECT_EQ(t.shape(w), (Shape{2, 8}));
    EXPECT_EQ(t.value(g)[0], t.value(b)[3 * 3]);
    EXPECT_LT(testutil::check(t, loss), kGradTol);
}

TEST(Tape, AttentionMatchesDirectComputation) {
    Tape<double> t;
    const TD qv = random_tensor({6, 4}, 70), kv = random_tensor({6, 4}, 71), vv = random_tensor({6, 4}, 72);
    auto y = t.attention(t.parameter("q", qv), t.parameter("k", kv), t.parameter("v", vv), 2, 3);
    auto loss = testutil::weighted_sum(t, y, 73);
    t.evaluate();
    // two sequences of 3 rows, two heads of width 2
    for (std::size_t s = 0; s < 2; ++s) {
        for (std::size_t h = 0; h < 2; ++h) {
            for (std::size_t i = 0; i < 3; ++i) {
                std::vector<double> score(3);
                double mx = -1e300, z = 0.0;
                for (std::size_t j = 0; j < 3; ++j) {
                    double d = 0.0;
                    for (std::size_t c = 0; c < 2; ++c) d += qv[(s * 3 + i) * 4 + h * 2 + c] * kv[(s * 3 + j) * 4 + h * 2 + c];
                    score[j] = d / std::sqrt(2.0);
                    mx = std::max(mx, score[j]);
                }
                for (double& e : score) z += (e = std::exp(e - mx));
                for (std::size_t c = 0; c < 2; ++c) {
                    double o = 0.0;
                    for (std::size_t j = 0; j < 3; ++j) o += score[j] / z * vv[(s * 3 + j) * 4 + h * 2 + c];
                    EXPECT_NEAR(t.value(y)[(s * 3 + i) * 4 + h * 2 + c], o, 1e-12);
                }
            }
        }
    }
    EXPECT_LT(testutil::check(t, loss), kGradTol);
}

TEST(Tape, LogClampedAndSumGradients) {
    Tape<double> t;
    auto x = t.parameter("x", random_tensor({3, 3}, 80, 0.1, 1.0));
    auto loss = t.sum(t.log_clamped(x, 1e-12));
    EXPECT_LT(testutil::check(t, loss), kGradTol);
    Tape<double> c;
    auto y = c.log_clamped(c.parameter("x", TD({1, 2}, {0.0, 1.0})), 1e-12);
    c.evaluate();
    EXPECT_NEAR(c.value(y)[0], std::log(1e-12), 1e-9);
    EXPECT_NEAR(c.value(y)[1], 0.0, 1e-15);
}

TEST(Tape, InfoNceGradientWithQueue) {
    Tape<double> t;
    auto z = t.l2_normalize(t.parameter("z", random_tensor({6, 8}, 90)));
    TD queue = random_tensor({16, 8}, 91);
    for (std::size_t r = 0; r < 16; ++r) {
        double n = 0.0;
        for (std::size_t c = 0; c < 8; ++c) n += queue[r * 8 + c] * queue[r * 8 + c];
        for (std::size_t c = 0; c < 8; ++c) queue[r * 8 + c] /= std::sqrt(n);
    }
    auto loss = t.info_nce(z, 3, queue, 5, 0.07);
    EXPECT_LT(testutil::check(t, loss), kGradTol);
}

TEST(Tape, InputsAreFedAtEvaluate) {
    Tape<double> t;
    auto x = t.input("x", {2, 2});
    auto w = t.parameter("w", TD({2, 2}, {1, 2, 3, 4}));
    auto y = t.matmul(x, w);
    t.evaluate({{"x", TD({2, 2}, {1, 0, 0, 1})}});
    EXPECT_EQ(t.value(y).storage(), (std::vector<double>{1, 2, 3, 4}));
    t.evaluate({{"x", TD({2, 2}, {0, 1, 1, 0})}});
    EXPECT_EQ(t.value(y).storage(), (std::vector<double>{3, 4, 1, 2}));
    EXPECT_THROW(t.evaluate({{"x", TD({3, 2})}}), DimensionError);
    EXPECT_THROW(t.evaluate(), Error);
}

TEST(Tape, BranchSignatureSeesEveryReluFlip) {
    // Two flips in opposite directions at every spacing up to 200 must still
    // change the signature (a rotating xor cancels at multiples of 64).
    Tape<double> t;
    auto x = t.input("x", {256});
    t.relu(x);
    t.set_track_branches(true);
    TD base({256});
    for (std::size_t i = 0; i < 256; ++i) base[i] = i % 2 ? 1.0 : -1.0;
    t.evaluate({{"x", base}});
    const std::uint64_t sig0 = t.branch_signature();
    for (std::size_t gap = 1; gap <= 200; ++gap) {
        TD v = base;
        v[3] = -v[3];
        v[3 + gap] = -v[3 + gap];
        t.evaluate({{"x", v}});
        if (v[3] * v[3 + gap] < 0) EXPECT_NE(t.branch_signature(), sig0) << "gap " << gap;
    }
    t.evaluate({{"x", base}});
    EXPECT_EQ(t.branch_signature(), sig0);
}

TEST(Tape, ShapeErrorsAreRaisedWhenNodesAreAdded) {
    Tape<double> t;
    auto a = t.parameter("a", TD({2, 3}));
    auto b = t.parameter("b", TD({2, 3}));
    EXPECT_THROW(t.matmul(a, b), DimensionError);
    EXPECT_THROW(t.add(a, t.parameter("c", TD({3, 2}))), DimensionError);
    EXPECT_THROW(t.attention(a, a, a, 2, 2), DimensionError);
    EXPECT_THROW(t.gather_rows(a, {2}), DimensionError);
    EXPECT_THROW(t.reshape(a, {4, 2}), DimensionError);
    EXPECT_THROW(t.conv2d(t.parameter("x", TD({1, 1, 2, 2})), t.parameter("w", TD({1, 1, 3, 3})), t.parameter("bb", TD({1})), 1, 0),
                 DimensionError);
}

TEST(Tape, BackpropRequiresScalarLossAndForwardPass) {
    Tape<double> t;
    auto a = t.parameter("a", random_tensor({2, 2}, 100));
    auto s = t.sum(a);
    EXPECT_THROW(t.backpropagate(s), Error);  // no evaluate yet
    t.evaluate();
    EXPECT_THROW(t.backpropagate(a), DimensionError);
    auto g = t.backpropagate(s);
    for (double v : g.at("a").storage()) EXPECT_EQ(v, 1.0);
}

TEST(Tape, UnusedParameterGetsZeroGradient) {
    Tape<double> t;
    auto a = t.parameter("a", random_tensor({2}, 101));
    t.parameter("unused", random_tensor({3}, 102));
    auto s = t.sum(t.reshape(a, {1, 2}));
    t.evaluate();
    auto g = t.backpropagate(s);
    ASSERT_TRUE(g.count("unused"));
    for (double v : g.at("unused").storage()) EXPECT_EQ(v, 0.0);
    EXPECT_FALSE(t.depends_on(s, t.leaf("unused")));
    EXPECT_TRUE(t.depends_on(s, a));
}

TEST(Tape, FloatAndDoubleTapesAgree) {
    Tape<float> f;
    Tape<double> d;
    const TD xv = random_tensor({2, 3, 8, 8}, 110), wv = random_tensor({4, 3, 3, 3}, 111), bv = random_tensor({4}, 112);
    auto yf = f.relu(f.conv2d(f.parameter("x", xv.cast<float>()), f.parameter("w", wv.cast<float>()), f.parameter("b", bv.cast<float>()), 1, 1));
    auto yd = d.relu(d.conv2d(d.parameter("x", xv), d.parameter("w", wv), d.parameter("b", bv), 1, 1));
    f.evaluate();
    d.evaluate();
    for (std::size_t i = 0; i < d.value(yd).size(); ++i) EXPECT_NEAR(f.value(yf)[i], d.value(yd)[i], 1e-5);
}

TEST(GradCheck, QuadraticPassesWithEveryComponentChecked) {
    // A correct graph passes; the check reports a meaningful worst component.
    Tape<double> t;
    auto x = t.parameter("x", random_tensor({3, 3}, 120));
    auto loss = t.sum(t.mul(x, x));
    GradCheckOptions o;
    const auto rep = finite_diff_check(t, loss, {}, o);
    EXPECT_LT(rep.max_rel_error, 1e-6);
    EXPECT_EQ(rep.components_checked, 9u);
    EXPECT_EQ(rep.kink_skips, 0u);
    EXPECT_THROW(finite_diff_check(t, loss, {}, GradCheckOptions{0.0}), ConfigError);
}

TEST(GradCheck, SteepComponentsGetASmallerStep) {
    // d/dx x^4 by central difference is off by h^2 / x^2 relative: 1e-2 at
    // x = 0.01, h = 1e-3, so only the step ladder gets this under 1e-3.
    Tape<double> t;
    auto x = t.parameter("x", TD({4}, {0.01, 0.012, -0.015, 0.02}));
    auto x2 = t.mul(x, x);
    auto loss = t.sum(t.mul(x2, x2));
    const auto rep = finite_diff_check(t, loss, std::map<std::string, TD>{}, GradCheckOptions{});
    EXPECT_LT(rep.max_rel_error, 1e-3);
    EXPECT_EQ(rep.components_checked, 4u);
    GradCheckOptions one_step;
    one_step.min_step = one_step.step;
    EXPECT_GT(finite_diff_check(t, loss, std::map<std::string, TD>{}, one_step).max_rel_error, 1e-3);
}
