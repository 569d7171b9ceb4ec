#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "devmod/gradcheck.hpp"
#include "devmod/rng.hpp"
#include "devmod/tensor.hpp"
#include "oracles.hpp"

using namespace devmod;

namespace {

Tensor random(Shape s, std::uint64_t seed, double mean = 0.0, double std = 1.0) {
    Rng rng(seed);
    return Tensor::rand_normal(s, rng, mean, std);
}

// Smooth scalar readout: sum(x * r) for a fixed random r.
Tensor weighted_sum(const Tensor& x, std::uint64_t seed) {
    return sum(mul(x, random(x.shape(), seed)));
}

}  // namespace

TEST(Rng, SameSeedSameStream) {
    Tensor a = random({1, 2, 3, 4}, 99);
    Tensor b = random({1, 2, 3, 4}, 99);
    EXPECT_EQ(a.to_vector(), b.to_vector());
    Tensor c = random({1, 2, 3, 4}, 100);
    EXPECT_NE(a.to_vector(), c.to_vector());
}

TEST(Rng, RejectsNonPositiveStd) {
    Rng rng(1);
    EXPECT_THROW(Tensor::rand_normal({1, 1, 1, 4}, rng, 0.0, 0.0), std::invalid_argument);
    EXPECT_THROW(Tensor::rand_normal({1, 1, 1, 4}, rng, 0.0, -1.0), std::invalid_argument);
}

TEST(Rng, LargeSampleMoments) {
    Tensor t = random({1, 64, 48, 48}, 5);
    EXPECT_NEAR(std_value(t), 1.0, 0.02);
    EXPECT_NEAR(mean_value(t), 0.0, 0.02);
}

TEST(Rng, UniformIntCoversRangeOnly) {
    Rng rng(3);
    std::array<int, 8> counts{};
    for (int i = 0; i < 8000; ++i) {
        const int v = rng.uniform_int(0, 7);
        ASSERT_GE(v, 0);
        ASSERT_LE(v, 7);
        ++counts[v];
    }
    for (int c : counts) EXPECT_GT(c, 800);
}

TEST(Elementwise, ScalarMultiply) {
    Tensor x = Tensor::from_data({1, 1, 1, 4}, {1, 2, 3, 4});
    EXPECT_EQ(scalar_mul(x, 2.0).to_vector(), (std::vector<double>{2, 4, 6, 8}));
    EXPECT_EQ(mul(x, Tensor::scalar(2.0)).to_vector(), (std::vector<double>{2, 4, 6, 8}));
}

TEST(Elementwise, AddZerosIsIdentity) {
    Tensor x = random({2, 3, 4, 5}, 1);
    EXPECT_EQ(add(x, Tensor::zeros(x.shape())).to_vector(), x.to_vector());
}

TEST(Elementwise, PerSampleBroadcast) {
    Tensor x = random({3, 2, 2, 2}, 2);
    Tensor s = Tensor::from_data({3, 1, 1, 1}, {1.0, 2.0, -3.0});
    Tensor y = mul(x, s);
    for (int n = 0; n < 3; ++n) {
        for (int c = 0; c < 2; ++c) {
            EXPECT_EQ(y.at(n, c, 1, 0), x.at(n, c, 1, 0) * s[n]);
        }
    }
}

TEST(Elementwise, ShapeMismatchThrows) {
    EXPECT_THROW(add(Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({1, 3, 3, 3})), ShapeError);
    EXPECT_THROW(mul(Tensor::zeros({2, 2, 3, 3}), Tensor::zeros({3, 1, 1, 1})), ShapeError);
}

TEST(Elementwise, MulGradientIsOtherOperand) {
    Tensor a = random({2, 3, 4, 4}, 10);
    Tensor b = random({2, 3, 4, 4}, 11);
    a.set_requires_grad();
    Graph g;
    g.backward(sum(mul(a, b)));
    EXPECT_EQ(a.grad_tensor().to_vector(), b.to_vector());

    auto report = finite_diff_check([&](const Tensor& x) { return sum(mul(x, b)); }, a, 1e-5, 1e-5);
    EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(Backward, SumGivesOnes) {
    Tensor x = random({2, 2, 3, 3}, 4).set_requires_grad();
    Graph g;
    g.backward(sum(x));
    for (double v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, HalfSquaredNormGivesX) {
    Tensor x = random({1, 3, 4, 4}, 6).set_requires_grad();
    Graph g;
    g.backward(scalar_mul(sum(square(x)), 0.5));
    EXPECT_EQ(x.grad_tensor().to_vector(), x.to_vector());
}

TEST(Backward, FanOutAccumulates) {
    Tensor x = random({1, 1, 2, 2}, 7).set_requires_grad();
    Graph g;
    g.backward(sum(add(x, add(x, x))));
    for (double v : x.grad()) EXPECT_EQ(v, 3.0);
}

TEST(Backward, GradientsAccumulateAcrossGraphsUntilZeroed) {
    Tensor x = random({1, 1, 2, 2}, 7).set_requires_grad();
    for (int i = 0; i < 2; ++i) {
        Graph g;
        g.backward(sum(x));
    }
    for (double v : x.grad()) EXPECT_EQ(v, 2.0);
    x.zero_grad();
    for (double v : x.grad()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, RejectsNonScalarAndForeignLoss) {
    Tensor x = random({1, 1, 2, 2}, 8).set_requires_grad();
    Graph g;
    Tensor y = scalar_mul(x, 2.0);
    EXPECT_THROW(g.backward(y), GraphError);
    Tensor constant = Tensor::scalar(1.0);
    EXPECT_THROW(g.backward(constant), GraphError);
    Tensor other;
    {
        Graph inner;
        other = sum(x);
    }
    EXPECT_THROW(g.backward(other), GraphError);
}

TEST(Backward, ParentsPrecedeChildren) {
    Tensor x = random({1, 2, 3, 3}, 9).set_requires_grad();
    Graph g;
    Tensor loss = sum(mul(exp(x), x));
    for (std::size_t id = 0; id < g.size(); ++id) {
        for (std::size_t p : g.parents(id)) EXPECT_LT(p, id);
    }
    ASSERT_TRUE(loss.node_id().has_value());
    EXPECT_EQ(*loss.node_id(), g.size() - 1);
}

TEST(Backward, ConstantsHaveNoNode) {
    Tensor c = random({1, 1, 2, 2}, 3);
    Graph g;
    Tensor y = scalar_mul(c, 2.0);
    EXPECT_FALSE(y.node_id().has_value());
    EXPECT_EQ(g.size(), 0u);
}

TEST(Detach, ValuesIdenticalAndNoGradient) {
    Tensor x = random({1, 2, 3, 3}, 12).set_requires_grad();
    Graph g;
    Tensor d = detach(x);
    EXPECT_EQ(d.to_vector(), x.to_vector());
    EXPECT_FALSE(d.node_id().has_value());
    // Only the non-detached factor contributes: d/dx sum(stop(x) * x) = x.
    g.backward(sum(mul(d, x)));
    EXPECT_EQ(x.grad_tensor().to_vector(), x.to_vector());
}

TEST(Detach, FunctionOfDetachedOnlyLeavesNoGradient) {
    Tensor x = random({1, 2, 3, 3}, 13).set_requires_grad();
    Graph g;
    Tensor y = sum(square(detach(x)));
    EXPECT_FALSE(y.node_id().has_value());
    EXPECT_THROW(g.backward(y), GraphError);
    EXPECT_FALSE(x.has_grad());
}

TEST(Reductions, HandComputedMeanAndStd) {
    Tensor x = Tensor::from_data({1, 1, 1, 4}, {1, 2, 3, 4});
    EXPECT_DOUBLE_EQ(mean_over(x, AxisSet::all()).item(), 2.5);
    EXPECT_DOUBLE_EQ(std_over(x, AxisSet::all(), 0.0).item(), std::sqrt(1.25));
}

TEST(Reductions, ConstantInputGivesSqrtEps) {
    Tensor x = Tensor::full({2, 3, 4, 4}, 7.0);
    Tensor s = std_over(x, AxisSet::chw(), 1e-5);
    for (double v : s.data()) EXPECT_DOUBLE_EQ(v, std::sqrt(1e-5));
    EXPECT_EQ(std_over(x, AxisSet::chw(), 0.0).to_vector(), (std::vector<double>{0.0, 0.0}));
}

TEST(Reductions, EmptyAxisSetRejected) {
    EXPECT_THROW(AxisSet::parse(""), std::invalid_argument);
    EXPECT_THROW(mean_over(Tensor::zeros({1, 1, 2, 2}), AxisSet{}), std::invalid_argument);
    EXPECT_THROW(std_over(Tensor::zeros({1, 1, 2, 2}), AxisSet::hw(), -1.0), std::invalid_argument);
}

TEST(Reductions, MatchLoopOracleForEveryAxisSet) {
    Tensor x = random({2, 4, 8, 8}, 21, 0.5, 2.0);
    for (const AxisSet& axes : {AxisSet::nhw(), AxisSet::chw(), AxisSet::hw(), AxisSet::grouped(2),
                                AxisSet::all()}) {
        const auto [mu, sigma] = oracle::set_stats(x, axes, 1e-5);
        EXPECT_LT(max_abs_diff(mean_over(x, axes), mu), 1e-12);
        EXPECT_LT(max_abs_diff(std_over(x, axes, 1e-5), sigma), 1e-12);
    }
}

TEST(Reductions, StdIsScaleEquivariant) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Tensor x = random({2, 3, 5, 5}, seed);
        for (double c : {-3.5, 0.25, 10.0}) {
            Tensor lhs = std_over(scalar_mul(x, c), AxisSet::chw(), 0.0);
            Tensor rhs = scalar_mul(std_over(x, AxisSet::chw(), 0.0), std::abs(c));
            EXPECT_LT(max_abs_diff(lhs, rhs), 1e-12);
        }
    }
}

TEST(Conv2d, OneByOneUnitKernelIsIdentity) {
    Tensor x = random({2, 1, 5, 6}, 30);
    Tensor w = Tensor::ones({1, 1, 1, 1});
    EXPECT_EQ(conv2d(x, w).to_vector(), x.to_vector());
}

TEST(Conv2d, ImpulseResponseIsPlateau) {
    Tensor x = Tensor::zeros({1, 1, 7, 7});
    std::vector<double> v(49, 0.0);
    v[3 * 7 + 3] = 1.0;
    x = Tensor::from_data({1, 1, 7, 7}, v);
    Tensor y = conv2d(x, Tensor::ones({1, 1, 3, 3}));
    for (int h = 0; h < 7; ++h) {
        for (int w = 0; w < 7; ++w) {
            const bool inside = std::abs(h - 3) <= 1 && std::abs(w - 3) <= 1;
            EXPECT_EQ(y.at(0, 0, h, w), inside ? 1.0 : 0.0);
        }
    }
}

TEST(Conv2d, MatchesQuadrupleLoopOracle) {
    for (int k : {1, 3, 5}) {
        Tensor x = random({2, 3, 9, 7}, 40 + k);
        Tensor w = random({4, 3, k, k}, 50 + k);
        Tensor b = random({1, 4, 1, 1}, 60 + k);
        EXPECT_LT(max_abs_diff(conv2d(x, w, b), oracle::conv2d(x, w, b)), 1e-12) << "k=" << k;
    }
}

TEST(Conv2d, ChannelMismatchThrows) {
    EXPECT_THROW(conv2d(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({2, 2, 3, 3})), ShapeError);
    EXPECT_THROW(conv2d(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({2, 3, 2, 2})), ShapeError);
}

TEST(Conv2d, BiasFreeConvIsLinear) {
    // f(a x + b I) = a f(x) + f(b I): the distributivity the deviation analysis relies on.
    Tensor x = random({1, 4, 8, 8}, 70);
    Tensor w = random({4, 4, 3, 3}, 71);
    const double a = 1.7;
    const double b = -0.6;
    Tensor lhs = conv2d(add_scalar(scalar_mul(x, a), b), w);
    Tensor rhs = add(scalar_mul(conv2d(x, w), a), conv2d(Tensor::full(x.shape(), b), w));
    EXPECT_LT(max_abs_diff(lhs, rhs), 1e-10);
}

// Every registered op against central differences, h = 1e-5, over 20 seeds.
class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, MatchFiniteDifferences) {
    const std::uint64_t seed = GetParam();
    const double h = 1e-5;
    const double tol = 1e-5;
    Tensor x = random({2, 3, 4, 4}, seed);
    Tensor other = random({2, 3, 4, 4}, seed + 1000);
    Tensor positive = random({2, 3, 4, 4}, seed + 2000, 3.0, 0.5);
    Tensor per_channel = random({1, 3, 1, 1}, seed + 3000, 2.0, 0.3);
    Tensor w = random({2, 3, 3, 3}, seed + 4000);
    Tensor bias = random({1, 2, 1, 1}, seed + 5000);
    const std::uint64_t r = seed + 6000;

    struct Case {
        const char* name;
        Tensor at;
        std::function<Tensor(const Tensor&)> f;
    };
    std::vector<Case> cases = {
        {"add", x, [&](const Tensor& t) { return weighted_sum(add(t, other), r); }},
        {"sub", x, [&](const Tensor& t) { return weighted_sum(sub(other, t), r); }},
        {"mul", x, [&](const Tensor& t) { return weighted_sum(mul(t, other), r); }},
        {"div_num", x, [&](const Tensor& t) { return weighted_sum(div(t, positive), r); }},
        {"div_den", positive, [&](const Tensor& t) { return weighted_sum(div(x, t), r); }},
        {"broadcast_mul", per_channel, [&](const Tensor& t) { return weighted_sum(mul(x, t), r); }},
        {"scalar_mul", x, [&](const Tensor& t) { return weighted_sum(scalar_mul(t, -1.3), r); }},
        {"add_scalar", x, [&](const Tensor& t) { return weighted_sum(add_scalar(t, 0.7), r); }},
        {"log", positive, [&](const Tensor& t) { return weighted_sum(log(t), r); }},
        {"exp", x, [&](const Tensor& t) { return weighted_sum(exp(t), r); }},
        {"square", x, [&](const Tensor& t) { return weighted_sum(square(t), r); }},
        {"mean", x, [&](const Tensor& t) { return scalar_mul(mean(square(t)), 3.0); }},
        {"reshape", x, [&](const Tensor& t) { return weighted_sum(reshape(square(t), {3, 2, 4, 4}), r); }},
        {"concat", x, [&](const Tensor& t) { return weighted_sum(concat_channels({t, square(t)}), r); }},
        {"mean_over_nhw", x, [&](const Tensor& t) { return weighted_sum(mean_over(square(t), AxisSet::nhw()), r); }},
        {"std_over_nhw", x, [&](const Tensor& t) { return weighted_sum(std_over(t, AxisSet::nhw(), 1e-5), r); }},
        {"std_over_chw", x, [&](const Tensor& t) { return weighted_sum(std_over(t, AxisSet::chw(), 0.0), r); }},
        {"std_over_hw", x, [&](const Tensor& t) { return weighted_sum(std_over(t, AxisSet::hw(), 1e-5), r); }},
        {"std_over_grouped", random({2, 4, 3, 3}, seed),
         [&](const Tensor& t) { return weighted_sum(std_over(t, AxisSet::grouped(2), 1e-5), r); }},
        {"conv2d_x", x, [&](const Tensor& t) { return weighted_sum(conv2d(t, w, bias), r); }},
        {"conv2d_w", w, [&](const Tensor& t) { return weighted_sum(conv2d(x, t, bias), r); }},
        {"conv2d_b", bias, [&](const Tensor& t) { return weighted_sum(conv2d(x, w, t), r); }},
        {"conv2d_1x1", x, [&](const Tensor& t) { return weighted_sum(conv2d(t, random({2, 3, 1, 1}, r)), r); }},
    };
    for (const Case& c : cases) {
        auto report = finite_diff_check(c.f, c.at, h, tol);
        EXPECT_TRUE(report.passed) << c.name << " seed " << seed << " rel " << report.max_rel_error;
    }
}

INSTANTIATE_TEST_SUITE_P(TwentySeeds, OpGradients, ::testing::Range<std::uint64_t>(0, 20));

TEST(FiniteDiff, SumHasZeroError) {
    Tensor x = random({1, 2, 3, 3}, 80);
    auto report = finite_diff_check([](const Tensor& t) { return sum(t); }, x, 1e-5, 1e-9);
    EXPECT_TRUE(report.passed);
    EXPECT_LT(report.max_rel_error, 1e-9);
}

TEST(FiniteDiff, NaNReportedAsFailure) {
    Tensor x = random({1, 1, 2, 2}, 81);
    auto report = finite_diff_check([](const Tensor& t) { return sum(log(t)); }, x, 1e-5, 1e-4);
    EXPECT_TRUE(report.nan_seen);
    EXPECT_FALSE(report.passed);
}

TEST(FiniteDiff, StepRangeEnforced) {
    Tensor x = random({1, 1, 2, 2}, 82);
    auto f = [](const Tensor& t) { return sum(t); };
    EXPECT_THROW(finite_diff_check(f, x, 1e-3, 1e-4), std::invalid_argument);
    EXPECT_THROW(finite_diff_check(f, x, 1e-9, 1e-4), std::invalid_argument);
}

TEST(FiniteDiff, DetectsWrongGradient) {
    // An op whose backward is deliberately off by a factor of two.
    auto broken = [](const Tensor& t) {
        auto d = t.data();
        std::vector<double> v(d.begin(), d.end());
        Tensor y = make_op("broken", t.shape(), v, {t}, [](GradContext& ctx) {
            for (std::size_t i = 0; i < ctx.grad_out.size(); ++i) ctx.grad_in[0][i] += 2.0 * ctx.grad_out[i];
        });
        return sum(y);
    };
    auto report = finite_diff_check(broken, random({1, 1, 2, 2}, 83), 1e-5, 1e-4);
    EXPECT_FALSE(report.passed);
}

TEST(Serialization, T4dRoundTripAndHeaderLayout) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        const Shape s{1 + rng.uniform_int(0, 2), 1 + rng.uniform_int(0, 4), 1 + rng.uniform_int(0, 6),
                      1 + rng.uniform_int(0, 6)};
        Tensor t = Tensor::rand_normal(s, rng);
        Tensor back = decode_t4d(encode_t4d(t));
        EXPECT_EQ(back.shape(), s);
        EXPECT_EQ(back.to_vector(), t.to_vector());
    }
    Tensor t = Tensor::from_data({1, 1, 1, 2}, {1.0, -2.0});
    auto bytes = encode_t4d(t);
    ASSERT_EQ(bytes.size(), 16u + 16u);
    EXPECT_EQ(bytes[0], 1);
    EXPECT_EQ(bytes[12], 2);
    // 1.0 = 0x3FF0000000000000 little-endian
    EXPECT_EQ(bytes[16 + 7], 0x3F);
    EXPECT_EQ(bytes[16 + 6], 0xF0);

    const auto path = (std::filesystem::temp_directory_path() / "devmod_roundtrip.t4d").string();
    write_t4d(path, t);
    EXPECT_EQ(read_t4d(path).to_vector(), t.to_vector());
    std::filesystem::remove(path);
}

TEST(Serialization, RejectsTruncatedPayload) {
    auto bytes = encode_t4d(Tensor::ones({1, 1, 2, 2}));
    bytes.pop_back();
    EXPECT_THROW(decode_t4d(bytes), std::runtime_error);
}
