#include <gtest/gtest.h>

#include <cmath>

#include "devmod/gradcheck.hpp"
#include "devmod/layers.hpp"
#include "devmod/log.hpp"
#include "devmod/rng.hpp"
#include "oracles.hpp"

using namespace devmod;

namespace {

Tensor random(Shape s, std::uint64_t seed, double mean = 0.0, double std = 1.0) {
    Rng rng(seed);
    return Tensor::rand_normal(s, rng, mean, std);
}

Tensor weighted_sum(const Tensor& x, std::uint64_t seed) { return sum(mul(x, random(x.shape(), seed))); }

NormSpec plain(NormKind kind, int groups = 1, double eps = 0.0) {
    NormSpec s;
    s.kind = kind;
    s.groups = groups;
    s.eps = eps;
    s.affine = false;
    return s;
}

// Silences expected warnings for the scope.
struct QuietWarnings {
    std::vector<std::string> seen;
    std::function<void(std::string_view)> previous;
    QuietWarnings() {
        previous = set_warning_sink([this](std::string_view m) { seen.emplace_back(m); });
    }
    ~QuietWarnings() { set_warning_sink(previous); }
};

}  // namespace

TEST(Normalize, LayerNormTwoValues) {
    NormLayer ln(plain(NormKind::LN), 1);
    Tensor y = ln.forward(Tensor::from_data({1, 1, 1, 2}, {1.0, 3.0}), Mode::Train);
    EXPECT_EQ(y.to_vector(), (std::vector<double>{-1.0, 1.0}));
}

TEST(Normalize, EveryKindStandardizesItsSets) {
    Tensor x = random({4, 8, 6, 6}, 1, 3.0, 2.5);
    const std::vector<NormSpec> specs = {plain(NormKind::BN), plain(NormKind::LN), plain(NormKind::IN),
                                         plain(NormKind::GN, 4)};
    for (const NormSpec& spec : specs) {
        NormLayer layer(spec, 8);
        Tensor y = layer.forward(x, Mode::Train);
        const AxisSet axes = norm_axes(spec);
        auto [mu, sd] = oracle::set_stats(y, axes, 0.0);
        for (double v : mu.data()) EXPECT_LT(std::abs(v), 1e-10) << to_string(spec.kind);
        for (double v : sd.data()) EXPECT_LT(std::abs(v - 1.0), 1e-6) << to_string(spec.kind);
    }
}

TEST(Normalize, BatchNormMatchesLoopOracle) {
    Tensor x = random({4, 8, 6, 6}, 2, -1.0, 3.0);
    NormSpec spec = plain(NormKind::BN, 1, 1e-5);
    NormLayer bn(spec, 8);
    Tensor y = bn.forward(x, Mode::Train);
    auto [mu, sd] = oracle::set_stats(x, AxisSet::nhw(), 1e-5);
    const Shape s = x.shape();
    double worst = 0.0;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h)
                for (int w = 0; w < s.w; ++w) {
                    const double expect = (x.at(n, c, h, w) - mu[c]) / sd[c];
                    worst = std::max(worst, std::abs(expect - y.at(n, c, h, w)));
                }
    EXPECT_LT(worst, 1e-12);
}

TEST(Normalize, RunningStatisticsMomentumRule) {
    Tensor x = random({4, 3, 5, 5}, 3, 2.0, 1.5);
    NormSpec spec = plain(NormKind::BN, 1, 1e-5);
    spec.momentum = 0.1;
    NormLayer bn(spec, 3);
    bn.forward(x, Mode::Train);
    auto [mu, sd] = oracle::set_stats(x, AxisSet::nhw(), 0.0);
    for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(bn.running_mean[c], 0.1 * mu[c], 1e-12);
        // population variance, no eps
        EXPECT_NEAR(bn.running_var[c], 0.9 + 0.1 * sd[c] * sd[c], 1e-12);
    }
    EXPECT_TRUE(bn.stats_updated);
}

TEST(Normalize, BatchNormEvalIsBatchIndependent) {
    NormLayer bn(NormSpec{}, 4);
    for (int i = 0; i < 3; ++i) bn.forward(random({4, 4, 5, 5}, 10 + i, 1.0, 2.0), Mode::Train);
    Tensor batch = random({3, 4, 5, 5}, 20);
    Tensor together = bn.forward(batch, Mode::Eval);
    for (int n = 0; n < 3; ++n) {
        Tensor alone = bn.forward(slice_sample(batch, n), Mode::Eval);
        EXPECT_EQ(alone.to_vector(), slice_sample(together, n).to_vector());
    }
}

TEST(Normalize, BatchNormEvalBeforeUpdateWarnsAndUsesUnitStats) {
    QuietWarnings quiet;
    NormSpec spec = plain(NormKind::BN, 1, 0.0);
    NormLayer bn(spec, 2);
    Tensor x = random({1, 2, 3, 3}, 4);
    Tensor y = bn.forward(x, Mode::Eval);
    EXPECT_EQ(y.to_vector(), x.to_vector());
    ASSERT_EQ(quiet.seen.size(), 1u);
    EXPECT_NE(quiet.seen[0].find("running"), std::string::npos);
}

TEST(Normalize, Errors) {
    EXPECT_THROW(NormLayer(plain(NormKind::GN, 3), 8), std::invalid_argument);
    NormLayer bn(plain(NormKind::BN), 2);
    EXPECT_THROW(bn.forward(Tensor::zeros({1, 2, 1, 1}), Mode::Train), std::invalid_argument);
    EXPECT_THROW(bn.forward(Tensor::zeros({1, 3, 2, 2}), Mode::Train), ShapeError);
}

TEST(Normalize, AffineAppliesPerChannelScaleShift) {
    NormSpec spec = plain(NormKind::IN, 1, 1e-5);
    spec.affine = true;
    NormLayer in(spec, 2);
    in.weight.mutable_data()[1] = 3.0;
    in.bias.mutable_data()[1] = -1.0;
    Tensor x = random({2, 2, 4, 4}, 5);
    NormLayer bare(plain(NormKind::IN, 1, 1e-5), 2);
    Tensor y = in.forward(x, Mode::Train);
    Tensor z = bare.forward(x, Mode::Train);
    EXPECT_DOUBLE_EQ(y.at(1, 1, 2, 3), 3.0 * z.at(1, 1, 2, 3) - 1.0);
    EXPECT_DOUBLE_EQ(y.at(1, 0, 2, 3), z.at(1, 0, 2, 3));
}

TEST(Normalize, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Tensor x = random({2, 4, 3, 3}, 100 + seed, 0.5, 1.5);
        for (NormKind kind : {NormKind::BN, NormKind::LN, NormKind::IN, NormKind::GN}) {
            NormSpec spec;
            spec.kind = kind;
            spec.groups = 2;
            NormLayer layer(spec, 4);
            layer.weight.mutable_data()[0] = 1.5;
            layer.bias.mutable_data()[2] = 0.3;
            auto f = [&](const Tensor& t) { return weighted_sum(layer.forward(t, Mode::Train), seed); };
            auto report = finite_diff_check(f, x, 1e-5, 1e-5);
            EXPECT_TRUE(report.passed) << to_string(kind) << " rel " << report.max_rel_error;
            auto loss = [&] { return weighted_sum(layer.forward(x, Mode::Train), seed); };
            EXPECT_TRUE(finite_diff_check_param(loss, layer.weight, 1e-5, 1e-5).passed);
            EXPECT_TRUE(finite_diff_check_param(loss, layer.bias, 1e-5, 1e-5).passed);
        }
    }
}

TEST(AdaDM, FreshStateIsUnitWeightZeroBias) {
    AdaDMState s;
    EXPECT_EQ(s.w.item(), 1.0);
    EXPECT_EQ(s.b.item(), 0.0);
    EXPECT_TRUE(s.w.requires_grad());
    EXPECT_FALSE(s.detach_sigma);
}

TEST(AdaDM, DefaultStateIsDeviationAmplification) {
    Tensor gamma = random({3, 4, 5, 5}, 30);
    Tensor x = random({3, 4, 5, 5}, 31, 2.0, 4.0);
    AdaDMState s;
    Tensor out = adadm(gamma, x, s);
    Tensor sigma = std_over(x, AxisSet::chw(), s.eps);
    EXPECT_EQ(out.to_vector(), mul(gamma, sigma).to_vector());
    for (int n = 0; n < 3; ++n) {
        EXPECT_NEAR(oracle::sample_std(out, n), sigma[n] * oracle::sample_std(gamma, n), 1e-12);
    }
}

TEST(AdaDM, ZeroWeightIsIdentity) {
    Tensor gamma = random({2, 3, 4, 4}, 32);
    AdaDMState s;
    s.w.mutable_data()[0] = 0.0;
    EXPECT_EQ(adadm(gamma, random({2, 3, 4, 4}, 33), s).to_vector(), gamma.to_vector());
}

TEST(AdaDM, ClosedFormFactor) {
    // sigma = 2 per sample: x alternates between -2 and 2.
    std::vector<double> v(16);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i % 2 ? 2.0 : -2.0;
    Tensor x = Tensor::from_data({1, 1, 4, 4}, v);
    AdaDMState s;
    s.eps = 0.0;
    s.b.mutable_data()[0] = std::log(3.0);
    EXPECT_NEAR(adadm_factor(x, s).item(), 6.0, 1e-14);
    Tensor gamma = random({1, 2, 2, 2}, 34);
    EXPECT_LT(max_abs_diff(adadm(gamma, x, s), scalar_mul(gamma, 6.0)), 1e-13);
}

TEST(AdaDM, ZeroSigmaNamesSample) {
    Tensor x = concat_channels({Tensor::zeros({2, 1, 2, 2})});
    std::vector<double> v(8, 1.0);
    v[1] = 5.0;  // sample 0 non-constant, sample 1 constant
    x = Tensor::from_data({2, 1, 2, 2}, v);
    AdaDMState s;
    s.eps = 0.0;
    try {
        adadm(Tensor::ones({2, 1, 2, 2}), x, s);
        FAIL() << "expected domain_error";
    } catch (const std::domain_error& e) {
        EXPECT_NE(std::string(e.what()).find("sample 1"), std::string::npos);
    }
}

TEST(AdaDM, DetachedForwardBitIdenticalButInputGradientDiffers) {
    Tensor gamma_src = random({2, 3, 4, 4}, 40);
    Tensor x0 = random({2, 3, 4, 4}, 41, 1.0, 2.0);
    AdaDMState attached;
    AdaDMState detached(true);
    attached.w.mutable_data()[0] = detached.w.mutable_data()[0] = 0.7;
    attached.b.mutable_data()[0] = detached.b.mutable_data()[0] = 0.2;

    auto grad_of = [&](const AdaDMState& s) {
        Tensor x = x0.clone().set_requires_grad();
        Graph g;
        // gamma depends on x as in a real residual branch
        Tensor gamma = mul(x, gamma_src);
        Tensor out = adadm(gamma, x, s);
        g.backward(weighted_sum(out, 42));
        return std::make_pair(out.to_vector(), x.grad_tensor());
    };
    auto [out_a, grad_a] = grad_of(attached);
    auto [out_d, grad_d] = grad_of(detached);
    EXPECT_EQ(out_a, out_d);
    EXPECT_GT(max_abs_diff(grad_a, grad_d), 1e-6);
}

TEST(AdaDM, ParameterAndInputGradients) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Tensor gamma = random({2, 3, 4, 4}, 50 + seed);
        Tensor x = random({2, 3, 4, 4}, 60 + seed, 0.0, 3.0);
        for (bool detach_flag : {false, true}) {
            AdaDMState s(detach_flag);
            s.w.mutable_data()[0] = 0.8;
            s.b.mutable_data()[0] = -0.1;
            auto loss = [&] { return weighted_sum(adadm(gamma, x, s), seed); };
            auto rw = finite_diff_check_param(loss, s.w, 1e-5, 1e-5);
            auto rb = finite_diff_check_param(loss, s.b, 1e-5, 1e-5);
            EXPECT_TRUE(rw.passed) << rw.max_rel_error;
            EXPECT_TRUE(rb.passed) << rb.max_rel_error;
            if (!detach_flag) {
                auto rx = finite_diff_check(
                    [&](const Tensor& t) { return weighted_sum(adadm(gamma, t, s), seed); }, x, 1e-5, 1e-5);
                EXPECT_TRUE(rx.passed) << rx.max_rel_error;
            }
        }
    }
}

TEST(AdaDM, WeightGradientIsOutputTimesLogSigma) {
    Tensor gamma = random({2, 2, 3, 3}, 70);
    Tensor x = random({2, 2, 3, 3}, 71, 0.0, 2.0);
    AdaDMState s;
    Graph g;
    Tensor out = adadm(gamma, x, s);
    g.backward(sum(out));
    Tensor sigma = std_over(x, AxisSet::chw(), s.eps);
    double expect = 0.0;
    for (int n = 0; n < 2; ++n) expect += sum_value(slice_sample(out, n)) * std::log(sigma[n]);
    EXPECT_NEAR(s.w.grad()[0], expect, 1e-12);
}

TEST(Relu, ValuesIdempotenceAndGradient) {
    Tensor x = Tensor::from_data({1, 1, 1, 3}, {-1.0, 0.0, 2.0});
    EXPECT_EQ(relu(x).to_vector(), (std::vector<double>{0.0, 0.0, 2.0}));
    Tensor r = random({2, 3, 4, 4}, 80);
    EXPECT_EQ(relu(relu(r)).to_vector(), relu(r).to_vector());
    {
        Tensor leaf = x.clone().set_requires_grad();
        Graph g;
        g.backward(sum(relu(leaf)));
        EXPECT_EQ(leaf.grad_tensor().to_vector(), (std::vector<double>{0.0, 0.0, 1.0}));
    }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Tensor t = random({1, 2, 4, 4}, 200 + seed);
        // keep every entry well away from the kink
        auto v = t.mutable_data();
        for (double& e : v) e += e >= 0 ? 0.1 : -0.1;
        auto report = finite_diff_check([&](const Tensor& z) { return weighted_sum(relu(z), seed); }, t, 1e-5, 1e-5);
        EXPECT_TRUE(report.passed);
    }
}

TEST(PixelShuffle, IdentityAtUnitFactor) {
    Tensor x = random({2, 3, 4, 5}, 90);
    EXPECT_EQ(pixel_shuffle(x, 1).to_vector(), x.to_vector());
}

TEST(PixelShuffle, FourChannelsToTwoByTwo) {
    Tensor x = Tensor::from_data({1, 4, 1, 1}, {10, 20, 30, 40});
    Tensor y = pixel_shuffle(x, 2);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    EXPECT_EQ(y.to_vector(), (std::vector<double>{10, 20, 30, 40}));
}

TEST(PixelShuffle, MatchesIndexMapOracle) {
    const int r = 3;
    Tensor x = random({2, 2 * r * r, 3, 4}, 91);
    Tensor y = pixel_shuffle(x, r);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 2; ++c)
            for (int h = 0; h < 3 * r; ++h)
                for (int w = 0; w < 4 * r; ++w) {
                    const int src_c = c * r * r + (h % r) * r + (w % r);
                    ASSERT_EQ(y.at(n, c, h, w), x.at(n, src_c, h / r, w / r));
                }
}

TEST(PixelShuffle, UnshuffleInvertsAndGradientsPass) {
    Tensor x = random({2, 8, 3, 3}, 92);
    EXPECT_EQ(pixel_unshuffle(pixel_shuffle(x, 2), 2).to_vector(), x.to_vector());
    EXPECT_THROW(pixel_shuffle(Tensor::zeros({1, 6, 2, 2}), 2), ShapeError);
    auto report = finite_diff_check([](const Tensor& t) { return weighted_sum(pixel_shuffle(t, 2), 7); }, x, 1e-5, 1e-5);
    EXPECT_TRUE(report.passed);
}

TEST(ConvLayer, ShapeInitAndDeterminism) {
    Rng rng(5);
    Conv2d a = make_conv_layer(16, 8, 3, true, rng);
    Conv2d b = make_conv_layer(16, 8, 3, true, rng);
    EXPECT_EQ(a.weight.shape(), (Shape{8, 16, 3, 3}));
    EXPECT_EQ(a.bias.to_vector(), std::vector<double>(8, 0.0));
    EXPECT_NE(a.weight.to_vector(), b.weight.to_vector());
    Rng again(5);
    EXPECT_EQ(make_conv_layer(16, 8, 3, true, again).weight.to_vector(), a.weight.to_vector());

    const double expected = std::sqrt(2.0 / (16 * 9));
    Rng wide(6);
    Conv2d big = make_conv_layer(16, 64, 3, false, wide);
    EXPECT_FALSE(big.has_bias());
    EXPECT_NEAR(std_value(big.weight), expected, 0.1 * expected);
    EXPECT_THROW(make_conv_layer(3, 3, 2, false, rng), std::invalid_argument);
}
