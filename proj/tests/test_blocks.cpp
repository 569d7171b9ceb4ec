#include <gtest/gtest.h>

#include <cmath>

#include "devmod/blocks.hpp"
#include "devmod/gradcheck.hpp"
#include "devmod/rng.hpp"
#include "oracles.hpp"

using namespace devmod;

namespace {

Tensor random(Shape s, std::uint64_t seed, double mean = 0.0, double std = 1.0) {
    Rng rng(seed);
    return Tensor::rand_normal(s, rng, mean, std);
}

Tensor weighted_sum(const Tensor& x, std::uint64_t seed) { return sum(mul(x, random(x.shape(), seed))); }

// Subtracts each sample's own mean over (C,H,W).
Tensor center(const Tensor& x) {
    const Shape s = x.shape();
    std::vector<double> v = x.to_vector();
    const std::size_t per = static_cast<std::size_t>(s.c) * s.h * s.w;
    for (int n = 0; n < s.n; ++n) {
        double m = 0.0;
        for (std::size_t i = 0; i < per; ++i) m += v[n * per + i];
        m /= static_cast<double>(per);
        for (std::size_t i = 0; i < per; ++i) v[n * per + i] -= m;
    }
    return Tensor::from_data(s, v);
}

BlockConfig config(BlockKind kind, int channels = 6) {
    BlockConfig cfg;
    cfg.kind = kind;
    cfg.channels = channels;
    cfg.rdb_convs = 3;
    cfg.growth = 4;
    return cfg;
}

BlockConfig toy(BlockKind kind, int channels) {
    BlockConfig cfg = config(kind, channels);
    cfg.ln_eps = 0.0;
    return cfg;
}

const BlockKind kAllKinds[] = {BlockKind::T1,    BlockKind::T2,       BlockKind::T3,
                               BlockKind::RB,    BlockKind::SRRB,     BlockKind::PreRB,
                               BlockKind::RB_AdaDM, BlockKind::RDB,   BlockKind::RDB_AdaDM};

}  // namespace

TEST(BlockNames, RoundTrip) {
    for (BlockKind k : kAllKinds) EXPECT_EQ(parse_block_kind(to_string(k)), k);
    EXPECT_THROW(parse_block_kind("ResBlock"), std::invalid_argument);
}

TEST(BlockConfig, Validation) {
    BlockConfig cfg = config(BlockKind::RB);
    cfg.channels = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = config(BlockKind::RDB);
    cfg.growth = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = config(BlockKind::RB);
    cfg.kernel = 4;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Block, EveryKindPreservesShape) {
    Tensor x = random({2, 6, 7, 5}, 1);
    for (BlockKind k : kAllKinds) {
        Rng rng(2);
        Block block(config(k), rng);
        EXPECT_EQ(block.forward(x, Mode::Train).shape(), x.shape()) << to_string(k);
    }
}

TEST(Block, ChannelMismatchThrows) {
    Rng rng(3);
    Block block(config(BlockKind::RB), rng);
    EXPECT_THROW(block.forward(random({1, 5, 4, 4}, 1), Mode::Eval), ShapeError);
}

TEST(Block, ToyBlocksAreBiasFreeAndAffineOff) {
    for (BlockKind k : {BlockKind::T1, BlockKind::T2, BlockKind::T3}) {
        Rng rng(4);
        Block block(config(k), rng);
        ASSERT_EQ(block.convs.size(), 1u);
        EXPECT_FALSE(block.convs[0].has_bias());
        for (const NormLayer& n : block.norms) {
            EXPECT_EQ(n.spec().kind, NormKind::LN);
            EXPECT_FALSE(n.spec().affine);
        }
    }
}

TEST(Block, T1WithZeroWeightsIsIdentity) {
    Rng rng(5);
    Block block(config(BlockKind::T1), rng);
    block.convs[0].weight = Tensor::zeros(block.convs[0].weight.shape());
    Tensor x = random({2, 6, 5, 5}, 6);
    EXPECT_EQ(block.forward(x, Mode::Eval).to_vector(), x.to_vector());
}

TEST(Block, T1MatchesLoopOracle) {
    Rng rng(7);
    Block block(config(BlockKind::T1), rng);
    Tensor x = random({2, 6, 5, 4}, 8);
    Tensor expect = oracle::conv2d(x, block.convs[0].weight, Tensor());
    EXPECT_LT(max_abs_diff(block.residual(x, Mode::Eval), expect), 1e-12);
}

TEST(Block, RdbMatchesManualWiring) {
    Rng rng(9);
    Block block(config(BlockKind::RDB), rng);
    Tensor x = random({1, 6, 5, 5}, 10);
    std::vector<Tensor> feats{x};
    for (int i = 0; i < 3; ++i) {
        Tensor in = concat_channels(feats);
        Tensor y = oracle::conv2d(in, block.convs[i].weight, block.convs[i].bias);
        std::vector<double> v = y.to_vector();
        for (double& e : v) e = std::max(e, 0.0);
        feats.push_back(Tensor::from_data(y.shape(), v));
    }
    Tensor r = oracle::conv2d(concat_channels(feats), block.convs[3].weight, block.convs[3].bias);
    EXPECT_EQ(block.convs[3].kernel(), 1);
    EXPECT_EQ(block.convs[3].c_in(), 6 + 3 * 4);
    EXPECT_LT(max_abs_diff(block.residual(x, Mode::Train), r), 1e-11);
}

// T2 shrinks the T1 residual deviation by sigma(x); T3 restores it. With a
// shared weight this is exact for inputs whose per-sample mean is zero.
TEST(ToyIdentity, ZeroMeanInputsExact) {
    const int c = 8;
    Rng r1(11), r2(11), r3(11);
    Block t1(toy(BlockKind::T1, c), r1), t2(toy(BlockKind::T2, c), r2), t3(toy(BlockKind::T3, c), r3);
    ASSERT_EQ(t1.convs[0].weight.to_vector(), t3.convs[0].weight.to_vector());
    Tensor x = center(random({3, c, 12, 12}, 12, 0.0, 2.5));
    Tensor sigma = std_over(x, AxisSet::chw(), 0.0);
    Tensor s1 = std_over(t1.residual(x, Mode::Eval), AxisSet::chw(), 0.0);
    Tensor s2 = std_over(t2.residual(x, Mode::Eval), AxisSet::chw(), 0.0);
    Tensor s3 = std_over(t3.residual(x, Mode::Eval), AxisSet::chw(), 0.0);
    for (int n = 0; n < 3; ++n) {
        EXPECT_GT(sigma[n], 1.0);
        EXPECT_NEAR(s2[n], s1[n] / sigma[n], 1e-12);
        EXPECT_NEAR(s3[n], s1[n], 1e-12);
    }
}

// In general the constant-image response Conv(mu I) is not removed by the
// shift-invariance of std, so T3 reproduces std(Conv(x - mu)), not std(Conv(x)).
TEST(ToyIdentity, GeneralInputsMatchCenteredResponse) {
    const int c = 8;
    Rng r3(13);
    Block t3(toy(BlockKind::T3, c), r3);
    Tensor x = random({3, c, 10, 10}, 14, 3.0, 2.0);
    Tensor centered = oracle::conv2d(center(x), t3.convs[0].weight, Tensor());
    Tensor s3 = std_over(t3.residual(x, Mode::Eval), AxisSet::chw(), 0.0);
    Tensor sc = std_over(centered, AxisSet::chw(), 0.0);
    Tensor s1 = std_over(oracle::conv2d(x, t3.convs[0].weight, Tensor()), AxisSet::chw(), 0.0);
    for (int n = 0; n < 3; ++n) {
        EXPECT_NEAR(s3[n], sc[n], 1e-12);
        EXPECT_GT(std::abs(s3[n] - s1[n]), 1e-3);
    }
}

TEST(Block, RbAdaDmDegeneratesToRb) {
    const int c = 6;
    Rng ra(15), rb(15);
    Block ada(config(BlockKind::RB_AdaDM, c), ra);
    Block rb_block(config(BlockKind::RB, c), rb);
    rb_block.convs = ada.convs;
    for (NormLayer& n : ada.norms) {
        n.running_mean = Tensor::zeros({1, c, 1, 1});
        n.running_var = Tensor::full({1, c, 1, 1}, 1.0 - n.spec().eps);
        n.stats_updated = true;
    }
    ada.adadm_state->w.mutable_data()[0] = 0.0;
    ada.adadm_state->b.mutable_data()[0] = 0.0;
    Tensor x = random({2, c, 6, 6}, 16);
    EXPECT_LT(max_abs_diff(ada.forward(x, Mode::Eval), rb_block.forward(x, Mode::Eval)), 1e-12);
}

TEST(Block, DetachSigmaForwardBitExact) {
    for (BlockKind k : {BlockKind::RB_AdaDM, BlockKind::RDB_AdaDM}) {
        BlockConfig a = config(k), b = config(k);
        b.detach_sigma = true;
        Rng ra(17), rb(17);
        Block on(a, ra), off(b, rb);
        Tensor x = random({2, 6, 5, 5}, 18);
        EXPECT_EQ(on.forward(x, Mode::Train).to_vector(), off.forward(x, Mode::Train).to_vector());
    }
}

TEST(Block, TapsCaptureWithoutChangingOutput) {
    Rng rng(19);
    Block block(config(BlockKind::RB_AdaDM), rng);
    Tensor x = random({2, 6, 5, 5}, 20);
    BlockTaps taps;
    Tensor y = block.forward(x, Mode::Eval, &taps);
    Tensor y2 = block.forward(x, Mode::Eval);
    EXPECT_EQ(y.to_vector(), y2.to_vector());
    EXPECT_LT(max_abs_diff(add(x, taps.residual_pre_add), y), 1e-15);
    EXPECT_EQ(taps.block_input.to_vector(), x.to_vector());
    ASSERT_TRUE(taps.modulation_factor.defined());
    EXPECT_EQ(taps.modulation_factor.shape(), (Shape{2, 1, 1, 1}));
    for (int n = 0; n < 2; ++n) {
        const double sd = oracle::sample_std(x, n);
        EXPECT_NEAR(taps.modulation_factor[n], std::sqrt(sd * sd + 1e-8), 1e-12);
    }
}

TEST(Block, CollectNamesEveryParameter) {
    Rng rng(21);
    Block block(config(BlockKind::RB_AdaDM), rng);
    std::vector<NamedParam> params;
    block.collect("b0", params);
    int trainable = 0;
    for (const NamedParam& p : params) trainable += p.trainable;
    // 2 convs * (w, b) + 2 BN * (weight, bias) + AdaDM (w, b)
    EXPECT_EQ(trainable, 10);
    EXPECT_EQ(params.front().name.rfind("b0.conv0", 0), 0u);
}

namespace {

bool feeds_train_bn(BlockKind kind, const std::string& name) {
    if (kind == BlockKind::SRRB) return name == "b.conv0.bias" || name == "b.conv1.bias";
    return (kind == BlockKind::PreRB || kind == BlockKind::RB_AdaDM) && name == "b.conv0.bias";
}

}  // namespace

class BlockGradient : public ::testing::TestWithParam<BlockKind> {};

TEST_P(BlockGradient, InputAndParameters) {
    const BlockKind kind = GetParam();
    Rng rng(23);
    Block block(config(kind, 4), rng);
    Tensor x = random({2, 4, 5, 5}, 24, 0.5, 1.5);
    auto f = [&](const Tensor& in) { return weighted_sum(block.forward(in, Mode::Train), 25); };
    GradCheckReport rx = finite_diff_check(f, x, 1e-5, 1e-4);
    EXPECT_TRUE(rx.passed) << to_string(kind) << " input rel err " << rx.max_rel_error;

    std::vector<NamedParam> params;
    block.collect("b", params);
    for (NamedParam& p : params) {
        if (!p.trainable) continue;
        GradCheckReport r = finite_diff_check_param([&] { return f(x); }, p.tensor, 1e-5, 1e-4);
        if (feeds_train_bn(kind, p.name)) {
            // A per-channel shift in front of batch-statistics BN cancels
            // exactly, so both gradients are rounding noise around zero.
            EXPECT_LT(r.max_abs_error, 1e-8) << p.name;
            continue;
        }
        EXPECT_TRUE(r.passed) << p.name << " rel err " << r.max_rel_error;
    }
}

INSTANTIATE_TEST_SUITE_P(AllKinds, BlockGradient, ::testing::ValuesIn(kAllKinds),
                         [](const auto& info) { return std::string(to_string(info.param)); });

// ---------------------------------------------------------------------------

namespace {

Conv2d toy_conv(int c, std::uint64_t seed) {
    Rng rng(seed);
    return make_conv_layer(c, c, 3, false, rng);
}

}  // namespace

TEST(DaIdentity, ZeroMeanInputPasses) {
    Conv2d conv = toy_conv(8, 31);
    DaIdentityReport r = verify_da_identity(center(random({4, 8, 16, 16}, 32, 0.0, 3.0)), conv, 1e-10);
    EXPECT_TRUE(r.passed()) << r.max_err_shrink << " " << r.max_err_restore;
    EXPECT_LT(r.max_err_centered, 1e-10);
}

TEST(DaIdentity, ScaledInputStillPasses) {
    Conv2d conv = toy_conv(8, 33);
    Tensor x = center(random({4, 8, 16, 16}, 34));
    DaIdentityReport a = verify_da_identity(x, conv, 1e-10);
    DaIdentityReport b = verify_da_identity(scalar_mul(x, 5.0), conv, 1e-10);
    EXPECT_TRUE(b.passed());
    for (int n = 0; n < 4; ++n) {
        EXPECT_NEAR(b.sigma[n], 5.0 * a.sigma[n], 1e-12);
        EXPECT_NEAR(b.std_gamma[n], a.std_gamma[n], 1e-12);
    }
}

TEST(DaIdentity, CenteredRelationHoldsForAnyInput) {
    Conv2d conv = toy_conv(8, 35);
    DaIdentityReport r = verify_da_identity(random({4, 8, 16, 16}, 36, 2.0, 1.0), conv, 1e-10);
    EXPECT_LT(r.max_err_centered, 1e-10);
    EXPECT_FALSE(r.restore_ok);
}

TEST(DaIdentity, BiasReinstatedIsFlagged) {
    Rng rng(37);
    Conv2d conv = make_conv_layer(8, 8, 3, true, rng);
    std::vector<double> b(8);
    for (int i = 0; i < 8; ++i) b[i] = 0.5 * (i - 3.5);
    conv.bias = Tensor::from_data({1, 8, 1, 1}, b);
    DaIdentityReport r = verify_da_identity(center(random({4, 8, 16, 16}, 38)), conv, 1e-10);
    EXPECT_FALSE(r.restore_ok);
    EXPECT_FALSE(r.passed());
}

TEST(DaIdentity, ConstantSampleThrows) {
    Conv2d conv = toy_conv(2, 39);
    std::vector<double> v(2 * 2 * 3 * 3, 1.0);
    for (std::size_t i = 0; i < 18; ++i) v[i] = static_cast<double>(i);
    EXPECT_THROW(verify_da_identity(Tensor::from_data({2, 2, 3, 3}, v), conv, 1e-10), std::domain_error);
}
