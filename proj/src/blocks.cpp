#include "devmod/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "devmod/rng.hpp"

namespace devmod {

namespace {

constexpr std::pair<BlockKind, std::string_view> kKindNames[] = {
    {BlockKind::T1, "T1"},       {BlockKind::T2, "T2"},           {BlockKind::T3, "T3"},
    {BlockKind::RB, "RB"},       {BlockKind::SRRB, "SRRB"},       {BlockKind::PreRB, "PreRB"},
    {BlockKind::RB_AdaDM, "RB_AdaDM"}, {BlockKind::RDB, "RDB"}, {BlockKind::RDB_AdaDM, "RDB_AdaDM"},
};

NormSpec bn_spec(const BlockConfig& cfg) {
    NormSpec s;
    s.kind = NormKind::BN;
    s.affine = cfg.bn_affine;
    return s;
}

NormSpec toy_ln_spec(const BlockConfig& cfg) {
    NormSpec s;
    s.kind = NormKind::LN;
    s.eps = cfg.ln_eps;
    s.affine = false;
    return s;
}

}  // namespace

std::string_view to_string(BlockKind kind) {
    for (const auto& [k, name] : kKindNames) {
        if (k == kind) return name;
    }
    return "?";
}

BlockKind parse_block_kind(std::string_view name) {
    for (const auto& [k, n] : kKindNames) {
        if (n == name) return k;
    }
    throw std::invalid_argument("unknown block kind '" + std::string(name) + "'");
}

bool uses_adadm(BlockKind kind) { return kind == BlockKind::RB_AdaDM || kind == BlockKind::RDB_AdaDM; }
bool is_dense(BlockKind kind) { return kind == BlockKind::RDB || kind == BlockKind::RDB_AdaDM; }
bool is_toy(BlockKind kind) { return kind == BlockKind::T1 || kind == BlockKind::T2 || kind == BlockKind::T3; }

void BlockConfig::validate() const {
    if (channels <= 0) throw std::invalid_argument("block channels must be positive");
    if (kernel <= 0 || kernel % 2 == 0) throw std::invalid_argument("block kernel must be odd");
    if (is_dense(kind) && (rdb_convs < 1 || growth < 1)) {
        throw std::invalid_argument("RDB blocks need rdb_convs >= 1 and growth >= 1");
    }
    if (ln_eps < 0.0) throw std::invalid_argument("ln_eps must be >= 0");
}

Block::Block(const BlockConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const int c = cfg.channels;
    const int k = cfg.kernel;
    switch (cfg.kind) {
        case BlockKind::T1:
        case BlockKind::T2:
        case BlockKind::T3:
            convs.push_back(make_conv_layer(c, c, k, false, rng));
            if (cfg.kind != BlockKind::T1) norms.emplace_back(toy_ln_spec(cfg), c);
            break;
        case BlockKind::RB:
            convs.push_back(make_conv_layer(c, c, k, true, rng));
            convs.push_back(make_conv_layer(c, c, k, true, rng));
            break;
        case BlockKind::SRRB:
        case BlockKind::PreRB:
        case BlockKind::RB_AdaDM:
            convs.push_back(make_conv_layer(c, c, k, true, rng));
            convs.push_back(make_conv_layer(c, c, k, true, rng));
            if (cfg.batch_norm) {
                norms.emplace_back(bn_spec(cfg), c);
                norms.emplace_back(bn_spec(cfg), c);
            }
            break;
        case BlockKind::RDB:
        case BlockKind::RDB_AdaDM:
            for (int i = 0; i < cfg.rdb_convs; ++i) {
                convs.push_back(make_conv_layer(c + i * cfg.growth, cfg.growth, k, true, rng));
            }
            convs.push_back(make_conv_layer(c + cfg.rdb_convs * cfg.growth, c, 1, true, rng));
            if (cfg.kind == BlockKind::RDB_AdaDM && cfg.batch_norm) norms.emplace_back(bn_spec(cfg), c);
            break;
    }
    if (uses_adadm(cfg.kind)) adadm_state.emplace(cfg.detach_sigma);
}

Tensor Block::residual(const Tensor& x, Mode mode, BlockTaps* taps) {
    if (x.shape().c != cfg_.channels) {
        throw ShapeError(std::string(to_string(cfg_.kind)) + " block expects " + std::to_string(cfg_.channels) +
                         " channels, got " + to_string(x.shape()));
    }
    const bool bn = !norms.empty();
    auto maybe_bn = [&](std::size_t i, const Tensor& t) { return bn ? norms[i].forward(t, mode) : t; };
    Tensor r;
    switch (cfg_.kind) {
        case BlockKind::T1:
            r = convs[0].forward(x);
            break;
        case BlockKind::T2:
            r = convs[0].forward(norms[0].forward(x, mode));
            break;
        case BlockKind::T3: {
            Tensor sigma = std_over(x, AxisSet::chw(), norms[0].spec().eps);
            r = mul(convs[0].forward(norms[0].forward(x, mode)), sigma);
            break;
        }
        case BlockKind::RB:
            r = convs[1].forward(relu(convs[0].forward(x)));
            if (cfg_.res_scale != 1.0) r = scalar_mul(r, cfg_.res_scale);
            break;
        case BlockKind::SRRB:
            r = maybe_bn(1, convs[1].forward(relu(maybe_bn(0, convs[0].forward(x)))));
            break;
        case BlockKind::PreRB:
        case BlockKind::RB_AdaDM:
            r = convs[1].forward(relu(maybe_bn(1, convs[0].forward(maybe_bn(0, x)))));
            break;
        case BlockKind::RDB:
        case BlockKind::RDB_AdaDM: {
            std::vector<Tensor> features{maybe_bn(0, x)};
            for (int i = 0; i < cfg_.rdb_convs; ++i) {
                Tensor in = features.size() == 1 ? features[0] : concat_channels(features);
                features.push_back(relu(convs[i].forward(in)));
            }
            r = convs.back().forward(concat_channels(features));
            break;
        }
    }
    if (adadm_state) {
        Tensor factor = adadm_factor(x, *adadm_state);
        r = mul(r, factor);
        if (taps) taps->modulation_factor = factor;
    }
    if (taps) {
        taps->block_input = x;
        taps->residual_pre_add = r;
    }
    return r;
}

Tensor Block::forward(const Tensor& x, Mode mode, BlockTaps* taps) { return add(x, residual(x, mode, taps)); }

void Block::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect(prefix + ".conv" + std::to_string(i), out);
    for (std::size_t i = 0; i < norms.size(); ++i) norms[i].collect(prefix + ".norm" + std::to_string(i), out);
    if (adadm_state) adadm_state->collect(prefix + ".adadm", out);
}

// ---------------------------------------------------------------------------

DaIdentityReport verify_da_identity(const Tensor& x, const Conv2d& conv, double tol) {
    NoGradGuard no_grad;
    const Shape s = x.shape();
    Tensor sigma = std_over(x, AxisSet::chw(), 0.0);
    for (int n = 0; n < s.n; ++n) {
        if (!(sigma[n] > 0.0)) {
            throw std::domain_error("verify_da_identity: sample " + std::to_string(n) + " is constant");
        }
    }
    Tensor mu = mean_over(x, AxisSet::chw());
    Tensor y = conv.forward(x);
    Tensor gamma = conv.forward(div(sub(x, mu), sigma));
    Tensor gamma_hat = mul(gamma, sigma);
    Tensor centered = conv2d(sub(x, mu), conv.weight);

    Tensor sd_y = std_over(y, AxisSet::chw(), 0.0);
    Tensor sd_gamma = std_over(gamma, AxisSet::chw(), 0.0);
    Tensor sd_hat = std_over(gamma_hat, AxisSet::chw(), 0.0);
    Tensor sd_centered = std_over(centered, AxisSet::chw(), 0.0);

    DaIdentityReport r;
    r.tol = tol;
    for (int n = 0; n < s.n; ++n) {
        r.sigma.push_back(sigma[n]);
        r.std_y.push_back(sd_y[n]);
        r.std_gamma.push_back(sd_gamma[n]);
        r.std_gamma_hat.push_back(sd_hat[n]);
        r.max_err_shrink = std::max(r.max_err_shrink, std::abs(sd_gamma[n] - sd_y[n] / sigma[n]));
        r.max_err_restore = std::max(r.max_err_restore, std::abs(sd_hat[n] - sd_y[n]));
        r.max_err_centered = std::max(r.max_err_centered, std::abs(sd_hat[n] - sd_centered[n]));
    }
    r.shrink_ok = r.max_err_shrink <= tol;
    r.restore_ok = r.max_err_restore <= tol;
    return r;
}

}  // namespace devmod
