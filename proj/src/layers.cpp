#include "devmod/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "devmod/log.hpp"
#include "devmod/rng.hpp"

namespace devmod {

// ---------------------------------------------------------------------------
// Convolution

void Conv2d::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
    out.push_back({prefix + ".weight", weight, true});
    if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

Conv2d make_conv_layer(int c_in, int c_out, int k, bool bias, Rng& rng) {
    if (k <= 0 || k % 2 == 0) throw std::invalid_argument("make_conv_layer: kernel size must be odd");
    if (c_in <= 0 || c_out <= 0) throw std::invalid_argument("make_conv_layer: channel counts must be positive");
    Conv2d conv;
    const double std = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
    conv.weight = Tensor::rand_normal({c_out, c_in, k, k}, rng, 0.0, std);
    conv.weight.set_requires_grad();
    if (bias) {
        conv.bias = Tensor::zeros({1, c_out, 1, 1});
        conv.bias.set_requires_grad();
    }
    return conv;
}

// ---------------------------------------------------------------------------
// Normalization

std::string_view to_string(NormKind kind) {
    switch (kind) {
        case NormKind::BN: return "BN";
        case NormKind::LN: return "LN";
        case NormKind::IN: return "IN";
        case NormKind::GN: return "GN";
    }
    return "?";
}

NormKind parse_norm_kind(std::string_view s) {
    if (s == "BN") return NormKind::BN;
    if (s == "LN") return NormKind::LN;
    if (s == "IN") return NormKind::IN;
    if (s == "GN") return NormKind::GN;
    throw std::invalid_argument("unknown norm kind '" + std::string(s) + "'");
}

AxisSet norm_axes(const NormSpec& spec) {
    switch (spec.kind) {
        case NormKind::BN: return AxisSet::nhw();
        case NormKind::LN: return AxisSet::chw();
        case NormKind::IN: return AxisSet::hw();
        case NormKind::GN: return AxisSet::grouped(spec.groups);
    }
    throw std::logic_error("unreachable");
}

NormLayer::NormLayer(NormSpec spec, int channels) : spec_(spec), channels_(channels) {
    if (channels <= 0) throw std::invalid_argument("NormLayer: channels must be positive");
    if (spec.eps < 0.0) throw std::invalid_argument("NormLayer: eps must be >= 0");
    if (spec.kind == NormKind::GN && (spec.groups < 1 || channels % spec.groups != 0)) {
        throw std::invalid_argument("NormLayer: GN with " + std::to_string(spec.groups) +
                                    " groups does not divide " + std::to_string(channels) + " channels");
    }
    if (spec.kind == NormKind::BN && !(spec.momentum > 0.0 && spec.momentum <= 1.0)) {
        throw std::invalid_argument("NormLayer: BN momentum must be in (0, 1]");
    }
    if (spec.affine) {
        weight = Tensor::ones({1, channels, 1, 1});
        weight.set_requires_grad();
        bias = Tensor::zeros({1, channels, 1, 1});
        bias.set_requires_grad();
    }
    if (spec.kind == NormKind::BN) {
        running_mean = Tensor::zeros({1, channels, 1, 1});
        running_var = Tensor::ones({1, channels, 1, 1});
    }
}

Tensor NormLayer::forward(const Tensor& x, Mode mode) {
    const Shape s = x.shape();
    if (s.c != channels_) {
        throw ShapeError("NormLayer: expected " + std::to_string(channels_) + " channels, got " +
                         to_string(s));
    }
    Tensor normalized;
    switch (spec_.kind) {
        case NormKind::BN: {
            if (mode == Mode::Train) {
                if (static_cast<std::size_t>(s.n) * s.h * s.w < 2) {
                    throw std::invalid_argument("BN in train mode needs N*H*W >= 2, got " + to_string(s));
                }
                Tensor mu = mean_over(x, AxisSet::nhw());
                Tensor sigma = std_over(x, AxisSet::nhw(), spec_.eps);
                normalized = div(sub(x, mu), sigma);

                const double m = static_cast<double>(AxisSet::nhw().set_size(s));
                auto rm = running_mean.mutable_data();
                auto rv = running_var.mutable_data();
                auto d = x.data();
                const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
                for (int c = 0; c < s.c; ++c) {
                    double acc = 0.0;
                    for (int n = 0; n < s.n; ++n) {
                        const double* p = d.data() + s.index(n, c, 0, 0);
                        for (std::size_t i = 0; i < plane; ++i) acc += (p[i] - mu[c]) * (p[i] - mu[c]);
                    }
                    const double batch_var = acc / m;
                    rm[c] = (1.0 - spec_.momentum) * rm[c] + spec_.momentum * mu[c];
                    rv[c] = (1.0 - spec_.momentum) * rv[c] + spec_.momentum * batch_var;
                }
                stats_updated = true;
            } else {
                if (!stats_updated && !warned_) {
                    warned_ = true;
                    warn("BN evaluated before any running-statistics update; using mean 0, var 1");
                }
                std::vector<double> scale(static_cast<std::size_t>(s.c));
                for (int c = 0; c < s.c; ++c) scale[c] = std::sqrt(running_var[c] + spec_.eps);
                normalized = div(sub(x, detach(running_mean)),
                                 Tensor::from_data({1, s.c, 1, 1}, std::move(scale)));
            }
            break;
        }
        case NormKind::LN:
        case NormKind::IN: {
            const AxisSet axes = norm_axes(spec_);
            normalized = div(sub(x, mean_over(x, axes)), std_over(x, axes, spec_.eps));
            break;
        }
        case NormKind::GN: {
            const int g = spec_.groups;
            Tensor grouped = reshape(x, {s.n, g, (s.c / g) * s.h, s.w});
            const AxisSet axes{false, false, true, true, 1};
            Tensor z = div(sub(grouped, mean_over(grouped, axes)), std_over(grouped, axes, spec_.eps));
            normalized = reshape(z, s);
            break;
        }
    }
    if (spec_.affine) normalized = add(mul(normalized, weight), bias);
    return normalized;
}

void NormLayer::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
    if (spec_.affine) {
        out.push_back({prefix + ".weight", weight, true});
        out.push_back({prefix + ".bias", bias, true});
    }
    if (spec_.kind == NormKind::BN) {
        out.push_back({prefix + ".running_mean", running_mean, false});
        out.push_back({prefix + ".running_var", running_var, false});
    }
}

// ---------------------------------------------------------------------------
// AdaDM

AdaDMState::AdaDMState() : AdaDMState(false) {}

AdaDMState::AdaDMState(bool detach) : w(Tensor::scalar(1.0)), b(Tensor::scalar(0.0)), detach_sigma(detach) {
    w.set_requires_grad();
    b.set_requires_grad();
}

void AdaDMState::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
    out.push_back({prefix + ".w", w, true});
    out.push_back({prefix + ".b", b, true});
}

Tensor adadm_factor(const Tensor& x_block_input, const AdaDMState& state) {
    const Tensor source = state.detach_sigma ? detach(x_block_input) : x_block_input;
    Tensor sigma = std_over(source, AxisSet::chw(), state.eps);
    auto sv = sigma.data();
    for (std::size_t n = 0; n < sv.size(); ++n) {
        if (!(sv[n] > 0.0)) {
            throw std::domain_error("adadm: sigma(x) is zero for sample " + std::to_string(n) +
                                    " (constant input with eps = 0)");
        }
    }
    const double w = state.w.item();
    const double b = state.b.item();
    const double eb = std::exp(b);
    std::vector<double> factor(sv.size());
    for (std::size_t n = 0; n < sv.size(); ++n) factor[n] = std::pow(sv[n], w) * eb;
    Tensor factor_values = Tensor::from_data(sigma.shape(), factor);
    return make_op("adadm_factor", sigma.shape(), std::move(factor), {sigma, state.w, state.b},
                   [sigma, factor_values, w](GradContext& ctx) {
                       auto g = ctx.grad_out;
                       auto s = sigma.data();
                       auto f = factor_values.data();
                       for (std::size_t n = 0; n < g.size(); ++n) {
                           const double gf = g[n] * f[n];
                           if (ctx.wants(0)) ctx.grad_in[0][n] += gf * w / s[n];
                           if (ctx.wants(1)) ctx.grad_in[1][0] += gf * std::log(s[n]);
                           if (ctx.wants(2)) ctx.grad_in[2][0] += gf;
                       }
                   });
}

Tensor adadm(const Tensor& gamma, const Tensor& x_block_input, const AdaDMState& state) {
    if (gamma.shape().n != x_block_input.shape().n) {
        throw ShapeError("adadm: gamma " + to_string(gamma.shape()) + " and block input " +
                         to_string(x_block_input.shape()) + " differ in batch size");
    }
    return mul(gamma, adadm_factor(x_block_input, state));
}

// ---------------------------------------------------------------------------
// Primitive ops

Tensor relu(const Tensor& x) {
    auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
    return make_op("relu", x.shape(), std::move(out), {x}, [x](GradContext& ctx) {
        auto v = x.data();
        auto g = ctx.grad_out;
        auto gi = ctx.grad_in[0];
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (v[i] > 0.0) gi[i] += g[i];
        }
    });
}

namespace {

// Index of the shuffled output element that input element `i` moves to.
std::vector<std::size_t> shuffle_map(const Shape& in, int r) {
    const Shape out{in.n, in.c / (r * r), in.h * r, in.w * r};
    std::vector<std::size_t> map(in.numel());
    std::size_t i = 0;
    for (int n = 0; n < in.n; ++n) {
        for (int c = 0; c < in.c; ++c) {
            const int oc = c / (r * r);
            const int di = (c % (r * r)) / r;
            const int dj = c % r;
            for (int h = 0; h < in.h; ++h) {
                for (int w = 0; w < in.w; ++w, ++i) map[i] = out.index(n, oc, h * r + di, w * r + dj);
            }
        }
    }
    return map;
}

}  // namespace

Tensor pixel_shuffle(const Tensor& x, int r) {
    const Shape s = x.shape();
    if (r < 1 || s.c % (r * r) != 0) {
        throw ShapeError("pixel_shuffle: " + std::to_string(s.c) + " channels not divisible by r^2 = " +
                         std::to_string(r * r));
    }
    const Shape out_shape{s.n, s.c / (r * r), s.h * r, s.w * r};
    auto map = shuffle_map(s, r);
    auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[map[i]] = in[i];
    return make_op("pixel_shuffle", out_shape, std::move(out), {x}, [map = std::move(map)](GradContext& ctx) {
        auto g = ctx.grad_out;
        auto gi = ctx.grad_in[0];
        for (std::size_t i = 0; i < map.size(); ++i) gi[i] += g[map[i]];
    });
}

Tensor pixel_unshuffle(const Tensor& x, int r) {
    const Shape s = x.shape();
    if (r < 1 || s.h % r != 0 || s.w % r != 0) {
        throw ShapeError("pixel_unshuffle: spatial dims of " + to_string(s) + " not divisible by " +
                         std::to_string(r));
    }
    const Shape in_shape{s.n, s.c * r * r, s.h / r, s.w / r};
    auto map = shuffle_map(in_shape, r);
    auto src = x.data();
    std::vector<double> out(src.size());
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = src[map[i]];
    return make_op("pixel_unshuffle", in_shape, std::move(out), {x}, [map = std::move(map)](GradContext& ctx) {
        auto g = ctx.grad_out;
        auto gi = ctx.grad_in[0];
        for (std::size_t i = 0; i < map.size(); ++i) gi[map[i]] += g[i];
    });
}

}  // namespace devmod
