#include "devmod/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "devmod/blocks.hpp"
#include "devmod/gradcheck.hpp"
#include "devmod/layers.hpp"
#include "devmod/rng.hpp"

namespace devmod {

bool VerifyReport::passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

void VerifyReport::append(const std::vector<CheckResult>& more) { checks.insert(checks.end(), more.begin(), more.end()); }

namespace {

Tensor random(Shape s, Rng& rng, double mean = 0.0, double std = 1.0) { return Tensor::rand_normal(s, rng, mean, std); }

Tensor weighted_sum(const Tensor& x, const Tensor& w) { return sum(mul(x, w)); }

// Worst-case accumulator for a named check.
struct Acc {
    std::string name;
    double tol;
    double worst = 0.0;
    bool failed = false;

    void add(double err, bool ok) {
        worst = std::isnan(err) ? err : std::max(worst, err);
        failed |= !ok || std::isnan(err);
    }
    void add(double err) { add(err, err < tol); }
    [[nodiscard]] CheckResult result() const { return {name, worst, tol, !failed}; }
};

// Per-set mean and population std by scanning every element for members of
// each set, without the library's reduction ops.
void loop_set_stats(const Tensor& x, const AxisSet& axes, std::vector<double>& mean, std::vector<double>& sd) {
    const Shape s = x.shape();
    const Shape r = axes.reduced_shape(s);
    const int per_group = axes.c ? s.c / axes.groups : 1;
    auto set_of = [&](int n, int c, int h, int w) {
        const int rn = axes.n ? 0 : n, rc = axes.c ? c / per_group : c, rh = axes.h ? 0 : h, rw = axes.w ? 0 : w;
        return ((static_cast<std::size_t>(rn) * r.c + rc) * r.h + rh) * r.w + rw;
    };
    std::vector<double> cnt(r.numel(), 0.0);
    mean.assign(r.numel(), 0.0);
    sd.assign(r.numel(), 0.0);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h)
                for (int w = 0; w < s.w; ++w) {
                    const std::size_t k = set_of(n, c, h, w);
                    mean[k] += x.at(n, c, h, w);
                    cnt[k] += 1.0;
                }
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] /= cnt[k];
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h)
                for (int w = 0; w < s.w; ++w) {
                    const std::size_t k = set_of(n, c, h, w);
                    const double d = x.at(n, c, h, w) - mean[k];
                    sd[k] += d * d;
                }
    for (std::size_t k = 0; k < sd.size(); ++k) sd[k] = std::sqrt(sd[k] / cnt[k]);
}

Tensor loop_normalize(const Tensor& x, const AxisSet& axes, double eps) {
    std::vector<double> mean, sd;
    loop_set_stats(x, axes, mean, sd);
    const Shape s = x.shape();
    const Shape r = axes.reduced_shape(s);
    const int per_group = axes.c ? s.c / axes.groups : 1;
    std::vector<double> out;
    out.reserve(s.numel());
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h)
                for (int w = 0; w < s.w; ++w) {
                    const std::size_t k =
                        ((static_cast<std::size_t>(axes.n ? 0 : n) * r.c + (axes.c ? c / per_group : c)) * r.h +
                         (axes.h ? 0 : h)) * r.w + (axes.w ? 0 : w);
                    out.push_back((x.at(n, c, h, w) - mean[k]) / std::sqrt(sd[k] * sd[k] + eps));
                }
    return Tensor::from_data(s, std::move(out));
}

// Central differences of f at x, element by element.
std::vector<double> numeric_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    NoGradGuard no_grad;
    std::vector<double> base = x.to_vector();
    std::vector<double> g(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> v = base;
        v[i] = base[i] + h;
        const double fp = f(Tensor::from_data(x.shape(), v)).item();
        v[i] = base[i] - h;
        const double fm = f(Tensor::from_data(x.shape(), v)).item();
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// Keeps values at least 0.1 away from the ReLU kink.
Tensor away_from_zero(const Tensor& x) {
    std::vector<double> v = x.to_vector();
    for (double& e : v) e += e >= 0 ? 0.1 : -0.1;
    return Tensor::from_data(x.shape(), std::move(v));
}

bool feeds_train_bn(BlockKind kind, const std::string& name) {
    if (kind == BlockKind::SRRB) return name == "b.conv0.bias" || name == "b.conv1.bias";
    return (kind == BlockKind::PreRB || kind == BlockKind::RB_AdaDM) && name == "b.conv0.bias";
}

}  // namespace

std::vector<CheckResult> check_da_identity(int seeds, double tol) {
    Acc shrink{"da_identity.shrink", tol}, restore{"da_identity.restore", tol}, centered{"da_identity.centered", tol};
    for (int s = 0; s < seeds; ++s) {
        Rng rng = Rng(0xda).fork(static_cast<std::uint64_t>(s));
        Conv2d conv = make_conv_layer(8, 8, 3, false, rng);
        Tensor x = random({4, 8, 16, 16}, rng);
        DaIdentityReport r = verify_da_identity(x, conv, tol);
        shrink.add(r.max_err_shrink);
        restore.add(r.max_err_restore);
        centered.add(r.max_err_centered);
    }
    return {shrink.result(), restore.result(), centered.result()};
}

std::vector<CheckResult> check_norm_statistics(int seeds, double mean_tol, double std_tol, double oracle_tol) {
    std::vector<CheckResult> out;
    for (NormKind kind : {NormKind::BN, NormKind::LN, NormKind::IN, NormKind::GN}) {
        const std::string k(to_string(kind));
        Acc mean{"norm." + k + ".mean", mean_tol}, sd{"norm." + k + ".std", std_tol},
            oracle{"norm." + k + ".oracle", oracle_tol};
        for (int s = 0; s < seeds; ++s) {
            Rng rng = Rng(0x40a).fork(static_cast<std::uint64_t>(s));
            NormSpec spec;
            spec.kind = kind;
            spec.groups = 2;
            spec.affine = false;
            NormLayer layer(spec, 6);
            // Unit-order eps against variance 16 keeps std within 3e-7 of 1.
            Tensor x = random({4, 6, 8, 8}, rng, rng.uniform(-3.0, 3.0), 4.0);
            Tensor y = layer.forward(x, Mode::Train);
            std::vector<double> m, d;
            loop_set_stats(y, norm_axes(spec), m, d);
            for (double v : m) mean.add(std::abs(v));
            for (double v : d) sd.add(std::abs(v - 1.0));
            oracle.add(max_abs_diff(y, loop_normalize(x, norm_axes(spec), spec.eps)));
        }
        out.push_back(mean.result());
        out.push_back(sd.result());
        out.push_back(oracle.result());
    }
    return out;
}

std::vector<CheckResult> check_gradients(int seeds, double h, double tol) {
    std::vector<CheckResult> out;
    auto run = [&](const std::string& name, const std::function<void(Rng&, Acc&)>& body) {
        Acc acc{name, tol};
        for (int s = 0; s < seeds; ++s) {
            Rng rng = Rng(0x96ad).fork(static_cast<std::uint64_t>(s) * 1000 + out.size());
            body(rng, acc);
        }
        out.push_back(acc.result());
    };
    auto record = [](Acc& acc, const GradCheckReport& r) { acc.add(r.max_rel_error, r.passed); };

    run("grad.conv2d", [&](Rng& rng, Acc& acc) {
        for (int k : {1, 3, 5}) {
            Conv2d conv = make_conv_layer(3, 4, k, true, rng);
            conv.bias = random({1, 4, 1, 1}, rng).set_requires_grad();
            Tensor x = random({2, 3, 5, 6}, rng);
            Tensor w = random({2, 4, 5, 6}, rng);
            auto loss = [&] { return weighted_sum(conv.forward(x), w); };
            record(acc, finite_diff_check([&](const Tensor& t) { return weighted_sum(conv.forward(t), w); }, x, h, tol));
            record(acc, finite_diff_check_param(loss, conv.weight, h, tol));
            record(acc, finite_diff_check_param(loss, conv.bias, h, tol));
        }
    });
    for (NormKind kind : {NormKind::BN, NormKind::LN, NormKind::IN, NormKind::GN}) {
        run("grad.norm." + std::string(to_string(kind)), [&](Rng& rng, Acc& acc) {
            NormSpec spec;
            spec.kind = kind;
            spec.groups = 2;
            NormLayer layer(spec, 4);
            layer.weight = random({1, 4, 1, 1}, rng, 1.0, 0.3).set_requires_grad();
            layer.bias = random({1, 4, 1, 1}, rng).set_requires_grad();
            Tensor x = random({2, 4, 3, 3}, rng, 0.5, 1.5);
            Tensor w = random(x.shape(), rng);
            auto f = [&](const Tensor& t) { return weighted_sum(layer.forward(t, Mode::Train), w); };
            auto loss = [&] { return f(x); };
            record(acc, finite_diff_check(f, x, h, tol));
            record(acc, finite_diff_check_param(loss, layer.weight, h, tol));
            record(acc, finite_diff_check_param(loss, layer.bias, h, tol));
        });
    }
    run("grad.relu", [&](Rng& rng, Acc& acc) {
        Tensor x = away_from_zero(random({2, 3, 4, 4}, rng));
        Tensor w = random(x.shape(), rng);
        record(acc, finite_diff_check([&](const Tensor& t) { return weighted_sum(relu(t), w); }, x, h, tol));
    });
    run("grad.pixel_shuffle", [&](Rng& rng, Acc& acc) {
        Tensor x = random({2, 8, 3, 4}, rng);
        Tensor w = random({2, 2, 6, 8}, rng);
        record(acc, finite_diff_check([&](const Tensor& t) { return weighted_sum(pixel_shuffle(t, 2), w); }, x, h, tol));
        Tensor y = random({2, 2, 6, 8}, rng);
        record(acc,
               finite_diff_check([&](const Tensor& t) { return weighted_sum(pixel_unshuffle(t, 2), x); }, y, h, tol));
    });
    run("grad.adadm", [&](Rng& rng, Acc& acc) {
        Tensor gamma = random({2, 3, 4, 4}, rng);
        Tensor x = random({2, 3, 4, 4}, rng, 0.0, 3.0);
        Tensor w = random(gamma.shape(), rng);
        AdaDMState s;
        s.w.mutable_data()[0] = rng.uniform(0.5, 1.5);
        s.b.mutable_data()[0] = rng.uniform(-0.5, 0.5);
        auto loss = [&] { return weighted_sum(adadm(gamma, x, s), w); };
        record(acc, finite_diff_check_param(loss, s.w, h, tol));
        record(acc, finite_diff_check_param(loss, s.b, h, tol));
        record(acc, finite_diff_check([&](const Tensor& t) { return weighted_sum(adadm(gamma, t, s), w); }, x, h, tol));
        record(acc, finite_diff_check([&](const Tensor& t) { return weighted_sum(adadm(t, x, s), w); }, gamma, h, tol));
    });
    // The detached variant's input gradient must equal the gradient of the
    // same expression with sigma(x) frozen at its forward value.
    run("grad.adadm_detached", [&](Rng& rng, Acc& acc) {
        Tensor gsrc = random({2, 3, 4, 4}, rng);
        Tensor x0 = random({2, 3, 4, 4}, rng, 1.0, 2.0);
        Tensor w = random(gsrc.shape(), rng);
        AdaDMState s(true);
        s.w.mutable_data()[0] = rng.uniform(0.5, 1.5);
        s.b.mutable_data()[0] = rng.uniform(-0.5, 0.5);
        Tensor frozen;
        {
            NoGradGuard no_grad;
            frozen = adadm_factor(x0, s);
        }
        Tensor x = x0.clone().set_requires_grad();
        {
            Graph g;
            g.backward(weighted_sum(adadm(mul(x, gsrc), x, s), w));
        }
        const std::vector<double> numeric =
            numeric_grad([&](const Tensor& t) { return weighted_sum(mul(mul(t, gsrc), frozen), w); }, x0, h);
        auto analytic = x.grad();
        double scale = 0.0;
        for (double v : numeric) scale = std::max(scale, std::abs(v));
        double worst = 0.0;
        for (std::size_t i = 0; i < numeric.size(); ++i) {
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-3 * scale, 1e-12});
            worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
        }
        acc.add(worst);
        auto loss = [&] { return weighted_sum(adadm(mul(x0, gsrc), x0, s), w); };
        record(acc, finite_diff_check_param(loss, s.w, h, tol));
        record(acc, finite_diff_check_param(loss, s.b, h, tol));
    });

    const BlockKind kinds[] = {BlockKind::T1,       BlockKind::T2,  BlockKind::T3,       BlockKind::RB,
                               BlockKind::SRRB,     BlockKind::PreRB, BlockKind::RB_AdaDM, BlockKind::RDB,
                               BlockKind::RDB_AdaDM};
    for (BlockKind kind : kinds) {
        run("grad.block." + std::string(to_string(kind)), [&](Rng& rng, Acc& acc) {
            BlockConfig cfg;
            cfg.kind = kind;
            cfg.channels = 4;
            cfg.rdb_convs = 3;
            cfg.growth = 4;
            Block block(cfg, rng);
            Tensor x = random({2, 4, 5, 5}, rng, 0.5, 1.5);
            Tensor w = random(x.shape(), rng);
            auto f = [&](const Tensor& t) { return weighted_sum(block.forward(t, Mode::Train), w); };
            record(acc, finite_diff_check(f, x, h, tol));
            std::vector<NamedParam> params;
            block.collect("b", params);
            for (NamedParam& p : params) {
                if (!p.trainable) continue;
                GradCheckReport r = finite_diff_check_param([&] { return f(x); }, p.tensor, h, tol);
                // A shift in front of batch-statistics BN cancels exactly: the
                // gradient is zero and judged on an absolute scale.
                if (feeds_train_bn(kind, p.name)) {
                    acc.add(r.max_abs_error, r.max_abs_error < 1e-8);
                } else {
                    record(acc, r);
                }
            }
        });
    }
    return out;
}

std::vector<CheckResult> check_adadm_degeneration(int seeds) {
    Acc da{"adadm.w1_b0_is_da", 0.0}, ident{"adadm.w0_b0_is_identity", 0.0}, det{"adadm.detached_forward", 0.0};
    for (int s = 0; s < seeds; ++s) {
        Rng rng = Rng(0xad).fork(static_cast<std::uint64_t>(s));
        Tensor gamma = random({3, 4, 5, 5}, rng);
        Tensor x = random({3, 4, 5, 5}, rng, rng.uniform(-2.0, 2.0), rng.uniform(0.5, 4.0));
        AdaDMState st;
        Tensor sigma = std_over(x, AxisSet::chw(), st.eps);
        const double e1 = max_abs_diff(adadm(gamma, x, st), mul(gamma, sigma));
        da.add(e1, e1 == 0.0);
        st.w.mutable_data()[0] = 0.0;
        const double e2 = max_abs_diff(adadm(gamma, x, st), gamma);
        ident.add(e2, e2 == 0.0);
        AdaDMState a, d(true);
        a.w.mutable_data()[0] = d.w.mutable_data()[0] = rng.uniform(-1.0, 2.0);
        a.b.mutable_data()[0] = d.b.mutable_data()[0] = rng.uniform(-1.0, 1.0);
        const bool same = adadm(gamma, x, a).to_vector() == adadm(gamma, x, d).to_vector();
        det.add(same ? 0.0 : max_abs_diff(adadm(gamma, x, a), adadm(gamma, x, d)), same);
    }
    return {da.result(), ident.result(), det.result()};
}

void print_report(std::ostream& os, const VerifyReport& report) {
    char buf[256];
    for (const CheckResult& c : report.checks) {
        std::snprintf(buf, sizeof buf, "%-4s %-28s max_err %.3e  tol %.1e\n", c.passed ? "PASS" : "FAIL", c.name.c_str(),
                      c.max_error, c.tol);
        os << buf;
    }
    std::size_t failed = 0;
    for (const CheckResult& c : report.checks) failed += !c.passed;
    os << (failed ? "FAILED " : "OK ") << report.checks.size() - failed << "/" << report.checks.size() << " checks\n";
}

}  // namespace devmod
