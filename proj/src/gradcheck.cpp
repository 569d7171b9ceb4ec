#include "devmod/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace devmod {

namespace {

void check_step(double h) {
    if (!(h >= 1e-7 && h <= 1e-4)) throw std::invalid_argument("finite_diff_check: h must be in [1e-7, 1e-4]");
}

GradCheckReport compare(std::span<const double> analytic, const std::vector<double>& numeric, double tol) {
    GradCheckReport r;
    r.checked = numeric.size();
    double scale = 0.0;
    for (double v : numeric) {
        if (std::isnan(v)) r.nan_seen = true;
        scale = std::max(scale, std::abs(v));
    }
    const double floor = std::max(1e-3 * scale, 1e-12);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
        const double a = analytic[i];
        const double n = numeric[i];
        if (std::isnan(a)) r.nan_seen = true;
        const double abs_err = std::abs(a - n);
        const double rel = abs_err / std::max({std::abs(a), std::abs(n), floor});
        r.max_abs_error = std::max(r.max_abs_error, abs_err);
        if (rel > r.max_rel_error) {
            r.max_rel_error = rel;
            r.worst_index = i;
        }
    }
    r.passed = !r.nan_seen && r.max_rel_error <= tol;
    return r;
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                  double h, double tol) {
    check_step(h);
    Tensor leaf = x.clone();
    leaf.set_requires_grad();
    std::vector<double> analytic;
    {
        Graph graph;
        Tensor loss = f(leaf);
        graph.backward(loss);
        analytic = leaf.has_grad() ? std::vector<double>(leaf.grad().begin(), leaf.grad().end())
                                   : std::vector<double>(x.numel(), 0.0);
    }
    std::vector<double> numeric(x.numel());
    NoGradGuard no_grad;
    Tensor probe = x.clone();
    auto values = probe.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values[i];
        values[i] = orig + h;
        const double up = f(probe).item();
        values[i] = orig - h;
        const double down = f(probe).item();
        values[i] = orig;
        numeric[i] = (up - down) / (2.0 * h);
    }
    return compare(analytic, numeric, tol);
}

GradCheckReport finite_diff_check_param(const std::function<Tensor()>& loss, Tensor& param, double h,
                                        double tol) {
    check_step(h);
    if (!param.requires_grad()) throw std::invalid_argument("finite_diff_check_param: parameter is not trainable");
    param.clear_grad();
    std::vector<double> analytic;
    {
        Graph graph;
        Tensor l = loss();
        graph.backward(l);
        analytic = param.has_grad() ? std::vector<double>(param.grad().begin(), param.grad().end())
                                    : std::vector<double>(param.numel(), 0.0);
    }
    param.clear_grad();
    std::vector<double> numeric(param.numel());
    NoGradGuard no_grad;
    auto values = param.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values[i];
        values[i] = orig + h;
        const double up = loss().item();
        values[i] = orig - h;
        const double down = loss().item();
        values[i] = orig;
        numeric[i] = (up - down) / (2.0 * h);
    }
    return compare(analytic, numeric, tol);
}

}  // namespace devmod
