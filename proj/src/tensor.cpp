#include "devmod/tensor.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include <Eigen/Core>

#include "devmod/rng.hpp"

namespace devmod {

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    bool op_result = false;
    std::optional<std::vector<double>> grad;
    std::uint64_t graph_serial = 0;
    std::size_t node = 0;

    TensorImpl(Shape s, std::vector<double> d) : shape(s), data(std::move(d)) {}
};

}  // namespace detail

namespace {

thread_local Graph* g_active = nullptr;
std::atomic<std::uint64_t> g_serial{1};

void check_shape(const Shape& s) {
    if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0) {
        throw ShapeError("tensor dims must be positive, got " + to_string(s));
    }
}

}  // namespace

int Shape::dim(int axis) const {
    switch (axis) {
        case 0: return n;
        case 1: return c;
        case 2: return h;
        case 3: return w;
        default: throw std::out_of_range("axis must be in [0, 3]");
    }
}

std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << s;
    return os.str();
}

std::ostream& operator<<(std::ostream& os, const Shape& s) {
    return os << '(' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ')';
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape) { return full(shape, 0.0); }
Tensor Tensor::ones(Shape shape) { return full(shape, 1.0); }

Tensor Tensor::full(Shape shape, double value) {
    check_shape(shape);
    return Tensor(std::make_shared<detail::TensorImpl>(shape, std::vector<double>(shape.numel(), value)));
}

Tensor Tensor::scalar(double value) { return full({1, 1, 1, 1}, value); }

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
    check_shape(shape);
    if (values.size() != shape.numel()) {
        throw ShapeError("from_data: " + std::to_string(values.size()) + " values for shape " +
                         to_string(shape));
    }
    return Tensor(std::make_shared<detail::TensorImpl>(shape, std::move(values)));
}

Tensor Tensor::rand_normal(Shape shape, Rng& rng, double mean, double std) {
    if (!(std > 0.0)) throw std::invalid_argument("rand_normal: std must be positive");
    check_shape(shape);
    std::vector<double> v(shape.numel());
    for (auto& x : v) x = rng.normal(mean, std);
    return from_data(shape, std::move(v));
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
    check_shape(shape);
    std::vector<double> v(shape.numel());
    for (auto& x : v) x = rng.uniform(lo, hi);
    return from_data(shape, std::move(v));
}

const Shape& Tensor::shape() const {
    if (!impl_) throw std::logic_error("undefined tensor");
    return impl_->shape;
}

std::span<const double> Tensor::data() const {
    if (!impl_) throw std::logic_error("undefined tensor");
    return impl_->data;
}

double Tensor::at(int n, int c, int h, int w) const {
    const Shape& s = shape();
    if (n < 0 || n >= s.n || c < 0 || c >= s.c || h < 0 || h >= s.h || w < 0 || w >= s.w) {
        throw std::out_of_range("tensor index out of range");
    }
    return impl_->data[s.index(n, c, h, w)];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
}

std::vector<double> Tensor::to_vector() const {
    auto d = data();
    return {d.begin(), d.end()};
}

Tensor Tensor::clone() const { return from_data(shape(), to_vector()); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    if (!impl_) throw std::logic_error("undefined tensor");
    if (impl_->op_result) throw GraphError("set_requires_grad on a recorded op result");
    impl_->requires_grad = flag;
    return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad.has_value(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw GraphError("tensor has no gradient");
    return *impl_->grad;
}

Tensor Tensor::grad_tensor() const { return from_data(shape(), *impl_->grad); }

void Tensor::zero_grad() {
    if (impl_ && impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

void Tensor::clear_grad() {
    if (impl_) impl_->grad.reset();
}

std::span<double> Tensor::mutable_data() {
    if (!impl_) throw std::logic_error("undefined tensor");
    if (impl_->op_result) throw GraphError("mutable_data on a recorded op result");
    return impl_->data;
}

std::span<double> Tensor::mutable_grad() {
    if (!impl_) throw std::logic_error("undefined tensor");
    if (!impl_->grad) impl_->grad.emplace(impl_->data.size(), 0.0);
    return *impl_->grad;
}

std::optional<std::size_t> Tensor::node_id() const {
    Graph* g = Graph::active();
    if (!impl_ || !g || impl_->graph_serial != g->serial_) return std::nullopt;
    return impl_->node;
}

// ---------------------------------------------------------------------------
// Graph

Graph::Graph() : previous_(g_active), serial_(g_serial.fetch_add(1)) { g_active = this; }

Graph::~Graph() { g_active = previous_; }

Graph* Graph::active() { return g_active; }

std::vector<std::size_t> Graph::parents(std::size_t id) const {
    std::vector<std::size_t> out;
    for (std::size_t slot : nodes_.at(id).inputs) {
        if (slot != kNoNode) out.push_back(slot);
    }
    return out;
}

std::size_t Graph::record_leaf(const std::shared_ptr<detail::TensorImpl>& impl) {
    Node node;
    node.name = "leaf";
    node.leaf = impl;
    node.numel = impl->data.size();
    nodes_.push_back(std::move(node));
    impl->graph_serial = serial_;
    impl->node = nodes_.size() - 1;
    return impl->node;
}

std::size_t Graph::record(std::string_view name, std::vector<std::size_t> inputs, BackwardFn fn,
                          std::size_t numel) {
    Node node;
    node.name = std::string(name);
    node.inputs = std::move(inputs);
    node.backward = std::move(fn);
    node.numel = numel;
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

void Graph::backward(const Tensor& loss) {
    if (!loss.defined()) throw GraphError("backward: undefined loss");
    if (loss.numel() != 1) {
        throw GraphError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    }
    if (loss.impl_->graph_serial != serial_) throw GraphError("backward: loss is not on this graph");

    const std::size_t root = loss.impl_->node;
    std::vector<std::vector<double>> grads(nodes_.size());
    grads[root].assign(1, 1.0);

    for (std::size_t i = root + 1; i-- > 0;) {
        if (grads[i].empty()) continue;
        Node& node = nodes_[i];
        if (node.leaf) {
            auto& g = node.leaf->grad;
            if (!g) g.emplace(node.numel, 0.0);
            for (std::size_t k = 0; k < node.numel; ++k) (*g)[k] += grads[i][k];
        } else {
            GradContext ctx;
            ctx.grad_out = grads[i];
            ctx.grad_in.reserve(node.inputs.size());
            for (std::size_t slot : node.inputs) {
                if (slot == kNoNode) {
                    ctx.grad_in.emplace_back();
                    continue;
                }
                if (grads[slot].empty()) grads[slot].assign(nodes_[slot].numel, 0.0);
                ctx.grad_in.emplace_back(grads[slot]);
            }
            node.backward(ctx);
        }
        std::vector<double>().swap(grads[i]);
    }
}

void backward(const Tensor& loss) {
    Graph* g = Graph::active();
    if (!g) throw GraphError("backward: no active graph");
    g->backward(loss);
}

NoGradGuard::NoGradGuard() : saved_(g_active) { g_active = nullptr; }
NoGradGuard::~NoGradGuard() { g_active = saved_; }

Tensor make_op(std::string_view name, Shape shape, std::vector<double> values,
               const std::vector<Tensor>& inputs, BackwardFn backward) {
    if (values.size() != shape.numel()) {
        throw ShapeError(std::string(name) + ": value count does not match " + to_string(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>(shape, std::move(values));
    Graph* g = Graph::active();
    if (g) {
        std::vector<std::size_t> slots;
        slots.reserve(inputs.size());
        bool any = false;
        for (const Tensor& in : inputs) {
            if (!in.defined()) {
                slots.push_back(Graph::kNoNode);
            } else if (in.impl_->graph_serial == g->serial_) {
                slots.push_back(in.impl_->node);
                any = true;
            } else if (in.impl_->requires_grad) {
                slots.push_back(g->record_leaf(in.impl_));
                any = true;
            } else {
                slots.push_back(Graph::kNoNode);
            }
        }
        if (any) {
            impl->node = g->record(name, std::move(slots), std::move(backward), impl->data.size());
            impl->graph_serial = g->serial_;
            impl->op_result = true;
        }
    }
    return Tensor(std::move(impl));
}

Tensor detach(const Tensor& x) {
    return Tensor(std::make_shared<detail::TensorImpl>(x.shape(), x.to_vector()));
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

struct Broadcast {
    Shape out;
    std::array<std::size_t, 4> sa{};
    std::array<std::size_t, 4> sb{};
};

std::array<std::size_t, 4> strides_for(const Shape& s, const Shape& out) {
    std::array<std::size_t, 4> st{};
    std::size_t stride = 1;
    for (int axis = 3; axis >= 0; --axis) {
        st[axis] = s.dim(axis) == out.dim(axis) && out.dim(axis) != 1 ? stride : 0;
        stride *= s.dim(axis);
    }
    return st;
}

Broadcast broadcast_shapes(std::string_view op, const Shape& a, const Shape& b) {
    Broadcast bc;
    std::array<int, 4> dims{};
    for (int axis = 0; axis < 4; ++axis) {
        const int da = a.dim(axis);
        const int db = b.dim(axis);
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                             " do not broadcast");
        }
        dims[axis] = std::max(da, db);
    }
    bc.out = {dims[0], dims[1], dims[2], dims[3]};
    bc.sa = strides_for(a, bc.out);
    bc.sb = strides_for(b, bc.out);
    return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
    const Shape& o = bc.out;
    std::size_t i = 0;
    for (int n = 0; n < o.n; ++n) {
        for (int c = 0; c < o.c; ++c) {
            for (int h = 0; h < o.h; ++h) {
                std::size_t ia = n * bc.sa[0] + c * bc.sa[1] + h * bc.sa[2];
                std::size_t ib = n * bc.sb[0] + c * bc.sb[1] + h * bc.sb[2];
                for (int w = 0; w < o.w; ++w, ++i, ia += bc.sa[3], ib += bc.sb[3]) f(i, ia, ib);
            }
        }
    }
}

enum class BinaryKind { Add, Sub, Mul, Div };

Tensor binary(std::string_view name, BinaryKind kind, const Tensor& a, const Tensor& b) {
    const Broadcast bc = broadcast_shapes(name, a.shape(), b.shape());
    std::vector<double> out(bc.out.numel());
    auto da = a.data();
    auto db = b.data();
    for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        switch (kind) {
            case BinaryKind::Add: out[i] = da[ia] + db[ib]; break;
            case BinaryKind::Sub: out[i] = da[ia] - db[ib]; break;
            case BinaryKind::Mul: out[i] = da[ia] * db[ib]; break;
            case BinaryKind::Div: out[i] = da[ia] / db[ib]; break;
        }
    });
    return make_op(name, bc.out, std::move(out), {a, b}, [a, b, bc, kind](GradContext& ctx) {
        auto g = ctx.grad_out;
        auto va = a.data();
        auto vb = b.data();
        const bool wa = ctx.wants(0);
        const bool wb = ctx.wants(1);
        auto ga = ctx.grad_in[0];
        auto gb = ctx.grad_in[1];
        for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
            switch (kind) {
                case BinaryKind::Add:
                    if (wa) ga[ia] += g[i];
                    if (wb) gb[ib] += g[i];
                    break;
                case BinaryKind::Sub:
                    if (wa) ga[ia] += g[i];
                    if (wb) gb[ib] -= g[i];
                    break;
                case BinaryKind::Mul:
                    if (wa) ga[ia] += g[i] * vb[ib];
                    if (wb) gb[ib] += g[i] * va[ia];
                    break;
                case BinaryKind::Div:
                    if (wa) ga[ia] += g[i] / vb[ib];
                    if (wb) gb[ib] -= g[i] * va[ia] / (vb[ib] * vb[ib]);
                    break;
            }
        });
    });
}

template <class Fwd, class Deriv>
Tensor unary(std::string_view name, const Tensor& a, Fwd fwd, Deriv deriv) {
    auto in = a.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
    Tensor result_values = Tensor::from_data(a.shape(), out);
    return make_op(name, a.shape(), std::move(out), {a},
                   [a, result_values, deriv](GradContext& ctx) {
                       auto x = a.data();
                       auto y = result_values.data();
                       auto g = ctx.grad_out;
                       auto gi = ctx.grad_in[0];
                       for (std::size_t i = 0; i < x.size(); ++i) gi[i] += g[i] * deriv(x[i], y[i]);
                   });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinaryKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinaryKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinaryKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinaryKind::Div, a, b); }

Tensor scalar_mul(const Tensor& a, double c) {
    return unary("scalar_mul", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor log(const Tensor& a) {
    return unary("log", a, [](double x) { return std::log(x); },
                 [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
    return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor square(const Tensor& a) {
    return unary("square", a, [](double x) { return x * x; },
                 [](double x, double) { return 2.0 * x; });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op("sum", {1, 1, 1, 1}, {s}, {a}, [](GradContext& ctx) {
        const double g = ctx.grad_out[0];
        for (double& gi : ctx.grad_in[0]) gi += g;
    });
}

Tensor mean(const Tensor& a) {
    const double count = static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op("mean", {1, 1, 1, 1}, {s / count}, {a}, [count](GradContext& ctx) {
        const double g = ctx.grad_out[0] / count;
        for (double& gi : ctx.grad_in[0]) gi += g;
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape.numel() != a.numel()) {
        throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    }
    return make_op("reshape", shape, a.to_vector(), {a}, [](GradContext& ctx) {
        auto g = ctx.grad_out;
        auto gi = ctx.grad_in[0];
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const Shape first = parts.front().shape();
    int channels = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w) {
            throw ShapeError("concat_channels: " + to_string(s) + " vs " + to_string(first));
        }
        channels += s.c;
    }
    const Shape out_shape{first.n, channels, first.h, first.w};
    const std::size_t plane = static_cast<std::size_t>(first.h) * first.w;
    std::vector<double> out(out_shape.numel());
    for (int n = 0; n < first.n; ++n) {
        std::size_t dst = static_cast<std::size_t>(n) * channels * plane;
        for (const Tensor& p : parts) {
            const std::size_t len = static_cast<std::size_t>(p.shape().c) * plane;
            auto src = p.data().subspan(static_cast<std::size_t>(n) * len, len);
            std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(dst));
            dst += len;
        }
    }
    std::vector<int> widths;
    for (const Tensor& p : parts) widths.push_back(p.shape().c);
    return make_op("concat_channels", out_shape, std::move(out), parts,
                   [widths, first, channels, plane](GradContext& ctx) {
                       for (int n = 0; n < first.n; ++n) {
                           std::size_t src = static_cast<std::size_t>(n) * channels * plane;
                           for (std::size_t k = 0; k < widths.size(); ++k) {
                               const std::size_t len = static_cast<std::size_t>(widths[k]) * plane;
                               if (ctx.wants(k)) {
                                   auto gi = ctx.grad_in[k].subspan(static_cast<std::size_t>(n) * len, len);
                                   for (std::size_t i = 0; i < len; ++i) gi[i] += ctx.grad_out[src + i];
                               }
                               src += len;
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// Reductions

AxisSet AxisSet::parse(std::string_view letters) {
    AxisSet a;
    for (char ch : letters) {
        switch (ch) {
            case 'N': case 'n': a.n = true; break;
            case 'C': case 'c': a.c = true; break;
            case 'H': case 'h': a.h = true; break;
            case 'W': case 'w': a.w = true; break;
            default: throw std::invalid_argument(std::string("unknown axis letter '") + ch + "'");
        }
    }
    if (a.empty()) throw std::invalid_argument("empty axis set");
    return a;
}

Shape AxisSet::reduced_shape(const Shape& in) const {
    if (empty()) throw std::invalid_argument("empty axis set");
    if (groups < 1) throw std::invalid_argument("axis set groups must be >= 1");
    if (groups > 1 && (!c || in.c % groups != 0)) {
        throw ShapeError("grouped axis set: " + std::to_string(groups) + " groups do not divide " +
                         std::to_string(in.c) + " channels");
    }
    return {n ? 1 : in.n, c ? groups : in.c, h ? 1 : in.h, w ? 1 : in.w};
}

std::size_t AxisSet::set_size(const Shape& in) const {
    const Shape r = reduced_shape(in);
    return in.numel() / r.numel();
}

namespace {

// Calls f(element index, statistic index) for every element of `in`.
template <class F>
void for_each_stat(const Shape& in, const AxisSet& axes, F&& f) {
    const Shape r = axes.reduced_shape(in);
    const int per_group = axes.c ? in.c / axes.groups : 1;
    std::size_t i = 0;
    for (int n = 0; n < in.n; ++n) {
        const int sn = axes.n ? 0 : n;
        for (int c = 0; c < in.c; ++c) {
            const int sc = axes.c ? c / per_group : c;
            for (int h = 0; h < in.h; ++h) {
                const int sh = axes.h ? 0 : h;
                std::size_t base = r.index(sn, sc, sh, 0);
                for (int w = 0; w < in.w; ++w, ++i) f(i, base + (axes.w ? 0 : w));
            }
        }
    }
}

std::vector<double> stat_means(const Tensor& x, const AxisSet& axes, const Shape& r, double m) {
    std::vector<double> mu(r.numel(), 0.0);
    auto d = x.data();
    for_each_stat(x.shape(), axes, [&](std::size_t i, std::size_t s) { mu[s] += d[i]; });
    for (double& v : mu) v /= m;
    return mu;
}

}  // namespace

Tensor mean_over(const Tensor& x, const AxisSet& axes) {
    const Shape r = axes.reduced_shape(x.shape());
    const double m = static_cast<double>(axes.set_size(x.shape()));
    std::vector<double> mu = stat_means(x, axes, r, m);
    const Shape in = x.shape();
    return make_op("mean_over", r, std::move(mu), {x}, [in, axes, m](GradContext& ctx) {
        auto g = ctx.grad_out;
        auto gi = ctx.grad_in[0];
        for_each_stat(in, axes, [&](std::size_t i, std::size_t s) { gi[i] += g[s] / m; });
    });
}

Tensor std_over(const Tensor& x, const AxisSet& axes, double eps) {
    if (eps < 0.0) throw std::invalid_argument("std_over: eps must be >= 0");
    const Shape r = axes.reduced_shape(x.shape());
    const double m = static_cast<double>(axes.set_size(x.shape()));
    std::vector<double> mu = stat_means(x, axes, r, m);
    std::vector<double> var(r.numel(), 0.0);
    auto d = x.data();
    for_each_stat(x.shape(), axes, [&](std::size_t i, std::size_t s) {
        const double dev = d[i] - mu[s];
        var[s] += dev * dev;
    });
    std::vector<double> sigma(r.numel());
    for (std::size_t s = 0; s < var.size(); ++s) sigma[s] = std::sqrt(var[s] / m + eps);
    const Shape in = x.shape();
    Tensor sig = Tensor::from_data(r, sigma);
    return make_op("std_over", r, std::move(sigma), {x},
                   [in, axes, m, x, mu = std::move(mu), sig](GradContext& ctx) {
                       auto g = ctx.grad_out;
                       auto gi = ctx.grad_in[0];
                       auto d = x.data();
                       auto s_val = sig.data();
                       for_each_stat(in, axes, [&](std::size_t i, std::size_t s) {
                           if (s_val[s] > 0.0) gi[i] += g[s] * (d[i] - mu[s]) / (m * s_val[s]);
                       });
                   });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unfolds one (C, H, W) sample into a (C*k*k, H*W) matrix for same padding.
void im2col(const double* x, int c_in, int height, int width, int k, double* col) {
    const int pad = k / 2;
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    std::size_t row = 0;
    for (int c = 0; c < c_in; ++c) {
        const double* xc = x + c * plane;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx, ++row) {
                double* dst = col + row * plane;
                const int dx = kx - pad;
                const int w_lo = std::max(0, -dx);
                const int w_hi = std::min(width, width - dx);
                for (int h = 0; h < height; ++h) {
                    const int ih = h + ky - pad;
                    double* drow = dst + static_cast<std::size_t>(h) * width;
                    if (ih < 0 || ih >= height) {
                        std::fill(drow, drow + width, 0.0);
                        continue;
                    }
                    const double* srow = xc + static_cast<std::size_t>(ih) * width;
                    std::fill(drow, drow + w_lo, 0.0);
                    for (int w = w_lo; w < w_hi; ++w) drow[w] = srow[w + dx];
                    std::fill(drow + std::max(w_lo, w_hi), drow + width, 0.0);
                }
            }
        }
    }
}

// Adjoint of im2col: scatters (C*k*k, H*W) columns back onto (C, H, W).
void col2im(const double* col, int c_in, int height, int width, int k, double* x) {
    const int pad = k / 2;
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    std::size_t row = 0;
    for (int c = 0; c < c_in; ++c) {
        double* xc = x + c * plane;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx, ++row) {
                const double* src = col + row * plane;
                const int dx = kx - pad;
                const int w_lo = std::max(0, -dx);
                const int w_hi = std::min(width, width - dx);
                for (int h = 0; h < height; ++h) {
                    const int ih = h + ky - pad;
                    if (ih < 0 || ih >= height) continue;
                    const double* srow = src + static_cast<std::size_t>(h) * width;
                    double* drow = xc + static_cast<std::size_t>(ih) * width;
                    for (int w = w_lo; w < w_hi; ++w) drow[w + dx] += srow[w];
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    const Shape xs = x.shape();
    const Shape ws = weight.shape();
    if (ws.h != ws.w || ws.h % 2 == 0) {
        throw ShapeError("conv2d: kernel must be square with odd size, got " + to_string(ws));
    }
    if (ws.c != xs.c) {
        throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, weight expects " +
                         std::to_string(ws.c));
    }
    if (bias.defined() && bias.shape() != Shape{1, ws.n, 1, 1}) {
        throw ShapeError("conv2d: bias shape " + to_string(bias.shape()) + " for " +
                         std::to_string(ws.n) + " output channels");
    }
    const int k = ws.h;
    const int c_out = ws.n;
    const int c_in = xs.c;
    const int plane = xs.h * xs.w;
    const int patch = c_in * k * k;
    const Shape out_shape{xs.n, c_out, xs.h, xs.w};

    std::vector<double> out(out_shape.numel());
    Eigen::Map<const RowMat> W(weight.data().data(), c_out, patch);
    std::vector<double> col(k == 1 ? 0 : static_cast<std::size_t>(patch) * plane);
    for (int n = 0; n < xs.n; ++n) {
        const double* xn = x.data().data() + static_cast<std::size_t>(n) * c_in * plane;
        const double* cols = xn;
        if (k != 1) {
            im2col(xn, c_in, xs.h, xs.w, k, col.data());
            cols = col.data();
        }
        Eigen::Map<const RowMat> C(cols, patch, plane);
        Eigen::Map<RowMat> Y(out.data() + static_cast<std::size_t>(n) * c_out * plane, c_out, plane);
        Y.noalias() = W * C;
        if (bias.defined()) {
            auto b = bias.data();
            for (int o = 0; o < c_out; ++o) Y.row(o).array() += b[o];
        }
    }

    return make_op("conv2d", out_shape, std::move(out), {x, weight, bias},
                   [x, weight, xs, k, c_in, c_out, plane, patch](GradContext& ctx) {
                       Eigen::Map<const RowMat> W(weight.data().data(), c_out, patch);
                       std::vector<double> col(static_cast<std::size_t>(patch) * plane);
                       std::optional<Eigen::Map<RowMat>> dW;
                       if (ctx.wants(1)) dW.emplace(ctx.grad_in[1].data(), c_out, patch);
                       for (int n = 0; n < xs.n; ++n) {
                           Eigen::Map<const RowMat> G(
                               ctx.grad_out.data() + static_cast<std::size_t>(n) * c_out * plane, c_out,
                               plane);
                           if (ctx.wants(2)) {
                               auto gb = ctx.grad_in[2];
                               const double* g = ctx.grad_out.data() + static_cast<std::size_t>(n) * c_out * plane;
                               for (int o = 0; o < c_out; ++o) {
                                   double acc = 0.0;
                                   for (int i = 0; i < plane; ++i) acc += g[static_cast<std::size_t>(o) * plane + i];
                                   gb[o] += acc;
                               }
                           }
                           const double* xn = x.data().data() + static_cast<std::size_t>(n) * c_in * plane;
                           if (dW) {
                               const double* cols = xn;
                               if (k != 1) {
                                   im2col(xn, c_in, xs.h, xs.w, k, col.data());
                                   cols = col.data();
                               }
                               Eigen::Map<const RowMat> C(cols, patch, plane);
                               dW->noalias() += G * C.transpose();
                           }
                           if (ctx.wants(0)) {
                               double* gx = ctx.grad_in[0].data() + static_cast<std::size_t>(n) * c_in * plane;
                               if (k == 1) {
                                   Eigen::Map<RowMat> GX(gx, c_in, plane);
                                   GX.noalias() += W.transpose() * G;
                               } else {
                                   Eigen::Map<RowMat> DC(col.data(), patch, plane);
                                   DC.noalias() = W.transpose() * G;
                                   col2im(col.data(), c_in, xs.h, xs.w, k, gx);
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// Plain helpers

double sum_value(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return s;
}

double mean_value(const Tensor& x) { return sum_value(x) / static_cast<double>(x.numel()); }

double std_value(const Tensor& x) {
    const double mu = mean_value(x);
    double acc = 0.0;
    for (double v : x.data()) acc += (v - mu) * (v - mu);
    return std::sqrt(acc / static_cast<double>(x.numel()));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    double m = 0.0;
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) m = std::max(m, std::abs(da[i] - db[i]));
    return m;
}

Tensor slice_sample(const Tensor& x, int n) {
    const Shape s = x.shape();
    if (n < 0 || n >= s.n) throw std::out_of_range("slice_sample: index out of range");
    const std::size_t len = static_cast<std::size_t>(s.c) * s.h * s.w;
    auto src = x.data().subspan(static_cast<std::size_t>(n) * len, len);
    return Tensor::from_data({1, s.c, s.h, s.w}, {src.begin(), src.end()});
}

Tensor stack_samples(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("stack_samples: no inputs");
    const Shape first = parts.front().shape();
    std::vector<double> out;
    out.reserve(first.numel() * parts.size());
    int count = 0;
    for (const Tensor& p : parts) {
        const Shape s = p.shape();
        if (s.c != first.c || s.h != first.h || s.w != first.w) {
            throw ShapeError("stack_samples: " + to_string(s) + " vs " + to_string(first));
        }
        auto d = p.data();
        out.insert(out.end(), d.begin(), d.end());
        count += s.n;
    }
    return Tensor::from_data({count, first.c, first.h, first.w}, std::move(out));
}

// ---------------------------------------------------------------------------
// .t4d serialization

std::vector<std::uint8_t> encode_t4d(const Tensor& t) {
    const Shape s = t.shape();
    std::vector<std::uint8_t> bytes;
    bytes.reserve(16 + 8 * t.numel());
    auto put = [&](std::uint64_t v, int width) {
        for (int i = 0; i < width; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    };
    for (int axis = 0; axis < 4; ++axis) put(static_cast<std::uint32_t>(s.dim(axis)), 4);
    for (double v : t.data()) put(std::bit_cast<std::uint64_t>(v), 8);
    return bytes;
}

Tensor decode_t4d(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 16) throw std::runtime_error("t4d: truncated header");
    auto get = [&](std::size_t off, int width) {
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[off + i]) << (8 * i);
        return v;
    };
    std::array<std::uint32_t, 4> dims{};
    for (int axis = 0; axis < 4; ++axis) dims[axis] = static_cast<std::uint32_t>(get(4 * axis, 4));
    for (auto d : dims) {
        if (d == 0 || d > (1u << 28)) throw std::runtime_error("t4d: invalid dimension in header");
    }
    const Shape s{static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
                  static_cast<int>(dims[3])};
    if (bytes.size() != 16 + 8 * s.numel()) {
        throw std::runtime_error("t4d: payload size does not match header " + to_string(s));
    }
    std::vector<double> values(s.numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::bit_cast<double>(get(16 + 8 * i, 8));
    return Tensor::from_data(s, std::move(values));
}

void write_t4d(const std::string& path, const Tensor& t) {
    const auto bytes = encode_t4d(t);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("t4d: cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("t4d: write failed for " + path);
}

Tensor read_t4d(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("t4d: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_t4d(bytes);
    } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string(e.what()) + " (" + path + ")");
    }
}

}  // namespace devmod
