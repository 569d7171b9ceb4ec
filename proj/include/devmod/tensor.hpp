#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace devmod {

class Rng;

/// 4D shape in (N, C, H, W) order.
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    [[nodiscard]] std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    [[nodiscard]] std::size_t index(int in, int ic, int ih, int iw) const {
        return ((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw;
    }
    [[nodiscard]] int dim(int axis) const;
    bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);
std::ostream& operator<<(std::ostream& os, const Shape& s);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

namespace detail {
struct TensorImpl;
}

/// Passed to an op's backward function: the upstream gradient plus one
/// writable sink per input. Sinks of inputs that do not need gradients are
/// empty spans; writers must accumulate with `+=`.
struct GradContext {
    std::span<const double> grad_out;
    std::vector<std::span<double>> grad_in;

    [[nodiscard]] bool wants(std::size_t i) const { return !grad_in[i].empty(); }
};

using BackwardFn = std::function<void(GradContext&)>;

class Graph;

/// Handle to an immutable 4D double-precision array.
///
/// Copies share storage. Values never change after construction except for
/// leaf tensors updated through `mutable_data()` (parameters owned by layers
/// and stepped by the optimizer). When a graph is active on the current
/// thread, ops whose inputs require gradients are recorded on it.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor from_data(Shape shape, std::vector<double> values);
    /// Normal samples with the given mean and standard deviation (std > 0).
    static Tensor rand_normal(Shape shape, Rng& rng, double mean = 0.0, double std = 1.0);
    static Tensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0);

    [[nodiscard]] bool defined() const { return impl_ != nullptr; }
    [[nodiscard]] const Shape& shape() const;
    [[nodiscard]] std::size_t numel() const { return shape().numel(); }
    [[nodiscard]] std::span<const double> data() const;
    [[nodiscard]] double at(int n, int c, int h, int w) const;
    [[nodiscard]] double operator[](std::size_t i) const { return data()[i]; }
    /// Value of a single-element tensor.
    [[nodiscard]] double item() const;
    [[nodiscard]] std::vector<double> to_vector() const;

    /// Deep copy with fresh storage; the copy is a constant leaf.
    [[nodiscard]] Tensor clone() const;

    [[nodiscard]] bool requires_grad() const;
    /// Marks this tensor as a trainable leaf. Only valid on tensors that were
    /// not produced by a recorded op.
    Tensor& set_requires_grad(bool flag = true);

    [[nodiscard]] bool has_grad() const;
    /// Accumulated gradient; throws if absent.
    [[nodiscard]] std::span<const double> grad() const;
    [[nodiscard]] Tensor grad_tensor() const;
    void zero_grad();
    void clear_grad();

    /// In-place access for leaves (parameter updates, checkpoint loading).
    [[nodiscard]] std::span<double> mutable_data();
    [[nodiscard]] std::span<double> mutable_grad();

    /// Identifier within the graph active on this thread, if recorded there.
    [[nodiscard]] std::optional<std::size_t> node_id() const;

    [[nodiscard]] bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend class Graph;
    friend Tensor make_op(std::string_view, Shape, std::vector<double>, const std::vector<Tensor>&,
                          BackwardFn);
    friend Tensor detach(const Tensor&);
};

/// Creates the result of a differentiable op. If a graph is active and any
/// input participates in it, a node is recorded with `backward`; otherwise
/// the result is a constant and `backward` is dropped.
Tensor make_op(std::string_view name, Shape shape, std::vector<double> values,
               const std::vector<Tensor>& inputs, BackwardFn backward);

/// Reverse-mode tape. Nodes are appended in creation order, so every parent
/// precedes its children and backward can walk the vector in reverse.
///
/// Constructing a Graph makes it the active graph on the calling thread until
/// it is destroyed (graphs nest; the previous one is restored).
class Graph {
public:
    Graph();
    ~Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    [[nodiscard]] std::size_t size() const { return nodes_.size(); }
    [[nodiscard]] std::string_view op_name(std::size_t id) const { return nodes_.at(id).name; }
    /// Node ids of the recorded inputs of node `id`, in argument order.
    [[nodiscard]] std::vector<std::size_t> parents(std::size_t id) const;

    /// Populates `grad` on every requires_grad leaf reachable from `loss`.
    void backward(const Tensor& loss);

    static Graph* active();

private:
    struct Node {
        std::string name;
        // One slot per op input; kNoNode where the input is not on the graph.
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        std::shared_ptr<detail::TensorImpl> leaf;
        std::size_t numel = 0;
    };

    std::size_t record_leaf(const std::shared_ptr<detail::TensorImpl>& impl);
    std::size_t record(std::string_view name, std::vector<std::size_t> inputs, BackwardFn fn,
                       std::size_t numel);

    static constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);

    std::vector<Node> nodes_;
    Graph* previous_ = nullptr;
    std::uint64_t serial_;

    friend Tensor make_op(std::string_view, Shape, std::vector<double>, const std::vector<Tensor>&,
                          BackwardFn);
    friend class Tensor;
};

/// Suspends recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Graph* saved_;
};

/// Runs backward on the graph active on this thread.
void backward(const Tensor& loss);

// Elementwise arithmetic. Binary ops broadcast numpy-style over the four
// axes: each dimension must match or be 1 in one of the operands.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor square(const Tensor& a);

/// Sum of all elements as a (1,1,1,1) tensor.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Same values, new shape with equal element count.
Tensor reshape(const Tensor& a, Shape shape);
/// Concatenation along the channel axis.
Tensor concat_channels(const std::vector<Tensor>& parts);

/// Axes reduced by mean_over/std_over. `groups > 1` splits C into groups of
/// C/groups consecutive channels and reduces within each group, giving the
/// (N, groups, 1, 1) statistics used by group normalization.
struct AxisSet {
    bool n = false;
    bool c = false;
    bool h = false;
    bool w = false;
    int groups = 1;

    static AxisSet nhw() { return {true, false, true, true, 1}; }
    static AxisSet chw() { return {false, true, true, true, 1}; }
    static AxisSet hw() { return {false, false, true, true, 1}; }
    static AxisSet all() { return {true, true, true, true, 1}; }
    static AxisSet grouped(int g) { return {false, true, true, true, g}; }
    /// Parses axis letters such as "NHW"; throws on an empty or unknown set.
    static AxisSet parse(std::string_view letters);

    [[nodiscard]] bool empty() const { return !(n || c || h || w); }
    [[nodiscard]] Shape reduced_shape(const Shape& in) const;
    /// Number of elements folded into each statistic.
    [[nodiscard]] std::size_t set_size(const Shape& in) const;
};

/// Mean over the reduced axes, keeping reduced dimensions as size 1.
Tensor mean_over(const Tensor& x, const AxisSet& axes);
/// sqrt(population variance + eps) over the reduced axes.
Tensor std_over(const Tensor& x, const AxisSet& axes, double eps);

/// Same-padded 2D cross-correlation. `weight` is (C_out, C_in, k, k) with odd
/// k; `bias` is an optional (1, C_out, 1, 1) tensor. The input is zero-padded
/// by (k-1)/2 on each side.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

/// Same values, excluded from any graph.
Tensor detach(const Tensor& x);

// Non-differentiable conveniences for analysis code.
double sum_value(const Tensor& x);
double mean_value(const Tensor& x);
/// Population standard deviation of all elements.
double std_value(const Tensor& x);
double max_abs_diff(const Tensor& a, const Tensor& b);
/// Single sample `n` as a (1, C, H, W) tensor.
Tensor slice_sample(const Tensor& x, int n);
/// Stacks (1, C, H, W) tensors along N.
Tensor stack_samples(const std::vector<Tensor>& parts);

// `.t4d` files: four little-endian uint32 dims (N, C, H, W) followed by
// N*C*H*W little-endian float64 values.
void write_t4d(const std::string& path, const Tensor& t);
Tensor read_t4d(const std::string& path);
std::vector<std::uint8_t> encode_t4d(const Tensor& t);
Tensor decode_t4d(std::span<const std::uint8_t> bytes);

}  // namespace devmod
