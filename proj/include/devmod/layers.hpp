#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "devmod/tensor.hpp"

namespace devmod {

class Rng;

enum class Mode { Train, Eval };

/// A tensor owned by a layer together with the name it is checkpointed
/// under. Buffers (BN running statistics) are saved but never optimized.
struct NamedParam {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

// ---------------------------------------------------------------------------
// Convolution

/// Same-padded convolution layer owning its weights.
struct Conv2d {
    Tensor weight;  // (c_out, c_in, k, k)
    Tensor bias;    // (1, c_out, 1, 1), undefined when bias-free

    [[nodiscard]] int c_in() const { return weight.shape().c; }
    [[nodiscard]] int c_out() const { return weight.shape().n; }
    [[nodiscard]] int kernel() const { return weight.shape().h; }
    [[nodiscard]] bool has_bias() const { return bias.defined(); }

    [[nodiscard]] Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias); }
    void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

/// Weights ~ N(0, sqrt(2 / (c_in * k^2))), bias zero.
Conv2d make_conv_layer(int c_in, int c_out, int k, bool bias, Rng& rng);

// ---------------------------------------------------------------------------
// Normalization

enum class NormKind { BN, LN, IN, GN };

std::string_view to_string(NormKind kind);
NormKind parse_norm_kind(std::string_view s);

struct NormSpec {
    NormKind kind = NormKind::BN;
    int groups = 1;  // GN only
    double eps = 1e-5;
    double momentum = 0.1;  // BN running statistics
    bool affine = true;
};

/// Axes each kind normalizes over: BN (N,H,W), LN (C,H,W), IN (H,W),
/// GN grouped (C/g,H,W).
AxisSet norm_axes(const NormSpec& spec);

/// Normalization layer with optional per-channel scale/shift and, for BN,
/// running statistics.
///
/// BN in train mode normalizes with batch statistics and folds them into the
/// running estimates as `new = (1 - momentum) * old + momentum * batch`,
/// storing the population variance. In eval mode BN is the fixed per-channel
/// affine map given by the running estimates. LN, IN and GN behave the same in
/// both modes.
class NormLayer {
public:
    NormLayer() = default;
    NormLayer(NormSpec spec, int channels);

    [[nodiscard]] const NormSpec& spec() const { return spec_; }
    [[nodiscard]] int channels() const { return channels_; }

    Tensor forward(const Tensor& x, Mode mode);

    Tensor weight;  // (1, C, 1, 1), affine only
    Tensor bias;    // (1, C, 1, 1), affine only
    Tensor running_mean;  // (1, C, 1, 1), BN only
    Tensor running_var;   // (1, C, 1, 1), BN only, population variance
    /// False until a train-mode BN forward has updated the running statistics.
    bool stats_updated = false;

    void collect(const std::string& prefix, std::vector<NamedParam>& out) const;

private:
    NormSpec spec_;
    int channels_ = 0;
    bool warned_ = false;
};

// ---------------------------------------------------------------------------
// Adaptive deviation modulation

/// Scalar perceptron phi(v) = w * v + b applied to v = log(sigma(x)).
struct AdaDMState {
    Tensor w;  // (1,1,1,1), initialized to 1
    Tensor b;  // (1,1,1,1), initialized to 0
    /// Exclude sigma(x) from backpropagation; the forward value is unchanged.
    bool detach_sigma = false;
    /// Added inside the variance of sigma(x).
    double eps = 1e-8;

    AdaDMState();
    explicit AdaDMState(bool detach);

    void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

/// Per-sample modulation factor exp(w * log(sigma(x_n)) + b), shape (N,1,1,1),
/// with sigma over (C,H,W).
///
/// The factor is evaluated as sigma^w * e^b, which is the same function and
/// reduces exactly to sigma at (w, b) = (1, 0) and to 1 at (0, 0).
Tensor adadm_factor(const Tensor& x_block_input, const AdaDMState& state);

/// gamma * adadm_factor(x_block_input, state), one factor per sample.
Tensor adadm(const Tensor& gamma, const Tensor& x_block_input, const AdaDMState& state);

// ---------------------------------------------------------------------------
// Primitive ops

/// max(x, 0); the subgradient at 0 is 0.
Tensor relu(const Tensor& x);

/// (N, C, H, W) -> (N, C/r^2, H*r, W*r) sub-pixel rearrangement:
/// out[n, c, h*r + i, w*r + j] = in[n, c*r^2 + i*r + j, h, w].
Tensor pixel_shuffle(const Tensor& x, int r);
/// Inverse of pixel_shuffle.
Tensor pixel_unshuffle(const Tensor& x, int r);

}  // namespace devmod
