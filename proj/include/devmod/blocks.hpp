#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "devmod/layers.hpp"

namespace devmod {

class Rng;

enum class BlockKind { T1, T2, T3, RB, SRRB, PreRB, RB_AdaDM, RDB, RDB_AdaDM };

/// Canonical names ("T1", "RB_AdaDM", ...) used in configs and on the CLI.
std::string_view to_string(BlockKind kind);
BlockKind parse_block_kind(std::string_view name);
bool uses_adadm(BlockKind kind);
bool is_dense(BlockKind kind);
bool is_toy(BlockKind kind);

struct BlockConfig {
    BlockKind kind = BlockKind::RB;
    int channels = 16;
    int kernel = 3;
    /// RDB kinds only.
    int rdb_convs = 4;
    int growth = 16;
    /// AdaDM kinds only.
    bool detach_sigma = false;
    /// BN layers in SRRB/PreRB/RB_AdaDM/RDB_AdaDM. Turning this off on an
    /// AdaDM kind gives the "AdaDM only" ablation.
    bool batch_norm = true;
    bool bn_affine = true;
    /// LN eps of the toy blocks T2/T3.
    double ln_eps = 1e-5;
    /// Multiplier on the residual branch of RB (EDSR residual scaling).
    double res_scale = 1.0;

    /// Throws std::invalid_argument on an inconsistent configuration.
    void validate() const;
};

/// Intermediate tensors a block can expose during forward.
struct BlockTaps {
    Tensor block_input;
    /// Residual branch output just before the element-wise addition.
    Tensor residual_pre_add;
    /// AdaDM factor, (N,1,1,1); undefined for blocks without AdaDM.
    Tensor modulation_factor;
};

/// One residual block of any supported topology.
///
/// Wiring (x is the block input):
///   T1         x + Conv(x)
///   T2         x + Conv(LN(x))
///   T3         x + sigma(x) * Conv(LN(x))
///   RB         x + s * Conv(ReLU(Conv(x)))
///   SRRB       x + BN(Conv(ReLU(BN(Conv(x)))))
///   PreRB      x + Conv(ReLU(BN(Conv(BN(x)))))
///   RB_AdaDM   x + AdaDM(Conv(ReLU(BN(Conv(BN(x))))), x)
///   RDB        x + Fuse1x1(dense chain of Conv->ReLU over BN-free input)
///   RDB_AdaDM  x + AdaDM(Fuse1x1(dense chain over BN(x)), x)
/// Toy blocks are bias-free with affine-off LN; sigma(x) in T3 is the LN
/// standard deviation of the block input.
class Block {
public:
    Block(const BlockConfig& cfg, Rng& rng);

    [[nodiscard]] const BlockConfig& config() const { return cfg_; }

    Tensor forward(const Tensor& x, Mode mode, BlockTaps* taps = nullptr);
    /// Residual branch only (the tensor added to x).
    Tensor residual(const Tensor& x, Mode mode, BlockTaps* taps = nullptr);

    void collect(const std::string& prefix, std::vector<NamedParam>& out) const;

    std::vector<Conv2d> convs;
    std::vector<NormLayer> norms;
    std::optional<AdaDMState> adadm_state;

private:
    BlockConfig cfg_;
};

// ---------------------------------------------------------------------------
// Deviation identity

struct DaIdentityReport {
    /// Per sample: sigma(x), std(y), std(gamma), std(gamma_hat).
    std::vector<double> sigma, std_y, std_gamma, std_gamma_hat;
    /// max_n |std(gamma) - std(y) / sigma(x)|
    double max_err_shrink = 0.0;
    /// max_n |std(gamma_hat) - std(y)|
    double max_err_restore = 0.0;
    /// max_n |std(gamma_hat) - std(Conv(x) - Conv(mu I))|: the same relation
    /// with the constant-image response kept, exact for any input.
    double max_err_centered = 0.0;
    double tol = 0.0;
    bool shrink_ok = false;
    bool restore_ok = false;
    [[nodiscard]] bool passed() const { return shrink_ok && restore_ok; }
};

/// With y = Conv(x), gamma = Conv(LN(x)) (affine off, eps = 0) and
/// gamma_hat = sigma(x) * gamma, checks per sample that
/// std(gamma) = std(y) / sigma(x) and std(gamma_hat) = std(y) within `tol`.
/// Throws std::domain_error if a sample is constant.
DaIdentityReport verify_da_identity(const Tensor& x, const Conv2d& conv, double tol);

}  // namespace devmod
