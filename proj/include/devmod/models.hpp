#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "devmod/blocks.hpp"

namespace devmod {

class Rng;

struct ModelConfig {
    int scale = 2;
    int n_blocks = 4;
    int channels = 16;
    /// Block template; its channel count is taken from `channels`.
    BlockConfig block;
    double rgb_range = 255.0;
    bool global_skip = true;
    /// EDSR mean shift with the DIV2K RGB means.
    bool mean_shift = false;

    void validate() const;
};

inline constexpr double kDiv2kMean[3] = {0.4488, 0.4371, 0.4040};

/// head -> n_blocks blocks -> body-end conv (+ global skip) -> upsampler -> RGB conv.
/// The upsampler is conv(C -> C*r^2) + pixel_shuffle(r) with r = scale for
/// x2/x3 and two r = 2 stages for x4.
class Model {
public:
    Model(const ModelConfig& cfg, Rng& rng);

    [[nodiscard]] const ModelConfig& config() const { return cfg_; }

    /// lr: (N,3,h,w) in rgb_range -> (N,3,h*scale,w*scale). With `taps`, one
    /// entry per block is filled.
    Tensor forward(const Tensor& lr, Mode mode, std::vector<BlockTaps>* taps = nullptr);

    /// Parameters and buffers with stable checkpoint names.
    [[nodiscard]] std::vector<NamedParam> parameters() const;
    [[nodiscard]] std::size_t parameter_count() const;

    Conv2d head;
    std::vector<Block> body;
    Conv2d body_end;
    std::vector<Conv2d> upsample;
    std::vector<int> upsample_factors;
    Conv2d tail_out;

private:
    ModelConfig cfg_;
    bool range_warned_ = false;
};

Model build_model(const ModelConfig& cfg, Rng& rng);

/// M1/M2/M3 toy models: blocks T1/T2/T3 with the given depth and width.
ModelConfig toy_model_config(BlockKind toy_kind, int n_blocks, int channels, int scale);

/// Copy of a toy model with its blocks rebuilt as `toy_kind`, sharing every
/// weight of `src`. Toy blocks differ only in wiring, so the copy is exact.
Model with_block_kind(const Model& src, BlockKind toy_kind);

enum class Tap { BlockInput, ResidualPreAdd, ModulationFactor };

std::string_view to_string(Tap tap);

struct Probe {
    int block = 0;
    Tap tap = Tap::ResidualPreAdd;
    [[nodiscard]] std::string key() const;
};

/// "block<i>.<tap>" or "last.<tap>" with tap in {block_input,
/// residual_pre_add, modulation_factor}.
Probe parse_probe(std::string_view text, const Model& m);

/// Runs one forward and returns the probed tensors keyed by Probe::key().
/// Throws std::invalid_argument for an out-of-range block or a
/// modulation_factor probe on a block without AdaDM.
std::map<std::string, Tensor> collect_internal(Model& m, const Tensor& lr, const std::vector<Probe>& probes,
                                               Mode mode = Mode::Eval);

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const BlockConfig& cfg);
nlohmann::json to_json(const ModelConfig& cfg);
/// Strict parsers: unknown keys and wrong types throw ConfigError with the
/// key path; absent keys keep their defaults.
BlockConfig block_config_from_json(const nlohmann::json& j, const std::string& path);
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path);

/// Checkpoint directory: manifest.json plus one .t4d file per tensor.
/// The manifest holds {"config": ModelConfig, "params": {name -> {file,
/// shape, trainable}}, "layers": {name -> {kind | w, b}}}.
void save_checkpoint(const Model& m, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace devmod
