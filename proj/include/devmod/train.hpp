#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "devmod/data.hpp"
#include "devmod/metrics.hpp"
#include "devmod/models.hpp"

namespace devmod {

class Rng;

struct TrainConfig {
    int batch = 16;
    int patch = 48;
    double lr0 = 1e-4;
    int halve_every = 200;
    int epochs = 1000;
    /// 0 selects ceil(patch capacity / batch), where the capacity counts the
    /// non-overlapping LR patches of the training set.
    int steps_per_epoch = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    /// Absolute loss that aborts training; 0 selects the relative rule:
    /// loss above divergence_factor * (first step loss) for
    /// divergence_patience consecutive steps. NaN always aborts.
    double divergence_threshold = 0.0;
    double divergence_factor = 10.0;
    int divergence_patience = 100;
    /// Write a checkpoint every K epochs (0: only the final one).
    int checkpoint_every = 0;
    /// When false the wall_seconds column is written as 0 so that logs of
    /// identical runs are byte-identical.
    bool record_wall_time = true;

    void validate() const;

    /// batch 4, patch 24, 50 epochs x 50 steps.
    static TrainConfig desk();
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path);

/// lr0 * 0.5^floor(epoch / halve_every)
double lr_at(int epoch, const TrainConfig& cfg);

/// Mean absolute error; the subgradient at ties is 0.
Tensor l1_loss(const Tensor& pred, const Tensor& target);

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam over the trainable entries of `params`.
class Adam {
public:
    Adam(std::vector<NamedParam> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    /// Applies one update with the current gradients (missing gradients
    /// count as zero), then zeroes them. Throws NonFiniteError naming the
    /// parameter if a gradient is NaN or infinite; nothing is updated then.
    void step(double lr);

    [[nodiscard]] std::int64_t steps() const { return t_; }
    [[nodiscard]] const std::vector<NamedParam>& params() const { return params_; }
    [[nodiscard]] const std::vector<std::vector<double>>& first_moments() const { return m_; }
    [[nodiscard]] const std::vector<std::vector<double>>& second_moments() const { return v_; }

private:
    std::vector<NamedParam> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

/// Aligned random crop (LR side `patch`, HR side patch * scale) followed by
/// one uniformly chosen dihedral transform applied to both.
std::pair<Tensor, Tensor> sample_patch(const Tensor& hr, const Tensor& lr, int patch, int scale, Rng& rng);

/// Same with the crop origin (in LR pixels) and transform given.
std::pair<Tensor, Tensor> crop_patch(const Tensor& hr, const Tensor& lr, int patch, int scale, int x, int y,
                                     int transform);

std::int64_t patch_capacity(const std::vector<ImagePair>& pairs, int patch);

struct TrainRow {
    int epoch = 0;
    double lr = 0.0;
    /// Mean training loss of the epoch; absent for the initial row.
    std::optional<double> train_loss;
    /// Absent when there is no validation set or the epoch diverged.
    std::optional<Psnr> val_psnr;
    double wall_seconds = 0.0;
};

enum class TrainStatus { Completed, Diverged };

struct TrainLog {
    std::vector<TrainRow> rows;
    TrainStatus status = TrainStatus::Completed;
    std::string reason;
    std::int64_t steps = 0;
    /// Loss of every optimizer step, in order.
    std::vector<double> step_losses;

    /// Columns epoch, lr, train_loss, val_psnr, wall_seconds.
    void write_csv(const std::filesystem::path& path) const;
    [[nodiscard]] std::string csv() const;
};

/// Trains in place. Row 0 of the log is the evaluation before training.
/// With a non-empty `out_dir`, checkpoints go to out_dir/epoch_<k> and
/// out_dir/final and the log to out_dir/log.csv.
TrainLog train(Model& model, const std::vector<ImagePair>& train_set, const std::vector<ImagePair>& val_set,
               const TrainConfig& cfg, const std::filesystem::path& out_dir = {});

}  // namespace devmod
