#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "devmod/models.hpp"
#include "devmod/train.hpp"

namespace devmod {

/// One training run. `dataset_root` holds train/ and optionally val/, each
/// in the layout written by write_dataset.
struct ExperimentConfig {
    std::string name;
    std::filesystem::path dataset_root;
    std::filesystem::path output_dir;
    ModelConfig model;
    TrainConfig train;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Strict parser; relative paths are resolved against `base_dir`.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
/// Parses the file, resolving paths against its directory.
ExperimentConfig load_experiment_config(const std::filesystem::path& file);

/// Model initialized from the training seed.
Model init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Reads the datasets, trains, and writes config.json (the resolved
/// configuration), log.csv and checkpoints under output_dir.
TrainLog run_experiment(const ExperimentConfig& cfg);

}  // namespace devmod
