#include "devmod/experiment.hpp"

#include <fstream>

#include "devmod/config.hpp"
#include "devmod/data.hpp"
#include "devmod/rng.hpp"

namespace devmod {

namespace fs = std::filesystem;

nlohmann::json to_json(const ExperimentConfig& cfg) {
    return {{"name", cfg.name},
            {"dataset_root", cfg.dataset_root.string()},
            {"output_dir", cfg.output_dir.string()},
            {"model", to_json(cfg.model)},
            {"train", to_json(cfg.train)}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
    config_check(j.is_object(), "experiment", "expected an object");
    StrictReader r(j, "experiment");
    ExperimentConfig c;
    std::string root, out;
    r.require("name", c.name);
    r.require("dataset_root", root);
    r.require("output_dir", out);
    config_check(!c.name.empty(), r.path_of("name"), "must not be empty");
    c.dataset_root = fs::path(root).is_absolute() ? fs::path(root) : base_dir / root;
    c.output_dir = fs::path(out).is_absolute() ? fs::path(out) : base_dir / out;
    if (const nlohmann::json* m = r.find("model")) c.model = model_config_from_json(*m, r.path_of("model"));
    if (const nlohmann::json* t = r.find("train")) c.train = train_config_from_json(*t, r.path_of("train"));
    r.finish();
    c.dataset_root = c.dataset_root.lexically_normal();
    c.output_dir = c.output_dir.lexically_normal();
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config " + file.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(file.string() + ": " + e.what());
    }
    return experiment_config_from_json(j, fs::absolute(file).parent_path());
}

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng = Rng(seed).fork(0x1417);
    return build_model(cfg, rng);
}

TrainLog run_experiment(const ExperimentConfig& cfg) {
    const fs::path train_dir = cfg.dataset_root / "train";
    const fs::path val_dir = cfg.dataset_root / "val";
    if (!fs::is_directory(train_dir)) {
        throw std::runtime_error("dataset not found: " + train_dir.string() + " does not exist");
    }
    const double range = cfg.model.rgb_range;
    std::vector<ImagePair> train_set = read_dataset(train_dir, cfg.model.scale, range);
    std::vector<ImagePair> val_set;
    if (fs::is_directory(val_dir)) val_set = read_dataset(val_dir, cfg.model.scale, range);

    fs::create_directories(cfg.output_dir);
    {
        std::ofstream out(cfg.output_dir / "config.json");
        if (!out) throw std::runtime_error("cannot write " + (cfg.output_dir / "config.json").string());
        out << to_json(cfg).dump(2) << '\n';
    }
    Model model = init_model(cfg.model, cfg.train.seed);
    return train(model, train_set, val_set, cfg.train, cfg.output_dir);
}

}  // namespace devmod
