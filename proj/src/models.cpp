#include "devmod/models.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "devmod/config.hpp"
#include "devmod/log.hpp"
#include "devmod/rng.hpp"

namespace devmod {

namespace fs = std::filesystem;
using nlohmann::json;

void ModelConfig::validate() const {
    if (scale != 2 && scale != 3 && scale != 4) {
        throw std::invalid_argument("unsupported scale " + std::to_string(scale) + " (expected 2, 3 or 4)");
    }
    if (n_blocks < 1) throw std::invalid_argument("n_blocks must be >= 1");
    if (channels < 1) throw std::invalid_argument("channels must be >= 1");
    if (!(rgb_range > 0.0)) throw std::invalid_argument("rgb_range must be positive");
    BlockConfig b = block;
    b.channels = channels;
    b.validate();
}

Model::Model(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    cfg_.block.channels = cfg.channels;
    const int c = cfg.channels;
    head = make_conv_layer(3, c, 3, true, rng);
    for (int i = 0; i < cfg.n_blocks; ++i) body.emplace_back(cfg_.block, rng);
    body_end = make_conv_layer(c, c, 3, true, rng);
    upsample_factors = cfg.scale == 4 ? std::vector<int>{2, 2} : std::vector<int>{cfg.scale};
    for (int r : upsample_factors) upsample.push_back(make_conv_layer(c, c * r * r, 3, true, rng));
    tail_out = make_conv_layer(c, 3, 3, true, rng);
}

Model build_model(const ModelConfig& cfg, Rng& rng) { return Model(cfg, rng); }

ModelConfig toy_model_config(BlockKind toy_kind, int n_blocks, int channels, int scale) {
    if (!is_toy(toy_kind)) throw std::invalid_argument("toy models use T1, T2 or T3 blocks");
    ModelConfig cfg;
    cfg.scale = scale;
    cfg.n_blocks = n_blocks;
    cfg.channels = channels;
    cfg.block.kind = toy_kind;
    cfg.block.channels = channels;
    return cfg;
}

Model with_block_kind(const Model& src, BlockKind toy_kind) {
    if (!is_toy(src.config().block.kind) || !is_toy(toy_kind)) {
        throw std::invalid_argument("with_block_kind converts between toy kinds only, got " +
                                    std::string(to_string(src.config().block.kind)) + " -> " +
                                    std::string(to_string(toy_kind)));
    }
    ModelConfig cfg = src.config();
    cfg.block.kind = toy_kind;
    Rng rng(0);
    Model out(cfg, rng);
    std::map<std::string, Tensor> from;
    for (const NamedParam& p : src.parameters()) from.emplace(p.name, p.tensor);
    for (NamedParam& p : out.parameters()) {
        auto it = from.find(p.name);
        if (it == from.end() || !(it->second.shape() == p.tensor.shape())) {
            throw std::logic_error("with_block_kind: no matching tensor for " + p.name);
        }
        auto dst = p.tensor.mutable_data();
        auto v = it->second.data();
        std::copy(v.begin(), v.end(), dst.begin());
    }
    return out;
}

Tensor Model::forward(const Tensor& lr, Mode mode, std::vector<BlockTaps>* taps) {
    if (lr.shape().c != 3) throw ShapeError("model input must have 3 channels, got " + to_string(lr.shape()));
    if (!range_warned_) {
        const double lo = -0.5 * cfg_.rgb_range;
        const double hi = 1.5 * cfg_.rgb_range;
        for (double v : lr.data()) {
            if (v < lo || v > hi) {
                warn("model input value " + std::to_string(v) + " is far outside rgb_range " +
                     std::to_string(cfg_.rgb_range));
                range_warned_ = true;
                break;
            }
        }
    }
    Tensor mean;
    Tensor x = lr;
    if (cfg_.mean_shift) {
        mean = Tensor::from_data({1, 3, 1, 1}, {kDiv2kMean[0] * cfg_.rgb_range, kDiv2kMean[1] * cfg_.rgb_range,
                                                kDiv2kMean[2] * cfg_.rgb_range});
        x = sub(x, mean);
    }
    if (taps) taps->assign(body.size(), BlockTaps{});

    Tensor h = head.forward(x);
    Tensor b = h;
    for (std::size_t i = 0; i < body.size(); ++i) b = body[i].forward(b, mode, taps ? &(*taps)[i] : nullptr);
    b = body_end.forward(b);
    if (cfg_.global_skip) b = add(b, h);
    for (std::size_t i = 0; i < upsample.size(); ++i) b = pixel_shuffle(upsample[i].forward(b), upsample_factors[i]);
    Tensor out = tail_out.forward(b);
    if (cfg_.mean_shift) out = add(out, mean);
    return out;
}

std::vector<NamedParam> Model::parameters() const {
    std::vector<NamedParam> out;
    head.collect("head", out);
    for (std::size_t i = 0; i < body.size(); ++i) body[i].collect("body." + std::to_string(i), out);
    body_end.collect("body_end", out);
    for (std::size_t i = 0; i < upsample.size(); ++i) upsample[i].collect("tail.up" + std::to_string(i), out);
    tail_out.collect("tail.out", out);
    return out;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const NamedParam& p : parameters()) {
        if (p.trainable) n += p.tensor.shape().numel();
    }
    return n;
}

// ---------------------------------------------------------------------------
// Probes

std::string_view to_string(Tap tap) {
    switch (tap) {
        case Tap::BlockInput: return "block_input";
        case Tap::ResidualPreAdd: return "residual_pre_add";
        case Tap::ModulationFactor: return "modulation_factor";
    }
    return "?";
}

std::string Probe::key() const { return "block" + std::to_string(block) + "." + std::string(to_string(tap)); }

Probe parse_probe(std::string_view text, const Model& m) {
    const auto dot = text.find('.');
    if (dot == std::string_view::npos) throw std::invalid_argument("probe '" + std::string(text) + "' must be <block>.<tap>");
    const std::string_view where = text.substr(0, dot);
    const std::string_view tap = text.substr(dot + 1);
    Probe p;
    if (where == "last") {
        p.block = static_cast<int>(m.body.size()) - 1;
    } else if (where.substr(0, 5) == "block" && where.size() > 5) {
        try {
            std::size_t used = 0;
            p.block = std::stoi(std::string(where.substr(5)), &used);
            if (used != where.size() - 5) throw std::invalid_argument("");
        } catch (const std::exception&) {
            throw std::invalid_argument("probe '" + std::string(text) + "': bad block index");
        }
    } else {
        throw std::invalid_argument("probe '" + std::string(text) + "': expected block<i> or last");
    }
    if (tap == "block_input") p.tap = Tap::BlockInput;
    else if (tap == "residual_pre_add") p.tap = Tap::ResidualPreAdd;
    else if (tap == "modulation_factor") p.tap = Tap::ModulationFactor;
    else throw std::invalid_argument("probe '" + std::string(text) + "': unknown tap '" + std::string(tap) + "'");
    return p;
}

std::map<std::string, Tensor> collect_internal(Model& m, const Tensor& lr, const std::vector<Probe>& probes,
                                               Mode mode) {
    for (const Probe& p : probes) {
        if (p.block < 0 || p.block >= static_cast<int>(m.body.size())) {
            throw std::invalid_argument("probe " + p.key() + ": model has " + std::to_string(m.body.size()) +
                                        " blocks");
        }
        if (p.tap == Tap::ModulationFactor && !m.body[p.block].adadm_state) {
            throw std::invalid_argument("probe " + p.key() + ": block kind " +
                                        std::string(to_string(m.body[p.block].config().kind)) + " has no AdaDM");
        }
    }
    std::vector<BlockTaps> taps;
    m.forward(lr, mode, &taps);
    std::map<std::string, Tensor> out;
    for (const Probe& p : probes) {
        const BlockTaps& t = taps[p.block];
        switch (p.tap) {
            case Tap::BlockInput: out[p.key()] = t.block_input; break;
            case Tap::ResidualPreAdd: out[p.key()] = t.residual_pre_add; break;
            case Tap::ModulationFactor: out[p.key()] = t.modulation_factor; break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON

json to_json(const BlockConfig& cfg) {
    json j = {{"kind", std::string(to_string(cfg.kind))},
              {"kernel", cfg.kernel},
              {"batch_norm", cfg.batch_norm},
              {"bn_affine", cfg.bn_affine},
              {"ln_eps", cfg.ln_eps},
              {"res_scale", cfg.res_scale}};
    if (uses_adadm(cfg.kind)) j["detach_sigma"] = cfg.detach_sigma;
    if (is_dense(cfg.kind)) {
        j["rdb_convs"] = cfg.rdb_convs;
        j["growth"] = cfg.growth;
    }
    return j;
}

json to_json(const ModelConfig& cfg) {
    return {{"scale", cfg.scale},           {"n_blocks", cfg.n_blocks},       {"channels", cfg.channels},
            {"block", to_json(cfg.block)},  {"rgb_range", cfg.rgb_range},     {"global_skip", cfg.global_skip},
            {"mean_shift", cfg.mean_shift}};
}

BlockConfig block_config_from_json(const json& j, const std::string& path) {
    StrictReader r(j, path);
    BlockConfig cfg;
    std::string kind;
    r.require("kind", kind);
    try {
        cfg.kind = parse_block_kind(kind);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(r.path_of("kind") + ": " + e.what());
    }
    r.get("kernel", cfg.kernel);
    r.get("batch_norm", cfg.batch_norm);
    r.get("bn_affine", cfg.bn_affine);
    r.get("ln_eps", cfg.ln_eps);
    r.get("res_scale", cfg.res_scale);
    if (uses_adadm(cfg.kind)) r.get("detach_sigma", cfg.detach_sigma);
    if (is_dense(cfg.kind)) {
        r.get("rdb_convs", cfg.rdb_convs);
        r.get("growth", cfg.growth);
    }
    r.finish();
    return cfg;
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
    StrictReader r(j, path);
    ModelConfig cfg;
    r.get("scale", cfg.scale);
    r.get("n_blocks", cfg.n_blocks);
    r.get("channels", cfg.channels);
    if (const json* b = r.find("block")) cfg.block = block_config_from_json(*b, r.path_of("block"));
    r.get("rgb_range", cfg.rgb_range);
    r.get("global_skip", cfg.global_skip);
    r.get("mean_shift", cfg.mean_shift);
    r.finish();
    cfg.block.channels = cfg.channels;
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError((path.empty() ? std::string("model") : path) + ": " + e.what());
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json shape_json(const Shape& s) { return json::array({s.n, s.c, s.h, s.w}); }

template <class Fn>
void for_each_layer(const Model& m, Fn&& fn) {
    for (std::size_t i = 0; i < m.body.size(); ++i) {
        const Block& b = m.body[i];
        const std::string prefix = "body." + std::to_string(i);
        for (std::size_t k = 0; k < b.norms.size(); ++k) fn(prefix + ".norm" + std::to_string(k), &b.norms[k], nullptr);
        if (b.adadm_state) fn(prefix + ".adadm", nullptr, &*b.adadm_state);
    }
}

}  // namespace

void save_checkpoint(const Model& m, const fs::path& dir) {
    fs::create_directories(dir);
    json params = json::object();
    for (const NamedParam& p : m.parameters()) {
        const std::string file = p.name + ".t4d";
        write_t4d(dir / file, p.tensor);
        params[p.name] = {{"file", file}, {"shape", shape_json(p.tensor.shape())}, {"trainable", p.trainable}};
    }
    json layers = json::object();
    for_each_layer(m, [&](const std::string& name, const NormLayer* n, const AdaDMState* a) {
        if (n) {
            layers[name] = {{"kind", std::string(to_string(n->spec().kind))},
                            {"affine", n->spec().affine},
                            {"stats_updated", n->stats_updated}};
        } else {
            layers[name] = {{"kind", "AdaDM"}, {"w", a->w.item()}, {"b", a->b.item()}, {"detach_sigma", a->detach_sigma}};
        }
    });
    json manifest = {{"format", "devmod-checkpoint-1"}, {"config", to_json(m.config())}, {"params", params},
                     {"layers", layers}};
    std::ofstream out(dir / "manifest.json");
    if (!out) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
    if (!out) throw CheckpointError("failed writing " + (dir / "manifest.json").string());
}

Model load_checkpoint(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw CheckpointError("manifest not found: " + manifest_path.string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw CheckpointError("manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
    }
    if (!manifest.is_object() || !manifest.contains("config") || !manifest.contains("params")) {
        throw CheckpointError("manifest " + manifest_path.string() + " lacks \"config\" or \"params\"");
    }
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(manifest["config"], "config");
    } catch (const ConfigError& e) {
        throw CheckpointError("manifest " + manifest_path.string() + ": " + e.what());
    }
    Rng rng(0);
    Model m(cfg, rng);
    const json& params = manifest["params"];
    for (NamedParam& p : m.parameters()) {
        if (!params.contains(p.name)) throw CheckpointError("manifest lacks parameter " + p.name);
        const json& e = params[p.name];
        Tensor t;
        try {
            t = read_t4d(dir / e.at("file").get<std::string>());
        } catch (const std::exception& ex) {
            throw CheckpointError("parameter " + p.name + ": " + ex.what());
        }
        if (!(t.shape() == p.tensor.shape())) {
            throw CheckpointError("parameter " + p.name + ": file shape " + to_string(t.shape()) + " != model shape " +
                                  to_string(p.tensor.shape()));
        }
        auto dst = p.tensor.mutable_data();
        std::copy(t.data().begin(), t.data().end(), dst.begin());
    }
    const json layers = manifest.value("layers", json::object());
    for (std::size_t i = 0; i < m.body.size(); ++i) {
        Block& b = m.body[i];
        for (std::size_t k = 0; k < b.norms.size(); ++k) {
            const std::string name = "body." + std::to_string(i) + ".norm" + std::to_string(k);
            if (layers.contains(name)) b.norms[k].stats_updated = layers[name].value("stats_updated", false);
        }
    }
    return m;
}

}  // namespace devmod
