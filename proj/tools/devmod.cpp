#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>

#include "devmod/config.hpp"
#include "devmod/data.hpp"
#include "devmod/experiment.hpp"
#include "devmod/metrics.hpp"
#include "devmod/models.hpp"
#include "devmod/verify.hpp"

using namespace devmod;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kDiverged = 3, kVerifyFailed = 4 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------

struct SynthArgs {
    int n = 32, size = 96, scale = 2;
    std::uint64_t seed = 1;
    double rgb_range = 255.0;
    std::string out;
};

int cmd_synth_data(const SynthArgs& a) {
    if (a.scale < 1 || a.size % a.scale != 0) {
        throw UsageError("--size " + std::to_string(a.size) + " is not divisible by --scale " + std::to_string(a.scale));
    }
    std::vector<ImagePair> pairs = synth_dataset(a.n, a.size, a.scale, a.seed, a.rgb_range);
    write_dataset(a.out, pairs, a.rgb_range);
    nlohmann::json manifest = {{"n", a.n}, {"size", a.size}, {"scale", a.scale}, {"seed", a.seed},
                               {"rgb_range", a.rgb_range}, {"images", nlohmann::json::array()}};
    const std::string x = "X" + std::to_string(a.scale);
    for (const ImagePair& p : pairs) {
        manifest["images"].push_back({{"name", p.name},
                                      {"hr", "HR/" + p.name + ".png"},
                                      {"lr", "LR_bicubic/" + x + "/" + p.name + "x" + std::to_string(a.scale) + ".png"}});
    }
    std::ofstream(fs::path(a.out) / "manifest.json") << manifest.dump(2) << '\n';
    std::cout << manifest.dump(2) << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& out_override) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (!out_override.empty()) cfg.output_dir = out_override;
    std::cout << "experiment " << cfg.name << ": " << to_string(cfg.model.block.kind) << " x" << cfg.model.scale
              << ", " << cfg.train.epochs << " epochs -> " << cfg.output_dir.string() << '\n';
    TrainLog log = run_experiment(cfg);
    for (const TrainRow& r : log.rows) {
        std::printf("epoch %4d  lr %.3g  loss %s  val_psnr %s\n", r.epoch, r.lr,
                    r.train_loss ? std::to_string(*r.train_loss).c_str() : "-",
                    r.val_psnr ? format_psnr(*r.val_psnr).c_str() : "-");
    }
    if (log.status == TrainStatus::Diverged) {
        std::cout << "diverged after " << log.steps << " steps: " << log.reason << '\n';
        return kDiverged;
    }
    std::cout << "completed " << log.steps << " steps\n";
    return kOk;
}

// ---------------------------------------------------------------------------

// Scales for which the dataset has an LR directory.
std::vector<int> dataset_scales(const fs::path& root) {
    std::vector<int> out;
    const fs::path lr = root / "LR_bicubic";
    if (!fs::is_directory(lr)) return out;
    for (const auto& e : fs::directory_iterator(lr)) {
        const std::string n = e.path().filename().string();
        if (e.is_directory() && n.size() > 1 && n[0] == 'X') {
            try {
                out.push_back(std::stoi(n.substr(1)));
            } catch (const std::exception&) {
            }
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<ImagePair> read_for_scale(const fs::path& data, int scale, double range) {
    std::vector<int> scales = dataset_scales(data);
    if (std::find(scales.begin(), scales.end(), scale) == scales.end()) {
        std::string have;
        for (int s : scales) have += (have.empty() ? "X" : ", X") + std::to_string(s);
        throw std::invalid_argument("scale mismatch: the checkpoint upsamples x" + std::to_string(scale) + " but " +
                                    data.string() + " has " + (have.empty() ? "no LR images" : have));
    }
    return read_dataset(data, scale, range);
}

struct EvalArgs {
    std::string checkpoint, data, out;
    bool self_ensemble = false;
    int shave = -1;
};

int cmd_eval(const EvalArgs& a) {
    Model m = load_checkpoint(a.checkpoint);
    std::vector<ImagePair> pairs = read_for_scale(a.data, m.config().scale, m.config().rgb_range);
    MetricReport r = evaluate(m, pairs, a.shave, a.self_ensemble, fs::path(a.data).filename().string());
    for (const ImageMetric& im : r.images) {
        std::printf("%-24s psnr %s  ssim %.6f\n", im.name.c_str(), format_psnr(im.psnr).c_str(), im.ssim);
    }
    std::printf("mean (%zu images, shave %d%s) psnr %s  ssim %.6f\n", r.images.size(), r.shave,
                r.self_ensemble ? ", self-ensemble" : "", format_psnr(r.mean_psnr).c_str(), r.mean_ssim);
    const fs::path out = a.out.empty() ? fs::path("metrics.csv") : fs::path(a.out);
    write_metrics_csv(out, r);
    std::cout << "wrote " << out.string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
    int seeds = 100;
    int grad_seeds = 2;
    double tol = 1e-10;
    double grad_h = 1e-5, grad_tol = 1e-4;
    std::vector<std::string> suites = {"identity", "norm", "grad", "adadm"};
};

int cmd_verify(const VerifyArgs& a) {
    VerifyReport rep;
    for (const std::string& s : a.suites) {
        if (s == "identity") rep.append(check_da_identity(a.seeds, a.tol));
        else if (s == "norm") rep.append(check_norm_statistics(a.seeds));
        else if (s == "grad") rep.append(check_gradients(a.grad_seeds, a.grad_h, a.grad_tol));
        else if (s == "adadm") rep.append(check_adadm_degeneration(a.seeds));
        else throw UsageError("unknown suite '" + s + "' (identity, norm, grad, adadm)");
    }
    print_report(std::cout, rep);
    return rep.passed() ? kOk : kVerifyFailed;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
    std::vector<std::string> checkpoints;
    std::string toy_shared;
    std::string data, out = "analysis";
    std::string probe = "last.residual_pre_add";
    int bins = 30;
};

// "name=path" or a bare path named after its directory.
std::pair<std::string, fs::path> split_named(const std::string& s) {
    const auto eq = s.find('=');
    if (eq != std::string::npos) return {s.substr(0, eq), s.substr(eq + 1)};
    fs::path p = fs::path(s).lexically_normal();
    if (p.filename().empty()) p = p.parent_path();
    return {p.filename().string(), p};
}

int cmd_analyze(const AnalyzeArgs& a) {
    std::vector<std::string> names;
    std::vector<Model> models;
    for (const std::string& c : a.checkpoints) {
        auto [name, path] = split_named(c);
        names.push_back(name);
        models.push_back(load_checkpoint(path));
    }
    if (!a.toy_shared.empty()) {
        Model src = load_checkpoint(split_named(a.toy_shared).second);
        for (BlockKind k : {BlockKind::T1, BlockKind::T2, BlockKind::T3}) {
            names.emplace_back(to_string(k));
            models.push_back(with_block_kind(src, k));
        }
    }
    if (models.empty()) throw UsageError("analyze needs --checkpoint or --toy-shared");
    const int scale = models.front().config().scale;
    for (std::size_t i = 0; i < models.size(); ++i) {
        if (models[i].config().scale != scale) {
            throw std::invalid_argument("checkpoints do not share a scale: " + names[0] + " is x" +
                                        std::to_string(scale) + ", " + names[i] + " is x" +
                                        std::to_string(models[i].config().scale));
        }
    }

    // The probe is resolved per model; "last" follows each model's depth.
    std::vector<Probe> probes;
    for (std::size_t i = 0; i < models.size(); ++i) {
        Probe p = parse_probe(a.probe, models[i]);
        if (p.tap == Tap::ModulationFactor && !uses_adadm(models[i].config().block.kind)) {
            throw std::invalid_argument("probe " + a.probe + ": model " + names[i] + " (" +
                                        std::string(to_string(models[i].config().block.kind)) + ") has no AdaDM");
        }
        probes.push_back(p);
    }

    std::vector<ImagePair> images = read_for_scale(a.data, scale, models.front().config().rgb_range);
    std::vector<DeviationRow> rows;
    for (std::size_t i = 0; i < models.size(); ++i) {
        auto r = run_deviation_study({{names[i], &models[i]}}, images, probes[i].block);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    fs::create_directories(a.out);
    write_deviation_csv(fs::path(a.out) / "deviation.csv", rows);

    // One histogram per model over a shared range so shifts are comparable.
    std::map<std::string, std::vector<double>> series;
    for (std::size_t i = 0; i < models.size(); ++i) {
        for (const DeviationRow& r : rows) {
            if (r.model != names[i] || r.block != probes[i].block) continue;
            const double v = probes[i].tap == Tap::ResidualPreAdd ? r.std
                             : probes[i].tap == Tap::BlockInput   ? r.input_std
                                                                  : r.modulation_factor;
            series[names[i]].push_back(v);
        }
    }
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& [n, v] : series)
        for (double x : v) lo = std::min(lo, x), hi = std::max(hi, x);
    for (std::size_t i = 0; i < models.size(); ++i) {
        const fs::path f = fs::path(a.out) / ("hist_" + names[i] + ".csv");
        write_histogram_csv(f, deviation_histogram(series[names[i]], a.bins, lo, hi), names[i]);
    }
    std::cout << "probe " << a.probe << ", " << images.size() << " images, " << rows.size() << " rows -> "
              << a.out << '\n';
    for (std::size_t i = 0; i < models.size(); ++i) {
        const auto& v = series[names[i]];
        const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
        std::printf("%-16s %s range [%.6g, %.6g]\n", names[i].c_str(), probes[i].key().c_str(), *mn, *mx);
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"devmod: deviation-modulation SR experiments"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth-data", "Write a deterministic synthetic SR dataset");
    s->add_option("--n", synth.n, "Number of images")->capture_default_str();
    s->add_option("--size", synth.size, "HR side length")->capture_default_str();
    s->add_option("--scale", synth.scale, "Downscaling factor")->capture_default_str();
    s->add_option("--seed", synth.seed, "Seed")->capture_default_str();
    s->add_option("--rgb-range", synth.rgb_range, "Pixel range")->capture_default_str();
    s->add_option("--out", synth.out, "Output directory")->required();

    std::string train_config, train_out;
    auto* t = app.add_subcommand("train", "Train from an experiment config");
    t->add_option("config", train_config, "Experiment JSON")->required();
    t->add_option("--out", train_out, "Override output_dir");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint on a dataset");
    e->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required();
    e->add_option("--data", ev.data, "Dataset directory")->required();
    e->add_flag("--self-ensemble", ev.self_ensemble, "Average the 8 dihedral transforms");
    e->add_option("--shave", ev.shave, "Border pixels excluded (default: scale)");
    e->add_option("--out", ev.out, "CSV path (default metrics.csv)");

    VerifyArgs ver;
    auto* v = app.add_subcommand("verify", "Identity, normalization and gradient checks");
    v->add_option("--seeds", ver.seeds, "Random trials per identity/normalization check")->capture_default_str();
    v->add_option("--grad-seeds", ver.grad_seeds, "Random trials per gradient check")->capture_default_str();
    v->add_option("--tol", ver.tol, "Identity tolerance")->capture_default_str();
    v->add_option("--suite", ver.suites, "identity, norm, grad, adadm")->delimiter(',');

    VerifyArgs gc;
    gc.suites = {"grad"};
    auto* g = app.add_subcommand("gradcheck", "Finite-difference checks of every layer and block");
    g->add_option("--seeds", gc.grad_seeds, "Random trials per check")->capture_default_str();
    g->add_option("--step", gc.grad_h, "Difference step")->capture_default_str();
    g->add_option("--tol", gc.grad_tol, "Relative tolerance")->capture_default_str();

    AnalyzeArgs an;
    auto* a = app.add_subcommand("analyze", "Deviation study and histograms");
    a->add_option("--checkpoint", an.checkpoints, "Checkpoint, optionally name=path (repeatable)");
    a->add_option("--toy-shared", an.toy_shared, "Toy checkpoint evaluated as T1, T2 and T3 with its weights");
    a->add_option("--data", an.data, "Dataset directory")->required();
    a->add_option("--probe", an.probe, "block<i>.<tap> or last.<tap>")->capture_default_str();
    a->add_option("--bins", an.bins, "Histogram bins")->capture_default_str();
    a->add_option("--out", an.out, "Output directory")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*s) return cmd_synth_data(synth);
        if (*t) return cmd_train(train_config, train_out);
        if (*e) return cmd_eval(ev);
        if (*v) return cmd_verify(ver);
        if (*g) return cmd_verify(gc);
        if (*a) return cmd_analyze(an);
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << '\n';
        return kConfig;
    } catch (const UsageError& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kConfig;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kOther;
    }
    return kOther;
}
