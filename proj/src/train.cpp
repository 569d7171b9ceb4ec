#include "devmod/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "devmod/config.hpp"
#include "devmod/metrics.hpp"
#include "devmod/rng.hpp"

namespace devmod {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("train config: " + what);
    };
    need(batch > 0, "batch must be positive");
    need(patch > 0, "patch must be positive");
    need(lr0 > 0.0, "lr0 must be positive");
    need(halve_every > 0, "halve_every must be positive");
    need(epochs >= 0, "epochs must be >= 0");
    need(steps_per_epoch >= 0, "steps_per_epoch must be >= 0");
    need(beta1 > 0.0 && beta1 < 1.0, "beta1 must be in (0,1)");
    need(beta2 > 0.0 && beta2 < 1.0, "beta2 must be in (0,1)");
    need(adam_eps > 0.0, "adam_eps must be positive");
    need(divergence_threshold >= 0.0, "divergence_threshold must be >= 0");
    need(divergence_factor > 0.0, "divergence_factor must be positive");
    need(divergence_patience > 0, "divergence_patience must be positive");
    need(checkpoint_every >= 0, "checkpoint_every must be >= 0");
}

TrainConfig TrainConfig::desk() {
    TrainConfig c;
    c.batch = 4;
    c.patch = 24;
    c.epochs = 50;
    c.steps_per_epoch = 50;
    c.halve_every = 10;
    return c;
}

json to_json(const TrainConfig& c) {
    return {{"batch", c.batch},
            {"patch", c.patch},
            {"lr0", c.lr0},
            {"halve_every", c.halve_every},
            {"epochs", c.epochs},
            {"steps_per_epoch", c.steps_per_epoch},
            {"betas", {c.beta1, c.beta2}},
            {"adam_eps", c.adam_eps},
            {"seed", c.seed},
            {"divergence_threshold", c.divergence_threshold},
            {"divergence_factor", c.divergence_factor},
            {"divergence_patience", c.divergence_patience},
            {"checkpoint_every", c.checkpoint_every},
            {"record_wall_time", c.record_wall_time}};
}

TrainConfig train_config_from_json(const json& j, const std::string& path) {
    StrictReader r(j, path);
    TrainConfig c;
    std::string preset;
    if (r.get("preset", preset)) {
        if (preset == "desk") c = TrainConfig::desk();
        else if (preset != "full") throw ConfigError(r.path_of("preset") + ": unknown preset '" + preset + "' (desk, full)");
    }
    r.get("batch", c.batch);
    r.get("patch", c.patch);
    r.get("lr0", c.lr0);
    r.get("halve_every", c.halve_every);
    r.get("epochs", c.epochs);
    r.get("steps_per_epoch", c.steps_per_epoch);
    std::vector<double> betas;
    if (r.get("betas", betas)) {
        config_check(betas.size() == 2, r.path_of("betas"), "expected [beta1, beta2]");
        c.beta1 = betas[0];
        c.beta2 = betas[1];
    }
    r.get("adam_eps", c.adam_eps);
    r.get("seed", c.seed);
    r.get("divergence_threshold", c.divergence_threshold);
    r.get("divergence_factor", c.divergence_factor);
    r.get("divergence_patience", c.divergence_patience);
    r.get("checkpoint_every", c.checkpoint_every);
    r.get("record_wall_time", c.record_wall_time);
    r.finish();
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError((path.empty() ? std::string("train") : path) + ": " + e.what());
    }
    return c;
}

double lr_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw std::invalid_argument("lr_at: epoch must be >= 0");
    return cfg.lr0 * std::pow(0.5, epoch / cfg.halve_every);
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
    if (!(pred.shape() == target.shape())) {
        throw ShapeError("l1_loss: shape mismatch " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
    }
    auto p = pred.data();
    auto t = target.data();
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - t[i]);
    const double count = static_cast<double>(p.size());
    return make_op("l1_loss", {1, 1, 1, 1}, {s / count}, {pred, target}, [pred, target, count](GradContext& ctx) {
        const double g = ctx.grad_out[0] / count;
        auto p = pred.data();
        auto t = target.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double d = p[i] - t[i];
            const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            if (ctx.wants(0)) ctx.grad_in[0][i] += g * sgn;
            if (ctx.wants(1)) ctx.grad_in[1][i] -= g * sgn;
        }
    });
}

// ---------------------------------------------------------------------------

Adam::Adam(std::vector<NamedParam> params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (NamedParam& p : params) {
        if (!p.trainable) continue;
        m_.emplace_back(p.tensor.shape().numel(), 0.0);
        v_.emplace_back(p.tensor.shape().numel(), 0.0);
        params_.push_back(std::move(p));
    }
}

void Adam::step(double lr) {
    for (const NamedParam& p : params_) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) {
            if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in parameter " + p.name);
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = params_[k].tensor;
        auto& m = m_[k];
        auto& v = v_[k];
        auto w = p.mutable_data();
        const bool has = p.has_grad();
        std::span<const double> g = has ? p.grad() : std::span<const double>{};
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = has ? g[i] : 0.0;
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
        p.zero_grad();
    }
}

// ---------------------------------------------------------------------------

namespace {

Tensor crop(const Tensor& img, int x, int y, int side) {
    const Shape s = img.shape();
    std::vector<double> out(static_cast<std::size_t>(s.c) * side * side);
    std::size_t i = 0;
    for (int c = 0; c < s.c; ++c)
        for (int h = 0; h < side; ++h)
            for (int w = 0; w < side; ++w) out[i++] = img.at(0, c, y + h, x + w);
    return Tensor::from_data({1, s.c, side, side}, std::move(out));
}

}  // namespace

std::pair<Tensor, Tensor> crop_patch(const Tensor& hr, const Tensor& lr, int patch, int scale, int x, int y,
                                     int transform) {
    const Shape ls = lr.shape(), hs = hr.shape();
    if (ls.h < patch || ls.w < patch) {
        throw std::invalid_argument("LR image " + to_string(ls) + " is smaller than patch " + std::to_string(patch));
    }
    if (hs.h != ls.h * scale || hs.w != ls.w * scale) {
        throw std::invalid_argument("HR " + to_string(hs) + " is not LR " + to_string(ls) + " times " + std::to_string(scale));
    }
    if (x < 0 || y < 0 || x + patch > ls.w || y + patch > ls.h) throw std::invalid_argument("patch origin out of range");
    Tensor l = crop(lr, x, y, patch);
    Tensor h = crop(hr, x * scale, y * scale, patch * scale);
    return {dihedral(l, transform), dihedral(h, transform)};
}

std::pair<Tensor, Tensor> sample_patch(const Tensor& hr, const Tensor& lr, int patch, int scale, Rng& rng) {
    const Shape ls = lr.shape();
    if (ls.h < patch || ls.w < patch) {
        throw std::invalid_argument("LR image " + to_string(ls) + " is smaller than patch " + std::to_string(patch));
    }
    const int x = rng.uniform_int(0, ls.w - patch);
    const int y = rng.uniform_int(0, ls.h - patch);
    const int t = rng.uniform_int(0, 7);
    return crop_patch(hr, lr, patch, scale, x, y, t);
}

std::int64_t patch_capacity(const std::vector<ImagePair>& pairs, int patch) {
    std::int64_t n = 0;
    for (const ImagePair& p : pairs) n += static_cast<std::int64_t>(p.lr.shape().h / patch) * (p.lr.shape().w / patch);
    return n;
}

// ---------------------------------------------------------------------------

namespace {

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string TrainLog::csv() const {
    std::ostringstream os;
    os << "epoch,lr,train_loss,val_psnr,wall_seconds\n";
    for (const TrainRow& r : rows) {
        os << r.epoch << ',' << num(r.lr) << ',' << (r.train_loss ? num(*r.train_loss) : "") << ','
           << (!r.val_psnr ? std::string() : r.val_psnr->infinite ? std::string("inf") : num(r.val_psnr->db)) << ',' << num(r.wall_seconds) << '\n';
    }
    return os.str();
}

void TrainLog::write_csv(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << csv();
}

TrainLog train(Model& model, const std::vector<ImagePair>& train_set, const std::vector<ImagePair>& val_set,
               const TrainConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("train: training set is empty");
    const int scale = model.config().scale;
    for (const auto* set : {&train_set, &val_set}) {
        for (const ImagePair& p : *set) {
            if (p.scale != scale) {
                throw std::invalid_argument("train: image " + p.name + " has scale " + std::to_string(p.scale) +
                                            " but the model upsamples by " + std::to_string(scale));
            }
        }
    }
    int steps_per_epoch = cfg.steps_per_epoch;
    if (steps_per_epoch == 0) {
        const std::int64_t cap = patch_capacity(train_set, cfg.patch);
        if (cap == 0) throw std::invalid_argument("train: no image is as large as the patch");
        steps_per_epoch = static_cast<int>((cap + cfg.batch - 1) / cfg.batch);
    }
    if (!out_dir.empty()) fs::create_directories(out_dir);

    const auto t0 = std::chrono::steady_clock::now();
    auto wall = [&] {
        if (!cfg.record_wall_time) return 0.0;
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    auto val_psnr = [&]() -> std::optional<Psnr> {
        if (val_set.empty()) return std::nullopt;
        return evaluate(model, val_set).mean_psnr;
    };

    TrainLog log;
    log.rows.push_back(TrainRow{0, lr_at(0, cfg), std::nullopt, val_psnr(), wall()});

    Rng rng = Rng(cfg.seed).fork(0x7a11);
    Adam adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    double initial_loss = -1.0;
    int above = 0;
    auto diverge = [&](const std::string& why) {
        log.status = TrainStatus::Diverged;
        log.reason = why;
    };

    for (int epoch = 0; epoch < cfg.epochs && log.status == TrainStatus::Completed; ++epoch) {
        const double lr = lr_at(epoch, cfg);
        double loss_sum = 0.0;
        int done = 0;
        for (int s = 0; s < steps_per_epoch; ++s) {
            std::vector<Tensor> lrs, hrs;
            for (int b = 0; b < cfg.batch; ++b) {
                const ImagePair& p = train_set[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(train_set.size()) - 1))];
                auto [l, h] = sample_patch(p.hr, p.lr, cfg.patch, scale, rng);
                lrs.push_back(std::move(l));
                hrs.push_back(std::move(h));
            }
            double loss_value = 0.0;
            try {
                Graph graph;
                Tensor loss = l1_loss(model.forward(stack_samples(lrs), Mode::Train), stack_samples(hrs));
                loss_value = loss.item();
                if (!std::isfinite(loss_value)) {
                    diverge("non-finite loss at step " + std::to_string(log.steps + 1));
                } else {
                    graph.backward(loss);
                }
            } catch (const std::domain_error& e) {
                diverge(std::string("numerical failure at step ") + std::to_string(log.steps + 1) + ": " + e.what());
            }
            if (log.status == TrainStatus::Diverged) break;
            try {
                adam.step(lr);
            } catch (const NonFiniteError& e) {
                diverge(std::string(e.what()) + " at step " + std::to_string(log.steps + 1));
                break;
            }
            ++log.steps;
            ++done;
            log.step_losses.push_back(loss_value);
            loss_sum += loss_value;
            if (initial_loss < 0.0) initial_loss = loss_value;
            if (cfg.divergence_threshold > 0.0) {
                if (loss_value > cfg.divergence_threshold) {
                    diverge("loss " + num(loss_value) + " exceeded threshold " + num(cfg.divergence_threshold) +
                            " at step " + std::to_string(log.steps));
                    break;
                }
            } else {
                above = loss_value > cfg.divergence_factor * initial_loss ? above + 1 : 0;
                if (above >= cfg.divergence_patience) {
                    diverge("loss above " + num(cfg.divergence_factor) + "x the initial loss for " +
                            std::to_string(above) + " consecutive steps (step " + std::to_string(log.steps) + ")");
                    break;
                }
            }
        }
        TrainRow row{epoch + 1, lr, std::nullopt, std::nullopt, 0.0};
        if (done > 0) row.train_loss = loss_sum / done;
        if (log.status == TrainStatus::Completed) row.val_psnr = val_psnr();
        row.wall_seconds = wall();
        log.rows.push_back(row);
        if (!out_dir.empty() && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
            log.status == TrainStatus::Completed) {
            save_checkpoint(model, out_dir / ("epoch_" + std::to_string(epoch + 1)));
        }
    }
    if (!out_dir.empty()) {
        if (log.status == TrainStatus::Completed) save_checkpoint(model, out_dir / "final");
        log.write_csv(out_dir / "log.csv");
    }
    return log;
}

}  // namespace devmod
