#include "devmod/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "devmod/parallel.hpp"

namespace devmod {

namespace fs = std::filesystem;

namespace {

Tensor as_y(const Tensor& img, double rgb_range) {
    if (img.shape().c == 3) return rgb_to_y(img, rgb_range);
    if (img.shape().c == 1) return img;
    throw ShapeError("metrics expect 1 or 3 channels, got " + to_string(img.shape()));
}

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
    if (!(a.shape() == b.shape())) {
        throw ShapeError(std::string(what) + ": size mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    if (a.shape().n != 1 || a.shape().c != 1) {
        throw ShapeError(std::string(what) + " expects single images of one channel, got " + to_string(a.shape()));
    }
}

// The interior of a (1,1,H,W) image as a row-major H' x W' vector.
std::vector<double> crop(const Tensor& x, int shave, int& h, int& w) {
    const Shape s = x.shape();
    h = s.h - 2 * shave;
    w = s.w - 2 * shave;
    if (shave < 0 || h <= 0 || w <= 0) {
        throw std::invalid_argument("shave " + std::to_string(shave) + " leaves nothing of " + to_string(s));
    }
    std::vector<double> out(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) out[static_cast<std::size_t>(y) * w + xx] = x.at(0, 0, y + shave, xx + shave);
    return out;
}

}  // namespace

Psnr psnr(const Tensor& a, const Tensor& b, int shave) {
    check_pair(a, b, "psnr");
    int h = 0, w = 0;
    const std::vector<double> pa = crop(a, shave, h, w);
    const std::vector<double> pb = crop(b, shave, h, w);
    double se = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) se += (pa[i] - pb[i]) * (pa[i] - pb[i]);
    const double mse = se / static_cast<double>(pa.size());
    if (mse == 0.0) return {0.0, true};
    return {10.0 * std::log10(255.0 * 255.0 / mse), false};
}

Psnr psnr_y(const Tensor& sr, const Tensor& hr, int shave, double rgb_range) {
    return psnr(as_y(sr, rgb_range), as_y(hr, rgb_range), shave);
}

double ssim(const Tensor& a, const Tensor& b, const SsimParams& p) {
    check_pair(a, b, "ssim");
    const int h = a.shape().h, w = a.shape().w, k = p.window;
    if (h < k || w < k) {
        throw std::invalid_argument("ssim: image " + to_string(a.shape()) + " is smaller than the " + std::to_string(k) +
                                    "x" + std::to_string(k) + " window");
    }
    std::vector<double> g(k);
    double gs = 0.0;
    for (int i = 0; i < k; ++i) {
        const double d = i - (k - 1) / 2.0;
        g[i] = std::exp(-d * d / (2.0 * p.sigma * p.sigma));
        gs += g[i];
    }
    for (double& v : g) v /= gs;

    const int oh = h - k + 1, ow = w - k + 1;
    auto da = a.data();
    auto db = b.data();
    // Five filtered maps: mu_a, mu_b, E[a^2], E[b^2], E[ab]; rows first.
    std::vector<double> rows(static_cast<std::size_t>(5) * h * ow, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s[5] = {0, 0, 0, 0, 0};
            for (int i = 0; i < k; ++i) {
                const double va = da[static_cast<std::size_t>(y) * w + x + i];
                const double vb = db[static_cast<std::size_t>(y) * w + x + i];
                s[0] += g[i] * va;
                s[1] += g[i] * vb;
                s[2] += g[i] * va * va;
                s[3] += g[i] * vb * vb;
                s[4] += g[i] * va * vb;
            }
            for (int m = 0; m < 5; ++m) rows[(static_cast<std::size_t>(m) * h + y) * ow + x] = s[m];
        }
    const double c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
    const double c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);
    double total = 0.0;
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s[5] = {0, 0, 0, 0, 0};
            for (int i = 0; i < k; ++i)
                for (int m = 0; m < 5; ++m) s[m] += g[i] * rows[(static_cast<std::size_t>(m) * h + y + i) * ow + x];
            const double va = s[2] - s[0] * s[0];
            const double vb = s[3] - s[1] * s[1];
            const double cov = s[4] - s[0] * s[1];
            total += ((2.0 * s[0] * s[1] + c1) * (2.0 * cov + c2)) /
                     ((s[0] * s[0] + s[1] * s[1] + c1) * (va + vb + c2));
        }
    return total / (static_cast<double>(oh) * ow);
}

double ssim_y(const Tensor& sr, const Tensor& hr, int shave, double rgb_range) {
    Tensor ya = as_y(sr, rgb_range), yb = as_y(hr, rgb_range);
    check_pair(ya, yb, "ssim");
    int h = 0, w = 0;
    std::vector<double> ca = crop(ya, shave, h, w);
    std::vector<double> cb = crop(yb, shave, h, w);
    return ssim(Tensor::from_data({1, 1, h, w}, std::move(ca)), Tensor::from_data({1, 1, h, w}, std::move(cb)));
}

Tensor self_ensemble(Model& m, const Tensor& lr) {
    NoGradGuard no_grad;
    Tensor acc;
    for (int t = 0; t < 8; ++t) {
        Tensor y = dihedral_inverse(m.forward(dihedral(lr, t), Mode::Eval), t);
        acc = t == 0 ? y : add(acc, y);
    }
    return scalar_mul(acc, 1.0 / 8.0);
}

MetricReport evaluate(Model& m, const std::vector<ImagePair>& pairs, int shave, bool use_self_ensemble,
                      const std::string& dataset) {
    const double range = m.config().rgb_range;
    MetricReport r;
    r.dataset = dataset;
    r.scale = m.config().scale;
    r.shave = shave < 0 ? r.scale : shave;
    r.self_ensemble = use_self_ensemble;
    std::vector<Tensor> srs;
    {
        NoGradGuard no_grad;
        for (const ImagePair& p : pairs) {
            if (p.scale != r.scale) {
                throw std::invalid_argument("image " + p.name + " has scale " + std::to_string(p.scale) +
                                            " but the model upsamples by " + std::to_string(r.scale));
            }
            Tensor sr = use_self_ensemble ? self_ensemble(m, p.lr) : m.forward(p.lr, Mode::Eval);
            srs.push_back(quantize(sr, range));
        }
    }
    r.images.resize(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t i) {
        r.images[i].name = pairs[i].name;
        r.images[i].psnr = psnr_y(srs[i], pairs[i].hr, r.shave, range);
        r.images[i].ssim = ssim_y(srs[i], pairs[i].hr, r.shave, range);
    });
    double sum_db = 0.0, sum_ssim = 0.0;
    for (const ImageMetric& im : r.images) {
        r.mean_psnr.infinite |= im.psnr.infinite;
        sum_db += im.psnr.db;
        sum_ssim += im.ssim;
    }
    if (!r.images.empty()) {
        r.mean_psnr.db = r.mean_psnr.infinite ? 0.0 : sum_db / static_cast<double>(r.images.size());
        r.mean_ssim = sum_ssim / static_cast<double>(r.images.size());
    }
    return r;
}

std::string format_psnr(const Psnr& p) {
    if (p.infinite) return "inf";
    std::ostringstream os;
    os << std::setprecision(10) << p.db;
    return os.str();
}

void write_metrics_csv(const fs::path& path, const MetricReport& r) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "image,psnr_db,ssim\n" << std::setprecision(10);
    for (const ImageMetric& im : r.images) out << im.name << ',' << format_psnr(im.psnr) << ',' << im.ssim << '\n';
    out << "mean," << format_psnr(r.mean_psnr) << ',' << r.mean_ssim << '\n';
}

// ---------------------------------------------------------------------------

Histogram deviation_histogram(const std::vector<double>& values, int bins, double lo, double hi) {
    if (values.empty()) throw std::invalid_argument("deviation_histogram: empty input");
    if (bins < 1) throw std::invalid_argument("deviation_histogram: bins must be >= 1");
    if (!(hi > lo)) hi = lo + 1.0;
    Histogram h;
    h.lo = lo;
    h.hi = hi;
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    for (double v : values) {
        long long b = static_cast<long long>(std::floor((v - lo) / (hi - lo) * bins));
        b = std::clamp<long long>(b, 0, bins - 1);
        ++h.counts[static_cast<std::size_t>(b)];
    }
    return h;
}

Histogram deviation_histogram(const std::vector<double>& values, int bins) {
    if (values.empty()) throw std::invalid_argument("deviation_histogram: empty input");
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    return deviation_histogram(values, bins, *mn, *mx);
}

void write_histogram_csv(const fs::path& path, const Histogram& h, const std::string& label) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << (label.empty() ? "" : "series,") << "bin_lo,bin_hi,count\n" << std::setprecision(10);
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        if (!label.empty()) out << label << ',';
        out << h.lo + i * h.bin_width() << ',' << h.lo + (i + 1) * h.bin_width() << ',' << h.counts[i] << '\n';
    }
}

std::vector<DeviationRow> run_deviation_study(const std::vector<NamedModel>& models,
                                              const std::vector<ImagePair>& images, int probe_block) {
    std::vector<DeviationRow> rows;
    NoGradGuard no_grad;
    for (const NamedModel& nm : models) {
        Model& m = *nm.model;
        const int nb = static_cast<int>(m.body.size());
        const int probe = probe_block < 0 ? nb - 1 : probe_block;
        if (probe >= nb) {
            throw std::invalid_argument("probe block " + std::to_string(probe) + " is out of range for model " +
                                        nm.name + " with " + std::to_string(nb) + " blocks");
        }
        const bool adadm = uses_adadm(m.config().block.kind);
        for (const ImagePair& img : images) {
            std::vector<BlockTaps> taps;
            m.forward(img.lr, Mode::Eval, &taps);
            for (int b = 0; b < nb; ++b) {
                if (!adadm && b != probe) continue;
                DeviationRow row;
                row.model = nm.name;
                row.image = img.name;
                row.block = b;
                row.std = std_over(taps[b].residual_pre_add, AxisSet::chw(), 0.0).item();
                row.input_std = std_over(taps[b].block_input, AxisSet::chw(), 0.0).item();
                row.modulation_factor = adadm ? taps[b].modulation_factor.item() : std::nan("");
                rows.push_back(row);
            }
        }
    }
    return rows;
}

void write_deviation_csv(const fs::path& path, const std::vector<DeviationRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "model,image,block,std,modulation_factor\n" << std::setprecision(17);
    for (const DeviationRow& r : rows) {
        out << r.model << ',' << r.image << ',' << r.block << ',' << r.std << ',';
        if (!std::isnan(r.modulation_factor)) out << r.modulation_factor;
        out << '\n';
    }
}

}  // namespace devmod
