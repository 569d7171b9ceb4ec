#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "devmod/data.hpp"
#include "devmod/models.hpp"

namespace devmod {

/// PSNR in dB; identical inputs give infinite = true and db = 0.
struct Psnr {
    double db = 0.0;
    bool infinite = false;
};

/// 10 log10(255^2 / MSE) between two single-channel images in the 0..255
/// convention, after removing `shave` pixels at every border.
Psnr psnr(const Tensor& a, const Tensor& b, int shave);
/// psnr of rgb_to_y(sr) and rgb_to_y(hr); single-channel inputs are taken
/// as Y already.
Psnr psnr_y(const Tensor& sr, const Tensor& hr, int shave, double rgb_range = 255.0);

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double data_range = 255.0;
};

/// Mean SSIM over all valid window positions of two single-channel images.
double ssim(const Tensor& a, const Tensor& b, const SsimParams& p = {});
/// ssim on the shaved Y channels.
double ssim_y(const Tensor& sr, const Tensor& hr, int shave, double rgb_range = 255.0);

/// Mean of the 8 dihedral transforms of the input, each output mapped back.
Tensor self_ensemble(Model& m, const Tensor& lr);

struct ImageMetric {
    std::string name;
    Psnr psnr;
    double ssim = 0.0;
};

struct MetricReport {
    std::string dataset;
    int scale = 0;
    int shave = 0;
    bool self_ensemble = false;
    std::vector<ImageMetric> images;
    /// Mean over images; infinite when any image is.
    Psnr mean_psnr;
    double mean_ssim = 0.0;
};

/// Super-resolves every LR image in eval mode, quantizes the result to the
/// 8-bit grid and scores it against HR. shave < 0 selects shave = scale.
MetricReport evaluate(Model& m, const std::vector<ImagePair>& pairs, int shave = -1, bool use_self_ensemble = false,
                      const std::string& dataset = "");

/// Columns image, psnr_db, ssim; a final "mean" row. Infinite PSNR is "inf".
void write_metrics_csv(const std::filesystem::path& path, const MetricReport& r);

std::string format_psnr(const Psnr& p);

// ---------------------------------------------------------------------------
// Deviation analysis

struct Histogram {
    double lo = 0.0;
    double hi = 0.0;
    std::vector<std::size_t> counts;
    [[nodiscard]] double bin_width() const { return (hi - lo) / static_cast<double>(counts.size()); }
};

/// Fixed-width bins over [lo, hi]; values outside land in the end bins.
Histogram deviation_histogram(const std::vector<double>& values, int bins, double lo, double hi);
/// Range taken from the data.
Histogram deviation_histogram(const std::vector<double>& values, int bins);

/// Columns bin_lo, bin_hi, count.
void write_histogram_csv(const std::filesystem::path& path, const Histogram& h, const std::string& label = "");

struct DeviationRow {
    std::string model;
    std::string image;
    int block = 0;
    /// std over (C,H,W) of the block's residual feature before the addition.
    double std = 0.0;
    /// Only for blocks with AdaDM; NaN otherwise.
    double modulation_factor = 0.0;
    /// std over (C,H,W) of the block input.
    double input_std = 0.0;
};

struct NamedModel {
    std::string name;
    Model* model = nullptr;
};

/// For every model and image: the std of the probed block's residual
/// feature, and for AdaDM models additionally every block's factor and
/// residual std. Rows are ordered by (model, image, block).
std::vector<DeviationRow> run_deviation_study(const std::vector<NamedModel>& models,
                                              const std::vector<ImagePair>& images, int probe_block);

/// Columns model, image, block, std, modulation_factor (empty when absent).
void write_deviation_csv(const std::filesystem::path& path, const std::vector<DeviationRow>& rows);

}  // namespace devmod
