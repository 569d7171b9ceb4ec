#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "devmod/tensor.hpp"

namespace devmod {

class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// hr is (1,3,H,W), lr is (1,3,H/s,W/s), both in the same rgb_range.
struct ImagePair {
    Tensor hr;
    Tensor lr;
    int scale = 1;
    std::string name;
};

// ---------------------------------------------------------------------------
// PNG

/// 8-bit RGB (or palette) PNG -> (1,3,H,W) with values v / 255 * rgb_range.
Tensor load_png(const std::filesystem::path& path, double rgb_range = 255.0);
/// (1,3,H,W) in rgb_range -> 8-bit RGB PNG (clamped, rounded).
void save_png(const std::filesystem::path& path, const Tensor& img, double rgb_range = 255.0);

/// Rounds values to the 8-bit grid of rgb_range and clamps to [0, rgb_range].
Tensor quantize(const Tensor& img, double rgb_range);

// ---------------------------------------------------------------------------
// Color

/// BT.601 luma in the 0..255 convention for an image in rgb_range:
/// video range Y = 16 + (65.481 R + 128.553 G + 24.966 B) with R, G, B in
/// [0,1]; full range Y = 0.299 R + 0.587 G + 0.114 B scaled to 255.
/// (N,3,H,W) -> (N,1,H,W).
Tensor rgb_to_y(const Tensor& img, double rgb_range = 255.0, bool full_range = false);

// ---------------------------------------------------------------------------
// Resampling

/// Weights and source indices along one axis for imresize-style bicubic
/// resampling (a = -0.5, kernel widened by 1/scale when downscaling,
/// symmetric boundary, weights normalized to sum 1).
struct ResizeAxis {
    int in_size = 0;
    int out_size = 0;
    int taps = 0;
    std::vector<int> index;      // out_size * taps
    std::vector<double> weight;  // out_size * taps
};

ResizeAxis resize_axis(int in_size, int num, int den);

double cubic_kernel(double x);

/// Separable bicubic resampling by num/den; output dims floor(dim * num / den).
Tensor bicubic_resize(const Tensor& img, int num, int den);

// ---------------------------------------------------------------------------
// Datasets

/// n procedural HR images (edges, gratings, checkerboards, gradients)
/// quantized to 8 bits; LR by bicubic downscaling, also quantized.
std::vector<ImagePair> synth_dataset(int n, int hr_size, int scale, std::uint64_t seed, double rgb_range = 255.0);

/// <root>/HR/<name>.png and <root>/LR_bicubic/X<s>/<name>x<s>.png
void write_dataset(const std::filesystem::path& root, const std::vector<ImagePair>& pairs, double rgb_range = 255.0);
/// Reads every HR image (sorted by name) with its LR counterpart.
std::vector<ImagePair> read_dataset(const std::filesystem::path& root, int scale, double rgb_range = 255.0);

/// Dihedral transform t in [0, 8): rotate by 90 * (t % 4) degrees
/// counter-clockwise, preceded by a horizontal flip when t >= 4.
Tensor dihedral(const Tensor& x, int t);
/// Inverse of dihedral(., t).
Tensor dihedral_inverse(const Tensor& x, int t);

}  // namespace devmod
