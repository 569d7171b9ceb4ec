#include "devmod/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "devmod/rng.hpp"

namespace devmod {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNG

namespace {

std::string describe_format(png_uint_32 format) {
    std::string s = (format & PNG_FORMAT_FLAG_COLOR) ? "RGB" : "grayscale";
    if (format & PNG_FORMAT_FLAG_ALPHA) s += "+alpha";
    if (format & PNG_FORMAT_FLAG_COLORMAP) s += " (palette)";
    return s;
}

}  // namespace

Tensor load_png(const fs::path& path, double rgb_range) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw ImageError("cannot read PNG " + path.string() + ": " + image.message);
    }
    const png_uint_32 src = image.format;
    if (!(src & PNG_FORMAT_FLAG_COLOR) || (src & PNG_FORMAT_FLAG_ALPHA)) {
        png_image_free(&image);
        throw ImageError("unsupported PNG color type " + describe_format(src) + " in " + path.string() +
                         " (expected 8-bit RGB)");
    }
    if (src & PNG_FORMAT_FLAG_LINEAR) {
        png_image_free(&image);
        throw ImageError("unsupported PNG bit depth 16 in " + path.string() + " (expected 8)");
    }
    image.format = PNG_FORMAT_RGB;
    const int w = static_cast<int>(image.width);
    const int h = static_cast<int>(image.height);
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw ImageError("cannot decode PNG " + path.string() + ": " + msg);
    }
    std::vector<double> v(static_cast<std::size_t>(3) * h * w);
    const double k = rgb_range / 255.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                v[(static_cast<std::size_t>(c) * h + y) * w + x] = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] * k;
            }
    return Tensor::from_data({1, 3, h, w}, std::move(v));
}

void save_png(const fs::path& path, const Tensor& img, double rgb_range) {
    const Shape s = img.shape();
    if (s.n != 1 || s.c != 3) throw ShapeError("save_png expects (1,3,H,W), got " + to_string(s));
    std::vector<png_byte> buf(static_cast<std::size_t>(3) * s.h * s.w);
    auto d = img.data();
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = d[(static_cast<std::size_t>(c) * s.h + y) * s.w + x] * 255.0 / rgb_range;
                buf[(static_cast<std::size_t>(y) * s.w + x) * 3 + c] =
                    static_cast<png_byte>(std::clamp(std::lround(v), 0L, 255L));
            }
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(s.w);
    image.height = static_cast<png_uint_32>(s.h);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
        throw ImageError("cannot write PNG " + path.string() + ": " + image.message);
    }
}

Tensor quantize(const Tensor& img, double rgb_range) {
    std::vector<double> v = img.to_vector();
    for (double& x : v) x = std::clamp(std::round(x * 255.0 / rgb_range), 0.0, 255.0) * rgb_range / 255.0;
    return Tensor::from_data(img.shape(), std::move(v));
}

// ---------------------------------------------------------------------------
// Color

Tensor rgb_to_y(const Tensor& img, double rgb_range, bool full_range) {
    const Shape s = img.shape();
    if (s.c != 3) throw ShapeError("rgb_to_y expects 3 channels, got " + to_string(s));
    const double kr = full_range ? 0.299 * 255.0 : 65.481;
    const double kg = full_range ? 0.587 * 255.0 : 128.553;
    const double kb = full_range ? 0.114 * 255.0 : 24.966;
    const double offset = full_range ? 0.0 : 16.0;
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    auto d = img.data();
    std::vector<double> y(static_cast<std::size_t>(s.n) * plane);
    for (int n = 0; n < s.n; ++n) {
        const double* r = d.data() + static_cast<std::size_t>(n) * 3 * plane;
        const double* g = r + plane;
        const double* b = g + plane;
        for (std::size_t i = 0; i < plane; ++i) {
            y[n * plane + i] = offset + (kr * r[i] + kg * g[i] + kb * b[i]) / rgb_range;
        }
    }
    return Tensor::from_data({s.n, 1, s.h, s.w}, std::move(y));
}

// ---------------------------------------------------------------------------
// Resampling

double cubic_kernel(double x) {
    const double ax = std::abs(x);
    const double ax2 = ax * ax;
    const double ax3 = ax2 * ax;
    if (ax <= 1.0) return 1.5 * ax3 - 2.5 * ax2 + 1.0;
    if (ax <= 2.0) return -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0;
    return 0.0;
}

ResizeAxis resize_axis(int in_size, int num, int den) {
    if (den == 0) throw std::invalid_argument("bicubic_resize: zero denominator");
    if (num <= 0 || den < 0 || in_size <= 0) throw std::invalid_argument("bicubic_resize: scale and size must be positive");
    const double scale = static_cast<double>(num) / den;
    ResizeAxis ax;
    ax.in_size = in_size;
    ax.out_size = static_cast<int>(static_cast<long long>(in_size) * num / den);
    if (ax.out_size <= 0) throw std::invalid_argument("bicubic_resize: output would be empty");
    const bool down = scale < 1.0;
    const double width = down ? 4.0 / scale : 4.0;
    ax.taps = static_cast<int>(std::ceil(width)) + 2;
    ax.index.resize(static_cast<std::size_t>(ax.out_size) * ax.taps);
    ax.weight.resize(ax.index.size());
    for (int o = 0; o < ax.out_size; ++o) {
        // 1-based coordinates, as in the reference implementation.
        const double u = (o + 1) / scale + 0.5 * (1.0 - 1.0 / scale);
        const double left = std::floor(u - width / 2.0);
        double total = 0.0;
        for (int t = 0; t < ax.taps; ++t) {
            const double j = left + t;
            const double d = u - j;
            const double wgt = down ? scale * cubic_kernel(scale * d) : cubic_kernel(d);
            // Symmetric extension: ..., 2, 1, 1, 2, ..., n, n, n-1, ...
            long long idx = static_cast<long long>(j) - 1;
            const long long period = 2LL * in_size;
            idx = ((idx % period) + period) % period;
            if (idx >= in_size) idx = period - 1 - idx;
            ax.index[o * ax.taps + t] = static_cast<int>(idx);
            ax.weight[o * ax.taps + t] = wgt;
            total += wgt;
        }
        for (int t = 0; t < ax.taps; ++t) ax.weight[o * ax.taps + t] /= total;
    }
    return ax;
}

Tensor bicubic_resize(const Tensor& img, int num, int den) {
    const Shape s = img.shape();
    const ResizeAxis ah = resize_axis(s.h, num, den);
    const ResizeAxis aw = resize_axis(s.w, num, den);
    const int oh = ah.out_size;
    const int ow = aw.out_size;
    auto src = img.data();
    std::vector<double> mid(static_cast<std::size_t>(s.n) * s.c * oh * s.w, 0.0);
    std::vector<double> out(static_cast<std::size_t>(s.n) * s.c * oh * ow, 0.0);
    for (int p = 0; p < s.n * s.c; ++p) {
        const double* in = src.data() + static_cast<std::size_t>(p) * s.h * s.w;
        double* m = mid.data() + static_cast<std::size_t>(p) * oh * s.w;
        for (int o = 0; o < oh; ++o) {
            for (int t = 0; t < ah.taps; ++t) {
                const double wgt = ah.weight[o * ah.taps + t];
                if (wgt == 0.0) continue;
                const double* row = in + static_cast<std::size_t>(ah.index[o * ah.taps + t]) * s.w;
                for (int x = 0; x < s.w; ++x) m[o * s.w + x] += wgt * row[x];
            }
        }
        double* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            for (int o = 0; o < ow; ++o) {
                double acc = 0.0;
                for (int t = 0; t < aw.taps; ++t) acc += aw.weight[o * aw.taps + t] * m[y * s.w + aw.index[o * aw.taps + t]];
                dst[y * ow + o] = acc;
            }
        }
    }
    return Tensor::from_data({s.n, s.c, oh, ow}, std::move(out));
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

struct Color {
    double v[3];
};

Color random_color(Rng& rng) { return {{rng.uniform(), rng.uniform(), rng.uniform()}}; }

void paint(std::vector<double>& img, int size, int x, int y, const Color& c, double alpha) {
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    for (int k = 0; k < 3; ++k) {
        double& p = img[k * plane + static_cast<std::size_t>(y) * size + x];
        p = (1.0 - alpha) * p + alpha * c.v[k];
    }
}

std::vector<double> synth_image(int size, Rng& rng) {
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    std::vector<double> img(3 * plane);
    // Smooth background gradient.
    const Color base = random_color(rng);
    const double gx = rng.uniform(-0.6, 0.6), gy = rng.uniform(-0.6, 0.6);
    for (int k = 0; k < 3; ++k)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                img[k * plane + static_cast<std::size_t>(y) * size + x] =
                    base.v[k] + (gx * (x - size / 2.0) + gy * (y - size / 2.0)) / size;
            }
    const int layers = rng.uniform_int(3, 6);
    for (int l = 0; l < layers; ++l) {
        const int kind = rng.uniform_int(0, 2);
        const Color c = random_color(rng);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        const double ct = std::cos(theta), st = std::sin(theta);
        if (kind == 0) {
            // Oriented edge: a half plane of solid color.
            const double off = rng.uniform(-0.3, 0.3) * size;
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const double d = ct * (x - size / 2.0) + st * (y - size / 2.0) - off;
                    if (d > 0) paint(img, size, x, y, c, 0.8);
                }
        } else if (kind == 1) {
            // Sinusoidal grating inside a disc.
            const double period = rng.uniform(3.0, 16.0);
            const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double cx = rng.uniform(0.2, 0.8) * size, cy = rng.uniform(0.2, 0.8) * size;
            const double radius = rng.uniform(0.2, 0.5) * size;
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    if (std::hypot(x - cx, y - cy) > radius) continue;
                    const double s = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * (ct * x + st * y) / period + phase);
                    paint(img, size, x, y, c, 0.9 * s);
                }
        } else {
            // Checkerboard inside a rectangle.
            const int cell = rng.uniform_int(2, 8);
            const int x0 = rng.uniform_int(0, size / 2);
            const int y0 = rng.uniform_int(0, size / 2);
            const int x1 = x0 + size / 4 + rng.uniform_int(0, size / 2);
            const int y1 = y0 + size / 4 + rng.uniform_int(0, size / 2);
            for (int y = y0; y < std::min(y1, size); ++y)
                for (int x = x0; x < std::min(x1, size); ++x) {
                    if (((x - x0) / cell + (y - y0) / cell) % 2 == 0) paint(img, size, x, y, c, 1.0);
                }
        }
    }
    for (double& v : img) v = std::clamp(v, 0.0, 1.0);
    return img;
}

std::string synth_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "synth_%04d", i);
    return buf;
}

}  // namespace

std::vector<ImagePair> synth_dataset(int n, int hr_size, int scale, std::uint64_t seed, double rgb_range) {
    if (n < 0) throw std::invalid_argument("synth_dataset: n must be >= 0");
    if (scale < 1 || hr_size <= 0 || hr_size % scale != 0) {
        throw std::invalid_argument("synth_dataset: size " + std::to_string(hr_size) + " is not divisible by scale " +
                                    std::to_string(scale));
    }
    std::vector<ImagePair> out;
    Rng root(seed);
    for (int i = 0; i < n; ++i) {
        Rng rng = root.fork(static_cast<std::uint64_t>(i));
        std::vector<double> v = synth_image(hr_size, rng);
        for (double& x : v) x *= rgb_range;
        ImagePair p;
        p.hr = quantize(Tensor::from_data({1, 3, hr_size, hr_size}, std::move(v)), rgb_range);
        p.lr = quantize(bicubic_resize(p.hr, 1, scale), rgb_range);
        p.scale = scale;
        p.name = synth_name(i);
        out.push_back(std::move(p));
    }
    return out;
}

void write_dataset(const fs::path& root, const std::vector<ImagePair>& pairs, double rgb_range) {
    for (const ImagePair& p : pairs) {
        const fs::path lr_dir = root / "LR_bicubic" / ("X" + std::to_string(p.scale));
        fs::create_directories(root / "HR");
        fs::create_directories(lr_dir);
        save_png(root / "HR" / (p.name + ".png"), p.hr, rgb_range);
        save_png(lr_dir / (p.name + "x" + std::to_string(p.scale) + ".png"), p.lr, rgb_range);
    }
}

std::vector<ImagePair> read_dataset(const fs::path& root, int scale, double rgb_range) {
    const fs::path hr_dir = root / "HR";
    const fs::path lr_dir = root / "LR_bicubic" / ("X" + std::to_string(scale));
    if (!fs::is_directory(hr_dir)) throw ImageError("dataset has no HR directory: " + hr_dir.string());
    if (!fs::is_directory(lr_dir)) throw ImageError("dataset has no LR directory for scale " + std::to_string(scale) + ": " + lr_dir.string());
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(hr_dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().stem().string());
    }
    std::sort(names.begin(), names.end());
    std::vector<ImagePair> out;
    for (const std::string& name : names) {
        ImagePair p;
        p.name = name;
        p.scale = scale;
        p.hr = load_png(hr_dir / (name + ".png"), rgb_range);
        const fs::path lr_path = lr_dir / (name + "x" + std::to_string(scale) + ".png");
        if (!fs::exists(lr_path)) throw ImageError("missing LR image " + lr_path.string());
        p.lr = load_png(lr_path, rgb_range);
        const Shape hs = p.hr.shape(), ls = p.lr.shape();
        if (hs.h != ls.h * scale || hs.w != ls.w * scale) {
            throw ImageError("image " + name + ": HR " + to_string(hs) + " is not LR " + to_string(ls) + " times " +
                             std::to_string(scale));
        }
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dihedral group

namespace {

// out[i] = in[src[i]]
Tensor gather(const Tensor& x, Shape out_shape, std::vector<std::size_t> src, const char* name) {
    auto in = x.data();
    std::vector<double> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = in[src[i]];
    return make_op(name, out_shape, std::move(out), {x}, [src = std::move(src)](GradContext& ctx) {
        auto g = ctx.grad_out;
        auto gi = ctx.grad_in[0];
        for (std::size_t i = 0; i < src.size(); ++i) gi[src[i]] += g[i];
    });
}

Tensor flip_w(const Tensor& x) {
    const Shape s = x.shape();
    std::vector<std::size_t> src(s.numel());
    std::size_t i = 0;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h)
                for (int w = 0; w < s.w; ++w) src[i++] = s.index(n, c, h, s.w - 1 - w);
    return gather(x, s, std::move(src), "flip");
}

// 90 degrees counter-clockwise: out[i][j] = in[j][W-1-i].
Tensor rot90(const Tensor& x) {
    const Shape s = x.shape();
    const Shape o{s.n, s.c, s.w, s.h};
    std::vector<std::size_t> src(s.numel());
    std::size_t i = 0;
    for (int n = 0; n < o.n; ++n)
        for (int c = 0; c < o.c; ++c)
            for (int h = 0; h < o.h; ++h)
                for (int w = 0; w < o.w; ++w) src[i++] = s.index(n, c, w, s.w - 1 - h);
    return gather(x, o, std::move(src), "rot90");
}

}  // namespace

Tensor dihedral(const Tensor& x, int t) {
    if (t < 0 || t >= 8) throw std::invalid_argument("dihedral index must be in [0, 8)");
    Tensor y = t >= 4 ? flip_w(x) : x;
    for (int k = 0; k < t % 4; ++k) y = rot90(y);
    return y;
}

Tensor dihedral_inverse(const Tensor& x, int t) {
    if (t < 0 || t >= 8) throw std::invalid_argument("dihedral index must be in [0, 8)");
    Tensor y = x;
    for (int k = 0; k < (4 - t % 4) % 4; ++k) y = rot90(y);
    return t >= 4 ? flip_w(y) : y;
}

}  // namespace devmod
