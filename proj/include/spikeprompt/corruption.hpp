#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "spikeprompt/io.hpp"
#include "spikeprompt/rng.hpp"
#include "spikeprompt/tensor.hpp"

namespace spikeprompt {

enum class CorruptionFamily { gaussian_noise, salt_pepper, jpeg, gaussian_blur };

inline const char* family_name(CorruptionFamily f) {
    switch (f) {
        case CorruptionFamily::gaussian_noise: return "gaussian_noise";
        case CorruptionFamily::salt_pepper: return "salt_pepper";
        case CorruptionFamily::jpeg: return "jpeg";
        case CorruptionFamily::gaussian_blur: return "gaussian_blur";
    }
    throw ParamError("unknown corruption family");
}

inline CorruptionFamily parse_family(const std::string& s) {
    if (s == "gaussian_noise") return CorruptionFamily::gaussian_noise;
    if (s == "salt_pepper") return CorruptionFamily::salt_pepper;
    if (s == "jpeg") return CorruptionFamily::jpeg;
    if (s == "gaussian_blur") return CorruptionFamily::gaussian_blur;
    throw ParamError("unknown corruption family: " + s);
}

/// One corruption cell: a family plus its family-specific intensity
/// (gaussian mean / corrupt rate / jpeg quality / blur sigma).
struct CorruptionSpec {
    CorruptionFamily family = CorruptionFamily::gaussian_noise;
    double intensity = 0.0;
    double gaussian_std = 0.1;  // fixed std for the gaussian family
    std::uint64_t seed = 0;

    std::string label() const {
        char buf[64];
        if (family == CorruptionFamily::jpeg) {
            std::snprintf(buf, sizeof(buf), "%s_%d", family_name(family), static_cast<int>(intensity));
        } else {
            std::snprintf(buf, sizeof(buf), "%s_%.2f", family_name(family), intensity);
        }
        return buf;
    }
};

namespace detail {

inline void require_image01(const Tensor& img) {
    if (img.rank() != 3) throw ShapeError("corruption expects a [C,H,W] image, got " + shape_str(img.shape()));
}

inline double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace detail

/// out = clamp(img + eta, 0, 1) with eta ~ Normal(mean, std) per pixel.
inline Tensor gaussian_noise(const Tensor& img, double mean, double std_dev, std::uint64_t seed) {
    detail::require_image01(img);
    if (std_dev < 0.0) throw ParamError("gaussian_noise: std must be >= 0");
    Tensor out = Tensor::zeros(img.shape());
    Rng rng(seed);
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        out.data()[i] = detail::clamp01(img.data()[i] + mean + std_dev * rng.normal());
    }
    return out;
}

/// Each pixel is independently corrupted with probability `rate`; corrupted
/// pixels become salt (1) or pepper (0) with equal probability.
inline Tensor salt_pepper(const Tensor& img, double rate, std::uint64_t seed) {
    detail::require_image01(img);
    if (rate < 0.0 || rate > 1.0) throw ParamError("salt_pepper: rate must lie in [0,1]");
    Tensor out = Tensor::zeros(img.shape());
    Rng rng(seed);
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        double v = img.data()[i];
        if (rng.uniform() < rate) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
        out.data()[i] = v;
    }
    return out;
}

namespace detail {

// symmetric reflection: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

inline std::vector<double> gaussian_kernel(double sigma) {
    const std::int64_t radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (std::int64_t i = -radius; i <= radius; ++i) {
        const double w = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = w;
        total += w;
    }
    for (auto& w : k) w /= total;
    return k;
}

}  // namespace detail

/// Separable Gaussian convolution, kernel radius ceil(3*sigma), normalized to
/// unit mass, reflective borders.
inline Tensor gaussian_blur(const Tensor& img, double sigma) {
    detail::require_image01(img);
    if (sigma <= 0.0) throw ParamError("gaussian_blur: sigma must be > 0");
    const std::int64_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];
    const auto kernel = detail::gaussian_kernel(sigma);
    const std::int64_t radius = (static_cast<std::int64_t>(kernel.size()) - 1) / 2;

    Tensor out = Tensor::zeros(img.shape());
    std::vector<double> tmp(static_cast<std::size_t>(H * W));
    for (std::int64_t c = 0; c < C; ++c) {
        const double* src = img.data() + c * H * W;
        // horizontal pass
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                double s = 0.0;
                for (std::int64_t k = -radius; k <= radius; ++k) {
                    const std::int64_t xx = detail::reflect_index(x + k, W);
                    s += kernel[static_cast<std::size_t>(k + radius)] * src[y * W + xx];
                }
                tmp[static_cast<std::size_t>(y * W + x)] = s;
            }
        }
        // vertical pass
        double* dst = out.data() + c * H * W;
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                double s = 0.0;
                for (std::int64_t k = -radius; k <= radius; ++k) {
                    const std::int64_t yy = detail::reflect_index(y + k, H);
                    s += kernel[static_cast<std::size_t>(k + radius)] * tmp[static_cast<std::size_t>(yy * W + x)];
                }
                dst[y * W + x] = s;
            }
        }
    }
    return out;
}

namespace detail {

// Baseline luminance quantization table (zig-zag-free, row-major).
inline constexpr std::array<int, 64> kJpegBaseTable = {
    16, 11, 10, 16, 24,  40,  51,  61,
    12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,
    14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,
    24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99};

// conventional quality -> scale rule with per-entry clamp to [1,255]
inline std::array<int, 64> scaled_quant_table(int quality) {
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    std::array<int, 64> q{};
    for (int i = 0; i < 64; ++i) {
        q[static_cast<std::size_t>(i)] =
            std::clamp((kJpegBaseTable[static_cast<std::size_t>(i)] * scale + 50) / 100, 1, 255);
    }
    return q;
}

struct DctTables {
    double cosine[8][8];  // cos((2x+1) u pi / 16)
    double cu[8];         // 1/sqrt(2) for u=0, else 1
    DctTables() {
        for (int u = 0; u < 8; ++u) {
            cu[u] = u == 0 ? 1.0 / std::sqrt(2.0) : 1.0;
            for (int x = 0; x < 8; ++x) {
                cosine[u][x] = std::cos((2.0 * x + 1.0) * u * kPi / 16.0);
            }
        }
    }
};

inline const DctTables& dct_tables() {
    static const DctTables t;
    return t;
}

inline void dct8x8(const double f[64], double F[64]) {
    const DctTables& t = dct_tables();
    for (int u = 0; u < 8; ++u) {
        for (int v = 0; v < 8; ++v) {
            double s = 0.0;
            for (int x = 0; x < 8; ++x)
                for (int y = 0; y < 8; ++y) s += f[x * 8 + y] * t.cosine[u][x] * t.cosine[v][y];
            F[u * 8 + v] = 0.25 * t.cu[u] * t.cu[v] * s;
        }
    }
}

inline void idct8x8(const double F[64], double f[64]) {
    const DctTables& t = dct_tables();
    for (int x = 0; x < 8; ++x) {
        for (int y = 0; y < 8; ++y) {
            double s = 0.0;
            for (int u = 0; u < 8; ++u)
                for (int v = 0; v < 8; ++v)
                    s += t.cu[u] * t.cu[v] * F[u * 8 + v] * t.cosine[u][x] * t.cosine[v][y];
            f[x * 8 + y] = 0.25 * s;
        }
    }
}

}  // namespace detail

/// Quantization-only JPEG proxy: per-channel 8x8 DCT-II, baseline luminance
/// table scaled by the quality rule, dequantize, inverse DCT. Edge blocks are
/// padded by edge replication; there is no entropy coding, so quantization is
/// the sole distortion source.
inline Tensor jpeg_compress(const Tensor& img, int quality) {
    detail::require_image01(img);
    if (quality < 1 || quality > 100) throw ParamError("jpeg_compress: quality must lie in [1,100]");
    const std::int64_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];
    const auto qtable = detail::scaled_quant_table(quality);
    Tensor out = Tensor::zeros(img.shape());

    const std::int64_t bh = (H + 7) / 8, bw = (W + 7) / 8;
    double block[64], coeff[64], recon[64];
    for (std::int64_t c = 0; c < C; ++c) {
        const double* src = img.data() + c * H * W;
        double* dst = out.data() + c * H * W;
        for (std::int64_t by = 0; by < bh; ++by) {
            for (std::int64_t bx = 0; bx < bw; ++bx) {
                for (int y = 0; y < 8; ++y) {
                    const std::int64_t sy = std::min<std::int64_t>(by * 8 + y, H - 1);
                    for (int x = 0; x < 8; ++x) {
                        const std::int64_t sx = std::min<std::int64_t>(bx * 8 + x, W - 1);
                        block[y * 8 + x] = src[sy * W + sx] * 255.0 - 128.0;
                    }
                }
                detail::dct8x8(block, coeff);
                for (int i = 0; i < 64; ++i) {
                    const double q = static_cast<double>(qtable[static_cast<std::size_t>(i)]);
                    coeff[i] = static_cast<double>(std::llround(coeff[i] / q)) * q;
                }
                detail::idct8x8(coeff, recon);
                for (int y = 0; y < 8; ++y) {
                    const std::int64_t sy = by * 8 + y;
                    if (sy >= H) continue;
                    for (int x = 0; x < 8; ++x) {
                        const std::int64_t sx = bx * 8 + x;
                        if (sx >= W) continue;
                        dst[sy * W + sx] = detail::clamp01((recon[y * 8 + x] + 128.0) / 255.0);
                    }
                }
            }
        }
    }
    return out;
}

/// Dispatch on the spec; `image_index` decorrelates the stochastic families
/// across images while keeping evaluation order-independent.
inline Tensor apply_corruption(const Tensor& img, const CorruptionSpec& spec, std::uint64_t image_index = 0) {
    const std::uint64_t seed = mix_seed(spec.seed, image_index);
    switch (spec.family) {
        case CorruptionFamily::gaussian_noise:
            return gaussian_noise(img, spec.intensity, spec.gaussian_std, seed);
        case CorruptionFamily::salt_pepper:
            return salt_pepper(img, spec.intensity, seed);
        case CorruptionFamily::jpeg:
            return jpeg_compress(img, static_cast<int>(spec.intensity));
        case CorruptionFamily::gaussian_blur:
            return gaussian_blur(img, spec.intensity);
    }
    throw ParamError("unknown corruption family");
}

/// The default evaluation grid: four families at four intensities each.
inline std::vector<CorruptionSpec> default_grid(std::uint64_t base_seed) {
    std::vector<CorruptionSpec> grid;
    const double means[] = {0.1, 0.2, 0.3, 0.4};
    const double rates[] = {0.01, 0.02, 0.03, 0.04};
    const int qualities[] = {20, 15, 10, 5};
    const double sigmas[] = {2.0, 3.0, 4.0, 5.0};
    for (int i = 0; i < 4; ++i)
        grid.push_back({CorruptionFamily::gaussian_noise, means[i], 0.1, mix_seed(base_seed, 0x100 + i)});
    for (int i = 0; i < 4; ++i)
        grid.push_back({CorruptionFamily::salt_pepper, rates[i], 0.1, mix_seed(base_seed, 0x200 + i)});
    for (int i = 0; i < 4; ++i)
        grid.push_back({CorruptionFamily::jpeg, static_cast<double>(qualities[i]), 0.1, mix_seed(base_seed, 0x300 + i)});
    for (int i = 0; i < 4; ++i)
        grid.push_back({CorruptionFamily::gaussian_blur, sigmas[i], 0.1, mix_seed(base_seed, 0x400 + i)});
    return grid;
}

// ---------------------------------------------------------------------------
// preview output (plain-text PGM/PPM, 8-bit samples)
// ---------------------------------------------------------------------------

inline std::string to_pnm_text(const Tensor& img) {
    detail::require_image01(img);
    const std::int64_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];
    if (C != 1 && C != 3) throw ParamError("pnm preview supports 1 or 3 channels");
    std::string s = C == 1 ? "P2\n" : "P3\n";
    s += std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            for (std::int64_t c = 0; c < C; ++c) {
                const double v = detail::clamp01(img.data()[(c * H + y) * W + x]);
                s += std::to_string(static_cast<int>(std::lround(v * 255.0)));
                s += (x + 1 == W && c + 1 == C) ? "\n" : " ";
            }
        }
    }
    return s;
}

inline void write_pnm(const std::filesystem::path& path, const Tensor& img) {
    write_file(path, to_pnm_text(img));
}

}  // namespace spikeprompt
