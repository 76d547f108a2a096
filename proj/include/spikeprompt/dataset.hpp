#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "spikeprompt/io.hpp"
#include "spikeprompt/rng.hpp"
#include "spikeprompt/tensor.hpp"

namespace spikeprompt {

/// In-memory image classification split: [count, C, H, W] values in [0,1]
/// plus integer labels, deterministic ordering.
struct Dataset {
    std::int64_t count = 0;
    int channels = 1;
    int height = 32;
    int width = 32;
    int class_count = 0;
    std::string split;
    std::vector<double> images;  // count * channels * height * width
    std::vector<int> labels;

    std::int64_t image_numel() const { return static_cast<std::int64_t>(channels) * height * width; }

    Tensor image(std::int64_t i) const {
        if (i < 0 || i >= count) throw IndexError("dataset image index out of range");
        const std::int64_t n = image_numel();
        std::vector<double> v(images.begin() + i * n, images.begin() + (i + 1) * n);
        return Tensor::from_data({channels, height, width}, std::move(v));
    }

    void validate() const {
        if (count < 1 || class_count < 2) throw ContractError("dataset: empty or degenerate");
        if (static_cast<std::int64_t>(images.size()) != count * image_numel())
            throw ContractError("dataset: image payload size mismatch");
        if (static_cast<std::int64_t>(labels.size()) != count) throw ContractError("dataset: label count mismatch");
        for (int l : labels)
            if (l < 0 || l >= class_count) throw ContractError("dataset: label out of range");
    }
};

namespace detail {

struct ShapeParams {
    double cx, cy;         // center
    double half_size;      // arm length / outer radius scale
    double thickness;
    double intensity;
};

// Source families pretrain the backbone; target families drive prompt tuning.
// The two sets are disjoint so tuning is a genuine transfer problem.
enum class ShapeFamily {
    h_bar, v_bar, disk, ring,              // source
    plus_cross, x_cross, square_frame, double_disk  // target
};

inline bool shape_hit(ShapeFamily f, const ShapeParams& p, double x, double y) {
    const double dx = x - p.cx, dy = y - p.cy;
    const double s = p.half_size, th = p.thickness;
    switch (f) {
        case ShapeFamily::h_bar:
            return std::abs(dy) <= th && std::abs(dx) <= s;
        case ShapeFamily::v_bar:
            return std::abs(dx) <= th && std::abs(dy) <= s;
        case ShapeFamily::disk:
            return dx * dx + dy * dy <= (0.8 * s) * (0.8 * s);
        case ShapeFamily::ring: {
            const double r = std::sqrt(dx * dx + dy * dy);
            return std::abs(r - 0.8 * s) <= 0.8 * th;
        }
        case ShapeFamily::plus_cross:
            return (std::abs(dy) <= th && std::abs(dx) <= s) || (std::abs(dx) <= th && std::abs(dy) <= s);
        case ShapeFamily::x_cross:
            return (std::abs(dx - dy) <= 1.2 * th || std::abs(dx + dy) <= 1.2 * th) &&
                   std::max(std::abs(dx), std::abs(dy)) <= 0.9 * s;
        case ShapeFamily::square_frame: {
            const double m = std::max(std::abs(dx), std::abs(dy));
            return m <= 0.85 * s && m >= 0.85 * s - 1.2 * th;
        }
        case ShapeFamily::double_disk: {
            const double r = th + 2.0;
            const double ax = dx + 0.6 * s, ay = dy + 0.6 * s;
            const double bx = dx - 0.6 * s, by = dy - 0.6 * s;
            return ax * ax + ay * ay <= r * r || bx * bx + by * by <= r * r;
        }
    }
    return false;
}

inline const std::vector<ShapeFamily>& family_set(const std::string& kind) {
    static const std::vector<ShapeFamily> target{ShapeFamily::plus_cross, ShapeFamily::x_cross,
                                                 ShapeFamily::square_frame, ShapeFamily::double_disk};
    static const std::vector<ShapeFamily> source{ShapeFamily::h_bar, ShapeFamily::v_bar,
                                                 ShapeFamily::disk, ShapeFamily::ring};
    if (kind == "synthetic-shapes") return target;
    if (kind == "synthetic-shapes-source") return source;
    throw ParamError("gen_dataset: unknown kind '" + kind + "'");
}

}  // namespace detail

/// Seeded parametric shapes on 32x32 grayscale canvases with a mild noise
/// floor. Classes are balanced via round-robin assignment; the whole dataset
/// is a pure function of (kind, class_count, count, seed, noise_floor).
inline Dataset gen_dataset(const std::string& kind, int class_count, std::int64_t count,
                           std::uint64_t seed, double noise_floor = 0.08,
                           const std::string& split = "train") {
    const auto& families = detail::family_set(kind);
    if (class_count < 2 || class_count > static_cast<int>(families.size())) {
        throw ParamError("gen_dataset: class_count must lie in [2," + std::to_string(families.size()) + "]");
    }
    if (count < class_count) throw ParamError("gen_dataset: count must be >= class_count");
    if (noise_floor < 0.0 || noise_floor > 0.5) throw ParamError("gen_dataset: noise_floor out of range");

    Dataset ds;
    ds.count = count;
    ds.class_count = class_count;
    ds.split = split;
    ds.images.resize(static_cast<std::size_t>(count) * ds.image_numel());
    ds.labels.resize(static_cast<std::size_t>(count));

    Rng rng(mix_seed(seed, fnv1a(kind)));
    const int H = ds.height, W = ds.width;
    for (std::int64_t i = 0; i < count; ++i) {
        const int label = static_cast<int>(i % class_count);
        ds.labels[static_cast<std::size_t>(i)] = label;
        detail::ShapeParams p;
        p.cx = rng.uniform(13.0, 19.0);
        p.cy = rng.uniform(13.0, 19.0);
        p.half_size = rng.uniform(6.0, 10.0);
        p.thickness = rng.uniform(1.3, 2.3);
        p.intensity = rng.uniform(0.65, 1.0);
        // per-image base brightness; keeps absolute intensity uninformative
        const double base = rng.uniform(0.0, 0.25);
        double* img = ds.images.data() + i * ds.image_numel();
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const double bg = std::min(1.0, base + noise_floor * rng.uniform());
                const bool hit = detail::shape_hit(families[static_cast<std::size_t>(label)], p,
                                                   static_cast<double>(x), static_cast<double>(y));
                img[y * W + x] = hit ? p.intensity : bg;
            }
        }
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// container format
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[9] = "SPKPDSET";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::string serialize_dataset(const Dataset& ds) {
    ds.validate();
    std::string out(kDatasetMagic, 8);
    put_u32(out, kDatasetVersion);
    put_u64(out, static_cast<std::uint64_t>(ds.count));
    put_u32(out, static_cast<std::uint32_t>(ds.channels));
    put_u32(out, static_cast<std::uint32_t>(ds.height));
    put_u32(out, static_cast<std::uint32_t>(ds.width));
    put_u32(out, static_cast<std::uint32_t>(ds.class_count));
    put_bytes(out, ds.split);
    for (double v : ds.images) put_f64(out, v);
    for (int l : ds.labels) put_u32(out, static_cast<std::uint32_t>(l));
    return out;
}

inline Dataset deserialize_dataset(const std::string& bytes) {
    ByteReader r(bytes);
    if (r.raw(8) != std::string(kDatasetMagic, 8)) throw IoError("not a dataset container");
    const std::uint32_t version = r.u32();
    if (version != kDatasetVersion) throw IoError("unsupported dataset version " + std::to_string(version));
    Dataset ds;
    ds.count = static_cast<std::int64_t>(r.u64());
    ds.channels = static_cast<int>(r.u32());
    ds.height = static_cast<int>(r.u32());
    ds.width = static_cast<int>(r.u32());
    ds.class_count = static_cast<int>(r.u32());
    ds.split = r.bytes();
    ds.images.resize(static_cast<std::size_t>(ds.count * ds.image_numel()));
    for (auto& v : ds.images) v = r.f64();
    ds.labels.resize(static_cast<std::size_t>(ds.count));
    for (auto& l : ds.labels) l = static_cast<int>(r.u32());
    if (!r.at_end()) throw IoError("trailing bytes in dataset container");
    ds.validate();
    return ds;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
    write_file(path, serialize_dataset(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
    return deserialize_dataset(read_file(path));
}

}  // namespace spikeprompt
