#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spikeprompt/backbone.hpp"
#include "spikeprompt/io.hpp"
#include "spikeprompt/tensor.hpp"

namespace spikeprompt {

inline constexpr char kCheckpointMagic[9] = "SPKPCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string format_double_exact(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

namespace detail {

inline std::string kv_line(const std::string& k, const std::string& v) { return k + "=" + v + "\n"; }

}  // namespace detail

/// Canonical key-sorted text form of a backbone config plus provenance.
/// Regenerating this text from the parsed struct is byte-identical, which is
/// what makes save/load/save round trips exact.
inline std::string config_text(const BackboneConfig& c, const Provenance& p) {
    std::map<std::string, std::string> kv;
    kv["channels"] = std::to_string(c.channels);
    kv["class_count"] = std::to_string(c.class_count);
    kv["embed_dim"] = std::to_string(c.embed_dim);
    kv["extra_prompt"] = c.extra_prompt ? "1" : "0";
    kv["head_count"] = std::to_string(c.head_count);
    kv["image_size"] = std::to_string(c.image_size);
    kv["layer_count"] = std::to_string(c.layer_count);
    kv["mlp_ratio"] = format_double_exact(c.mlp_ratio);
    kv["patch_size"] = std::to_string(c.patch_size);
    kv["prompt_len"] = std::to_string(c.prompt_len);
    kv["provenance.recipe_hash"] = p.recipe_hash;
    kv["provenance.seed"] = std::to_string(p.seed);
    std::string out;
    for (const auto& [k, v] : kv) out += detail::kv_line(k, v);
    return out;
}

inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("malformed config line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline void parse_config_text(const std::string& text, BackboneConfig& c, Provenance& p) {
    const auto kv = parse_kv_text(text);
    const auto get = [&](const char* k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw IoError(std::string("config text missing key ") + k);
        return it->second;
    };
    c.channels = std::stoi(get("channels"));
    c.class_count = std::stoi(get("class_count"));
    c.embed_dim = std::stoi(get("embed_dim"));
    c.extra_prompt = get("extra_prompt") == "1";
    c.head_count = std::stoi(get("head_count"));
    c.image_size = std::stoi(get("image_size"));
    c.layer_count = std::stoi(get("layer_count"));
    c.mlp_ratio = std::stod(get("mlp_ratio"));
    c.patch_size = std::stoi(get("patch_size"));
    c.prompt_len = std::stoi(get("prompt_len"));
    p.recipe_hash = get("provenance.recipe_hash");
    p.seed = std::stoull(get("provenance.seed"));
    p.format_version = kCheckpointVersion;
}

namespace detail {

inline void put_named_tensor(std::string& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    for (std::int64_t i = 0; i < t.numel(); ++i) put_f64(out, t.data()[i]);
}

inline std::pair<std::string, Tensor> get_named_tensor(ByteReader& r) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.raw(name_len);
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.u64()));
    check_shape_valid(shape);
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = r.f64();
    return {name, Tensor::from_data(shape, std::move(data))};
}

}  // namespace detail

inline std::string serialize_checkpoint(const BackboneCheckpoint& ckpt) {
    std::string out(kCheckpointMagic, 8);
    put_u32(out, kCheckpointVersion);
    put_bytes(out, config_text(ckpt.config, ckpt.provenance));
    put_u64(out, ckpt.weights.size());
    for (const auto& [name, t] : ckpt.weights) detail::put_named_tensor(out, name, t);
    return out;
}

inline BackboneCheckpoint deserialize_checkpoint(const std::string& bytes) {
    ByteReader r(bytes);
    if (r.raw(8) != std::string(kCheckpointMagic, 8)) throw IoError("not a backbone checkpoint");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    BackboneCheckpoint ckpt;
    parse_config_text(r.bytes(), ckpt.config, ckpt.provenance);
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        auto [name, t] = detail::get_named_tensor(r);
        ckpt.weights.emplace(std::move(name), std::move(t));
    }
    if (!r.at_end()) throw IoError("trailing bytes in checkpoint");
    validate_checkpoint(ckpt);
    return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const BackboneCheckpoint& ckpt) {
    write_file(path, serialize_checkpoint(ckpt));
}

inline BackboneCheckpoint load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file(path));
}

/// Exact snapshot of every backbone weight; the frozen-backbone contract is
/// enforced by comparing these bytes before and after tuning.
inline std::string checkpoint_weight_bytes(const BackboneCheckpoint& ckpt) {
    std::string out;
    for (const auto& [name, t] : ckpt.weights) detail::put_named_tensor(out, name, t);
    return out;
}

}  // namespace spikeprompt
