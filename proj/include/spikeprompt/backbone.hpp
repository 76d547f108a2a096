#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "spikeprompt/spiking.hpp"
#include "spikeprompt/tensor.hpp"
#include "spikeprompt/tensor_ops.hpp"

namespace spikeprompt {

inline constexpr double kLayerNormEps = 1e-6;

struct BackboneConfig {
    int image_size = 32;
    int channels = 1;
    int patch_size = 8;
    int embed_dim = 64;   // D
    int layer_count = 4;  // N
    int head_count = 4;
    double mlp_ratio = 4.0;
    int class_count = 4;  // C
    int prompt_len = 10;  // K
    // When set, the prompt stack carries one more entry than there are
    // insertion points; the trailing prompt is accepted and left unused.
    bool extra_prompt = false;

    int patches_per_side() const { return image_size / patch_size; }
    int patch_count() const { return patches_per_side() * patches_per_side(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int head_dim() const { return embed_dim / head_count; }
    int mlp_hidden() const { return static_cast<int>(std::lround(mlp_ratio * embed_dim)); }
    int seq_len() const { return 1 + prompt_len + patch_count(); }
    int prompt_slots() const { return layer_count + (extra_prompt ? 1 : 0); }

    void validate() const {
        if (image_size < 1 || channels < 1 || patch_size < 1) throw ParamError("BackboneConfig: bad image dims");
        if (image_size % patch_size != 0) throw ParamError("BackboneConfig: image_size must be divisible by patch_size");
        if (embed_dim < 1 || layer_count < 1 || head_count < 1) throw ParamError("BackboneConfig: bad model dims");
        if (embed_dim % head_count != 0) throw ParamError("BackboneConfig: embed_dim must be divisible by head_count");
        if (mlp_ratio <= 0.0) throw ParamError("BackboneConfig: mlp_ratio must be > 0");
        if (class_count < 2) throw ParamError("BackboneConfig: class_count must be >= 2");
        if (prompt_len < 0) throw ParamError("BackboneConfig: prompt_len must be >= 0");
    }
};

struct Provenance {
    std::uint64_t seed = 0;
    std::string recipe_hash;
    std::uint32_t format_version = 1;
};

struct BackboneCheckpoint {
    BackboneConfig config;
    std::map<std::string, Tensor> weights;  // ordered; serialization iterates in key order
    Provenance provenance;

    const Tensor& w(const std::string& name) const {
        auto it = weights.find(name);
        if (it == weights.end()) throw ContractError("checkpoint: missing weight '" + name + "'");
        return it->second;
    }
    Tensor& w(const std::string& name) {
        auto it = weights.find(name);
        if (it == weights.end()) throw ContractError("checkpoint: missing weight '" + name + "'");
        return it->second;
    }
};

inline std::string layer_weight_name(int layer, const std::string& leaf) {
    return "layers." + std::to_string(layer) + "." + leaf;
}

inline std::vector<std::pair<std::string, Shape>> expected_weight_shapes(const BackboneConfig& c) {
    const std::int64_t D = c.embed_dim, H = c.mlp_hidden(), C = c.class_count;
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("patch_proj.w", Shape{c.patch_dim(), D});
    out.emplace_back("patch_proj.b", Shape{D});
    out.emplace_back("pos_embed", Shape{c.patch_count(), D});
    out.emplace_back("cls_token", Shape{1, D});
    for (int i = 0; i < c.layer_count; ++i) {
        out.emplace_back(layer_weight_name(i, "ln1.g"), Shape{D});
        out.emplace_back(layer_weight_name(i, "ln1.b"), Shape{D});
        for (const char* p : {"q", "k", "v", "o"}) {
            out.emplace_back(layer_weight_name(i, std::string("attn.w") + p), Shape{D, D});
            out.emplace_back(layer_weight_name(i, std::string("attn.b") + p), Shape{D});
        }
        out.emplace_back(layer_weight_name(i, "ln2.g"), Shape{D});
        out.emplace_back(layer_weight_name(i, "ln2.b"), Shape{D});
        out.emplace_back(layer_weight_name(i, "mlp.w1"), Shape{D, H});
        out.emplace_back(layer_weight_name(i, "mlp.b1"), Shape{H});
        out.emplace_back(layer_weight_name(i, "mlp.w2"), Shape{H, D});
        out.emplace_back(layer_weight_name(i, "mlp.b2"), Shape{D});
    }
    out.emplace_back("final_ln.g", Shape{D});
    out.emplace_back("final_ln.b", Shape{D});
    out.emplace_back("head.w", Shape{D, C});
    out.emplace_back("head.b", Shape{C});
    return out;
}

inline void validate_checkpoint(const BackboneCheckpoint& ckpt) {
    ckpt.config.validate();
    const auto expected = expected_weight_shapes(ckpt.config);
    if (ckpt.weights.size() != expected.size()) {
        throw ContractError("checkpoint: weight count mismatch (" + std::to_string(ckpt.weights.size()) +
                            " vs " + std::to_string(expected.size()) + " expected)");
    }
    for (const auto& [name, shape] : expected) {
        const Tensor& t = ckpt.w(name);
        if (t.shape() != shape) {
            throw ContractError("checkpoint: weight '" + name + "' has shape " + shape_str(t.shape()) +
                                ", expected " + shape_str(shape));
        }
    }
}

/// Fresh random weights. Layer-norm gains start at 1, all biases at 0,
/// everything else N(0, init_std). Per-tensor seeds derive from the weight
/// name, so init is independent of construction order.
inline BackboneCheckpoint init_backbone(const BackboneConfig& config, std::uint64_t seed,
                                        double init_std = 0.02) {
    config.validate();
    BackboneCheckpoint ckpt;
    ckpt.config = config;
    ckpt.provenance.seed = seed;
    ckpt.provenance.recipe_hash = "none";
    for (const auto& [name, shape] : expected_weight_shapes(config)) {
        const bool gain = name.ends_with("ln1.g") || name.ends_with("ln2.g") || name == "final_ln.g";
        const bool zero = name.ends_with(".b") || name.ends_with("ln1.b") || name.ends_with("ln2.b");
        Tensor t;
        if (gain) {
            t = Tensor::full(shape, 1.0);
        } else if (zero) {
            t = Tensor::zeros(shape);
        } else {
            t = Tensor::randn(shape, mix_seed(seed, fnv1a(name)), init_std);
        }
        ckpt.weights.emplace(name, std::move(t));
    }
    return ckpt;
}

/// Optional replacement for the checkpoint's classification head; prompt
/// tuning trains its own copy so checkpoint weights stay untouched.
struct HeadParams {
    Tensor w;  // [D, C]
    Tensor b;  // [C]
};

struct Activations {
    std::vector<Tensor> per_layer;  // N entries, token matrix after each layer
    Tensor logits;                  // [C]
};

struct BatchActivations {
    std::vector<Tensor> per_layer;  // N entries of [B*S, D]
    Tensor logits;                  // [B, C]
    std::int64_t batch = 0;
    std::int64_t seq_len = 0;
};

namespace detail {

inline void require_image(const Tensor& image, const BackboneConfig& c) {
    const Shape want{c.channels, c.image_size, c.image_size};
    if (image.shape() != want) {
        throw ShapeError("image shape " + shape_str(image.shape()) + ", expected " + shape_str(want));
    }
}

/// Non-overlapping patch extraction for a batch, stacked as [B*m, patch_dim].
/// Images carry no gradient, so this is a plain value matrix.
inline Tensor extract_patches(const std::vector<Tensor>& images, const BackboneConfig& c) {
    const std::int64_t B = static_cast<std::int64_t>(images.size());
    const std::int64_t m = c.patch_count(), pd = c.patch_dim(), ps = c.patch_size;
    const std::int64_t side = c.patches_per_side(), W = c.image_size;
    Tensor out = Tensor::zeros({B * m, pd});
    for (std::int64_t b = 0; b < B; ++b) {
        require_image(images[static_cast<std::size_t>(b)], c);
        const double* img = images[static_cast<std::size_t>(b)].data();
        for (std::int64_t p = 0; p < m; ++p) {
            const std::int64_t pi = p / side, pj = p % side;
            double* row = out.data() + (b * m + p) * pd;
            std::int64_t k = 0;
            for (std::int64_t ch = 0; ch < c.channels; ++ch)
                for (std::int64_t y = 0; y < ps; ++y)
                    for (std::int64_t x = 0; x < ps; ++x)
                        row[k++] = img[(ch * W + pi * ps + y) * W + pj * ps + x];
        }
    }
    return out;
}

inline Tensor affine_layernorm(const Tensor& x, const Tensor& g, const Tensor& b) {
    return add(mul(layernorm_rows(x, kLayerNormEps), g), b);
}

/// Pre-norm transformer block over a batch laid out as [B*S, D]. Attention is
/// restricted to each image's own S tokens; all other ops are row-wise.
inline Tensor encoder_layer_batch(const Tensor& tokens, const BackboneCheckpoint& ckpt, int layer,
                                  std::int64_t batch) {
    const BackboneConfig& c = ckpt.config;
    const std::int64_t D = c.embed_dim, heads = c.head_count, dh = c.head_dim();
    if (tokens.rank() != 2 || tokens.shape()[1] != D || tokens.shape()[0] % batch != 0) {
        throw ShapeError("encoder_layer: bad token matrix " + shape_str(tokens.shape()));
    }
    const std::int64_t S = tokens.shape()[0] / batch;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const auto lw = [&](const std::string& leaf) -> const Tensor& {
        return ckpt.w(layer_weight_name(layer, leaf));
    };

    Tensor h = affine_layernorm(tokens, lw("ln1.g"), lw("ln1.b"));
    Tensor q = add(matmul(h, lw("attn.wq")), lw("attn.bq"));
    Tensor k = add(matmul(h, lw("attn.wk")), lw("attn.bk"));
    Tensor v = add(matmul(h, lw("attn.wv")), lw("attn.bv"));

    // context per image: heads run on column slices, images on row slices
    std::vector<Tensor> per_image;
    per_image.reserve(static_cast<std::size_t>(batch));
    std::vector<Tensor> qh, kh, vh;
    qh.reserve(static_cast<std::size_t>(heads));
    kh.reserve(static_cast<std::size_t>(heads));
    vh.reserve(static_cast<std::size_t>(heads));
    for (std::int64_t hd = 0; hd < heads; ++hd) {
        qh.push_back(slice_cols(q, hd * dh, (hd + 1) * dh));
        kh.push_back(slice_cols(k, hd * dh, (hd + 1) * dh));
        vh.push_back(slice_cols(v, hd * dh, (hd + 1) * dh));
    }
    for (std::int64_t b = 0; b < batch; ++b) {
        std::vector<Tensor> ctx_heads;
        ctx_heads.reserve(static_cast<std::size_t>(heads));
        for (std::int64_t hd = 0; hd < heads; ++hd) {
            Tensor qb = slice_rows(qh[static_cast<std::size_t>(hd)], b * S, (b + 1) * S);
            Tensor kb = slice_rows(kh[static_cast<std::size_t>(hd)], b * S, (b + 1) * S);
            Tensor vb = slice_rows(vh[static_cast<std::size_t>(hd)], b * S, (b + 1) * S);
            Tensor scores = scale(matmul(qb, transpose(kb)), att_scale);
            Tensor probs = softmax_rows(scores);
            ctx_heads.push_back(matmul(probs, vb));
        }
        per_image.push_back(heads == 1 ? ctx_heads[0] : concat_cols(ctx_heads));
    }
    Tensor ctx = batch == 1 ? per_image[0] : concat_rows(per_image);
    Tensor attn_out = add(matmul(ctx, lw("attn.wo")), lw("attn.bo"));
    Tensor x = add(tokens, attn_out);

    Tensor h2 = affine_layernorm(x, lw("ln2.g"), lw("ln2.b"));
    Tensor mid = gelu(add(matmul(h2, lw("mlp.w1")), lw("mlp.b1")));
    Tensor mlp_out = add(matmul(mid, lw("mlp.w2")), lw("mlp.b2"));
    return add(x, mlp_out);
}

}  // namespace detail

/// Patch embeddings for one image: flatten non-overlapping patches, project
/// to D, add positional embeddings. The CLS token is prepended by the
/// forward ops, not here.
inline Tensor patch_embed(const Tensor& image, const BackboneCheckpoint& ckpt) {
    detail::require_image(image, ckpt.config);
    Tensor patches = detail::extract_patches({image}, ckpt.config);
    Tensor proj = add(matmul(patches, ckpt.w("patch_proj.w")), ckpt.w("patch_proj.b"));
    return add(proj, ckpt.w("pos_embed"));
}

/// Single transformer block on an [S, D] token matrix.
inline Tensor encoder_layer(const Tensor& tokens, const BackboneCheckpoint& ckpt, int layer) {
    if (layer < 0 || layer >= ckpt.config.layer_count) throw ParamError("encoder_layer: bad layer index");
    return detail::encoder_layer_batch(tokens, ckpt, layer, 1);
}

/// Batched prompted forward. `injected` supplies the per-layer prompt
/// matrices ([K, D] each): entry i enters before layer i+1, with the slot
/// outputs of the previous layer discarded. An empty list runs the plain
/// unprompted backbone. Passing `head` routes the final projection through
/// those parameters instead of the checkpoint head.
inline BatchActivations forward_batch(const std::vector<Tensor>& images, const BackboneCheckpoint& ckpt,
                                      const std::vector<Tensor>& injected, const HeadParams* head = nullptr) {
    const BackboneConfig& c = ckpt.config;
    c.validate();
    if (images.empty()) throw ContractError("forward_batch: empty image batch");
    const std::int64_t B = static_cast<std::int64_t>(images.size());
    const std::int64_t m = c.patch_count(), D = c.embed_dim, N = c.layer_count;

    std::int64_t K = 0;
    if (!injected.empty()) {
        if (static_cast<std::int64_t>(injected.size()) != c.prompt_slots()) {
            throw ContractError("forward_batch: expected " + std::to_string(c.prompt_slots()) +
                                " prompts, got " + std::to_string(injected.size()));
        }
        K = c.prompt_len;
        for (const auto& p : injected) {
            if (p.rank() != 2 || p.shape()[0] != K || p.shape()[1] != D) {
                throw ContractError("forward_batch: prompt shape " + shape_str(p.shape()) + ", expected [" +
                                    std::to_string(K) + "," + std::to_string(D) + "]");
            }
        }
    }
    const std::int64_t S = 1 + K + m;

    Tensor patches = detail::extract_patches(images, c);
    Tensor embed = add(matmul(patches, ckpt.w("patch_proj.w")), ckpt.w("patch_proj.b"));
    embed = add(embed, B == 1 ? ckpt.w("pos_embed") : tile_rows(ckpt.w("pos_embed"), B));

    const Tensor& cls = ckpt.w("cls_token");
    std::vector<Tensor> parts;
    parts.reserve(static_cast<std::size_t>(B) * 3);
    for (std::int64_t b = 0; b < B; ++b) {
        parts.push_back(cls);
        if (K > 0) parts.push_back(injected[0]);
        parts.push_back(slice_rows(embed, b * m, (b + 1) * m));
    }
    Tensor x = concat_rows(parts);

    BatchActivations acts;
    acts.batch = B;
    acts.seq_len = S;
    acts.per_layer.reserve(static_cast<std::size_t>(N));
    for (int layer = 0; layer < N; ++layer) {
        x = detail::encoder_layer_batch(x, ckpt, layer, B);
        acts.per_layer.push_back(x);
        if (layer + 1 < N && K > 0) {
            // deep-prompt convention: drop the slot outputs, insert the next prompt
            std::vector<Tensor> rebuilt;
            rebuilt.reserve(static_cast<std::size_t>(B) * 3);
            for (std::int64_t b = 0; b < B; ++b) {
                rebuilt.push_back(slice_rows(x, b * S, b * S + 1));
                rebuilt.push_back(injected[static_cast<std::size_t>(layer + 1)]);
                rebuilt.push_back(slice_rows(x, b * S + 1 + K, (b + 1) * S));
            }
            x = concat_rows(rebuilt);
        }
    }

    Tensor xf = detail::affine_layernorm(x, ckpt.w("final_ln.g"), ckpt.w("final_ln.b"));
    std::vector<Tensor> cls_rows;
    cls_rows.reserve(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) cls_rows.push_back(slice_rows(xf, b * S, b * S + 1));
    Tensor cls_mat = B == 1 ? cls_rows[0] : concat_rows(cls_rows);
    const Tensor& hw = head ? head->w : ckpt.w("head.w");
    const Tensor& hb = head ? head->b : ckpt.w("head.b");
    acts.logits = add(matmul(cls_mat, hw), hb);
    return acts;
}

namespace detail {

inline Activations single_image_activations(BatchActivations&& batch) {
    Activations out;
    out.per_layer = std::move(batch.per_layer);
    out.logits = reshape(batch.logits, {batch.logits.numel()});
    return out;
}

}  // namespace detail

/// Prompted forward for one image with externally supplied (typically binary)
/// prompt matrices.
inline Activations forward_prompted(const Tensor& image, const BackboneCheckpoint& ckpt,
                                    const std::vector<Tensor>& spike_prompts) {
    return detail::single_image_activations(forward_batch({image}, ckpt, spike_prompts));
}

/// Baseline continuous-prompt forward: injects the raw prompt stack with no
/// filtering or discretization.
inline Activations forward_vpt_continuous(const Tensor& image, const BackboneCheckpoint& ckpt,
                                          const PromptStack& stack) {
    stack.validate();
    return detail::single_image_activations(forward_batch({image}, ckpt, stack.continuous));
}

/// Classification head alone: logits = x_cls * W + b.
inline Tensor cls_head(const Tensor& x_cls, const BackboneCheckpoint& ckpt) {
    Tensor row = x_cls.rank() == 1 ? reshape(x_cls, {1, x_cls.numel()}) : x_cls;
    if (row.rank() != 2 || row.shape()[0] != 1 || row.shape()[1] != ckpt.config.embed_dim) {
        throw ShapeError("cls_head: expected [D] or [1,D] input, got " + shape_str(x_cls.shape()));
    }
    Tensor logits = add(matmul(row, ckpt.w("head.w")), ckpt.w("head.b"));
    return reshape(logits, {ckpt.config.class_count});
}

}  // namespace spikeprompt
