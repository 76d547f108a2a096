#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "spikeprompt/backbone.hpp"
#include "spikeprompt/checkpoint.hpp"
#include "spikeprompt/gradcheck.hpp"
#include "spikeprompt/tensor_ops.hpp"

using namespace spikeprompt;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig c;
    c.image_size = 16;
    c.channels = 1;
    c.patch_size = 8;  // m = 4
    c.embed_dim = 16;
    c.layer_count = 2;
    c.head_count = 2;
    c.mlp_ratio = 2.0;
    c.class_count = 3;
    c.prompt_len = 3;
    return c;
}

BackboneConfig desk_config() { return BackboneConfig{}; }

std::vector<Tensor> random_prompts(const BackboneConfig& c, std::uint64_t seed, double std_dev = 0.5) {
    std::vector<Tensor> out;
    for (int i = 0; i < c.prompt_slots(); ++i)
        out.push_back(Tensor::randn({c.prompt_len, c.embed_dim}, mix_seed(seed, 50 + i), std_dev));
    return out;
}

// Independent patch oracle: explicit loops, no shared code with extract_patches.
Tensor oracle_patch_embed(const Tensor& image, const BackboneCheckpoint& ckpt) {
    const auto& c = ckpt.config;
    const int side = c.patches_per_side();
    Tensor out = Tensor::zeros({c.patch_count(), c.embed_dim});
    const Tensor& w = ckpt.w("patch_proj.w");
    const Tensor& b = ckpt.w("patch_proj.b");
    const Tensor& pos = ckpt.w("pos_embed");
    for (int pi = 0; pi < side; ++pi) {
        for (int pj = 0; pj < side; ++pj) {
            const int p = pi * side + pj;
            std::vector<double> flat;
            for (int ch = 0; ch < c.channels; ++ch)
                for (int y = 0; y < c.patch_size; ++y)
                    for (int x = 0; x < c.patch_size; ++x)
                        flat.push_back(image.at((ch * c.image_size + pi * c.patch_size + y) * c.image_size +
                                                pj * c.patch_size + x));
            for (int d = 0; d < c.embed_dim; ++d) {
                double s = 0.0;
                for (int k = 0; k < c.patch_dim(); ++k) s += flat[static_cast<std::size_t>(k)] * w.at(k, d);
                out.at(p, d) = s + b.at(d) + pos.at(p, d);
            }
        }
    }
    return out;
}

}  // namespace

TEST(PatchEmbed, PatchCountMatchesGeometry) {
    BackboneConfig c = desk_config();
    BackboneCheckpoint ckpt = init_backbone(c, 1);
    Tensor img = Tensor::randn({1, 32, 32}, 2, 0.3);
    Tensor e = patch_embed(img, ckpt);
    EXPECT_EQ(e.shape(), (Shape{16, 64}));
}

TEST(PatchEmbed, ZeroImageLeavesPositionalTerm) {
    BackboneConfig c = tiny_config();
    BackboneCheckpoint ckpt = init_backbone(c, 3);
    // bias starts at zero, so a zero image projects to the positional embeddings
    Tensor img = Tensor::zeros({1, 16, 16});
    Tensor e = patch_embed(img, ckpt);
    EXPECT_TRUE(e.same_values(ckpt.w("pos_embed")));
}

TEST(PatchEmbed, MatchesLoopOracle) {
    BackboneConfig c = tiny_config();
    BackboneCheckpoint ckpt = init_backbone(c, 4);
    Tensor img = Tensor::randn({1, 16, 16}, 5, 0.5);
    Tensor got = patch_embed(img, ckpt);
    Tensor want = oracle_patch_embed(img, ckpt);
    for (std::int64_t i = 0; i < got.numel(); ++i) ASSERT_NEAR(got.at(i), want.at(i), 1e-12);
}

TEST(PatchEmbed, WrongImageShapeRejected) {
    BackboneCheckpoint ckpt = init_backbone(tiny_config(), 6);
    EXPECT_THROW(patch_embed(Tensor::zeros({1, 8, 16}), ckpt), ShapeError);
}

TEST(EncoderLayer, SingleTokenAttentionIsValuePath) {
    // with one token, softmax over the single key is 1, so the attention
    // branch reduces to Wo*(Wv*ln(x)) plus the residual
    BackboneConfig c = tiny_config();
    BackboneCheckpoint ckpt = init_backbone(c, 7);
    Tensor x = Tensor::randn({1, c.embed_dim}, 8, 1.0);

    Tensor got = encoder_layer(x, ckpt, 0);

    const auto lw = [&](const std::string& leaf) { return ckpt.w(layer_weight_name(0, leaf)); };
    Tensor h = add(mul(layernorm_rows(x, kLayerNormEps), lw("ln1.g")), lw("ln1.b"));
    Tensor v = add(matmul(h, lw("attn.wv")), lw("attn.bv"));
    Tensor attn = add(matmul(v, lw("attn.wo")), lw("attn.bo"));
    Tensor mid = add(x, attn);
    Tensor h2 = add(mul(layernorm_rows(mid, kLayerNormEps), lw("ln2.g")), lw("ln2.b"));
    Tensor mlp = add(matmul(gelu(add(matmul(h2, lw("mlp.w1")), lw("mlp.b1"))), lw("mlp.w2")), lw("mlp.b2"));
    Tensor want = add(mid, mlp);

    for (std::int64_t i = 0; i < got.numel(); ++i) ASSERT_NEAR(got.at(i), want.at(i), 1e-12);
}

TEST(EncoderLayer, PermutationEquivariant) {
    BackboneConfig c = tiny_config();
    BackboneCheckpoint ckpt = init_backbone(c, 9);
    Tensor x = Tensor::randn({5, c.embed_dim}, 10, 1.0);
    Tensor y = encoder_layer(x, ckpt, 1);

    const std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
    std::vector<Tensor> rows;
    for (auto p : perm) rows.push_back(slice_rows(x, p, p + 1));
    Tensor xp = concat_rows(rows);
    Tensor yp = encoder_layer(xp, ckpt, 1);

    for (std::size_t r = 0; r < perm.size(); ++r) {
        for (std::int64_t dcol = 0; dcol < c.embed_dim; ++dcol) {
            ASSERT_NEAR(yp.at(static_cast<std::int64_t>(r), dcol), y.at(perm[r], dcol), 1e-10);
        }
    }
}

TEST(EncoderLayer, GradientMatchesFiniteDifferences) {
    BackboneConfig c = tiny_config();
    c.embed_dim = 8;
    c.head_count = 2;
    BackboneCheckpoint ckpt = init_backbone(c, 11, 0.3);
    Tensor x = Tensor::randn({3, 8}, 12, 0.7);
    Tensor w = Tensor::randn({3, 8}, 13, 1.0);
    const double err = max_rel_grad_err(
        [&] { return sum(mul(encoder_layer(x, ckpt, 0), w)); }, {x}, 24, 14);
    EXPECT_LT(err, 1e-4);
}

TEST(ForwardPrompted, SequenceLengthInvariant) {
    BackboneConfig c = desk_config();  // K=10, m=16 -> 27 tokens at every layer
    BackboneCheckpoint ckpt = init_backbone(c, 15);
    Tensor img = Tensor::randn({1, 32, 32}, 16, 0.3);
    Activations acts = forward_prompted(img, ckpt, random_prompts(c, 17));
    ASSERT_EQ(acts.per_layer.size(), 4u);
    for (const auto& layer : acts.per_layer) EXPECT_EQ(layer.shape(), (Shape{27, 64}));
    EXPECT_EQ(acts.logits.shape(), (Shape{4}));
    EXPECT_FALSE(has_nan(acts.logits));
}

TEST(ForwardPrompted, WrongPromptCountRejected) {
    BackboneConfig c = tiny_config();
    BackboneCheckpoint ckpt = init_backbone(c, 18);
    Tensor img = Tensor::randn({1, 16, 16}, 19, 0.3);
    auto prompts = random_prompts(c, 20);
    prompts.pop_back();
    EXPECT_THROW(forward_prompted(img, ckpt, prompts), ContractError);
    auto bad = random_prompts(c, 21);
    bad[0] = Tensor::zeros({c.prompt_len + 1, c.embed_dim});
    EXPECT_THROW(forward_prompted(img, ckpt, bad), ContractError);
}

TEST(ForwardPrompted, EmptyPromptListEqualsUnprompted) {
    BackboneConfig c = tiny_config();
    c.prompt_len = 0;
    BackboneCheckpoint ckpt = init_backbone(c, 22);
    Tensor img = Tensor::randn({1, 16, 16}, 23, 0.3);
    Activations a = forward_prompted(img, ckpt, {});
    // same config through the batch path with no prompts
    BatchActivations b = forward_batch({img}, ckpt, {});
    EXPECT_TRUE(a.per_layer.back().same_values(b.per_layer.back()));
    EXPECT_EQ(a.per_layer[0].shape(), (Shape{5, 16}));  // 1 cls + 4 patches
}

TEST(ForwardPrompted, DiscardedSlotOutputsDoNotReachLogits) {
    // rebuild the forward by hand, zeroing the prompt-slot outputs after each
    // layer before they are overwritten; logits must not move
    BackboneConfig c = tiny_config();
    BackboneCheckpoint ckpt = init_backbone(c, 24);
    Tensor img = Tensor::randn({1, 16, 16}, 25, 0.4);
    const auto prompts = random_prompts(c, 26);
    Activations reference = forward_prompted(img, ckpt, prompts);

    const std::int64_t K = c.prompt_len, m = c.patch_count(), N = c.layer_count;
    Tensor tokens = concat_rows({reshape(ckpt.w("cls_token"), {1, c.embed_dim}), prompts[0],
                                 patch_embed(img, ckpt)});
    for (int layer = 0; layer < N; ++layer) {
        tokens = encoder_layer(tokens, ckpt, layer);
        // zero the slot outputs (they are discarded by contract)
        Tensor cls = slice_rows(tokens, 0, 1);
        Tensor rest = slice_rows(tokens, 1 + K, 1 + K + m);
        Tensor zeros = Tensor::zeros({K, c.embed_dim});
        tokens = concat_rows({cls, layer + 1 < N ? prompts[static_cast<std::size_t>(layer + 1)] : zeros, rest});
    }
    // final column: the zeroed last-layer slots are never read either
    Tensor xf = add(mul(layernorm_rows(tokens, kLayerNormEps), ckpt.w("final_ln.g")), ckpt.w("final_ln.b"));
    Tensor logits = add(matmul(slice_rows(xf, 0, 1), ckpt.w("head.w")), ckpt.w("head.b"));
    for (std::int64_t i = 0; i < 3; ++i) ASSERT_DOUBLE_EQ(logits.at(i), reference.logits.at(i));
}

TEST(ForwardVpt, ZeroContinuousEqualsZeroSpikePrompts) {
    BackboneConfig c = tiny_config();
    BackboneCheckpoint ckpt = init_backbone(c, 27);
    Tensor img = Tensor::randn({1, 16, 16}, 28, 0.4);
    PromptStack stack;
    stack.prompt_len = c.prompt_len;
    stack.layer_count = c.layer_count;
    std::vector<Tensor> zero_prompts;
    for (int i = 0; i < c.prompt_slots(); ++i) {
        stack.continuous.push_back(Tensor::zeros({c.prompt_len, c.embed_dim}));
        zero_prompts.push_back(Tensor::zeros({c.prompt_len, c.embed_dim}));
    }
    Activations a = forward_vpt_continuous(img, ckpt, stack);
    Activations b = forward_prompted(img, ckpt, zero_prompts);
    EXPECT_TRUE(a.logits.same_values(b.logits));
}

TEST(ForwardVpt, GradientsReachPrompts) {
    BackboneConfig c = tiny_config();
    BackboneCheckpoint ckpt = init_backbone(c, 29);
    Tensor img = Tensor::randn({1, 16, 16}, 30, 0.4);
    PromptStack stack;
    stack.prompt_len = c.prompt_len;
    stack.layer_count = c.layer_count;
    for (int i = 0; i < c.prompt_slots(); ++i) {
        stack.continuous.push_back(
            Tensor::randn({c.prompt_len, c.embed_dim}, mix_seed(31, i), 0.2).set_requires_grad(true));
    }
    {
        Tape tape;
        Activations a = forward_vpt_continuous(img, ckpt, stack);
        backward(cross_entropy(reshape(a.logits, {1, c.class_count}), {1}));
    }
    for (const auto& p : stack.continuous) {
        double norm = 0.0;
        for (double g : p.grad_vec()) norm += g * g;
        EXPECT_GT(norm, 0.0);
    }
}

TEST(ForwardVpt, DeterministicAcrossRuns) {
    BackboneConfig c = tiny_config();
    BackboneCheckpoint ckpt = init_backbone(c, 32);
    Tensor img = Tensor::randn({1, 16, 16}, 33, 0.4);
    const auto prompts = random_prompts(c, 34);
    Activations a = forward_prompted(img, ckpt, prompts);
    Activations b = forward_prompted(img, ckpt, prompts);
    EXPECT_TRUE(a.logits.same_values(b.logits));
}

TEST(ExtraPromptFlag, TrailingPromptAcceptedAndUnused) {
    BackboneConfig base = tiny_config();
    BackboneCheckpoint ckpt_base = init_backbone(base, 35);

    BackboneConfig extra = base;
    extra.extra_prompt = true;
    BackboneCheckpoint ckpt_extra = ckpt_base;
    ckpt_extra.config = extra;

    Tensor img = Tensor::randn({1, 16, 16}, 36, 0.4);
    auto prompts = random_prompts(base, 37);
    ASSERT_EQ(static_cast<int>(prompts.size()), base.layer_count);

    auto padded = prompts;
    padded.push_back(Tensor::randn({base.prompt_len, base.embed_dim}, 38, 5.0));

    Activations a = forward_prompted(img, ckpt_base, prompts);
    Activations b = forward_prompted(img, ckpt_extra, padded);
    EXPECT_TRUE(a.logits.same_values(b.logits));

    // the base config rejects the padded list, the extra config rejects the short one
    EXPECT_THROW(forward_prompted(img, ckpt_base, padded), ContractError);
    EXPECT_THROW(forward_prompted(img, ckpt_extra, prompts), ContractError);
}

TEST(ClsHead, ZeroInputZeroBiasGivesZeroLogits) {
    BackboneConfig c = tiny_config();
    BackboneCheckpoint ckpt = init_backbone(c, 39);
    Tensor logits = cls_head(Tensor::zeros({c.embed_dim}), ckpt);
    for (std::int64_t i = 0; i < logits.numel(); ++i) EXPECT_EQ(logits.at(i), 0.0);
}

TEST(ClsHead, IdentityWeightsPassThrough) {
    BackboneConfig c = tiny_config();
    c.class_count = c.embed_dim;
    BackboneCheckpoint ckpt = init_backbone(c, 40);
    Tensor eye = Tensor::zeros({c.embed_dim, c.embed_dim});
    for (int i = 0; i < c.embed_dim; ++i) eye.at(i, i) = 1.0;
    ckpt.w("head.w") = eye;
    ckpt.w("head.b") = Tensor::zeros({c.embed_dim});
    Tensor x = Tensor::randn({c.embed_dim}, 41, 1.0);
    Tensor logits = cls_head(x, ckpt);
    EXPECT_TRUE(logits.same_values(x));
}

TEST(ClsHead, GradientMatchesFiniteDifferences) {
    BackboneConfig c = tiny_config();
    BackboneCheckpoint ckpt = init_backbone(c, 42);
    Tensor x = Tensor::randn({c.embed_dim}, 43, 1.0);
    const double err = max_rel_grad_err([&] { return sum(cls_head(x, ckpt)); }, {x}, 16, 44);
    EXPECT_LT(err, 1e-6);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
    BackboneCheckpoint ckpt = init_backbone(desk_config(), 45);
    ckpt.provenance.recipe_hash = "abc123";
    const std::string bytes = serialize_checkpoint(ckpt);
    BackboneCheckpoint loaded = deserialize_checkpoint(bytes);
    EXPECT_EQ(serialize_checkpoint(loaded), bytes);
    for (const auto& [name, t] : ckpt.weights) EXPECT_TRUE(loaded.w(name).same_values(t));
    EXPECT_EQ(loaded.provenance.seed, ckpt.provenance.seed);
    EXPECT_EQ(loaded.provenance.recipe_hash, "abc123");
}

TEST(Checkpoint, ValidationCatchesMissingAndMisshapen) {
    BackboneCheckpoint ckpt = init_backbone(tiny_config(), 46);
    BackboneCheckpoint broken = ckpt;
    broken.weights.erase("head.b");
    EXPECT_THROW(validate_checkpoint(broken), ContractError);
    BackboneCheckpoint wrong = ckpt;
    wrong.w("head.b") = Tensor::zeros({7});
    EXPECT_THROW(validate_checkpoint(wrong), ContractError);
}

TEST(Checkpoint, CorruptContainersRejected) {
    BackboneCheckpoint ckpt = init_backbone(tiny_config(), 47);
    std::string bytes = serialize_checkpoint(ckpt);
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), IoError);
    std::string magic = bytes;
    magic[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint(magic), IoError);
}

TEST(Checkpoint, InitIsSeedDeterministic) {
    BackboneCheckpoint a = init_backbone(desk_config(), 48);
    BackboneCheckpoint b = init_backbone(desk_config(), 48);
    EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
    BackboneCheckpoint c = init_backbone(desk_config(), 49);
    EXPECT_NE(serialize_checkpoint(a), serialize_checkpoint(c));
}
