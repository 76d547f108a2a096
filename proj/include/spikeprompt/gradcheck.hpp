#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "spikeprompt/backbone.hpp"
#include "spikeprompt/spiking.hpp"
#include "spikeprompt/tensor.hpp"
#include "spikeprompt/tensor_ops.hpp"

namespace spikeprompt {

struct GradCheckResult {
    std::string name;
    double max_err = 0.0;
    double tol = 0.0;
    bool pass = false;
};

/// Guarded relative error: |a-n| / max(|a|, |n|, guard). The guard keeps
/// finite-difference roundoff from dominating near-zero gradients.
inline double rel_err(double analytic, double numeric, double guard) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), guard});
}

/// Central-difference check of reverse-mode gradients. `loss_fn` must rebuild
/// the forward pass from the given leaves on every call; the harness runs
/// backward once, then probes sampled coordinates at +/- h.
inline double max_rel_grad_err(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                               int samples_per_param, std::uint64_t seed, double h = 1e-5,
                               double guard = 1e-5) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = loss_fn();
        tape.backward(loss);
    }
    for (auto& p : params) analytic.push_back(p.grad_vec());

    Rng rng(mix_seed(seed, 0x6fd7));
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        const std::int64_t n = p.numel();
        std::set<std::int64_t> idx;
        if (n <= samples_per_param) {
            for (std::int64_t i = 0; i < n; ++i) idx.insert(i);
        } else {
            while (static_cast<int>(idx.size()) < samples_per_param)
                idx.insert(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n))));
        }
        for (std::int64_t i : idx) {
            const double old = p.data()[i];
            p.data()[i] = old + h;
            const double lp = loss_fn().value();
            p.data()[i] = old - h;
            const double lm = loss_fn().value();
            p.data()[i] = old;
            const double numeric = (lp - lm) / (2.0 * h);
            worst = std::max(worst, rel_err(analytic[pi][static_cast<std::size_t>(i)], numeric, guard));
        }
    }
    for (auto& p : params) p.zero_grad();
    return worst;
}

namespace detail {

inline GradCheckResult make_result(std::string name, double err, double tol) {
    return GradCheckResult{std::move(name), err, tol, err < tol};
}

}  // namespace detail

/// Finite-difference suite over every differentiable op, the surrogate
/// exactness identity, and a full two-layer prompted forward pass.
inline std::vector<GradCheckResult> run_gradchecks(std::uint64_t seed) {
    std::vector<GradCheckResult> results;
    const double op_tol = 1e-4;

    const auto randt = [&](const Shape& s, std::uint64_t tag) {
        return Tensor::randn(s, mix_seed(seed, tag), 1.0);
    };

    {
        Tensor a = randt({3, 4}, 1), b = randt({3, 4}, 2);
        results.push_back(detail::make_result(
            "add", max_rel_grad_err([&] { return sum(add(a, b)); }, {a, b}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({3, 4}, 3), b = randt({4}, 4);
        results.push_back(detail::make_result(
            "add_row_broadcast", max_rel_grad_err([&] { return sum(mul(add(a, b), add(a, b))); }, {a, b}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({3, 4}, 5), b = randt({3, 4}, 6);
        results.push_back(detail::make_result(
            "sub", max_rel_grad_err([&] { return sum(mul(sub(a, b), sub(a, b))); }, {a, b}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({3, 4}, 7), b = randt({3, 4}, 8);
        results.push_back(detail::make_result(
            "mul", max_rel_grad_err([&] { return sum(mul(a, b)); }, {a, b}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({3, 4}, 9), b = randt({4}, 10);
        results.push_back(detail::make_result(
            "mul_row_broadcast", max_rel_grad_err([&] { return sum(mul(mul(a, b), a)); }, {a, b}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({3, 4}, 11);
        results.push_back(detail::make_result(
            "scale", max_rel_grad_err([&] { return sum(mul(scale(a, -1.7), a)); }, {a}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({3, 4}, 12), b = randt({4, 2}, 13);
        results.push_back(detail::make_result(
            "matmul", max_rel_grad_err([&] { return sum(mul(matmul(a, b), matmul(a, b))); }, {a, b}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({3, 4}, 14);
        results.push_back(detail::make_result(
            "transpose", max_rel_grad_err([&] { return sum(mul(transpose(a), transpose(a))); }, {a}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({3, 4}, 15);
        results.push_back(detail::make_result(
            "reshape", max_rel_grad_err([&] { return sum(mul(reshape(a, {2, 6}), reshape(a, {2, 6}))); }, {a}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({2, 3}, 16), b = randt({4, 3}, 17);
        results.push_back(detail::make_result(
            "concat_rows", max_rel_grad_err([&] {
                Tensor c = concat_rows({a, b, a});
                return sum(mul(c, c));
            }, {a, b}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({3, 2}, 18), b = randt({3, 4}, 19);
        results.push_back(detail::make_result(
            "concat_cols", max_rel_grad_err([&] {
                Tensor c = concat_cols({a, b});
                return sum(mul(c, c));
            }, {a, b}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({5, 3}, 20);
        results.push_back(detail::make_result(
            "slice_rows", max_rel_grad_err([&] {
                Tensor s = slice_rows(a, 1, 4);
                return sum(mul(s, s));
            }, {a}, 8, seed), op_tol));
    }
    {
        Tensor a = randt({3, 5}, 21);
        results.push_back(detail::make_result(
            "slice_cols", max_rel_grad_err([&] {
                Tensor s = slice_cols(a, 1, 4);
                return sum(mul(s, s));
            }, {a}, 8, seed), op_tol));
    }
    {
        Tensor a = randt({2, 3}, 22);
        results.push_back(detail::make_result(
            "tile_rows", max_rel_grad_err([&] {
                Tensor t = tile_rows(a, 3);
                return sum(mul(t, t));
            }, {a}, 6, seed), op_tol));
    }
    {
        Tensor a = randt({4, 3}, 23);
        results.push_back(detail::make_result(
            "mean_rows", max_rel_grad_err([&] {
                Tensor m = mean_rows(a);
                return sum(mul(m, m));
            }, {a}, 8, seed), op_tol));
    }
    {
        Tensor a = randt({3, 5}, 24);
        results.push_back(detail::make_result(
            "softmax_rows", max_rel_grad_err([&] {
                Tensor p = softmax_rows(a);
                Tensor w = Tensor::randn({3, 5}, mix_seed(seed, 941), 1.0);
                return sum(mul(p, w));
            }, {a}, 10, seed), op_tol));
    }
    {
        Tensor a = randt({3, 6}, 25);
        results.push_back(detail::make_result(
            "layernorm_rows", max_rel_grad_err([&] {
                Tensor y = layernorm_rows(a, 1e-5);
                Tensor w = Tensor::randn({3, 6}, mix_seed(seed, 942), 1.0);
                return sum(mul(y, w));
            }, {a}, 10, seed), op_tol));
    }
    {
        // spec pins a tighter tolerance for the gelu derivative
        Tensor a = Tensor::randn({17}, mix_seed(seed, 26), 1.2);
        results.push_back(detail::make_result(
            "gelu", max_rel_grad_err([&] { return sum(gelu(a)); }, {a}, 17, seed, 1e-5, 1e-3), 1e-6));
    }
    {
        Tensor logits = randt({2, 5}, 27);
        const std::vector<int> labels{3, 0};
        results.push_back(detail::make_result(
            "cross_entropy", max_rel_grad_err([&] { return cross_entropy(logits, labels); }, {logits}, 10, seed), 1e-6));
    }
    {
        // smooth custom fn so finite differences apply: tanh with exact backward
        Tensor a = randt({3, 4}, 28);
        CustomGradFn fn{[](double x) { return std::tanh(x); },
                        [](double x) { const double t = std::tanh(x); return 1.0 - t * t; }};
        results.push_back(detail::make_result(
            "apply_custom_smooth", max_rel_grad_err([&] { return sum(apply_custom(a, fn)); }, {a}, 8, seed), op_tol));
    }

    {
        // surrogate exactness: tape gradient through sd_unit must equal the
        // analytic arctan form, not a finite-difference estimate
        SpikeConfig sd;
        Rng rng(mix_seed(seed, 29));
        double worst = 0.0;
        for (int i = 0; i < 100; ++i) {
            Tensor x = Tensor::scalar(rng.uniform(-0.5, 1.5));
            x.set_requires_grad(true);
            {
                Tape tape;
                Tensor y = sum(sd_unit(x, sd));
                tape.backward(y);
            }
            const double expected = sd.alpha / (2.0 * (1.0 + std::pow((kPi / 2.0) * sd.alpha * (x.value() - sd.theta), 2)));
            worst = std::max(worst, rel_err(x.grad_vec()[0], expected, 1e-300));
        }
        results.push_back(detail::make_result("sd_unit_surrogate_exact", worst, 1e-12));
    }

    {
        // full prompted forward, two layers, continuous prompt path
        BackboneConfig cfg;
        cfg.image_size = 16;
        cfg.channels = 1;
        cfg.patch_size = 8;
        cfg.embed_dim = 16;
        cfg.layer_count = 2;
        cfg.head_count = 2;
        cfg.mlp_ratio = 2.0;
        cfg.class_count = 3;
        cfg.prompt_len = 3;
        BackboneCheckpoint ckpt = init_backbone(cfg, mix_seed(seed, 30), 0.2);
        std::vector<Tensor> images;
        for (int b = 0; b < 2; ++b)
            images.push_back(Tensor::randn({cfg.channels, cfg.image_size, cfg.image_size}, mix_seed(seed, 31 + b), 0.5));
        std::vector<Tensor> prompts;
        for (int i = 0; i < cfg.prompt_slots(); ++i)
            prompts.push_back(Tensor::randn({cfg.prompt_len, cfg.embed_dim}, mix_seed(seed, 40 + i), 0.2));
        const std::vector<int> labels{0, 2};
        std::vector<Tensor> params;
        for (auto& [name, t] : ckpt.weights) params.push_back(t);
        for (auto& p : prompts) params.push_back(p);
        const auto loss_fn = [&] {
            BatchActivations acts = forward_batch(images, ckpt, prompts);
            return cross_entropy(acts.logits, labels);
        };
        results.push_back(detail::make_result(
            "prompted_forward_2layer", max_rel_grad_err(loss_fn, params, 1, seed), op_tol));
        for (auto& p : params) p.set_requires_grad(false);
    }

    return results;
}

}  // namespace spikeprompt
