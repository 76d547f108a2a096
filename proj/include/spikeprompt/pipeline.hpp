#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "spikeprompt/backbone.hpp"
#include "spikeprompt/checkpoint.hpp"
#include "spikeprompt/corruption.hpp"
#include "spikeprompt/dataset.hpp"
#include "spikeprompt/report.hpp"
#include "spikeprompt/spiking.hpp"
#include "spikeprompt/tensor_ops.hpp"

namespace spikeprompt {

enum class TuneMethod { spike_nvpt, vpt, sf_only, sd_only, binary_vpt };

inline const char* method_name(TuneMethod m) {
    switch (m) {
        case TuneMethod::spike_nvpt: return "spike_nvpt";
        case TuneMethod::vpt: return "vpt";
        case TuneMethod::sf_only: return "sf_only";
        case TuneMethod::sd_only: return "sd_only";
        case TuneMethod::binary_vpt: return "binary_vpt";
    }
    throw ParamError("unknown tune method");
}

inline TuneMethod parse_method(const std::string& s) {
    if (s == "spike_nvpt") return TuneMethod::spike_nvpt;
    if (s == "vpt") return TuneMethod::vpt;
    if (s == "sf_only") return TuneMethod::sf_only;
    if (s == "sd_only") return TuneMethod::sd_only;
    if (s == "binary_vpt") return TuneMethod::binary_vpt;
    throw ParamError("unknown tune method: " + s);
}

inline const std::vector<TuneMethod>& all_methods() {
    static const std::vector<TuneMethod> m{TuneMethod::spike_nvpt, TuneMethod::vpt, TuneMethod::sf_only,
                                           TuneMethod::sd_only, TuneMethod::binary_vpt};
    return m;
}

// ---------------------------------------------------------------------------
// configs
// ---------------------------------------------------------------------------

struct PretrainConfig {
    int epochs = 60;
    int batch_size = 64;
    double lr = 0.10;
    double weight_decay = 1e-4;
    double init_std = 0.02;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1 || batch_size < 1) throw ParamError("PretrainConfig: epochs/batch_size must be >= 1");
        if (lr <= 0.0 || weight_decay < 0.0 || init_std <= 0.0) throw ParamError("PretrainConfig: bad optimizer values");
    }

    std::string text() const {
        std::map<std::string, std::string> kv;
        kv["batch_size"] = std::to_string(batch_size);
        kv["epochs"] = std::to_string(epochs);
        kv["init_std"] = format_double_exact(init_std);
        kv["lr"] = format_double_exact(lr);
        kv["seed"] = std::to_string(seed);
        kv["weight_decay"] = format_double_exact(weight_decay);
        std::string out;
        for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
        return out;
    }
};

/// Reference defaults follow the full-scale recipe (batch 64, 100 epochs,
/// lr 1.5, weight decay 0.001, T=16, alpha=2, v_th=theta=0.01);
/// desk_defaults() carries the pilot-tuned settings for the small synthetic
/// task. Either is a starting point; every field stays overridable.
struct TuneConfig {
    TuneMethod method = TuneMethod::spike_nvpt;
    int epochs = 100;
    int batch_size = 64;
    double lr = 1.5;
    double weight_decay = 0.001;
    std::uint64_t seed = 0;
    IFConfig if_cfg;    // v_th 0.01, v_reset 0, T 16
    SpikeConfig sd_cfg; // theta 0.01, alpha 2
    double prompt_init_std = 0.02;
    double head_init_std = 0.01;
    bool binary_vpt_all_layers = false;

    static TuneConfig paper_defaults() { return TuneConfig{}; }

    static TuneConfig desk_defaults() {
        TuneConfig c;
        c.epochs = 24;
        c.lr = 0.08;
        return c;
    }

    void validate() const {
        if (epochs < 1 || batch_size < 1) throw ParamError("TuneConfig: epochs/batch_size must be >= 1");
        if (lr <= 0.0 || weight_decay < 0.0) throw ParamError("TuneConfig: bad optimizer values");
        if (prompt_init_std <= 0.0 || head_init_std <= 0.0) throw ParamError("TuneConfig: bad init std");
        if_cfg.validate();
        sd_cfg.validate();
    }

    std::string text() const {
        std::map<std::string, std::string> kv;
        kv["batch_size"] = std::to_string(batch_size);
        kv["binary_vpt_all_layers"] = binary_vpt_all_layers ? "1" : "0";
        kv["epochs"] = std::to_string(epochs);
        kv["head_init_std"] = format_double_exact(head_init_std);
        kv["if.t_steps"] = std::to_string(if_cfg.t_steps);
        kv["if.v_reset"] = format_double_exact(if_cfg.v_reset);
        kv["if.v_th"] = format_double_exact(if_cfg.v_th);
        kv["lr"] = format_double_exact(lr);
        kv["method"] = method_name(method);
        kv["prompt_init_std"] = format_double_exact(prompt_init_std);
        kv["sd.alpha"] = format_double_exact(sd_cfg.alpha);
        kv["sd.theta"] = format_double_exact(sd_cfg.theta);
        kv["seed"] = std::to_string(seed);
        kv["weight_decay"] = format_double_exact(weight_decay);
        std::string out;
        for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
        return out;
    }
};

inline TuneConfig parse_tune_config_text(const std::string& text) {
    const auto kv = parse_kv_text(text);
    const auto get = [&](const char* k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw IoError(std::string("tune config missing key ") + k);
        return it->second;
    };
    TuneConfig c;
    c.batch_size = std::stoi(get("batch_size"));
    c.binary_vpt_all_layers = get("binary_vpt_all_layers") == "1";
    c.epochs = std::stoi(get("epochs"));
    c.head_init_std = std::stod(get("head_init_std"));
    c.if_cfg.t_steps = std::stoi(get("if.t_steps"));
    c.if_cfg.v_reset = std::stod(get("if.v_reset"));
    c.if_cfg.v_th = std::stod(get("if.v_th"));
    c.lr = std::stod(get("lr"));
    c.method = parse_method(get("method"));
    c.prompt_init_std = std::stod(get("prompt_init_std"));
    c.sd_cfg.alpha = std::stod(get("sd.alpha"));
    c.sd_cfg.theta = std::stod(get("sd.theta"));
    c.seed = std::stoull(get("seed"));
    c.weight_decay = std::stod(get("weight_decay"));
    return c;
}

// ---------------------------------------------------------------------------
// tuned model
// ---------------------------------------------------------------------------

struct TunedModel {
    TuneMethod method = TuneMethod::spike_nvpt;
    PromptStack stack;                  // trained continuous prompts
    std::vector<Tensor> frozen_prompts; // cached injection values for inference
    Tensor head_w, head_b;
    std::vector<TrainLogEntry> log;
    TuneConfig cfg;
};

namespace detail {

inline Tensor binarize_at(const Tensor& t, double theta) {
    Tensor out = Tensor::zeros(t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) out.data()[i] = (t.data()[i] - theta) >= 0.0 ? 1.0 : 0.0;
    return out;
}

/// Prompt matrices fed to the backbone during training, per method. Recorded
/// on the active tape so surrogate gradients reach the continuous prompts.
inline std::vector<Tensor> live_injection(const PromptStack& stack, const TuneConfig& cfg) {
    std::vector<Tensor> out;
    switch (cfg.method) {
        case TuneMethod::vpt:
        case TuneMethod::binary_vpt:
            return stack.continuous;
        case TuneMethod::spike_nvpt:
            return spike_prompt_forward(stack, cfg.if_cfg, cfg.sd_cfg);
        case TuneMethod::sf_only:
            for (const auto& p : stack.continuous) out.push_back(sf_layer_rate(p, cfg.if_cfg, cfg.sd_cfg.alpha));
            return out;
        case TuneMethod::sd_only:
            for (const auto& p : stack.continuous) out.push_back(sd_unit(p, cfg.sd_cfg));
            return out;
    }
    throw ParamError("unknown tune method");
}

/// Post-training constants for inference. Spike-family methods cache their
/// discrete values; binary_vpt thresholds the trained continuous prompts
/// (first layer only unless the all-layers flag is set).
inline std::vector<Tensor> frozen_injection(const PromptStack& stack, const TuneConfig& cfg) {
    std::vector<Tensor> out;
    switch (cfg.method) {
        case TuneMethod::vpt:
            for (const auto& p : stack.continuous) out.push_back(p.detach());
            return out;
        case TuneMethod::spike_nvpt:
            return freeze_spike_prompts(stack, cfg.if_cfg, cfg.sd_cfg);
        case TuneMethod::sf_only:
            for (const auto& p : stack.continuous) {
                Tensor f = Tensor::zeros(p.shape());
                for (std::int64_t i = 0; i < p.numel(); ++i) f.data()[i] = if_rate_scalar(p.data()[i], cfg.if_cfg);
                out.push_back(std::move(f));
            }
            return out;
        case TuneMethod::sd_only:
            for (const auto& p : stack.continuous) out.push_back(binarize_at(p, cfg.sd_cfg.theta));
            return out;
        case TuneMethod::binary_vpt:
            for (std::size_t i = 0; i < stack.continuous.size(); ++i) {
                const bool binarize = i == 0 || cfg.binary_vpt_all_layers;
                out.push_back(binarize ? binarize_at(stack.continuous[i], cfg.sd_cfg.theta)
                                       : stack.continuous[i].detach());
            }
            return out;
    }
    throw ParamError("unknown tune method");
}

inline int argmax_row(const Tensor& logits, std::int64_t row) {
    const std::int64_t C = logits.shape()[1];
    int best = 0;
    for (std::int64_t c = 1; c < C; ++c)
        if (logits.at(row, c) > logits.at(row, best)) best = static_cast<int>(c);
    return best;
}

struct EpochStats {
    double mean_loss = 0.0;
    double accuracy = 0.0;
};

/// One SGD epoch over shuffled batches. `make_injection` rebuilds the prompt
/// injection inside the tape so method-specific gradients are recorded.
template <typename InjectionFn>
EpochStats run_epoch(const BackboneCheckpoint& ckpt, const Dataset& data,
                     const std::vector<std::int64_t>& order, int batch_size, double lr,
                     double weight_decay, std::vector<Tensor>& trainables, const HeadParams* head,
                     InjectionFn&& make_injection) {
    double loss_sum = 0.0;
    int batches = 0;
    std::int64_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<Tensor> images;
        std::vector<int> labels;
        images.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) {
            images.push_back(data.image(order[i]));
            labels.push_back(data.labels[static_cast<std::size_t>(order[i])]);
        }
        Tape tape;
        const std::vector<Tensor> injected = make_injection();
        BatchActivations acts = forward_batch(images, ckpt, injected, head);
        Tensor loss = cross_entropy(acts.logits, labels);
        if (has_nan(loss)) {
            throw TrainingError("loss diverged to NaN (batch starting at index " + std::to_string(start) + ")");
        }
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (argmax_row(acts.logits, static_cast<std::int64_t>(i)) == labels[i]) ++correct;
        }
        loss_sum += loss.value();
        tape.backward(loss);
        sgd_step(trainables, lr, weight_decay);
        ++batches;
    }
    return {loss_sum / static_cast<double>(batches),
            static_cast<double>(correct) / static_cast<double>(order.size())};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// pretraining (source task, full-parameter)
// ---------------------------------------------------------------------------

struct PretrainResult {
    BackboneCheckpoint ckpt;
    std::vector<TrainLogEntry> log;
    double final_train_accuracy = 0.0;
};

/// Full-parameter supervised training on the source task; produces the frozen
/// checkpoint that prompt tuning adapts.
inline PretrainResult pretrain_backbone(const Dataset& train, const BackboneConfig& config,
                                        const PretrainConfig& pc) {
    train.validate();
    config.validate();
    pc.validate();
    if (train.class_count != config.class_count) {
        throw ContractError("pretrain: dataset classes (" + std::to_string(train.class_count) +
                            ") do not match config class_count (" + std::to_string(config.class_count) + ")");
    }

    PretrainResult result;
    result.ckpt = init_backbone(config, mix_seed(pc.seed, 0x10), pc.init_std);
    std::vector<Tensor> weights;
    for (auto& [name, t] : result.ckpt.weights) {
        t.set_requires_grad(true);
        weights.push_back(t);
    }

    std::vector<std::int64_t> order(static_cast<std::size_t>(train.count));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
    for (int epoch = 0; epoch < pc.epochs; ++epoch) {
        Rng rng(mix_seed(pc.seed, 0x70, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);
        const auto stats = detail::run_epoch(result.ckpt, train, order, pc.batch_size, pc.lr,
                                             pc.weight_decay, weights, nullptr, [] {
                                                 return std::vector<Tensor>{};
                                             });
        result.log.push_back({epoch, stats.mean_loss, stats.accuracy});
    }
    result.final_train_accuracy = result.log.back().train_accuracy;

    for (auto& t : weights) t.set_requires_grad(false);
    result.ckpt.provenance.seed = pc.seed;
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a(pc.text())));
    result.ckpt.provenance.recipe_hash = hex;
    return result;
}

// ---------------------------------------------------------------------------
// prompt tuning
// ---------------------------------------------------------------------------

/// Adapts a frozen checkpoint to `train` with the configured method. Only the
/// prompt stack and the task head receive updates; any drift in checkpoint
/// weights trips a hard contract failure.
inline TunedModel tune(const BackboneCheckpoint& ckpt, const Dataset& train, const TuneConfig& cfg) {
    validate_checkpoint(ckpt);
    train.validate();
    cfg.validate();
    const BackboneConfig& bc = ckpt.config;
    if (train.class_count != bc.class_count) {
        throw ContractError("tune: dataset classes do not match checkpoint class_count");
    }
    if (bc.prompt_len < 1) throw ContractError("tune: checkpoint config has no prompt slots");

    const std::string weights_before = checkpoint_weight_bytes(ckpt);

    TunedModel model;
    model.method = cfg.method;
    model.cfg = cfg;
    model.stack.prompt_len = bc.prompt_len;
    model.stack.layer_count = bc.layer_count;
    for (int i = 0; i < bc.prompt_slots(); ++i) {
        model.stack.continuous.push_back(
            Tensor::randn({bc.prompt_len, bc.embed_dim}, mix_seed(cfg.seed, 0x50 + i), cfg.prompt_init_std)
                .set_requires_grad(true));
    }
    model.head_w = Tensor::randn({bc.embed_dim, bc.class_count}, mix_seed(cfg.seed, 0x60), cfg.head_init_std)
                       .set_requires_grad(true);
    model.head_b = Tensor::zeros({bc.class_count}).set_requires_grad(true);

    std::vector<Tensor> trainables = model.stack.continuous;
    trainables.push_back(model.head_w);
    trainables.push_back(model.head_b);
    HeadParams head{model.head_w, model.head_b};

    std::vector<std::int64_t> order(static_cast<std::size_t>(train.count));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(mix_seed(cfg.seed, 0x70, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);
        const auto stats = detail::run_epoch(ckpt, train, order, cfg.batch_size, cfg.lr, cfg.weight_decay,
                                             trainables, &head,
                                             [&] { return detail::live_injection(model.stack, cfg); });
        model.log.push_back({epoch, stats.mean_loss, stats.accuracy});
    }

    if (checkpoint_weight_bytes(ckpt) != weights_before) {
        throw ContractError("frozen-backbone invariant violated during tuning");
    }

    for (auto& t : trainables) t.set_requires_grad(false);
    model.frozen_prompts = detail::frozen_injection(model.stack, cfg);
    return model;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Accuracy over explicit image/label vectors using the cached frozen prompts
/// (no IF/SD work happens here).
inline double model_accuracy(const BackboneCheckpoint& ckpt, const TunedModel& model,
                             const std::vector<Tensor>& images, const std::vector<int>& labels,
                             int batch_size = 64) {
    if (images.size() != labels.size() || images.empty()) throw ContractError("model_accuracy: bad inputs");
    HeadParams head{model.head_w, model.head_b};
    std::int64_t correct = 0;
    for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<Tensor> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                  images.begin() + static_cast<std::ptrdiff_t>(end));
        BatchActivations acts = forward_batch(chunk, ckpt, model.frozen_prompts, &head);
        for (std::size_t i = start; i < end; ++i) {
            if (detail::argmax_row(acts.logits, static_cast<std::int64_t>(i - start)) == labels[i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(images.size());
}

/// Clean accuracy plus one cell per grid spec, Table-style. Deterministic
/// given the grid seeds; corruption of image i uses stream mix(spec.seed, i).
inline EvalReport evaluate(const BackboneCheckpoint& ckpt, const TunedModel& model, const Dataset& test,
                           const std::vector<CorruptionSpec>& grid) {
    test.validate();
    if (test.class_count != ckpt.config.class_count) {
        throw ContractError("evaluate: dataset classes do not match checkpoint class_count");
    }
    if (grid.empty()) {
        std::fprintf(stderr, "warning: empty corruption grid, emitting clean-only report\n");
    }

    EvalReport report;
    report.method = method_name(model.method);
    report.seed = model.cfg.seed;
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(
                      fnv1a(config_text(ckpt.config, ckpt.provenance) + model.cfg.text())));
    report.config_hash = hex;

    std::vector<Tensor> clean;
    clean.reserve(static_cast<std::size_t>(test.count));
    for (std::int64_t i = 0; i < test.count; ++i) clean.push_back(test.image(i));
    report.clean_accuracy = model_accuracy(ckpt, model, clean, test.labels);

    for (const auto& spec : grid) {
        std::vector<Tensor> corrupted;
        corrupted.reserve(clean.size());
        for (std::size_t i = 0; i < clean.size(); ++i) {
            corrupted.push_back(apply_corruption(clean[i], spec, static_cast<std::uint64_t>(i)));
        }
        const double acc = model_accuracy(ckpt, model, corrupted, test.labels);
        report.cells.push_back({family_name(spec.family), spec.intensity, spec.label(), acc});
    }
    return report;
}

// ---------------------------------------------------------------------------
// feature-stability analysis
// ---------------------------------------------------------------------------

/// Per-layer mean cosine similarity between the mean-pooled patch-token
/// embeddings of paired clean/corrupted forward passes. Layer indices are
/// 1-based. The cosine uses dot/sqrt(|a||b|) and clamps to [-1,1], which
/// makes identical inputs score exactly 1.
inline std::vector<double> feature_similarity(const BackboneCheckpoint& ckpt, const TunedModel& model,
                                              const std::vector<Tensor>& clean,
                                              const std::vector<Tensor>& corrupted,
                                              const std::vector<int>& layers) {
    if (clean.size() != corrupted.size() || clean.empty()) {
        throw ContractError("feature_similarity: inputs must be non-empty and paired");
    }
    for (int l : layers) {
        if (l < 1 || l > ckpt.config.layer_count) {
            throw ContractError("feature_similarity: layer index " + std::to_string(l) + " out of range");
        }
    }
    HeadParams head{model.head_w, model.head_b};
    BatchActivations a = forward_batch(clean, ckpt, model.frozen_prompts, &head);
    BatchActivations b = forward_batch(corrupted, ckpt, model.frozen_prompts, &head);

    const std::int64_t B = a.batch, S = a.seq_len, D = ckpt.config.embed_dim;
    const std::int64_t m = ckpt.config.patch_count();
    const std::int64_t patch_start = S - m;  // cls [+ prompts] come first

    std::vector<double> out;
    out.reserve(layers.size());
    std::vector<double> va(static_cast<std::size_t>(D)), vb(static_cast<std::size_t>(D));
    for (int l : layers) {
        const Tensor& la = a.per_layer[static_cast<std::size_t>(l - 1)];
        const Tensor& lb = b.per_layer[static_cast<std::size_t>(l - 1)];
        double mean_cos = 0.0;
        for (std::int64_t img = 0; img < B; ++img) {
            std::fill(va.begin(), va.end(), 0.0);
            std::fill(vb.begin(), vb.end(), 0.0);
            for (std::int64_t t = patch_start; t < S; ++t) {
                for (std::int64_t d = 0; d < D; ++d) {
                    va[static_cast<std::size_t>(d)] += la.at(img * S + t, d);
                    vb[static_cast<std::size_t>(d)] += lb.at(img * S + t, d);
                }
            }
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (std::int64_t d = 0; d < D; ++d) {
                dot += va[static_cast<std::size_t>(d)] * vb[static_cast<std::size_t>(d)];
                na += va[static_cast<std::size_t>(d)] * va[static_cast<std::size_t>(d)];
                nb += vb[static_cast<std::size_t>(d)] * vb[static_cast<std::size_t>(d)];
            }
            double c = dot / std::sqrt(na * nb);
            c = std::min(1.0, std::max(-1.0, c));
            mean_cos += c;
        }
        out.push_back(mean_cos / static_cast<double>(B));
    }
    return out;
}

// ---------------------------------------------------------------------------
// ablation suite
// ---------------------------------------------------------------------------

/// All five methods across the given seeds against the default corruption
/// grid; runs are method-major, seed-minor.
inline AblationReport run_ablation_suite(const BackboneCheckpoint& ckpt, const Dataset& train,
                                         const Dataset& test, const TuneConfig& base,
                                         const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw ParamError("run_ablation_suite: no seeds");
    const auto grid = default_grid(mix_seed(base.seed, 0x9e1d));
    AblationReport rep;
    for (TuneMethod method : all_methods()) {
        for (std::uint64_t seed : seeds) {
            TuneConfig cfg = base;
            cfg.method = method;
            cfg.seed = seed;
            TunedModel model = tune(ckpt, train, cfg);
            rep.runs.push_back(evaluate(ckpt, model, test, grid));
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// tuned-model container
// ---------------------------------------------------------------------------

inline constexpr char kModelMagic[9] = "SPKPMODL";
inline constexpr std::uint32_t kModelVersion = 1;

inline std::string serialize_model(const TunedModel& model) {
    std::string out(kModelMagic, 8);
    put_u32(out, kModelVersion);
    std::string cfg = model.cfg.text();
    cfg += "stack.layer_count=" + std::to_string(model.stack.layer_count) + "\n";
    cfg += "stack.prompt_len=" + std::to_string(model.stack.prompt_len) + "\n";
    put_bytes(out, cfg);
    std::map<std::string, Tensor> named;
    for (std::size_t i = 0; i < model.stack.continuous.size(); ++i) {
        char key[48];
        std::snprintf(key, sizeof(key), "prompt.cont.%03zu", i);
        named.emplace(key, model.stack.continuous[i]);
    }
    for (std::size_t i = 0; i < model.frozen_prompts.size(); ++i) {
        char key[48];
        std::snprintf(key, sizeof(key), "prompt.frozen.%03zu", i);
        named.emplace(key, model.frozen_prompts[i]);
    }
    named.emplace("head.b", model.head_b);
    named.emplace("head.w", model.head_w);
    put_u64(out, named.size());
    for (const auto& [name, t] : named) detail::put_named_tensor(out, name, t);
    return out;
}

inline TunedModel deserialize_model(const std::string& bytes) {
    ByteReader r(bytes);
    if (r.raw(8) != std::string(kModelMagic, 8)) throw IoError("not a tuned-model container");
    const std::uint32_t version = r.u32();
    if (version != kModelVersion) throw IoError("unsupported model version " + std::to_string(version));
    const std::string cfg_text = r.bytes();
    TunedModel model;
    model.cfg = parse_tune_config_text(cfg_text);
    model.method = model.cfg.method;
    const auto kv = parse_kv_text(cfg_text);
    model.stack.layer_count = std::stoll(kv.at("stack.layer_count"));
    model.stack.prompt_len = std::stoll(kv.at("stack.prompt_len"));
    const std::uint64_t count = r.u64();
    std::map<std::string, Tensor> named;
    for (std::uint64_t i = 0; i < count; ++i) {
        auto [name, t] = detail::get_named_tensor(r);
        named.emplace(std::move(name), std::move(t));
    }
    if (!r.at_end()) throw IoError("trailing bytes in model container");
    for (const auto& [name, t] : named) {
        if (name.starts_with("prompt.cont.")) model.stack.continuous.push_back(t);
        else if (name.starts_with("prompt.frozen.")) model.frozen_prompts.push_back(t);
    }
    model.head_w = named.at("head.w");
    model.head_b = named.at("head.b");
    model.stack.validate();
    return model;
}

inline void save_model(const std::filesystem::path& path, const TunedModel& model) {
    write_file(path, serialize_model(model));
}

inline TunedModel load_model(const std::filesystem::path& path) {
    return deserialize_model(read_file(path));
}

}  // namespace spikeprompt
