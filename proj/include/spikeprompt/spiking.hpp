#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "spikeprompt/tensor.hpp"
#include "spikeprompt/tensor_ops.hpp"

namespace spikeprompt {

/// Integrate-and-fire node parameters. Units are dimensionless membrane
/// potential; t_steps is the rate-coding window T.
struct IFConfig {
    double v_th = 0.01;
    double v_reset = 0.0;
    int t_steps = 16;

    void validate() const {
        if (v_th <= 0.0) throw ParamError("IFConfig: v_th must be > 0");
        if (t_steps < 1) throw ParamError("IFConfig: t_steps must be >= 1");
        if (!(v_reset < v_th)) throw ParamError("IFConfig: v_reset must be < v_th");
    }
};

/// Subthreshold membrane potential V' per neuron. Invariant: after any step
/// every entry is < v_th (fired entries were reset).
struct IFState {
    Tensor v_sub;

    static IFState resting(const Shape& shape, const IFConfig& cfg) {
        return IFState{Tensor::full(shape, cfg.v_reset)};
    }
};

/// Rate-discretization parameters: theta separates effective from silent
/// signals; alpha controls the steepness of the surrogate bump.
struct SpikeConfig {
    double theta = 0.01;
    double alpha = 2.0;

    void validate() const {
        if (alpha <= 0.0) throw ParamError("SpikeConfig: alpha must be > 0");
        if (theta < 0.0 || theta > 1.0) throw ParamError("SpikeConfig: theta must lie in [0,1]");
    }
};

/// Per-layer continuous prompts; each entry is a trainable [K, D] matrix.
struct PromptStack {
    std::vector<Tensor> continuous;
    std::int64_t prompt_len = 0;  // K
    std::int64_t layer_count = 0; // N

    void validate() const {
        if (continuous.empty()) throw ContractError("PromptStack: no prompts");
        for (const auto& p : continuous) {
            if (p.rank() != 2 || p.shape()[0] != prompt_len) {
                throw ContractError("PromptStack: prompt shape mismatch, expected [" +
                                    std::to_string(prompt_len) + ", D]");
            }
            if (p.shape()[1] != continuous[0].shape()[1]) {
                throw ContractError("PromptStack: inconsistent embedding width");
            }
        }
    }
};

/// Arctan-derivative surrogate bump centered at `threshold`:
/// alpha / (2 * (1 + ((pi/2) * alpha * (x - threshold))^2)).
inline double surrogate_grad_value(double x, double threshold, double alpha) {
    const double z = (kPi / 2.0) * alpha * (x - threshold);
    return alpha / (2.0 * (1.0 + z * z));
}

inline double surrogate_grad_value(double x, const SpikeConfig& cfg) {
    return surrogate_grad_value(x, cfg.theta, cfg.alpha);
}

/// One IF update: V = V' + I; spike where V - v_th >= 0 (the boundary fires);
/// V' <- V(1-S) + v_reset*S. Pure value computation, no tape involvement.
inline std::pair<Tensor, IFState> if_step(const IFState& state, const Tensor& input, const IFConfig& cfg) {
    cfg.validate();
    if (state.v_sub.shape() != input.shape()) {
        throw ShapeError("if_step: state/input shape mismatch " + shape_str(state.v_sub.shape()) +
                         " vs " + shape_str(input.shape()));
    }
    Tensor spikes = Tensor::zeros(input.shape());
    Tensor next = Tensor::zeros(input.shape());
    const std::int64_t n = input.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = state.v_sub.data()[i] + input.data()[i];
        const bool fire = (v - cfg.v_th) >= 0.0;
        spikes.data()[i] = fire ? 1.0 : 0.0;
        next.data()[i] = fire ? cfg.v_reset : v;
    }
    return {spikes, IFState{next}};
}

/// Exact T-step simulation of one IF node driven by a constant input current,
/// starting from V' = v_reset. Returns the firing rate (spike count / T).
inline double if_rate_scalar(double p, const IFConfig& cfg) {
    double v_sub = cfg.v_reset;
    int spikes = 0;
    for (int t = 0; t < cfg.t_steps; ++t) {
        const double v = v_sub + p;
        if (v - cfg.v_th >= 0.0) {
            ++spikes;
            v_sub = cfg.v_reset;
        } else {
            v_sub = v;
        }
    }
    return static_cast<double>(spikes) / static_cast<double>(cfg.t_steps);
}

/// Closed-form rate for constant input under hard reset to zero. Test oracle
/// for the simulation; rejects any other reset value.
inline double if_rate_closed_form(double p, const IFConfig& cfg) {
    cfg.validate();
    if (cfg.v_reset != 0.0) {
        throw ContractError("if_rate_closed_form: only valid for v_reset = 0");
    }
    if (p <= 0.0) return 0.0;
    const double interval = std::ceil(cfg.v_th / p);
    const double spikes = std::min(static_cast<double>(cfg.t_steps),
                                   std::floor(static_cast<double>(cfg.t_steps) / interval));
    return spikes / static_cast<double>(cfg.t_steps);
}

/// Backward policy for the rate map p -> rate(p). The rate itself is a stair
/// function, so training needs a smooth stand-in; the default reuses the
/// arctan surrogate centered at the firing threshold. Swappable.
using RateGradPolicy = std::function<double(double /*p*/, const IFConfig&)>;

inline RateGradPolicy default_rate_grad_policy(double alpha) {
    return [alpha](double p, const IFConfig& cfg) { return surrogate_grad_value(p, cfg.v_th, alpha); };
}

/// Signal-filtering layer: every prompt element drives its own IF node with
/// constant current for T steps; output is the normalized spike count in
/// {0, 1/T, ..., 1}. Forward is exact simulation; backward follows `policy`.
inline Tensor sf_layer_rate(const Tensor& prompt, const IFConfig& cfg, const RateGradPolicy& policy) {
    cfg.validate();
    CustomGradFn fn{
        [cfg](double p) { return if_rate_scalar(p, cfg); },
        [cfg, policy](double p) { return policy(p, cfg); },
    };
    return apply_custom(prompt, fn);
}

inline Tensor sf_layer_rate(const Tensor& prompt, const IFConfig& cfg, double surrogate_alpha = 2.0) {
    return sf_layer_rate(prompt, cfg, default_rate_grad_policy(surrogate_alpha));
}

/// Spike-discretization unit: 1 where x - theta >= 0 (the boundary counts as
/// effective), else 0. Backward is the arctan surrogate at theta.
inline Tensor sd_unit(const Tensor& filtered, const SpikeConfig& cfg) {
    cfg.validate();
    CustomGradFn fn{
        [th = cfg.theta](double x) { return (x - th) >= 0.0 ? 1.0 : 0.0; },
        [cfg](double x) { return surrogate_grad_value(x, cfg); },
    };
    return apply_custom(filtered, fn);
}

/// Full prompt transformation: P -> SD(SF(P)) per layer. Outputs are binary
/// and differentiable end-to-end through the two surrogate rules.
inline std::vector<Tensor> spike_prompt_forward(const PromptStack& stack, const IFConfig& if_cfg,
                                                const SpikeConfig& sd_cfg) {
    stack.validate();
    if_cfg.validate();
    sd_cfg.validate();
    std::vector<Tensor> out;
    out.reserve(stack.continuous.size());
    for (const auto& p : stack.continuous) {
        out.push_back(sd_unit(sf_layer_rate(p, if_cfg, sd_cfg.alpha), sd_cfg));
    }
    return out;
}

/// Detached constants for inference: one evaluation of the spike pipeline with
/// no tape, cached so deployment never touches IF/SD code again.
inline std::vector<Tensor> freeze_spike_prompts(const PromptStack& stack, const IFConfig& if_cfg,
                                                const SpikeConfig& sd_cfg) {
    stack.validate();
    if_cfg.validate();
    sd_cfg.validate();
    std::vector<Tensor> out;
    out.reserve(stack.continuous.size());
    for (const auto& p : stack.continuous) {
        Tensor f = Tensor::zeros(p.shape());
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const double rate = if_rate_scalar(p.data()[i], if_cfg);
            f.data()[i] = (rate - sd_cfg.theta) >= 0.0 ? 1.0 : 0.0;
        }
        out.push_back(std::move(f));
    }
    return out;
}

}  // namespace spikeprompt
