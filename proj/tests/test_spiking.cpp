#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "spikeprompt/rng.hpp"
#include "spikeprompt/spiking.hpp"
#include "spikeprompt/tensor_ops.hpp"

using namespace spikeprompt;

namespace {

PromptStack make_stack(std::int64_t layers, std::int64_t k, std::int64_t d, std::uint64_t seed,
                       double std_dev = 0.02) {
    PromptStack s;
    s.prompt_len = k;
    s.layer_count = layers;
    for (std::int64_t i = 0; i < layers; ++i)
        s.continuous.push_back(Tensor::randn({k, d}, mix_seed(seed, 100 + i), std_dev));
    return s;
}

}  // namespace

TEST(IfStep, SingleStepCrossesThreshold) {
    IFConfig cfg{0.01, 0.0, 16};
    IFState st = IFState::resting({1}, cfg);
    auto [spikes, next] = if_step(st, Tensor::scalar(0.012), cfg);
    EXPECT_DOUBLE_EQ(spikes.value(), 1.0);
    EXPECT_DOUBLE_EQ(next.v_sub.value(), 0.0);
}

TEST(IfStep, BelowThresholdAccumulates) {
    IFConfig cfg{0.01, 0.0, 16};
    IFState st = IFState::resting({1}, cfg);
    auto [spikes, next] = if_step(st, Tensor::scalar(0.004), cfg);
    EXPECT_DOUBLE_EQ(spikes.value(), 0.0);
    EXPECT_DOUBLE_EQ(next.v_sub.value(), 0.004);
}

TEST(IfStep, BoundaryFires) {
    // V - v_th == 0 is a firing condition, not a silent one. Exercised with
    // sums that are exact in binary so the boundary is actually hit.
    {
        IFConfig cfg{0.01, 0.0, 16};
        IFState st = IFState::resting({1}, cfg);
        auto [spikes, next] = if_step(st, Tensor::scalar(0.01), cfg);
        EXPECT_DOUBLE_EQ(spikes.value(), 1.0);
        EXPECT_DOUBLE_EQ(next.v_sub.value(), 0.0);
    }
    {
        IFConfig cfg{0.5, 0.0, 16};
        IFState st{Tensor::scalar(0.25)};
        auto [spikes, next] = if_step(st, Tensor::scalar(0.25), cfg);
        EXPECT_DOUBLE_EQ(spikes.value(), 1.0);
        EXPECT_DOUBLE_EQ(next.v_sub.value(), 0.0);
    }
}

TEST(IfStep, ShapeMismatchRejected) {
    IFConfig cfg;
    IFState st = IFState::resting({2, 2}, cfg);
    EXPECT_THROW(if_step(st, Tensor::zeros({3}), cfg), ShapeError);
}

TEST(IfStep, ResetInvariantHolds) {
    IFConfig cfg{0.01, 0.0, 16};
    IFState st = IFState::resting({32}, cfg);
    Rng rng(404);
    for (int t = 0; t < 64; ++t) {
        Tensor input = Tensor::randn({32}, rng.next_u64(), 0.02);
        auto [spikes, next] = if_step(st, input, cfg);
        st = next;
        for (std::int64_t i = 0; i < 32; ++i) ASSERT_LT(st.v_sub.at(i), cfg.v_th);
    }
}

TEST(IfConfig, Validation) {
    EXPECT_THROW((IFConfig{0.0, 0.0, 16}.validate()), ParamError);
    EXPECT_THROW((IFConfig{0.01, 0.0, 0}.validate()), ParamError);
    EXPECT_THROW((IFConfig{0.01, 0.02, 16}.validate()), ParamError);
    EXPECT_NO_THROW((IFConfig{0.01, -0.5, 1}.validate()));
}

TEST(SpikeConfig, Validation) {
    EXPECT_THROW((SpikeConfig{0.01, 0.0}.validate()), ParamError);
    EXPECT_THROW((SpikeConfig{-0.1, 2.0}.validate()), ParamError);
    EXPECT_THROW((SpikeConfig{1.5, 2.0}.validate()), ParamError);
}

TEST(SfLayer, InputAtThresholdSaturates) {
    IFConfig cfg{0.01, 0.0, 16};
    Tensor rate = sf_layer_rate(Tensor::scalar(0.01), cfg);
    EXPECT_DOUBLE_EQ(rate.value(), 1.0);
}

TEST(SfLayer, KnownSubthresholdRate) {
    // p=0.004 accumulates to >= 0.01 every 3rd step: spikes at 3,6,9,12,15
    IFConfig cfg{0.01, 0.0, 16};
    Tensor rate = sf_layer_rate(Tensor::scalar(0.004), cfg);
    EXPECT_DOUBLE_EQ(rate.value(), 5.0 / 16.0);
    EXPECT_DOUBLE_EQ(if_rate_closed_form(0.004, cfg), 0.3125);
}

TEST(SfLayer, NonPositiveInputStaysSilent) {
    IFConfig cfg{0.01, 0.0, 16};
    EXPECT_DOUBLE_EQ(sf_layer_rate(Tensor::scalar(-0.2), cfg).value(), 0.0);
    EXPECT_DOUBLE_EQ(sf_layer_rate(Tensor::scalar(0.0), cfg).value(), 0.0);
}

TEST(ClosedForm, Examples) {
    IFConfig cfg{0.01, 0.0, 16};
    EXPECT_DOUBLE_EQ(if_rate_closed_form(0.5, cfg), 1.0);
    EXPECT_DOUBLE_EQ(if_rate_closed_form(0.0, cfg), 0.0);
    EXPECT_DOUBLE_EQ(if_rate_closed_form(-1.0, cfg), 0.0);
}

TEST(ClosedForm, RequiresHardZeroReset) {
    IFConfig cfg{0.01, -0.001, 16};
    EXPECT_THROW(if_rate_closed_form(0.004, cfg), ContractError);
}

TEST(ClosedForm, MatchesSimulationExactly) {
    // the acceptance gate runs the same check; keep a unit-level copy
    IFConfig cfg{0.01, 0.0, 16};
    Rng rng(1234);
    for (int i = 0; i < 1000; ++i) {
        const double p = rng.uniform(-0.05, 0.05);
        ASSERT_EQ(if_rate_scalar(p, cfg), if_rate_closed_form(p, cfg)) << "p=" << p;
    }
}

TEST(SfLayer, RateValuesOnGrid) {
    IFConfig cfg{0.01, 0.0, 16};
    Rng rng(555);
    for (int i = 0; i < 200; ++i) {
        const double p = rng.uniform(-0.03, 0.03);
        const double rate = if_rate_scalar(p, cfg);
        const double scaled = rate * 16.0;
        ASSERT_EQ(scaled, std::floor(scaled));
        ASSERT_GE(rate, 0.0);
        ASSERT_LE(rate, 1.0);
    }
}

TEST(SfLayer, MonotoneInConstantInput) {
    IFConfig cfg{0.01, 0.0, 16};
    Rng rng(777);
    for (int i = 0; i < 300; ++i) {
        double p1 = rng.uniform(-0.05, 0.05);
        double p2 = rng.uniform(-0.05, 0.05);
        if (p1 > p2) std::swap(p1, p2);
        ASSERT_LE(if_rate_scalar(p1, cfg), if_rate_scalar(p2, cfg));
    }
}

TEST(SdUnit, Examples) {
    SpikeConfig cfg{0.01, 2.0};
    EXPECT_DOUBLE_EQ(sd_unit(Tensor::scalar(0.3125), cfg).value(), 1.0);
    EXPECT_DOUBLE_EQ(sd_unit(Tensor::scalar(0.0), cfg).value(), 0.0);
    // exactly at theta: the >= 0 branch emits a spike
    EXPECT_DOUBLE_EQ(sd_unit(Tensor::scalar(0.01), cfg).value(), 1.0);
}

TEST(SdUnit, IdempotentOnUnitInterval) {
    SpikeConfig cfg{0.01, 2.0};
    Rng rng(888);
    for (int i = 0; i < 100; ++i) {
        Tensor x = Tensor::scalar(rng.uniform());
        Tensor once = sd_unit(x, cfg);
        Tensor twice = sd_unit(once, cfg);
        ASSERT_EQ(once.value(), twice.value());
    }
}

TEST(Surrogate, ValueAtZeroOffsetIsAlphaHalf) {
    EXPECT_DOUBLE_EQ(surrogate_grad_value(0.01, 0.01, 2.0), 1.0);
    EXPECT_DOUBLE_EQ(surrogate_grad_value(0.25, 0.25, 3.0), 1.5);
}

TEST(Surrogate, KnownOffsetValue) {
    // x - theta = 1/pi, alpha = 2: denominator 2*(1 + (pi/pi)^2) = 4 -> 0.5
    const double theta = 0.01;
    EXPECT_NEAR(surrogate_grad_value(theta + 1.0 / kPi, theta, 2.0), 0.5, 1e-12);
}

TEST(Surrogate, VanishesFarFromThreshold) {
    EXPECT_LT(surrogate_grad_value(100.01, 0.01, 2.0), 1e-4);
    EXPECT_LT(surrogate_grad_value(-99.99, 0.01, 2.0), 1e-4);
}

TEST(Surrogate, SymmetricAroundThreshold) {
    // exact at theta = 0 (offsets are exact); near-exact for nonzero theta
    Rng rng(999);
    for (int i = 0; i < 200; ++i) {
        const double delta = rng.uniform(0.0, 5.0);
        ASSERT_EQ(surrogate_grad_value(delta, 0.0, 2.0), surrogate_grad_value(-delta, 0.0, 2.0));
        const double a = surrogate_grad_value(0.01 + delta, 0.01, 2.0);
        const double b = surrogate_grad_value(0.01 - delta, 0.01, 2.0);
        ASSERT_NEAR(a, b, 1e-12);
    }
    // maximum sits at the threshold
    for (int i = 0; i < 50; ++i) {
        const double x = rng.uniform(-1.0, 1.0);
        ASSERT_LE(surrogate_grad_value(x, 0.01, 2.0), surrogate_grad_value(0.01, 0.01, 2.0));
    }
}

TEST(SpikePrompt, ZeroPromptsStaySilent) {
    PromptStack s;
    s.prompt_len = 4;
    s.layer_count = 3;
    for (int i = 0; i < 3; ++i) s.continuous.push_back(Tensor::zeros({4, 8}));
    const auto out = spike_prompt_forward(s, IFConfig{}, SpikeConfig{});
    for (const auto& t : out)
        for (std::int64_t i = 0; i < t.numel(); ++i) ASSERT_EQ(t.at(i), 0.0);
}

TEST(SpikePrompt, ThresholdPromptsSaturate) {
    PromptStack s;
    s.prompt_len = 4;
    s.layer_count = 2;
    for (int i = 0; i < 2; ++i) s.continuous.push_back(Tensor::full({4, 8}, 0.01));
    const auto out = spike_prompt_forward(s, IFConfig{}, SpikeConfig{});
    for (const auto& t : out)
        for (std::int64_t i = 0; i < t.numel(); ++i) ASSERT_EQ(t.at(i), 1.0);
}

TEST(SpikePrompt, MatchesComposedOracles) {
    IFConfig if_cfg;
    SpikeConfig sd_cfg;
    PromptStack s = make_stack(1, 10, 16, 42);
    const auto out = spike_prompt_forward(s, if_cfg, sd_cfg);
    ASSERT_EQ(out.size(), 1u);
    const Tensor& p = s.continuous[0];
    for (std::int64_t i = 0; i < p.numel(); ++i) {
        const double rate = if_rate_closed_form(p.at(i), if_cfg);
        const double expect = (rate - sd_cfg.theta) >= 0.0 ? 1.0 : 0.0;
        ASSERT_EQ(out[0].at(i), expect);
        ASSERT_TRUE(out[0].at(i) == 0.0 || out[0].at(i) == 1.0);
    }
}

TEST(SpikePrompt, EndToEndGradientIsSurrogateProduct) {
    IFConfig if_cfg;
    SpikeConfig sd_cfg;
    PromptStack s = make_stack(1, 4, 4, 77);
    Tensor& p = s.continuous[0];
    p.set_requires_grad(true);
    {
        Tape tape;
        auto out = spike_prompt_forward(s, if_cfg, sd_cfg);
        backward(sum(out[0]));
    }
    for (std::int64_t i = 0; i < p.numel(); ++i) {
        const double rate = if_rate_scalar(p.at(i), if_cfg);
        const double expect = surrogate_grad_value(rate, sd_cfg.theta, sd_cfg.alpha) *
                              surrogate_grad_value(p.at(i), if_cfg.v_th, sd_cfg.alpha);
        ASSERT_EQ(p.grad_vec()[static_cast<std::size_t>(i)], expect) << "i=" << i;
    }
}

TEST(Freeze, MatchesLiveForwardBitwise) {
    PromptStack s = make_stack(3, 5, 8, 11);
    const auto frozen = freeze_spike_prompts(s, IFConfig{}, SpikeConfig{});
    const auto live = spike_prompt_forward(s, IFConfig{}, SpikeConfig{});
    ASSERT_EQ(frozen.size(), live.size());
    for (std::size_t i = 0; i < frozen.size(); ++i) ASSERT_TRUE(frozen[i].same_values(live[i]));
}

TEST(Freeze, DetachedFromContinuousPrompts) {
    PromptStack s = make_stack(2, 3, 4, 13);
    const auto frozen = freeze_spike_prompts(s, IFConfig{}, SpikeConfig{});
    const auto snapshot = frozen[0].vec();
    s.continuous[0].at(0, 0) = 5.0;  // drive the element well past threshold
    for (std::size_t i = 0; i < snapshot.size(); ++i) ASSERT_EQ(frozen[0].vec()[i], snapshot[i]);
    // a fresh evaluation does see the mutation
    const auto fresh = freeze_spike_prompts(s, IFConfig{}, SpikeConfig{});
    ASSERT_EQ(fresh[0].at(0, 0), 1.0);
}

TEST(RatePolicy, SwappableBackward) {
    IFConfig cfg;
    Tensor p = Tensor::scalar(0.004);
    p.set_requires_grad(true);
    {
        Tape tape;
        Tensor r = sf_layer_rate(p, cfg, [](double, const IFConfig&) { return 7.0; });
        backward(sum(r));
    }
    EXPECT_DOUBLE_EQ(p.grad_vec()[0], 7.0);
}
