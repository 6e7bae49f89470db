#include "lorp/personalize.hpp"

#include "lorp/optim.hpp"

#include <chrono>

namespace lorp {

void LorpConfig::validate() const {
    if (steps < 0) throw std::invalid_argument("lorp config: steps must be >= 0");
    if (samples < 1) throw std::invalid_argument("lorp config: samples must be >= 1");
    if (learning_rate <= 0.0) throw std::invalid_argument("lorp config: learning rate must be > 0");
    if (ode_steps < 1) throw std::invalid_argument("lorp config: ode_steps must be >= 1");
}

PersonalizationResult adapt(const net::Model& model, const std::vector<PromptSample>& prompts,
                            const LorpConfig& config, uint64_t seed) {
    config.validate();
    if (prompts.empty()) throw std::invalid_argument("adapt: need at least one prompt");
    const auto t0 = std::chrono::steady_clock::now();

    PersonalizationResult result;
    result.config = config;
    result.adapters = lora::inject(model, config.lora, derive_seed(seed, "adapt-init"));

    cfm::CfmConfig loss_cfg;
    loss_cfg.sigma_min = config.sigma_min;
    loss_cfg.mask_lo = config.mask_lo;
    loss_cfg.mask_hi = config.mask_hi;

    ad::AdamState opt;
    opt.config.lr = config.learning_rate;
    Rng rng(derive_seed(seed, "adapt-steps"));
    for (int step = 0; step < config.steps; ++step) {
        const PromptSample& prompt = prompts[static_cast<size_t>(step) % prompts.size()];
        NamedMatrices grads;
        double loss = cfm::cfm_loss(model, &result.adapters, {prompt}, loss_cfg, rng, &grads);
        // only the adapter weights move; base gradients are discarded
        NamedMatrices adapter_grads;
        for (auto& [name, g] : grads)
            if (name.rfind("lora.", 0) == 0) adapter_grads[name] = std::move(g);
        adam_step(result.adapters.params, adapter_grads, opt);
        result.loss_curve.push_back(loss);
    }

    result.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

SynthesisOutput synthesize(const TrainedStack& stack, const lora::AdapterSet* adapters,
                           const PromptSample& prompt, const std::vector<int>& text,
                           int ode_steps, uint64_t seed) {
    if (text.empty()) throw std::invalid_argument("synthesize: empty text");
    if (prompt.tokens.empty()) throw std::invalid_argument("synthesize: prompt has no tokens");

    Alignment new_durs =
        align::predict_durations(stack.duration, text, prompt.tokens, prompt.alignment);

    const int Tp = prompt.features.length();
    const int Tn = new_durs.total_frames();
    const int T = Tp + Tn;
    const int D = prompt.features.dim();

    FeatureSequence context;
    context.frames = Matrix::Zero(T, D);
    context.frames.topRows(Tp) = prompt.features.frames;
    context.frame_rate = prompt.features.frame_rate;

    std::vector<uint8_t> given(static_cast<size_t>(T), 0);
    for (int f = 0; f < Tp; ++f) given[static_cast<size_t>(f)] = 1;

    std::vector<int> frames_tok = token_frames(prompt.tokens, prompt.alignment);
    std::vector<int> new_tok = token_frames(text, new_durs);
    frames_tok.insert(frames_tok.end(), new_tok.begin(), new_tok.end());

    FeatureSequence full = cfm::sample(stack.model, adapters, context, given, frames_tok,
                                       ode_steps, derive_seed(seed, "synthesize"));

    SynthesisOutput out;
    out.full = full;
    out.generated.frames = full.frames.bottomRows(Tn);
    out.generated.frame_rate = full.frame_rate;
    out.durations = std::move(new_durs);
    out.prompt_frames = Tp;
    return out;
}

SynthesisOutput baseline_synthesize(const TrainedStack& stack, const PromptSample& prompt,
                                    const std::vector<int>& text, int ode_steps, uint64_t seed) {
    return synthesize(stack, nullptr, prompt, text, ode_steps, seed);
}

}  // namespace lorp
