#pragma once

#include "lorp/cfm.hpp"
#include "lorp/lora.hpp"
#include "lorp/stack.hpp"

namespace lorp {

struct LorpConfig {
    int steps = 100;             // optimizer steps before prompting
    int samples = 1;             // prompt samples per speaker
    double learning_rate = 1e-3;
    lora::LoraConfig lora;       // r = alpha = 16 by default
    int ode_steps = 30;
    double mask_lo = 0.7;
    double mask_hi = 1.0;
    double sigma_min = 1e-4;

    void validate() const;
};

struct PersonalizationResult {
    lora::AdapterSet adapters;
    std::vector<double> loss_curve;  // one entry per optimizer step
    double wall_time_sec = 0.0;
    LorpConfig config;
};

// Fresh adapters, then `steps` Adam updates of the masked infilling loss on
// the prompt set. Base weights are never touched. With several prompts the
// steps walk the set round-robin, one prompt per step.
PersonalizationResult adapt(const net::Model& model, const std::vector<PromptSample>& prompts,
                            const LorpConfig& config, uint64_t seed);

struct SynthesisOutput {
    FeatureSequence generated;   // the new-token region only
    FeatureSequence full;        // prompt frames followed by generated frames
    Alignment durations;         // predicted durations of the new tokens
    int prompt_frames = 0;
};

// Prompt frames stay pinned as context while the continuation for `text` is
// infilled. Durations come from the duration predictor with the prompt as
// context. Deterministic given the seed.
SynthesisOutput synthesize(const TrainedStack& stack, const lora::AdapterSet* adapters,
                           const PromptSample& prompt, const std::vector<int>& text,
                           int ode_steps, uint64_t seed);

// Zero-shot path: same pipeline with no adapters.
SynthesisOutput baseline_synthesize(const TrainedStack& stack, const PromptSample& prompt,
                                    const std::vector<int>& text, int ode_steps, uint64_t seed);

}  // namespace lorp
