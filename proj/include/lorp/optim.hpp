#pragma once

#include "lorp/common.hpp"

namespace lorp::ad {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam. Accumulators are allocated lazily per parameter, so
// the state may be shared across parameters that appear over time.
struct AdamState {
    AdamConfig config;
    long step = 0;
    NamedMatrices m;
    NamedMatrices v;
};

// Updates every parameter that has an entry in `grads`; everything else is
// left untouched. Throws on shape mismatch or non-positive learning rate.
void adam_step(NamedMatrices& params, const NamedMatrices& grads, AdamState& state);

}  // namespace lorp::ad
