#pragma once

#include "lorp/align.hpp"
#include "lorp/net.hpp"

#include <filesystem>

namespace lorp {

// Everything synthesis needs: the vector-field model, the duration
// predictor and the CTC frame classifier, trained together by `train`.
struct TrainedStack {
    net::Model model;
    align::DurationPredictor duration;
    align::FrameClassifier frame_classifier;
};

// One archive holds all three parameter sets (distinct name prefixes); the
// shapes travel in a flat key-value sidecar "<path>.cfg".
void save_stack(const std::filesystem::path& archive_path, const TrainedStack& stack);
TrainedStack load_stack(const std::filesystem::path& archive_path);

}  // namespace lorp
