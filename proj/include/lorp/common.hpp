#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lorp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Named matrix collection. std::map keeps iteration order stable, which
// matters for serialization and optimizer determinism.
using NamedMatrices = std::map<std::string, Matrix>;

uint64_t splitmix64(uint64_t& state);

// Derives an independent sub-seed from a master seed and a stream tag, so a
// single --seed pins every component of a pipeline.
uint64_t derive_seed(uint64_t seed, uint64_t stream);
uint64_t derive_seed(uint64_t seed, std::string_view tag);

// Seeded RNG wrapper. Gaussians use Box-Muller on raw mt19937_64 draws, one
// value per call, so sequences depend only on the seed and the call order.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t seed() const { return seed_; }

    double uniform();                         // [0, 1)
    double uniform(double lo, double hi);     // [lo, hi)
    int uniform_int(int lo, int hi);          // inclusive bounds
    double gauss();                           // standard normal
    Matrix gauss_matrix(int rows, int cols, double std_dev = 1.0);

    Rng derive(std::string_view tag) const { return Rng(derive_seed(seed_, tag)); }
    Rng derive(uint64_t stream) const { return Rng(derive_seed(seed_, stream)); }

private:
    uint64_t seed_;
    uint64_t state_;
    uint64_t next_u64();
};

// Per-token frame counts. Sum equals the utterance length.
struct Alignment {
    std::vector<int> durations;

    int total_frames() const {
        return std::accumulate(durations.begin(), durations.end(), 0);
    }
    void validate() const;
};

// T x D matrix of log-scaled feature frames plus frame-rate metadata.
struct FeatureSequence {
    Matrix frames;
    double frame_rate = 50.0;  // frames per second

    int length() const { return static_cast<int>(frames.rows()); }
    int dim() const { return static_cast<int>(frames.cols()); }
};

// One utterance: the unit a personalization run adapts on.
struct PromptSample {
    FeatureSequence features;
    std::vector<int> tokens;
    Alignment alignment;
    std::string speaker_id;
    std::string utterance_id;
};

// Expands (tokens, durations) into a per-frame token id sequence.
std::vector<int> token_frames(const std::vector<int>& tokens, const Alignment& alignment);

}  // namespace lorp
