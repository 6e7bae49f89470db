#pragma once

#include "lorp/common.hpp"

#include <filesystem>

namespace lorp::corpus {

enum class Regime { Studio, Wild };

const char* regime_name(Regime r);
Regime parse_regime(const std::string& s);

struct EnvelopeBump {
    double center = 0.0;  // bin position in [0, dim)
    double width = 1.0;
    double height = 1.0;
};

// Parametric generative identity of a synthetic speaker. The envelope is the
// ground truth the similarity oracle recovers.
struct SpeakerSpec {
    std::vector<EnvelopeBump> bumps;
    double jitter_std = 0.0;  // per-utterance envelope perturbation
    double noise_std = 0.0;   // per-frame noise
    Regime regime = Regime::Studio;
    uint64_t seed = 0;

    Vector envelope(int dim) const;
    std::string id() const;  // "studio:<seed>" / "wild:<seed>"
};

// Studio: 2-3 gentle bumps, noise std in [0, 0.05]. Wild: 4-8 taller bumps,
// noise std in [0.1, 0.3]. Deterministic given the seed.
SpeakerSpec make_speaker(uint64_t seed, Regime regime, int dim = 16);

struct TokenPrototype {
    Vector pattern;
    int nominal_duration = 6;
};

struct Vocab {
    int dim = 0;
    std::vector<TokenPrototype> tokens;

    int size() const { return static_cast<int>(tokens.size()); }
    Matrix pattern_matrix() const;  // V x D
};

// Band-spike prototypes with a little texture noise; pairwise cosine < 0.5
// is verified at build time. Requires vocab_size <= dim.
Vocab build_vocab(int vocab_size, int dim, uint64_t seed);

// frame = envelope + prototype(token) + jitter*g1 + noise*g2 with g1 shared
// per utterance and g2 drawn per frame.
PromptSample render(const SpeakerSpec& speaker, const Vocab& vocab, const std::vector<int>& tokens,
                    const Alignment& durations, uint64_t seed, double frame_rate = 50.0);

// Random token sequence without immediate repeats (a repeat would collapse
// under CTC-style decoding and is never emitted by the text pool).
std::vector<int> sample_text(const Vocab& vocab, int length, Rng& rng);

// Durations near each token's nominal value.
Alignment sample_durations(const Vocab& vocab, const std::vector<int>& tokens, Rng& rng);

struct CorpusConfig {
    int vocab_size = 12;
    int dim = 16;
    int speakers = 16;
    int utterances_per_speaker = 8;
    int text_len_lo = 4;
    int text_len_hi = 8;
    Regime regime = Regime::Studio;
    double frame_rate = 50.0;
};

std::vector<PromptSample> generate(const CorpusConfig& config, const Vocab& vocab, uint64_t seed);

// On-disk layout: vocab archive, one feature archive per utterance, and a
// text manifest with one line per utterance:
//   id speaker_seed regime "tok tok ..." "dur dur ..." file
void save_corpus(const std::filesystem::path& dir, const std::vector<PromptSample>& samples,
                 const Vocab& vocab);
std::pair<std::vector<PromptSample>, Vocab> load_corpus(const std::filesystem::path& dir);

}  // namespace lorp::corpus
