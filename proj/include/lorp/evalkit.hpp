#pragma once

#include "lorp/audio.hpp"
#include "lorp/corpus.hpp"
#include "lorp/personalize.hpp"
#include "lorp/stack.hpp"

#include <filesystem>
#include <optional>

namespace lorp::eval {

struct SpeakerEmbedding {
    Vector v;  // unit L2 norm
};

// Per-bin temporal median (suppresses token content), then L2 normalization.
// Requires at least 8 frames.
SpeakerEmbedding speaker_embed(const FeatureSequence& features);

double cosine_sim(const SpeakerEmbedding& a, const SpeakerEmbedding& b);

// Median-subtract for speaker removal, nearest prototype per frame by
// cosine, collapse consecutive repeats.
std::vector<int> decode_tokens(const FeatureSequence& features, const corpus::Vocab& vocab);

// Levenshtein distance divided by the reference length.
double edit_rate(const std::vector<int>& hyp, const std::vector<int>& ref);

// Fixed 3-sub-unit expansion per token id; the substrate of the
// character-level error analogue.
std::vector<int> expand_subunits(const std::vector<int>& tokens);

// External quality scorer: a command that reads a 16-bit PCM WAV on stdin
// and prints one decimal number. Failures yield an absent score plus a
// warning, never a run failure.
struct QualityScorer {
    std::string command;
    double timeout_sec = 30.0;
};

std::optional<double> quality_score(const FeatureSequence& features, const QualityScorer* scorer);

enum class Mode { Baseline, Lorp, MultiSample };

const char* mode_name(Mode m);
Mode parse_mode(const std::string& s);

struct SweepCell {
    Mode mode = Mode::Baseline;
    corpus::Regime regime = corpus::Regime::Wild;
    int samples = 1;
    int adapt_steps = 0;
    int rank = 16;
    double alpha = 16.0;
    int ode_steps = 30;

    std::string descriptor() const;
};

struct SweepSpec {
    std::vector<SweepCell> cells;
    int speakers = 4;
    int texts_per_cell = 25;
    int text_len_lo = 4;
    int text_len_hi = 8;
    double adapt_lr = 1e-3;
    std::optional<QualityScorer> scorer;
};

struct EvalRow {
    SweepCell cell;
    double simm = 0.0;  // mean cosine x 100
    double wer = 0.0;   // percent
    double cer = 0.0;   // percent
    std::optional<double> mos;
    int n = 0;
    uint64_t seed = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;

    std::string to_csv() const;
    void write_csv(const std::filesystem::path& path) const;
};

// Runs every cell: adapt (when applicable), synthesize the shared held-out
// text pool, score. Completed cells are skipped on re-run (their row files
// live under <out_dir>/cells) which makes interrupted sweeps resumable.
// Cells are independent; `jobs` of them run concurrently.
EvalReport run_sweep(const TrainedStack& stack, const corpus::Vocab& vocab, const SweepSpec& spec,
                     const std::filesystem::path& out_dir, uint64_t seed, int jobs = 1);

// One cell end to end; exposed for the acceptance protocol tests.
EvalRow run_cell(const TrainedStack& stack, const corpus::Vocab& vocab, const SweepSpec& spec,
                 const SweepCell& cell, uint64_t sweep_seed);

}  // namespace lorp::eval
