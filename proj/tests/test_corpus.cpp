#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lorp/corpus.hpp"
#include "lorp/util.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

using namespace lorp;
using namespace lorp::corpus;

TEST_CASE("speakers are deterministic per (seed, regime) and regimes differ") {
    SpeakerSpec a = make_speaker(5, Regime::Studio);
    SpeakerSpec b = make_speaker(5, Regime::Studio);
    CHECK(a.bumps.size() == b.bumps.size());
    CHECK(a.noise_std == b.noise_std);
    CHECK(a.envelope(16) == b.envelope(16));
    SpeakerSpec w = make_speaker(5, Regime::Wild);
    CHECK(a.envelope(16) != w.envelope(16));
    CHECK(a.id() == "studio:5");
    CHECK(w.id() == "wild:5");
}

TEST_CASE("studio noise is always below wild noise (disjoint ranges)") {
    double studio_max = 0.0, wild_min = 1e9;
    for (uint64_t s = 0; s < 60; ++s) {
        studio_max = std::max(studio_max, make_speaker(s, Regime::Studio).noise_std);
        wild_min = std::min(wild_min, make_speaker(s, Regime::Wild).noise_std);
    }
    CHECK(studio_max <= 0.05);
    CHECK(wild_min >= 0.1);
    CHECK(studio_max < wild_min);
}

TEST_CASE("wild speakers are pairwise distinguishable by envelope cosine") {
    const int dim = 16;
    std::vector<Vector> envs;
    for (uint64_t s = 0; s < 100; ++s)
        envs.push_back(make_speaker(derive_seed(900, s), Regime::Wild, dim).envelope(dim));
    int distinguishable = 0, pairs = 0;
    for (size_t i = 0; i < envs.size(); ++i)
        for (size_t j = i + 1; j < envs.size(); ++j) {
            double cos = envs[i].dot(envs[j]) / (envs[i].norm() * envs[j].norm());
            ++pairs;
            if (cos < 0.99) ++distinguishable;
        }
    CHECK(distinguishable >= (pairs * 95) / 100);
}

TEST_CASE("vocab prototypes stay well separated and vocab size is bounded by dim") {
    Vocab v = build_vocab(12, 16, 3);
    CHECK(v.size() == 12);
    Matrix p = v.pattern_matrix();
    for (int a = 0; a < v.size(); ++a)
        for (int b = a + 1; b < v.size(); ++b) {
            double cos = p.row(a).dot(p.row(b)) / (p.row(a).norm() * p.row(b).norm());
            CHECK(cos < 0.5);
        }
    CHECK_THROWS_AS(build_vocab(20, 16, 3), std::invalid_argument);
    for (const TokenPrototype& t : v.tokens) CHECK(t.nominal_duration >= 4);
}

TEST_CASE("noise-free render is exactly envelope plus prototype") {
    const int dim = 16;
    Vocab vocab = build_vocab(6, dim, 3);
    SpeakerSpec spk = make_speaker(7, Regime::Studio, dim);
    spk.noise_std = 0.0;
    spk.jitter_std = 0.0;
    std::vector<int> text{1, 4, 2};
    Alignment durs;
    durs.durations = {3, 2, 4};
    PromptSample s = render(spk, vocab, text, durs, 11);
    CHECK(s.features.length() == 9);
    Vector env = spk.envelope(dim);
    int f = 0;
    for (size_t j = 0; j < text.size(); ++j) {
        const Vector& proto = vocab.tokens[static_cast<size_t>(text[j])].pattern;
        for (int k = 0; k < durs.durations[j]; ++k, ++f)
            CHECK((s.features.frames.row(f).transpose() - (env + proto)).cwiseAbs().maxCoeff() <
                  1e-12);
    }
}

TEST_CASE("render is deterministic given the full input tuple") {
    const int dim = 16;
    Vocab vocab = build_vocab(6, dim, 3);
    SpeakerSpec spk = make_speaker(8, Regime::Wild, dim);
    std::vector<int> text{0, 3};
    Alignment durs;
    durs.durations = {4, 4};
    PromptSample a = render(spk, vocab, text, durs, 21);
    PromptSample b = render(spk, vocab, text, durs, 21);
    PromptSample c = render(spk, vocab, text, durs, 22);
    CHECK(a.features.frames == b.features.frames);
    CHECK(a.features.frames != c.features.frames);
    CHECK(a.features.length() == durs.total_frames());
}

TEST_CASE("per-bin temporal median minus the prototype median recovers the envelope") {
    const int dim = 16;
    Vocab vocab = build_vocab(8, dim, 5);
    SpeakerSpec spk = make_speaker(9, Regime::Wild, dim);
    spk.noise_std = 0.0;
    spk.jitter_std = 0.0;
    Rng rng(31);
    std::vector<int> text = sample_text(vocab, 24, rng);
    Alignment durs = sample_durations(vocab, text, rng);
    PromptSample s = render(spk, vocab, text, durs, 41);

    // exact oracle: median(features) - median(prototype value per frame)
    const int T = s.features.length();
    std::vector<int> per_frame = token_frames(text, durs);
    for (int bin = 0; bin < dim; ++bin) {
        std::vector<double> fv(static_cast<size_t>(T)), pv(static_cast<size_t>(T));
        for (int f = 0; f < T; ++f) {
            fv[static_cast<size_t>(f)] = s.features.frames(f, bin);
            pv[static_cast<size_t>(f)] =
                vocab.tokens[static_cast<size_t>(per_frame[static_cast<size_t>(f)])].pattern(bin);
        }
        std::sort(fv.begin(), fv.end());
        std::sort(pv.begin(), pv.end());
        auto median = [](const std::vector<double>& v) {
            size_t n = v.size();
            return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
        };
        double reconstructed = median(fv) - median(pv);
        CHECK(std::abs(reconstructed - spk.envelope(dim)(bin)) < 1e-6);
    }
}

TEST_CASE("sampled text never repeats a token consecutively") {
    Vocab vocab = build_vocab(6, 16, 3);
    Rng rng(12);
    for (int i = 0; i < 50; ++i) {
        std::vector<int> text = sample_text(vocab, rng.uniform_int(2, 20), rng);
        for (size_t j = 1; j < text.size(); ++j) CHECK(text[j] != text[j - 1]);
    }
}

TEST_CASE("generate produces the configured corpus and round-trips through disk") {
    CorpusConfig cfg;
    cfg.vocab_size = 6;
    cfg.dim = 16;
    cfg.speakers = 3;
    cfg.utterances_per_speaker = 2;
    Vocab vocab = build_vocab(cfg.vocab_size, cfg.dim, 77);
    std::vector<PromptSample> samples = generate(cfg, vocab, 123);
    REQUIRE(samples.size() == 6);
    for (const PromptSample& s : samples) {
        CHECK(s.alignment.total_frames() == s.features.length());
        CHECK(!s.tokens.empty());
    }
    // two speakers share no utterance ids
    CHECK(samples[0].speaker_id != samples[2].speaker_id);

    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "lorp_test_corpus";
    fs::remove_all(dir);
    save_corpus(dir, samples, vocab);
    auto [back, vocab_back] = load_corpus(dir);
    REQUIRE(back.size() == samples.size());
    CHECK(vocab_back.size() == vocab.size());
    CHECK(back[0].tokens == samples[0].tokens);
    CHECK(back[0].alignment.durations == samples[0].alignment.durations);
    CHECK(back[0].speaker_id == samples[0].speaker_id);
    // features survive the float32 archive round trip
    CHECK((back[0].features.frames - samples[0].features.frames).cwiseAbs().maxCoeff() < 1e-6);
    fs::remove_all(dir);
}

TEST_CASE("generation is deterministic per seed") {
    CorpusConfig cfg;
    cfg.vocab_size = 6;
    cfg.dim = 16;
    cfg.speakers = 2;
    cfg.utterances_per_speaker = 2;
    Vocab vocab = build_vocab(cfg.vocab_size, cfg.dim, 77);
    auto a = generate(cfg, vocab, 5);
    auto b = generate(cfg, vocab, 5);
    auto c = generate(cfg, vocab, 6);
    REQUIRE(a.size() == b.size());
    CHECK(a[3].features.frames == b[3].features.frames);
    CHECK(a[3].features.frames != c[3].features.frames);
}
