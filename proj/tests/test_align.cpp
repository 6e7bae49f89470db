#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lorp/align.hpp"
#include "lorp/corpus.hpp"

#include <cmath>

using namespace lorp;
using namespace lorp::align;

namespace {

// Exhaustive CTC oracle: enumerate every frame labeling, collapse repeats,
// drop blanks, and sum (or maximize) the probability of labelings that
// spell the target. Only feasible for tiny T and V.
struct BruteForce {
    double path_sum = 0.0;
    double best_prob = -1.0;
    std::vector<int> best_durations;
};

std::vector<int> collapse(const std::vector<int>& labels, int blank) {
    std::vector<int> out;
    int prev = -1;
    for (int l : labels) {
        if (l != prev && l != blank) out.push_back(l);
        prev = l;
    }
    return out;
}

std::vector<int> labeling_durations(const std::vector<int>& labels, const std::vector<int>& target,
                                    int blank) {
    // parse runs; each non-blank run is the next target token, blanks absorb
    // into the previous token (leading blanks into the first)
    std::vector<int> durations(target.size(), 0);
    int current = 0;
    int next_token = 0;
    int prev_label = blank;
    for (int l : labels) {
        if (l != blank && (prev_label != l)) {
            current = next_token;
            ++next_token;
        }
        durations[static_cast<size_t>(current)] += 1;
        prev_label = l;
    }
    return durations;
}

BruteForce brute_force(const Matrix& log_probs, const std::vector<int>& target) {
    const int T = static_cast<int>(log_probs.rows());
    const int classes = static_cast<int>(log_probs.cols());
    const int blank = classes - 1;
    BruteForce out;
    std::vector<int> labels(static_cast<size_t>(T), 0);
    while (true) {
        if (collapse(labels, blank) == target) {
            double lp = 0.0;
            for (int t = 0; t < T; ++t) lp += log_probs(t, labels[static_cast<size_t>(t)]);
            double p = std::exp(lp);
            out.path_sum += p;
            if (p > out.best_prob) {
                out.best_prob = p;
                out.best_durations = labeling_durations(labels, target, blank);
            }
        }
        int i = 0;
        while (i < T && labels[static_cast<size_t>(i)] == classes - 1) {
            labels[static_cast<size_t>(i)] = 0;
            ++i;
        }
        if (i == T) break;
        labels[static_cast<size_t>(i)] += 1;
    }
    return out;
}

Matrix random_lattice(int T, int classes, Rng& rng) {
    Matrix logits = rng.gauss_matrix(T, classes, 1.2);
    return log_softmax_rows(logits);
}

Matrix near_one_hot(const std::vector<int>& frame_labels, int classes) {
    Matrix m = Matrix::Constant(static_cast<int>(frame_labels.size()), classes, std::log(1e-6));
    for (size_t t = 0; t < frame_labels.size(); ++t) m(static_cast<Eigen::Index>(t), frame_labels[t]) = 0.0;
    return log_softmax_rows(m);
}

}  // namespace

TEST_CASE("single frame, single token: loss is the negative frame log-probability") {
    Rng rng(1);
    Matrix lp = random_lattice(1, 4, rng);
    CHECK(ctc_loss(lp, {2}) == doctest::Approx(-lp(0, 2)).epsilon(1e-12));
}

TEST_CASE("uniform two-frame lattice sums exactly three paths") {
    const int classes = 4;  // V = 3 plus blank
    Matrix lp = Matrix::Constant(2, classes, std::log(1.0 / classes));
    double expected = -std::log(3.0 / (classes * classes));
    CHECK(ctc_loss(lp, {0}) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("ctc_loss is non-negative and rejects infeasible targets") {
    Rng rng(2);
    Matrix lp = random_lattice(3, 3, rng);
    CHECK(ctc_loss(lp, {0, 1}) >= 0.0);
    CHECK(ctc_loss(lp, {0, 0}) >= 0.0);  // "aa" needs exactly 3 frames
    CHECK_THROWS_AS(ctc_loss(lp, {0, 1, 0, 1}), std::invalid_argument);  // needs 4 frames
    Matrix lp2 = random_lattice(2, 3, rng);
    CHECK_THROWS_AS(ctc_loss(lp2, {0, 0}), std::invalid_argument);  // repeat needs a blank frame
    CHECK_THROWS_AS(ctc_loss(lp, {}), std::invalid_argument);
    CHECK_THROWS_AS(ctc_loss(lp, {7}), std::invalid_argument);
    Matrix unnormalized = Matrix::Zero(3, 3);
    CHECK_THROWS_AS(ctc_loss(unnormalized, {0}), std::invalid_argument);
}

TEST_CASE("ctc_loss equals brute-force path enumeration on small lattices") {
    Rng rng(3);
    int checked = 0;
    for (int trial = 0; trial < 60; ++trial) {
        int V = rng.uniform_int(1, 3);
        int T = rng.uniform_int(1, 6);
        int L = rng.uniform_int(1, 3);
        std::vector<int> target;
        for (int i = 0; i < L; ++i) target.push_back(rng.uniform_int(0, V - 1));
        Matrix lp = random_lattice(T, V + 1, rng);
        BruteForce bf = brute_force(lp, target);
        if (bf.path_sum <= 0.0) {
            CHECK_THROWS_AS(ctc_loss(lp, target), std::invalid_argument);
            continue;
        }
        CHECK(ctc_loss(lp, target) == doctest::Approx(-std::log(bf.path_sum)).epsilon(1e-6));
        ++checked;
    }
    CHECK(checked > 30);
}

TEST_CASE("forced alignment: unambiguous one-hot lattices") {
    // T equal to the target length with matching near-one-hot probabilities
    Matrix lp = near_one_hot({0, 1, 2}, 4);
    Alignment a = ctc_forced_align(lp, {0, 1, 2});
    CHECK(a.durations == std::vector<int>{1, 1, 1});

    // T=4, one-hot (a, a, b, b)
    Matrix lp2 = near_one_hot({0, 0, 1, 1}, 3);
    Alignment a2 = ctc_forced_align(lp2, {0, 1});
    CHECK(a2.durations == std::vector<int>{2, 2});
}

TEST_CASE("forced alignment matches exhaustive best-path search on random lattices") {
    Rng rng(4);
    int checked = 0;
    while (checked < 100) {
        int V = rng.uniform_int(1, 3);
        int T = rng.uniform_int(2, 5);
        int L = rng.uniform_int(1, 2);
        std::vector<int> target;
        for (int i = 0; i < L; ++i) target.push_back(rng.uniform_int(0, V - 1));
        Matrix lp = random_lattice(T, V + 1, rng);
        BruteForce bf = brute_force(lp, target);
        if (bf.path_sum <= 0.0) continue;
        Alignment got = ctc_forced_align(lp, target);
        CHECK(got.durations == bf.best_durations);
        CHECK(got.total_frames() == T);
        for (int d : got.durations) CHECK(d >= 1);
        ++checked;
    }
}

TEST_CASE("ctc gradient against central differences of the loss") {
    Rng rng(5);
    Matrix logits = rng.gauss_matrix(4, 4, 0.7);
    std::vector<int> target{1, 0};
    double loss = 0.0;
    Matrix grad = ctc_grad_logits(logits, target, &loss);
    CHECK(loss == doctest::Approx(ctc_loss(log_softmax_rows(logits), target)).epsilon(1e-12));
    const double eps = 1e-5;
    for (int t = 0; t < 4; ++t)
        for (int k = 0; k < 4; ++k) {
            Matrix up = logits, down = logits;
            up(t, k) += eps;
            down(t, k) -= eps;
            double numeric = (ctc_loss(log_softmax_rows(up), target) -
                              ctc_loss(log_softmax_rows(down), target)) /
                             (2 * eps);
            CHECK(grad(t, k) == doctest::Approx(numeric).epsilon(1e-4));
        }
}

// ---------------------------------------------------------------------------
// Frame classifier + forced alignment on synthetic renders

namespace {

corpus::SpeakerSpec clean_speaker(uint64_t seed, int dim) {
    corpus::SpeakerSpec s = corpus::make_speaker(seed, corpus::Regime::Studio, dim);
    s.noise_std = 0.0;
    s.jitter_std = 0.0;
    return s;
}

}  // namespace

TEST_CASE("a CTC-trained frame classifier recovers ground-truth durations on clean renders") {
    const int dim = 16;
    corpus::Vocab vocab = corpus::build_vocab(6, dim, 77);
    std::vector<PromptSample> train_set;
    Rng rng(6);
    // envelope variety matters: the classifier must separate token bands
    // from speaker envelopes it has never seen
    for (int i = 0; i < 24; ++i) {
        corpus::SpeakerSpec spk = clean_speaker(derive_seed(100, static_cast<uint64_t>(i % 8)), dim);
        std::vector<int> text = corpus::sample_text(vocab, rng.uniform_int(3, 5), rng);
        Alignment durs = corpus::sample_durations(vocab, text, rng);
        train_set.push_back(corpus::render(spk, vocab, text, durs, rng.seed() + i));
    }

    FrameClassifier fc = make_frame_classifier(dim, vocab.size(), 32, 9);
    FrameClassifierConfig cfg;
    cfg.train_steps = 1200;
    cfg.batch_size = 3;
    std::vector<double> curve = train_frame_classifier(fc, train_set, cfg, 10);
    REQUIRE(curve.size() == 1200);
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 30; ++i) early += curve[static_cast<size_t>(i)];
    for (int i = 1170; i < 1200; ++i) late += curve[static_cast<size_t>(i)];
    CHECK(late < early);

    // held-out utterances from a held-out clean speaker
    int exact = 0, total = 0;
    for (int i = 0; i < 5; ++i) {
        corpus::SpeakerSpec spk = clean_speaker(derive_seed(200, static_cast<uint64_t>(i)), dim);
        Rng urng(derive_seed(7, static_cast<uint64_t>(i)));
        std::vector<int> text = corpus::sample_text(vocab, 4, urng);
        Alignment durs = corpus::sample_durations(vocab, text, urng);
        PromptSample utt = corpus::render(spk, vocab, text, durs, urng.seed());
        Alignment got = forced_align(fc, utt.features, utt.tokens);
        CHECK(got.total_frames() == utt.features.length());
        for (size_t j = 0; j < durs.durations.size(); ++j) {
            ++total;
            if (got.durations[j] == durs.durations[j]) ++exact;
        }
    }
    CHECK(exact == total);  // noise-free renders align exactly
}

// ---------------------------------------------------------------------------
// Duration predictor

TEST_CASE("zero training steps leave the predictor untrained") {
    DurationPredictor dp = make_duration_predictor(6, 8, 16, 1);
    NamedMatrices before = dp.params;
    std::vector<PromptSample> corpus_set;
    PromptSample s;
    s.tokens = {0, 1};
    s.alignment.durations = {3, 3};
    s.features.frames = Matrix::Zero(6, 4);
    corpus_set.push_back(s);
    DurationPredictorConfig cfg;
    cfg.train_steps = 0;
    train_duration_predictor(dp, corpus_set, cfg, 2);
    CHECK(dp.params == before);
}

TEST_CASE("constant-duration corpus: predictor converges to the constant") {
    const int k = 5;
    corpus::Vocab vocab = corpus::build_vocab(6, 16, 42);
    std::vector<PromptSample> corpus_set;
    Rng rng(8);
    for (int i = 0; i < 20; ++i) {
        PromptSample s;
        int len = rng.uniform_int(3, 6);
        s.tokens = corpus::sample_text(vocab, len, rng);
        s.alignment.durations.assign(static_cast<size_t>(len), k);
        s.features.frames = Matrix::Zero(len * k, 4);
        corpus_set.push_back(s);
    }
    DurationPredictor dp = make_duration_predictor(vocab.size(), 8, 16, 3);
    DurationPredictorConfig cfg;
    cfg.train_steps = 600;
    TrainCurve curve = train_duration_predictor(dp, corpus_set, cfg, 4);
    REQUIRE(curve.loss_curve.size() == 600);

    // loss trend is non-increasing over a 200-step window
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 100; ++i) first += curve.loss_curve[static_cast<size_t>(i)];
    for (int i = 500; i < 600; ++i) last += curve.loss_curve[static_cast<size_t>(i)];
    CHECK(last <= first);

    // predictions land within 10% of log k, i.e. within one frame here
    std::vector<int> text{1, 3, 5};
    Alignment prompt_durs;
    prompt_durs.durations = {k, k, k};
    std::vector<double> log_d = dp.predict_log_durations(text, {0, 2, 4}, prompt_durs);
    for (double ld : log_d) CHECK(std::abs(ld - std::log(double(k))) < 0.1 * std::log(double(k)));
    Alignment pred = predict_durations(dp, text, {0, 2, 4}, prompt_durs);
    double mae = 0.0;
    for (int d : pred.durations) mae += std::abs(d - k);
    CHECK(mae / 3.0 <= 1.0);
}

TEST_CASE("predicted durations floor at one frame") {
    // an untrained predictor with weights forced very negative emits log
    // durations below zero; the floor rule must clamp them to 1
    DurationPredictor dp = make_duration_predictor(4, 4, 8, 5);
    dp.params["dur.w2"].setZero();
    dp.params["dur.b2"].setConstant(-3.0);  // exp(-3) ~ 0.05 -> rounds to 0 -> clamps to 1
    Alignment prompt;
    prompt.durations = {2, 2};
    Alignment a = predict_durations(dp, {0, 1, 2}, {0, 1}, prompt);
    CHECK(a.durations == std::vector<int>{1, 1, 1});

    // a predictor emitting exactly log k yields k everywhere
    dp.params["dur.b2"].setConstant(std::log(4.0));
    Alignment b = predict_durations(dp, {0, 1}, {0, 1}, prompt);
    CHECK(b.durations == std::vector<int>{4, 4});
}
