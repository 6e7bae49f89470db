#pragma once

#include "lorp/autodiff.hpp"
#include "lorp/common.hpp"

namespace lorp::align {

// CTC over V real tokens plus a blank; the blank id is V (the last class).
// Frame scores are T x (V+1) log-probabilities.

// Negative log of the summed probability over all valid CTC paths,
// computed with the forward algorithm in log space.
double ctc_loss(const Matrix& log_probs, const std::vector<int>& target);

// Gradient of ctc_loss with respect to the *logits* that produced
// log_probs = log_softmax(logits): softmax(logits) minus the state-posterior
// mass per class. Optionally returns the loss value.
Matrix ctc_grad_logits(const Matrix& logits, const std::vector<int>& target,
                       double* loss_out = nullptr);

Matrix log_softmax_rows(const Matrix& logits);

// Viterbi best path through the CTC lattice, converted to per-token
// durations. Blank frames merge into the preceding token; leading blanks
// into the first token. Durations always sum to T.
Alignment ctc_forced_align(const Matrix& log_probs, const std::vector<int>& target);

// Two-layer per-frame classifier producing (V+1)-way logits; trained with
// CTC loss so no frame labels are needed.
struct FrameClassifier {
    int feature_dim = 0;
    int hidden_dim = 0;
    int vocab = 0;  // real tokens; logits have vocab+1 columns
    NamedMatrices params;

    Matrix logits(const Matrix& frames) const;
    Matrix log_probs(const Matrix& frames) const;
};

struct FrameClassifierConfig {
    int hidden_dim = 48;
    int train_steps = 800;
    int batch_size = 4;
    double lr = 3e-3;
    // Weight of a blank-prior penalty added to the training objective only
    // (mean blank probability per frame). A frame-local classifier otherwise
    // tends to park whole token spans on blank, which ruins span-level
    // forced alignment. Zero disables it; ctc_loss itself is never touched.
    double blank_penalty = 0.5;
};

FrameClassifier make_frame_classifier(int feature_dim, int vocab, int hidden_dim, uint64_t seed);

std::vector<double> train_frame_classifier(FrameClassifier& fc,
                                           const std::vector<PromptSample>& corpus,
                                           const FrameClassifierConfig& config, uint64_t seed);

// Alignment for one utterance through the trained classifier.
Alignment forced_align(const FrameClassifier& fc, const FeatureSequence& features,
                       const std::vector<int>& tokens);

// Log-duration regressor conditioned on the token sequence and a prompt's
// (tokens, durations) context.
struct DurationPredictor {
    int vocab = 0;
    int emb_dim = 0;
    int hidden_dim = 0;
    NamedMatrices params;

    std::vector<double> predict_log_durations(const std::vector<int>& tokens,
                                              const std::vector<int>& prompt_tokens,
                                              const Alignment& prompt_durations) const;
};

struct DurationPredictorConfig {
    int emb_dim = 16;
    int hidden_dim = 32;
    int train_steps = 600;
    double lr = 1e-2;
};

DurationPredictor make_duration_predictor(int vocab, int emb_dim, int hidden_dim, uint64_t seed);

struct TrainCurve {
    std::vector<double> loss_curve;
};

TrainCurve train_duration_predictor(DurationPredictor& dp, const std::vector<PromptSample>& corpus,
                                    const DurationPredictorConfig& config, uint64_t seed);

// exp of the predicted log-durations, rounded to nearest integer, floored at 1.
Alignment predict_durations(const DurationPredictor& dp, const std::vector<int>& tokens,
                            const std::vector<int>& prompt_tokens,
                            const Alignment& prompt_durations);

}  // namespace lorp::align
