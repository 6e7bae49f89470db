#include "lorp/align.hpp"

#include "lorp/optim.hpp"

#include <cmath>
#include <limits>

namespace lorp::align {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double logsumexp2(double a, double b) {
    double m = std::max(a, b);
    if (m == kNegInf) return kNegInf;
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double logsumexp3(double a, double b, double c) { return logsumexp2(logsumexp2(a, b), c); }

// Expanded CTC state sequence: blanks interleaved around the target,
// S = 2L+1 states; even states are blanks, odd state s is target[(s-1)/2].
struct Lattice {
    int T = 0;
    int S = 0;
    int blank = 0;
    const Matrix* lp = nullptr;
    const std::vector<int>* target = nullptr;

    int label(int s) const { return s % 2 == 0 ? blank : (*target)[static_cast<size_t>((s - 1) / 2)]; }
    double emit(int t, int s) const { return (*lp)(t, label(s)); }
    // a skip from s-2 is allowed when s is a label state different from s-2
    bool allow_skip(int s) const { return s >= 2 && s % 2 == 1 && label(s) != label(s - 2); }
};

Lattice check_lattice(const Matrix& log_probs, const std::vector<int>& target) {
    const int T = static_cast<int>(log_probs.rows());
    const int classes = static_cast<int>(log_probs.cols());
    if (classes < 2) throw std::invalid_argument("ctc: need at least one token class plus blank");
    if (target.empty()) throw std::invalid_argument("ctc: empty target");
    for (int v : target)
        if (v < 0 || v >= classes - 1)
            throw std::invalid_argument("ctc: target token out of range");
    for (int t = 0; t < T; ++t) {
        double m = log_probs.row(t).maxCoeff();
        if (m == kNegInf) throw std::invalid_argument("ctc: all-zero probability row");
        double lse = m + std::log((log_probs.row(t).array() - m).exp().sum());
        if (std::abs(lse) > 1e-5)
            throw std::invalid_argument("ctc: frame " + std::to_string(t) +
                                        " is not a normalized log-probability row");
    }
    int min_frames = static_cast<int>(target.size());
    for (size_t i = 1; i < target.size(); ++i)
        if (target[i] == target[i - 1]) ++min_frames;
    if (T < min_frames)
        throw std::invalid_argument("ctc: target needs at least " + std::to_string(min_frames) +
                                    " frames, got " + std::to_string(T));
    Lattice lat;
    lat.T = T;
    lat.S = 2 * static_cast<int>(target.size()) + 1;
    lat.blank = classes - 1;
    lat.lp = &log_probs;
    lat.target = &target;
    return lat;
}

Matrix ctc_alphas(const Lattice& lat) {
    Matrix alpha = Matrix::Constant(lat.T, lat.S, kNegInf);
    alpha(0, 0) = lat.emit(0, 0);
    if (lat.S > 1) alpha(0, 1) = lat.emit(0, 1);
    for (int t = 1; t < lat.T; ++t) {
        for (int s = 0; s < lat.S; ++s) {
            double stay = alpha(t - 1, s);
            double step = s >= 1 ? alpha(t - 1, s - 1) : kNegInf;
            double skip = lat.allow_skip(s) ? alpha(t - 1, s - 2) : kNegInf;
            double best = logsumexp3(stay, step, skip);
            alpha(t, s) = best == kNegInf ? kNegInf : best + lat.emit(t, s);
        }
    }
    return alpha;
}

double ctc_log_z(const Lattice& lat, const Matrix& alpha) {
    double z = alpha(lat.T - 1, lat.S - 1);
    if (lat.S > 1) z = logsumexp2(z, alpha(lat.T - 1, lat.S - 2));
    return z;
}

}  // namespace

double ctc_loss(const Matrix& log_probs, const std::vector<int>& target) {
    Lattice lat = check_lattice(log_probs, target);
    double z = ctc_log_z(lat, ctc_alphas(lat));
    if (z == kNegInf) throw std::invalid_argument("ctc: target has zero probability");
    return -z;
}

Matrix log_softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        double m = logits.row(r).maxCoeff();
        double lse = m + std::log((logits.row(r).array() - m).exp().sum());
        out.row(r) = logits.row(r).array() - lse;
    }
    return out;
}

Matrix ctc_grad_logits(const Matrix& logits, const std::vector<int>& target, double* loss_out) {
    Matrix log_probs = log_softmax_rows(logits);
    Lattice lat = check_lattice(log_probs, target);
    Matrix alpha = ctc_alphas(lat);
    double log_z = ctc_log_z(lat, alpha);
    if (log_z == kNegInf) throw std::invalid_argument("ctc: target has zero probability");
    if (loss_out) *loss_out = -log_z;

    // beta excludes the emission at its own frame
    Matrix beta = Matrix::Constant(lat.T, lat.S, kNegInf);
    beta(lat.T - 1, lat.S - 1) = 0.0;
    if (lat.S > 1) beta(lat.T - 1, lat.S - 2) = 0.0;
    for (int t = lat.T - 2; t >= 0; --t) {
        for (int s = 0; s < lat.S; ++s) {
            double stay = lat.emit(t + 1, s) + beta(t + 1, s);
            double step = s + 1 < lat.S ? lat.emit(t + 1, s + 1) + beta(t + 1, s + 1) : kNegInf;
            double skip = (s + 2 < lat.S && lat.allow_skip(s + 2))
                              ? lat.emit(t + 1, s + 2) + beta(t + 1, s + 2)
                              : kNegInf;
            beta(t, s) = logsumexp3(stay, step, skip);
        }
    }

    // d(-log Z)/d logits = softmax(logits) - per-class posterior mass
    Matrix grad(lat.T, logits.cols());
    for (int t = 0; t < lat.T; ++t) {
        grad.row(t) = log_probs.row(t).array().exp();
        for (int s = 0; s < lat.S; ++s) {
            double g = alpha(t, s) + beta(t, s) - log_z;
            if (g != kNegInf) grad(t, lat.label(s)) -= std::exp(g);
        }
    }
    return grad;
}

Alignment ctc_forced_align(const Matrix& log_probs, const std::vector<int>& target) {
    Lattice lat = check_lattice(log_probs, target);

    Matrix delta = Matrix::Constant(lat.T, lat.S, kNegInf);
    Eigen::MatrixXi back = Eigen::MatrixXi::Constant(lat.T, lat.S, -1);
    delta(0, 0) = lat.emit(0, 0);
    if (lat.S > 1) delta(0, 1) = lat.emit(0, 1);
    for (int t = 1; t < lat.T; ++t) {
        for (int s = 0; s < lat.S; ++s) {
            double best = delta(t - 1, s);
            int arg = s;
            if (s >= 1 && delta(t - 1, s - 1) > best) {
                best = delta(t - 1, s - 1);
                arg = s - 1;
            }
            if (lat.allow_skip(s) && delta(t - 1, s - 2) > best) {
                best = delta(t - 1, s - 2);
                arg = s - 2;
            }
            if (best == kNegInf) continue;
            delta(t, s) = best + lat.emit(t, s);
            back(t, s) = arg;
        }
    }

    int s_end = lat.S - 1;
    if (lat.S > 1 && delta(lat.T - 1, lat.S - 2) > delta(lat.T - 1, lat.S - 1)) s_end = lat.S - 2;
    if (delta(lat.T - 1, s_end) == kNegInf)
        throw std::invalid_argument("ctc: no feasible alignment path");

    std::vector<int> states(static_cast<size_t>(lat.T));
    int s = s_end;
    for (int t = lat.T - 1; t >= 0; --t) {
        states[static_cast<size_t>(t)] = s;
        if (t > 0) s = back(t, s);
    }

    // blanks absorb into the preceding token; leading blanks into token 0
    Alignment out;
    out.durations.assign(target.size(), 0);
    int current = 0;
    for (int t = 0; t < lat.T; ++t) {
        int st = states[static_cast<size_t>(t)];
        if (st % 2 == 1) current = (st - 1) / 2;
        out.durations[static_cast<size_t>(current)] += 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frame classifier

namespace {

ad::Graph classifier_graph(int T, int feature_dim, int hidden, int classes) {
    ad::GraphBuilder b;
    ad::NodeId frames = b.input("frames", T, feature_dim);
    ad::NodeId w1 = b.parameter("fc.w1", hidden, feature_dim);
    ad::NodeId b1 = b.parameter("fc.b1", 1, hidden);
    ad::NodeId w2 = b.parameter("fc.w2", classes, hidden);
    ad::NodeId b2 = b.parameter("fc.b2", 1, classes);
    ad::NodeId h = b.gelu(b.add_row(b.matmul(frames, b.transpose(w1)), b1));
    ad::NodeId logits = b.add_row(b.matmul(h, b.transpose(w2)), b2);
    // surrogate head: dotting the logits with an injected gradient lets the
    // engine chain an externally computed dL/dlogits through the network
    ad::NodeId seed = b.input("grad_seed", T, classes);
    ad::NodeId surrogate = b.sum_all(b.hadamard(logits, seed));
    b.mark_output("logits", logits);
    b.mark_output("surrogate", surrogate);
    return b.build();
}

}  // namespace

Matrix FrameClassifier::logits(const Matrix& frames) const {
    const int T = static_cast<int>(frames.rows());
    ad::Graph g = classifier_graph(T, feature_dim, hidden_dim, vocab + 1);
    NamedMatrices inputs;
    inputs["frames"] = frames;
    inputs["grad_seed"] = Matrix::Zero(T, vocab + 1);
    ad::ForwardResult fwd = ad::forward_eval(g, ad::ParamView(params), inputs);
    return ad::output_value(g, fwd, "logits");
}

Matrix FrameClassifier::log_probs(const Matrix& frames) const { return log_softmax_rows(logits(frames)); }

FrameClassifier make_frame_classifier(int feature_dim, int vocab, int hidden_dim, uint64_t seed) {
    if (feature_dim < 1 || vocab < 1 || hidden_dim < 1)
        throw std::invalid_argument("frame classifier: bad dimensions");
    FrameClassifier fc;
    fc.feature_dim = feature_dim;
    fc.hidden_dim = hidden_dim;
    fc.vocab = vocab;
    Rng rng(derive_seed(seed, "fc-init"));
    fc.params["fc.w1"] = rng.derive("w1").gauss_matrix(hidden_dim, feature_dim, 0.2);
    fc.params["fc.b1"] = Matrix::Zero(1, hidden_dim);
    fc.params["fc.w2"] = rng.derive("w2").gauss_matrix(vocab + 1, hidden_dim, 0.2);
    fc.params["fc.b2"] = Matrix::Zero(1, vocab + 1);
    // start with blank suppressed: the all-blank basin is a strong local
    // optimum of CTC training that spoils span-level alignment
    fc.params["fc.b2"](0, vocab) = -2.0;
    return fc;
}

std::vector<double> train_frame_classifier(FrameClassifier& fc,
                                           const std::vector<PromptSample>& corpus,
                                           const FrameClassifierConfig& config, uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("frame classifier: empty corpus");
    Rng rng(derive_seed(seed, "fc-train"));
    ad::AdamState opt;
    opt.config.lr = config.lr;
    std::vector<double> curve;
    curve.reserve(static_cast<size_t>(config.train_steps));
    std::map<int, ad::Graph> graphs;
    for (int step = 0; step < config.train_steps; ++step) {
        NamedMatrices grads;
        double loss_sum = 0.0;
        for (int i = 0; i < config.batch_size; ++i) {
            const PromptSample& s =
                corpus[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(corpus.size()) - 1))];
            const int T = s.features.length();
            auto git = graphs.find(T);
            if (git == graphs.end())
                git = graphs.emplace(T, classifier_graph(T, fc.feature_dim, fc.hidden_dim, fc.vocab + 1)).first;
            const ad::Graph& g = git->second;

            NamedMatrices inputs;
            inputs["frames"] = s.features.frames;
            inputs["grad_seed"] = Matrix::Zero(T, fc.vocab + 1);
            ad::ForwardResult fwd = ad::forward_eval(g, ad::ParamView(fc.params), inputs);
            double loss = 0.0;
            const Matrix& logits = ad::output_value(g, fwd, "logits");
            Matrix seed_grad = ctc_grad_logits(logits, s.tokens, &loss);
            loss_sum += loss / T;  // per-frame loss for a readable curve

            if (config.blank_penalty > 0.0) {
                // d/dlogits of mean_t p_blank(t): p_b * (onehot_blank - p)
                Matrix probs = log_softmax_rows(logits).array().exp();
                for (int t = 0; t < T; ++t) {
                    double pb = probs(t, fc.vocab);
                    seed_grad.row(t) -= config.blank_penalty * pb * probs.row(t);
                    seed_grad(t, fc.vocab) += config.blank_penalty * pb;
                }
            }

            inputs["grad_seed"] = (1.0 / T) * seed_grad;
            ad::ForwardResult fwd2 = ad::forward_eval(g, ad::ParamView(fc.params), inputs);
            NamedMatrices sg = ad::backward(g, fwd2, "surrogate");
            for (auto& [name, m] : sg) {
                auto it = grads.find(name);
                if (it == grads.end())
                    grads[name] = std::move(m);
                else
                    it->second += m;
            }
        }
        for (auto& [name, m] : grads) {
            (void)name;
            m /= config.batch_size;
        }
        double mean_loss = loss_sum / config.batch_size;
        if (!std::isfinite(mean_loss))
            throw std::runtime_error("frame classifier training diverged at step " + std::to_string(step));
        adam_step(fc.params, grads, opt);
        curve.push_back(mean_loss);
    }
    return curve;
}

Alignment forced_align(const FrameClassifier& fc, const FeatureSequence& features,
                       const std::vector<int>& tokens) {
    return ctc_forced_align(fc.log_probs(features.frames), tokens);
}

// ---------------------------------------------------------------------------
// Duration predictor

namespace {

ad::Graph duration_graph(int n_tokens, int n_prompt, int vocab, int emb_dim, int hidden) {
    ad::GraphBuilder b;
    ad::NodeId ids = b.input("ids", n_tokens, 1);
    ad::NodeId pids = b.input("prompt_ids", n_prompt, 1);
    ad::NodeId pstats = b.input("prompt_stats", 1, 1);  // mean log-duration of the prompt
    ad::NodeId emb = b.parameter("dur.emb", vocab, emb_dim);

    ad::NodeId e = b.embed(emb, ids);
    ad::NodeId pe = b.embed(emb, pids);
    ad::NodeId pmean = b.matmul(b.constant(Matrix::Constant(1, n_prompt, 1.0 / n_prompt)), pe);
    ad::NodeId prow = b.concat_cols({pmean, pstats});
    ad::NodeId pbroad = b.add_row(b.constant(Matrix::Zero(n_tokens, emb_dim + 1)), prow);
    ad::NodeId x = b.concat_cols({e, pbroad});

    ad::NodeId w1 = b.parameter("dur.w1", hidden, 2 * emb_dim + 1);
    ad::NodeId b1 = b.parameter("dur.b1", 1, hidden);
    ad::NodeId w2 = b.parameter("dur.w2", 1, hidden);
    ad::NodeId b2 = b.parameter("dur.b2", 1, 1);
    ad::NodeId h = b.gelu(b.add_row(b.matmul(x, b.transpose(w1)), b1));
    ad::NodeId pred = b.add_row(b.matmul(h, b.transpose(w2)), b2);

    ad::NodeId target = b.input("target", n_tokens, 1);
    ad::NodeId diff = b.sub(pred, target);
    ad::NodeId loss = b.mean_all(b.hadamard(diff, diff));
    b.mark_output("pred", pred);
    b.mark_output("loss", loss);
    return b.build();
}

Matrix ids_matrix(const std::vector<int>& tokens) {
    Matrix m(static_cast<Eigen::Index>(tokens.size()), 1);
    for (size_t i = 0; i < tokens.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = tokens[i];
    return m;
}

double mean_log_duration(const Alignment& a) {
    double s = 0.0;
    for (int d : a.durations) s += std::log(static_cast<double>(d));
    return a.durations.empty() ? 0.0 : s / static_cast<double>(a.durations.size());
}

NamedMatrices duration_inputs(const std::vector<int>& tokens, const std::vector<int>& prompt_tokens,
                              const Alignment& prompt_durations) {
    NamedMatrices in;
    in["ids"] = ids_matrix(tokens);
    in["prompt_ids"] = ids_matrix(prompt_tokens);
    in["prompt_stats"] = Matrix::Constant(1, 1, mean_log_duration(prompt_durations));
    in["target"] = Matrix::Zero(static_cast<Eigen::Index>(tokens.size()), 1);
    return in;
}

}  // namespace

DurationPredictor make_duration_predictor(int vocab, int emb_dim, int hidden_dim, uint64_t seed) {
    if (vocab < 1 || emb_dim < 1 || hidden_dim < 1)
        throw std::invalid_argument("duration predictor: bad dimensions");
    DurationPredictor dp;
    dp.vocab = vocab;
    dp.emb_dim = emb_dim;
    dp.hidden_dim = hidden_dim;
    Rng rng(derive_seed(seed, "dur-init"));
    dp.params["dur.emb"] = rng.derive("emb").gauss_matrix(vocab, emb_dim, 0.2);
    dp.params["dur.w1"] = rng.derive("w1").gauss_matrix(hidden_dim, 2 * emb_dim + 1, 0.2);
    dp.params["dur.b1"] = Matrix::Zero(1, hidden_dim);
    dp.params["dur.w2"] = rng.derive("w2").gauss_matrix(1, hidden_dim, 0.2);
    dp.params["dur.b2"] = Matrix::Zero(1, 1);
    return dp;
}

std::vector<double> DurationPredictor::predict_log_durations(
    const std::vector<int>& tokens, const std::vector<int>& prompt_tokens,
    const Alignment& prompt_durations) const {
    if (tokens.empty()) throw std::invalid_argument("duration predictor: empty token sequence");
    if (prompt_tokens.empty()) throw std::invalid_argument("duration predictor: empty prompt");
    ad::Graph g = duration_graph(static_cast<int>(tokens.size()),
                                 static_cast<int>(prompt_tokens.size()), vocab, emb_dim, hidden_dim);
    NamedMatrices in = duration_inputs(tokens, prompt_tokens, prompt_durations);
    ad::ForwardResult fwd = ad::forward_eval(g, ad::ParamView(params), in);
    const Matrix& pred = ad::output_value(g, fwd, "pred");
    std::vector<double> out(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) out[i] = pred(static_cast<Eigen::Index>(i), 0);
    return out;
}

TrainCurve train_duration_predictor(DurationPredictor& dp, const std::vector<PromptSample>& corpus,
                                    const DurationPredictorConfig& config, uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("duration predictor: empty corpus");
    Rng rng(derive_seed(seed, "dur-train"));
    ad::AdamState opt;
    opt.config.lr = config.lr;
    TrainCurve out;
    std::map<std::pair<int, int>, ad::Graph> graphs;
    for (int step = 0; step < config.train_steps; ++step) {
        const PromptSample& target =
            corpus[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(corpus.size()) - 1))];
        const PromptSample& prompt =
            corpus[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(corpus.size()) - 1))];
        std::pair<int, int> key{static_cast<int>(target.tokens.size()),
                                static_cast<int>(prompt.tokens.size())};
        auto git = graphs.find(key);
        if (git == graphs.end())
            git = graphs.emplace(key, duration_graph(key.first, key.second, dp.vocab, dp.emb_dim,
                                                     dp.hidden_dim)).first;
        const ad::Graph& g = git->second;

        NamedMatrices in = duration_inputs(target.tokens, prompt.tokens, prompt.alignment);
        Matrix& tgt = in["target"];
        for (size_t i = 0; i < target.alignment.durations.size(); ++i)
            tgt(static_cast<Eigen::Index>(i), 0) =
                std::log(static_cast<double>(target.alignment.durations[i]));
        ad::ForwardResult fwd = ad::forward_eval(g, ad::ParamView(dp.params), in);
        double loss = ad::output_value(g, fwd, "loss")(0, 0);
        if (!std::isfinite(loss))
            throw std::runtime_error("duration predictor training diverged at step " +
                                     std::to_string(step));
        NamedMatrices grads = ad::backward(g, fwd, "loss");
        adam_step(dp.params, grads, opt);
        out.loss_curve.push_back(loss);
    }
    return out;
}

Alignment predict_durations(const DurationPredictor& dp, const std::vector<int>& tokens,
                            const std::vector<int>& prompt_tokens,
                            const Alignment& prompt_durations) {
    std::vector<double> log_d = dp.predict_log_durations(tokens, prompt_tokens, prompt_durations);
    Alignment a;
    a.durations.reserve(log_d.size());
    for (double ld : log_d) {
        long d = std::lround(std::exp(ld));
        a.durations.push_back(static_cast<int>(std::max(1L, d)));
    }
    return a;
}

}  // namespace lorp::align
