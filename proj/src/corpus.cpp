#include "lorp/corpus.hpp"

#include "lorp/checkpoint.hpp"
#include "lorp/util.hpp"

#include <cmath>
#include <sstream>

namespace lorp::corpus {

const char* regime_name(Regime r) { return r == Regime::Studio ? "studio" : "wild"; }

Regime parse_regime(const std::string& s) {
    if (s == "studio") return Regime::Studio;
    if (s == "wild") return Regime::Wild;
    throw std::invalid_argument("unknown regime '" + s + "'");
}

Vector SpeakerSpec::envelope(int dim) const {
    Vector env = Vector::Zero(dim);
    for (const EnvelopeBump& b : bumps)
        for (int i = 0; i < dim; ++i) {
            double d = (i - b.center) / b.width;
            env(i) += b.height * std::exp(-0.5 * d * d);
        }
    return env;
}

std::string SpeakerSpec::id() const {
    return std::string(regime_name(regime)) + ":" + std::to_string(seed);
}

SpeakerSpec make_speaker(uint64_t seed, Regime regime, int dim) {
    SpeakerSpec s;
    s.regime = regime;
    s.seed = seed;
    Rng rng(derive_seed(seed, regime == Regime::Studio ? "speaker-studio" : "speaker-wild"));
    const bool wild = regime == Regime::Wild;
    int n_bumps = wild ? rng.uniform_int(4, 8) : rng.uniform_int(2, 3);
    for (int i = 0; i < n_bumps; ++i) {
        EnvelopeBump b;
        b.center = rng.uniform(0.0, static_cast<double>(dim));
        // wild envelopes are spiky and tall, far outside the smooth gentle
        // profiles the studio regime spans
        b.width = wild ? rng.uniform(0.5, 1.2) : rng.uniform(0.8, 3.5);
        b.height = wild ? rng.uniform(1.5, 3.5) : rng.uniform(0.4, 1.0);
        s.bumps.push_back(b);
    }
    s.noise_std = wild ? rng.uniform(0.1, 0.3) : rng.uniform(0.0, 0.05);
    s.jitter_std = wild ? rng.uniform(0.05, 0.15) : rng.uniform(0.0, 0.03);
    return s;
}

Matrix Vocab::pattern_matrix() const {
    if (tokens.empty()) return Matrix(0, dim);
    Matrix m(size(), dim);
    for (int v = 0; v < size(); ++v) m.row(v) = tokens[static_cast<size_t>(v)].pattern.transpose();
    return m;
}

Vocab build_vocab(int vocab_size, int dim, uint64_t seed) {
    if (vocab_size < 1) throw std::invalid_argument("vocab: size must be >= 1");
    if (vocab_size > dim)
        throw std::invalid_argument("vocab: band layout needs vocab_size <= feature dim");
    Rng rng(derive_seed(seed, "vocab"));
    Vocab vocab;
    vocab.dim = dim;
    for (int v = 0; v < vocab_size; ++v) {
        TokenPrototype p;
        // each token owns one spectral band plus a little fixed texture
        int band = static_cast<int>((static_cast<long long>(v) * dim + dim / 2) / vocab_size);
        p.pattern = Vector::Zero(dim);
        p.pattern(band) = 1.8;
        for (int i = 0; i < dim; ++i) p.pattern(i) += 0.08 * rng.gauss();
        p.nominal_duration = rng.uniform_int(4, 9);
        vocab.tokens.push_back(std::move(p));
    }
    for (int a = 0; a < vocab_size; ++a)
        for (int b = a + 1; b < vocab_size; ++b) {
            const Vector& pa = vocab.tokens[static_cast<size_t>(a)].pattern;
            const Vector& pb = vocab.tokens[static_cast<size_t>(b)].pattern;
            double cos = pa.dot(pb) / (pa.norm() * pb.norm());
            if (cos >= 0.5)
                throw std::runtime_error("vocab: prototypes " + std::to_string(a) + "," +
                                         std::to_string(b) + " too similar (cos >= 0.5)");
        }
    return vocab;
}

PromptSample render(const SpeakerSpec& speaker, const Vocab& vocab, const std::vector<int>& tokens,
                    const Alignment& durations, uint64_t seed, double frame_rate) {
    durations.validate();
    if (tokens.size() != durations.durations.size())
        throw std::invalid_argument("render: token/duration count mismatch");
    for (int tok : tokens)
        if (tok < 0 || tok >= vocab.size())
            throw std::invalid_argument("render: token id out of vocab");

    const int D = vocab.dim;
    const int T = durations.total_frames();
    Rng rng(derive_seed(seed, "render"));
    Vector env = speaker.envelope(D);
    Vector g1(D);
    for (int i = 0; i < D; ++i) g1(i) = rng.gauss();

    PromptSample out;
    out.features.frames.resize(T, D);
    out.features.frame_rate = frame_rate;
    out.tokens = tokens;
    out.alignment = durations;
    out.speaker_id = speaker.id();

    int f = 0;
    for (size_t j = 0; j < tokens.size(); ++j) {
        const Vector& proto = vocab.tokens[static_cast<size_t>(tokens[j])].pattern;
        for (int k = 0; k < durations.durations[j]; ++k, ++f) {
            for (int i = 0; i < D; ++i)
                out.features.frames(f, i) = env(i) + proto(i) + speaker.jitter_std * g1(i) +
                                            speaker.noise_std * rng.gauss();
        }
    }
    return out;
}

std::vector<int> sample_text(const Vocab& vocab, int length, Rng& rng) {
    if (length < 1) throw std::invalid_argument("sample_text: length must be >= 1");
    std::vector<int> out;
    out.reserve(static_cast<size_t>(length));
    int prev = -1;
    for (int i = 0; i < length; ++i) {
        int tok = rng.uniform_int(0, vocab.size() - 1);
        while (vocab.size() > 1 && tok == prev) tok = rng.uniform_int(0, vocab.size() - 1);
        out.push_back(tok);
        prev = tok;
    }
    return out;
}

Alignment sample_durations(const Vocab& vocab, const std::vector<int>& tokens, Rng& rng) {
    Alignment a;
    a.durations.reserve(tokens.size());
    for (int tok : tokens) {
        int nominal = vocab.tokens[static_cast<size_t>(tok)].nominal_duration;
        a.durations.push_back(std::max(2, nominal + rng.uniform_int(-2, 2)));
    }
    return a;
}

std::vector<PromptSample> generate(const CorpusConfig& config, const Vocab& vocab, uint64_t seed) {
    if (vocab.dim != config.dim) throw std::invalid_argument("generate: vocab dim mismatch");
    std::vector<PromptSample> out;
    for (int s = 0; s < config.speakers; ++s) {
        SpeakerSpec speaker = make_speaker(derive_seed(seed, "speaker-" + std::to_string(s)),
                                           config.regime, config.dim);
        for (int u = 0; u < config.utterances_per_speaker; ++u) {
            Rng rng(derive_seed(seed, "utt-" + std::to_string(s) + "-" + std::to_string(u)));
            int len = rng.uniform_int(config.text_len_lo, config.text_len_hi);
            std::vector<int> text = sample_text(vocab, len, rng);
            Alignment durs = sample_durations(vocab, text, rng);
            PromptSample sample = render(speaker, vocab, text, durs, rng.seed(), config.frame_rate);
            sample.utterance_id = "s" + std::to_string(s) + "u" + std::to_string(u);
            out.push_back(std::move(sample));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Disk layout

namespace {

std::string ints_to_string(const std::vector<int>& v) {
    std::vector<std::string> parts;
    parts.reserve(v.size());
    for (int x : v) parts.push_back(std::to_string(x));
    return join(parts, " ");
}

std::vector<int> ints_from_string(const std::string& s) {
    std::vector<int> out;
    std::istringstream in(s);
    int x;
    while (in >> x) out.push_back(x);
    return out;
}

}  // namespace

void save_corpus(const std::filesystem::path& dir, const std::vector<PromptSample>& samples,
                 const Vocab& vocab) {
    std::filesystem::create_directories(dir);

    NamedMatrices vocab_mats;
    vocab_mats["patterns"] = vocab.pattern_matrix();
    Matrix durs(vocab.size(), 1);
    for (int v = 0; v < vocab.size(); ++v)
        durs(v, 0) = vocab.tokens[static_cast<size_t>(v)].nominal_duration;
    vocab_mats["nominal_durations"] = durs;
    save_matrix_archive(dir / "vocab.ckpt", vocab_mats);

    std::string manifest;
    for (const PromptSample& s : samples) {
        std::string file = s.utterance_id + ".ckpt";
        NamedMatrices m;
        m["frames"] = s.features.frames;
        m["frame_rate"] = Matrix::Constant(1, 1, s.features.frame_rate);
        save_matrix_archive(dir / file, m);
        manifest += s.utterance_id + "|" + s.speaker_id + "|" + ints_to_string(s.tokens) + "|" +
                    ints_to_string(s.alignment.durations) + "|" + file + "\n";
    }
    write_file(dir / "corpus.manifest", manifest);
}

std::pair<std::vector<PromptSample>, Vocab> load_corpus(const std::filesystem::path& dir) {
    NamedMatrices vocab_mats = load_matrix_archive(dir / "vocab.ckpt");
    const Matrix& patterns = vocab_mats.at("patterns");
    const Matrix& durs = vocab_mats.at("nominal_durations");
    Vocab vocab;
    vocab.dim = static_cast<int>(patterns.cols());
    for (Eigen::Index v = 0; v < patterns.rows(); ++v) {
        TokenPrototype p;
        p.pattern = patterns.row(v).transpose();
        p.nominal_duration = static_cast<int>(std::lround(durs(v, 0)));
        vocab.tokens.push_back(std::move(p));
    }

    std::vector<PromptSample> samples;
    std::istringstream in(read_file(dir / "corpus.manifest"));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> parts = split(line, '|');
        if (parts.size() != 5) throw std::runtime_error("corpus manifest: malformed line '" + line + "'");
        PromptSample s;
        s.utterance_id = parts[0];
        s.speaker_id = parts[1];
        s.tokens = ints_from_string(parts[2]);
        s.alignment.durations = ints_from_string(parts[3]);
        NamedMatrices m = load_matrix_archive(dir / parts[4]);
        s.features.frames = m.at("frames");
        s.features.frame_rate = m.at("frame_rate")(0, 0);
        if (s.alignment.total_frames() != s.features.length())
            throw std::runtime_error("corpus manifest: durations do not match frames for " +
                                     s.utterance_id);
        samples.push_back(std::move(s));
    }
    return {std::move(samples), std::move(vocab)};
}

}  // namespace lorp::corpus
