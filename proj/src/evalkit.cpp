#include "lorp/evalkit.hpp"

#include "lorp/util.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

namespace lorp::eval {

namespace {

double column_median(const Matrix& frames, int col) {
    std::vector<double> v(static_cast<size_t>(frames.rows()));
    for (Eigen::Index r = 0; r < frames.rows(); ++r) v[static_cast<size_t>(r)] = frames(r, col);
    size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
    double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    double lo = *std::max_element(v.begin(), v.begin() + static_cast<long>(mid));
    return 0.5 * (lo + hi);
}

Vector temporal_median(const Matrix& frames) {
    Vector m(frames.cols());
    for (int c = 0; c < static_cast<int>(frames.cols()); ++c) m(c) = column_median(frames, c);
    return m;
}

}  // namespace

SpeakerEmbedding speaker_embed(const FeatureSequence& features) {
    if (features.length() < 8)
        throw std::invalid_argument("speaker_embed: need at least 8 frames");
    Vector med = temporal_median(features.frames);
    double norm = med.norm();
    if (norm < 1e-12) throw std::invalid_argument("speaker_embed: zero median profile");
    return SpeakerEmbedding{med / norm};
}

double cosine_sim(const SpeakerEmbedding& a, const SpeakerEmbedding& b) {
    if (a.v.size() != b.v.size()) throw std::invalid_argument("cosine_sim: dimension mismatch");
    return a.v.dot(b.v);
}

std::vector<int> decode_tokens(const FeatureSequence& features, const corpus::Vocab& vocab) {
    if (vocab.size() < 1) throw std::invalid_argument("decode_tokens: empty vocabulary");
    Vector med = temporal_median(features.frames);
    std::vector<int> out;
    int prev = -1;
    for (int f = 0; f < features.length(); ++f) {
        Vector residual = features.frames.row(f).transpose() - med;
        // a content-free residual (e.g. a single-token utterance, where the
        // median absorbs the prototype itself) falls back to the raw frame
        if (residual.norm() < 1e-9) residual = features.frames.row(f).transpose();
        double rn = residual.norm();
        int best = 0;
        double best_cos = -2.0;
        for (int v = 0; v < vocab.size(); ++v) {
            const Vector& p = vocab.tokens[static_cast<size_t>(v)].pattern;
            double cos = rn < 1e-12 ? 0.0 : residual.dot(p) / (rn * p.norm());
            if (cos > best_cos) {
                best_cos = cos;
                best = v;
            }
        }
        if (best != prev) out.push_back(best);
        prev = best;
    }
    return out;
}

double edit_rate(const std::vector<int>& hyp, const std::vector<int>& ref) {
    if (ref.empty()) throw std::invalid_argument("edit_rate: empty reference");
    const size_t n = hyp.size(), m = ref.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= m; ++j) {
            int sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return static_cast<double>(prev[m]) / static_cast<double>(m);
}

std::vector<int> expand_subunits(const std::vector<int>& tokens) {
    std::vector<int> out;
    out.reserve(tokens.size() * 3);
    for (int t : tokens) {
        out.push_back(t % 4);
        out.push_back(4 + (t / 4) % 4);
        out.push_back(8 + t % 3);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Quality plug-in

namespace {

std::string features_to_wav_bytes(const FeatureSequence& features) {
    audio::MelConfig mc;
    mc.mels = features.dim();
    std::vector<double> wav = audio::griffin_lim(features, mc, 4, 17);
    double peak = 1e-9;
    for (double s : wav) peak = std::max(peak, std::abs(s));
    for (double& s : wav) s = s / peak * 0.9;
    std::filesystem::path tmp =
        std::filesystem::temp_directory_path() /
        ("lorp-q-" + std::to_string(::getpid()) + "-" + std::to_string(uintptr_t(&features)) + ".wav");
    audio::write_wav16(tmp, wav, mc.sample_rate);
    std::string bytes = read_file(tmp);
    std::filesystem::remove(tmp);
    return bytes;
}

std::optional<double> run_scorer(const std::string& command, const std::string& stdin_bytes,
                                 double timeout_sec) {
    int in_pipe[2], out_pipe[2];
    if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) return std::nullopt;
    pid_t pid = fork();
    if (pid < 0) return std::nullopt;
    if (pid == 0) {
        setpgid(0, 0);  // own process group, so a timeout can reap grandchildren too
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        close(in_pipe[0]);
        close(in_pipe[1]);
        close(out_pipe[0]);
        close(out_pipe[1]);
        execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);

    // a dying child must not kill us with SIGPIPE mid-write
    struct sigaction ignore {}, saved {};
    ignore.sa_handler = SIG_IGN;
    sigaction(SIGPIPE, &ignore, &saved);

    size_t written = 0;
    while (written < stdin_bytes.size()) {
        ssize_t n = write(in_pipe[1], stdin_bytes.data() + written, stdin_bytes.size() - written);
        if (n <= 0) break;
        written += static_cast<size_t>(n);
    }
    close(in_pipe[1]);

    std::string out;
    auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_sec);
    bool timed_out = false;
    char buf[4096];
    while (true) {
        auto remain = std::chrono::duration_cast<std::chrono::milliseconds>(
                          deadline - std::chrono::steady_clock::now())
                          .count();
        if (remain <= 0) {
            timed_out = true;
            break;
        }
        struct pollfd pfd {out_pipe[0], POLLIN, 0};
        int pr = poll(&pfd, 1, static_cast<int>(remain));
        if (pr <= 0) {
            timed_out = pr == 0;
            break;
        }
        ssize_t n = read(out_pipe[0], buf, sizeof(buf));
        if (n <= 0) break;
        out.append(buf, static_cast<size_t>(n));
    }
    close(out_pipe[0]);
    if (timed_out) kill(-pid, SIGKILL);
    int status = 0;
    waitpid(pid, &status, 0);
    sigaction(SIGPIPE, &saved, nullptr);

    if (timed_out) {
        std::cerr << "warning: quality scorer timed out after " << timeout_sec << "s\n";
        return std::nullopt;
    }
    try {
        size_t pos = 0;
        double v = std::stod(out, &pos);
        while (pos < out.size() && std::isspace(static_cast<unsigned char>(out[pos]))) ++pos;
        if (pos != out.size()) throw std::invalid_argument("trailing output");
        return v;
    } catch (const std::exception&) {
        std::cerr << "warning: quality scorer produced unparseable output\n";
        return std::nullopt;
    }
}

}  // namespace

std::optional<double> quality_score(const FeatureSequence& features, const QualityScorer* scorer) {
    if (!scorer || scorer->command.empty()) return std::nullopt;
    try {
        return run_scorer(scorer->command, features_to_wav_bytes(features), scorer->timeout_sec);
    } catch (const std::exception& e) {
        std::cerr << "warning: quality scorer failed: " << e.what() << "\n";
        return std::nullopt;
    }
}

// ---------------------------------------------------------------------------
// Sweep harness

const char* mode_name(Mode m) {
    switch (m) {
        case Mode::Baseline: return "baseline";
        case Mode::Lorp: return "lorp";
        case Mode::MultiSample: return "multi-sample";
    }
    return "?";
}

Mode parse_mode(const std::string& s) {
    if (s == "baseline") return Mode::Baseline;
    if (s == "lorp") return Mode::Lorp;
    if (s == "multi-sample") return Mode::MultiSample;
    throw std::invalid_argument("unknown sweep mode '" + s + "'");
}

std::string SweepCell::descriptor() const {
    std::ostringstream ss;
    ss << "mode=" << mode_name(mode) << " regime=" << corpus::regime_name(regime)
       << " samples=" << samples << " steps=" << adapt_steps << " r=" << rank
       << " alpha=" << fmt_double(alpha) << " ode=" << ode_steps;
    return ss.str();
}

EvalRow run_cell(const TrainedStack& stack, const corpus::Vocab& vocab, const SweepSpec& spec,
                 const SweepCell& cell, uint64_t sweep_seed) {
    const uint64_t cell_seed = derive_seed(sweep_seed, cell.descriptor());
    // speakers, prompts, texts and synthesis noise are mode-independent so
    // rows within one sweep are paired comparisons
    const uint64_t pair_seed =
        derive_seed(sweep_seed, std::string("pair ") + corpus::regime_name(cell.regime));

    std::vector<std::vector<int>> texts;
    Rng text_rng(derive_seed(sweep_seed, "texts"));
    for (int n = 0; n < spec.texts_per_cell; ++n)
        texts.push_back(corpus::sample_text(
            vocab, text_rng.uniform_int(spec.text_len_lo, spec.text_len_hi), text_rng));

    double simm_sum = 0.0, wer_sum = 0.0, cer_sum = 0.0, mos_sum = 0.0;
    int count = 0, mos_count = 0;
    for (int si = 0; si < spec.speakers; ++si) {
        corpus::SpeakerSpec speaker = corpus::make_speaker(
            derive_seed(pair_seed, "speaker-" + std::to_string(si)), cell.regime, vocab.dim);

        std::vector<PromptSample> prompts;
        for (int k = 0; k < cell.samples; ++k) {
            Rng prng(derive_seed(pair_seed, "prompt-" + std::to_string(si) + "-" + std::to_string(k)));
            std::vector<int> ptext =
                corpus::sample_text(vocab, prng.uniform_int(spec.text_len_lo, spec.text_len_hi), prng);
            Alignment pdur = corpus::sample_durations(vocab, ptext, prng);
            prompts.push_back(corpus::render(speaker, vocab, ptext, pdur, prng.seed()));
        }

        std::optional<PersonalizationResult> personal;
        if (cell.mode != Mode::Baseline) {
            LorpConfig lc;
            lc.steps = cell.adapt_steps;
            lc.samples = cell.samples;
            lc.learning_rate = spec.adapt_lr;
            lc.lora.r = cell.rank;
            lc.lora.alpha = cell.alpha;
            lc.ode_steps = cell.ode_steps;
            // large ranks only fit layers whose dimensions can host them; the
            // rank axis of the sweep skips the layers that cannot
            const int r = cell.rank;
            lc.lora.target_filter = [r, &stack](const net::DenseLayerId& id) {
                for (const net::DenseShape& s : stack.model.dense_layer_list())
                    if (s.id == id) return r <= std::min(s.d_in, s.d_out);
                return false;
            };
            personal = adapt(stack.model, prompts, lc,
                             derive_seed(cell_seed, "adapt-" + std::to_string(si)));
        }
        const lora::AdapterSet* adapters = personal ? &personal->adapters : nullptr;
        const PromptSample& prompt = prompts.front();
        SpeakerEmbedding prompt_emb = speaker_embed(prompt.features);

        for (size_t n = 0; n < texts.size(); ++n) {
            SynthesisOutput synth =
                synthesize(stack, adapters, prompt, texts[n], cell.ode_steps,
                           derive_seed(pair_seed, "synth-" + std::to_string(si) + "-" + std::to_string(n)));
            simm_sum += cosine_sim(speaker_embed(synth.generated), prompt_emb);
            std::vector<int> decoded = decode_tokens(synth.generated, vocab);
            wer_sum += edit_rate(decoded, texts[n]);
            cer_sum += edit_rate(expand_subunits(decoded), expand_subunits(texts[n]));
            ++count;
            if (spec.scorer && n == 0) {  // one scorer probe per speaker
                std::optional<double> q = quality_score(synth.generated, &*spec.scorer);
                if (q) {
                    mos_sum += *q;
                    ++mos_count;
                }
            }
        }
    }

    EvalRow row;
    row.cell = cell;
    row.n = count;
    row.seed = cell_seed;
    if (count > 0) {
        row.simm = 100.0 * simm_sum / count;
        row.wer = 100.0 * wer_sum / count;
        row.cer = 100.0 * cer_sum / count;
    }
    if (mos_count > 0) row.mos = mos_sum / mos_count;
    return row;
}

namespace {

std::string row_to_csv(const EvalRow& r) {
    std::ostringstream ss;
    ss << mode_name(r.cell.mode) << "," << corpus::regime_name(r.cell.regime) << ","
       << r.cell.samples << "," << r.cell.adapt_steps << "," << r.cell.rank << ","
       << fmt_double(r.cell.alpha) << "," << r.cell.ode_steps << "," << fmt_double(r.simm) << ","
       << fmt_double(r.wer) << "," << fmt_double(r.cer) << ","
       << (r.mos ? fmt_double(*r.mos) : std::string()) << "," << r.n << "," << r.seed;
    return ss.str();
}

EvalRow row_from_csv(const std::string& line) {
    std::vector<std::string> f = split(line, ',');
    if (f.size() != 13) throw std::runtime_error("eval row: malformed line '" + line + "'");
    EvalRow r;
    r.cell.mode = parse_mode(f[0]);
    r.cell.regime = corpus::parse_regime(f[1]);
    r.cell.samples = std::stoi(f[2]);
    r.cell.adapt_steps = std::stoi(f[3]);
    r.cell.rank = std::stoi(f[4]);
    r.cell.alpha = std::stod(f[5]);
    r.cell.ode_steps = std::stoi(f[6]);
    r.simm = std::stod(f[7]);
    r.wer = std::stod(f[8]);
    r.cer = std::stod(f[9]);
    if (!f[10].empty()) r.mos = std::stod(f[10]);
    r.n = std::stoi(f[11]);
    r.seed = std::stoull(f[12]);
    return r;
}

constexpr const char* kCsvHeader = "mode,regime,samples,adapt_steps,rank,alpha,ode_steps,simm,wer,cer,mos,n,seed";

}  // namespace

std::string EvalReport::to_csv() const {
    std::string out = std::string(kCsvHeader) + "\n";
    for (const EvalRow& r : rows) out += row_to_csv(r) + "\n";
    return out;
}

void EvalReport::write_csv(const std::filesystem::path& path) const { write_file(path, to_csv()); }

EvalReport run_sweep(const TrainedStack& stack, const corpus::Vocab& vocab, const SweepSpec& spec,
                     const std::filesystem::path& out_dir, uint64_t seed, int jobs) {
    if (spec.cells.empty()) throw std::invalid_argument("run_sweep: no cells");
    if (jobs < 1) jobs = 1;
    std::filesystem::create_directories(out_dir / "cells");

    std::vector<EvalRow> rows(spec.cells.size());
    std::vector<std::filesystem::path> cell_files(spec.cells.size());
    std::vector<int> pending;
    for (size_t i = 0; i < spec.cells.size(); ++i) {
        std::string id = sha256_hex(spec.cells[i].descriptor() + "#" + std::to_string(seed)).substr(0, 16);
        cell_files[i] = out_dir / "cells" / (id + ".csv");
        if (std::filesystem::exists(cell_files[i])) {
            std::istringstream in(read_file(cell_files[i]));
            std::string line;
            std::getline(in, line);
            rows[i] = row_from_csv(line);
        } else {
            pending.push_back(static_cast<int>(i));
        }
    }

    std::atomic<size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    auto worker = [&]() {
        while (true) {
            size_t k = next.fetch_add(1);
            if (k >= pending.size()) return;
            int i = pending[k];
            try {
                EvalRow row = run_cell(stack, vocab, spec, spec.cells[static_cast<size_t>(i)], seed);
                write_file(cell_files[static_cast<size_t>(i)], row_to_csv(row) + "\n");
                rows[static_cast<size_t>(i)] = row;
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mu);
                if (!failure) failure = std::current_exception();
                return;
            }
        }
    };
    if (jobs == 1 || pending.size() <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < std::min<int>(jobs, static_cast<int>(pending.size())); ++j)
            pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    EvalReport report;
    report.rows = std::move(rows);
    report.write_csv(out_dir / "report.csv");
    return report;
}

}  // namespace lorp::eval
