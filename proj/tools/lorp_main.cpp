// Command-line front end: corpus generation, training, adaptation,
// synthesis, evaluation and sweeps. Every artifact-producing command writes
// a run manifest line (JSONL) with seeds and content hashes so a run can be
// reproduced from the manifest alone.

#include <CLI11.hpp>
#include <json.hpp>

#include "lorp/audio.hpp"
#include "lorp/checkpoint.hpp"
#include "lorp/evalkit.hpp"
#include "lorp/personalize.hpp"
#include "lorp/stack.hpp"
#include "lorp/util.hpp"

#include <chrono>
#include <iostream>

using nlohmann::json;
namespace fs = std::filesystem;
using namespace lorp;

namespace {

constexpr int kExitMissingFile = 2;
constexpr int kExitSchema = 3;
constexpr int kExitHashMismatch = 4;

struct MissingFileError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct HashMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

fs::path require_file(const fs::path& p) {
    if (!fs::exists(p)) throw MissingFileError("missing file: " + p.string());
    return p;
}

fs::path require_dir(const fs::path& p) {
    if (!fs::is_directory(p)) throw MissingFileError("missing directory: " + p.string());
    return p;
}

KeyValueConfig load_config(const fs::path& path) {
    require_file(path);
    return KeyValueConfig::parse_file(path);
}

void reject_unknown_keys(const KeyValueConfig& cfg) {
    std::vector<std::string> stray = cfg.unconsumed_keys();
    if (!stray.empty()) throw ConfigError("unknown config keys: " + join(stray, ", "));
}

void write_manifest(const fs::path& out_dir, const std::string& command, uint64_t seed,
                    const KeyValueConfig* cfg, const std::map<std::string, fs::path>& inputs,
                    const std::map<std::string, fs::path>& outputs) {
    json entry;
    entry["command"] = command;
    entry["seed"] = seed;
    entry["timestamp"] = std::chrono::duration_cast<std::chrono::seconds>(
                             std::chrono::system_clock::now().time_since_epoch())
                             .count();
    if (cfg) entry["config_sha256"] = sha256_hex(cfg->canonical_text());
    json in = json::object(), out = json::object();
    for (const auto& [name, path] : inputs)
        in[name] = {{"path", path.string()}, {"sha256", sha256_file(path)}};
    for (const auto& [name, path] : outputs)
        out[name] = {{"path", path.string()}, {"sha256", sha256_file(path)}};
    entry["inputs"] = in;
    entry["outputs"] = out;
    append_line(out_dir / "manifest.jsonl", entry.dump());
}

std::vector<int> parse_token_string(const std::string& text, int vocab) {
    std::vector<int> out;
    std::string norm = text;
    for (char& c : norm)
        if (c == ',') c = ' ';
    std::istringstream in(norm);
    int v;
    while (in >> v) {
        if (v < 0 || v >= vocab)
            throw ConfigError("token id " + std::to_string(v) + " outside vocabulary of " +
                              std::to_string(vocab));
        out.push_back(v);
    }
    if (!in.eof()) throw ConfigError("could not parse token list '" + text + "'");
    return out;
}

const PromptSample& find_utterance(const std::vector<PromptSample>& corpus, const std::string& id) {
    for (const PromptSample& s : corpus)
        if (s.utterance_id == id) return s;
    throw MissingFileError("utterance '" + id + "' not found in corpus manifest");
}

corpus::Vocab vocab_from_archive(const fs::path& path) {
    NamedMatrices vm = load_matrix_archive(require_file(path));
    corpus::Vocab vocab;
    const Matrix& patterns = vm.at("patterns");
    const Matrix& nd = vm.at("nominal_durations");
    vocab.dim = static_cast<int>(patterns.cols());
    for (Eigen::Index v = 0; v < patterns.rows(); ++v)
        vocab.tokens.push_back(
            {patterns.row(v).transpose(), static_cast<int>(std::lround(nd(v, 0)))});
    return vocab;
}

// ---------------------------------------------------------------------------

int cmd_gen_corpus(const fs::path& config_path, const fs::path& out_dir, uint64_t seed) {
    KeyValueConfig cfg = load_config(config_path);
    corpus::CorpusConfig cc;
    cc.vocab_size = static_cast<int>(cfg.get_int("corpus.vocab_size", 12));
    cc.dim = static_cast<int>(cfg.get_int("corpus.dim", 16));
    cc.speakers = static_cast<int>(cfg.get_int("corpus.speakers", 16));
    cc.utterances_per_speaker = static_cast<int>(cfg.get_int("corpus.utterances_per_speaker", 8));
    cc.text_len_lo = static_cast<int>(cfg.get_int("corpus.text_len_lo", 4));
    cc.text_len_hi = static_cast<int>(cfg.get_int("corpus.text_len_hi", 8));
    cc.regime = corpus::parse_regime(cfg.get_string("corpus.regime", "studio"));
    cc.frame_rate = cfg.get_double("corpus.frame_rate", 50.0);
    reject_unknown_keys(cfg);

    corpus::Vocab vocab = corpus::build_vocab(cc.vocab_size, cc.dim, derive_seed(seed, "vocab"));
    std::vector<PromptSample> samples = corpus::generate(cc, vocab, derive_seed(seed, "corpus"));
    corpus::save_corpus(out_dir, samples, vocab);
    write_manifest(out_dir, "gen-corpus", seed, &cfg, {},
                   {{"corpus_manifest", out_dir / "corpus.manifest"},
                    {"vocab", out_dir / "vocab.ckpt"}});
    std::cout << "wrote " << samples.size() << " utterances to " << out_dir.string() << "\n";
    return 0;
}

int cmd_train(const fs::path& config_path, const fs::path& corpus_dir, const fs::path& out_dir,
              uint64_t seed) {
    KeyValueConfig cfg = load_config(config_path);
    require_dir(corpus_dir);
    require_file(corpus_dir / "corpus.manifest");
    auto [samples, vocab] = corpus::load_corpus(corpus_dir);

    net::NetConfig nc;
    nc.feature_dim = vocab.dim;
    nc.token_vocab = vocab.size();
    nc.model_dim = static_cast<int>(cfg.get_int("net.model_dim", 64));
    nc.layers = static_cast<int>(cfg.get_int("net.layers", 4));
    nc.heads = static_cast<int>(cfg.get_int("net.heads", 4));
    nc.ffn_dim = static_cast<int>(cfg.get_int("net.ffn_dim", 128));
    nc.time_dim = static_cast<int>(cfg.get_int("net.time_dim", 32));

    cfm::CfmConfig tc;
    tc.sigma_min = cfg.get_double("cfm.sigma_min", 1e-4);
    tc.mask_lo = cfg.get_double("cfm.mask_lo", 0.7);
    tc.mask_hi = cfg.get_double("cfm.mask_hi", 1.0);
    tc.batch_size = static_cast<int>(cfg.get_int("cfm.batch_size", 8));
    tc.train_steps = static_cast<int>(cfg.get_int("cfm.train_steps", 2000));
    tc.ode_steps = static_cast<int>(cfg.get_int("cfm.ode_steps", 30));

    ad::AdamConfig adam;
    adam.lr = cfg.get_double("optim.lr", 1e-4);
    adam.beta1 = cfg.get_double("optim.beta1", 0.9);
    adam.beta2 = cfg.get_double("optim.beta2", 0.999);
    adam.eps = cfg.get_double("optim.eps", 1e-8);

    align::DurationPredictorConfig dc;
    dc.emb_dim = static_cast<int>(cfg.get_int("dur.emb_dim", 16));
    dc.hidden_dim = static_cast<int>(cfg.get_int("dur.hidden_dim", 32));
    dc.train_steps = static_cast<int>(cfg.get_int("dur.train_steps", 600));
    dc.lr = cfg.get_double("dur.lr", 1e-2);

    align::FrameClassifierConfig fcc;
    fcc.hidden_dim = static_cast<int>(cfg.get_int("fc.hidden_dim", 48));
    fcc.train_steps = static_cast<int>(cfg.get_int("fc.train_steps", 800));
    fcc.batch_size = static_cast<int>(cfg.get_int("fc.batch_size", 4));
    fcc.lr = cfg.get_double("fc.lr", 3e-3);
    reject_unknown_keys(cfg);

    fs::create_directories(out_dir);
    net::Model model(nc, derive_seed(seed, "model-init"));
    cfm::TrainResult base = cfm::train_base(model, samples, tc, adam, derive_seed(seed, "base"),
                                            "", (out_dir / "cfm_loss.csv").string());

    align::DurationPredictor dp = align::make_duration_predictor(
        vocab.size(), dc.emb_dim, dc.hidden_dim, derive_seed(seed, "dur-init"));
    align::train_duration_predictor(dp, samples, dc, derive_seed(seed, "dur"));

    align::FrameClassifier fc = align::make_frame_classifier(
        vocab.dim, vocab.size(), fcc.hidden_dim, derive_seed(seed, "fc-init"));
    train_frame_classifier(fc, samples, fcc, derive_seed(seed, "fc"));

    TrainedStack stack{std::move(model), std::move(dp), std::move(fc)};
    save_stack(out_dir / "stack.ckpt", stack);
    fs::copy_file(corpus_dir / "vocab.ckpt", out_dir / "vocab.ckpt",
                  fs::copy_options::overwrite_existing);

    write_manifest(out_dir, "train", seed, &cfg,
                   {{"corpus_manifest", corpus_dir / "corpus.manifest"}},
                   {{"stack", out_dir / "stack.ckpt"}, {"vocab", out_dir / "vocab.ckpt"}});
    double final_loss = base.loss_curve.empty() ? 0.0 : base.loss_curve.back();
    std::cout << "trained stack (" << tc.train_steps << " steps, final loss "
              << fmt_double(final_loss, 4) << ") -> " << (out_dir / "stack.ckpt").string() << "\n";
    return 0;
}

int cmd_adapt(const fs::path& stack_dir, const fs::path& corpus_dir, const std::string& prompt_ids,
              const fs::path& config_path, const fs::path& out_dir, uint64_t seed) {
    KeyValueConfig cfg = load_config(config_path);
    LorpConfig lc;
    lc.steps = static_cast<int>(cfg.get_int("lorp.steps", 100));
    lc.learning_rate = cfg.get_double("lorp.lr", 1e-3);
    lc.ode_steps = static_cast<int>(cfg.get_int("lorp.ode_steps", 30));
    lc.mask_lo = cfg.get_double("lorp.mask_lo", 0.7);
    lc.mask_hi = cfg.get_double("lorp.mask_hi", 1.0);
    lc.sigma_min = cfg.get_double("lorp.sigma_min", 1e-4);
    lc.lora.r = static_cast<int>(cfg.get_int("lora.r", 16));
    lc.lora.alpha = cfg.get_double("lora.alpha", 16.0);
    lc.lora.init_std = cfg.get_double("lora.init_std", 0.02);
    reject_unknown_keys(cfg);

    fs::path stack_path = require_file(fs::path(stack_dir) / "stack.ckpt");
    TrainedStack stack = load_stack(stack_path);
    auto [samples, vocab] = corpus::load_corpus(require_dir(corpus_dir));

    std::vector<PromptSample> prompts;
    for (const std::string& id : split(prompt_ids, ','))
        if (!id.empty()) prompts.push_back(find_utterance(samples, id));
    if (prompts.empty()) throw ConfigError("no prompt utterances given");
    lc.samples = static_cast<int>(prompts.size());

    PersonalizationResult result = adapt(stack.model, prompts, lc, seed);
    fs::create_directories(out_dir);
    lora::save(result.adapters, out_dir / "adapters.ckpt");
    append_line(out_dir / "adapters.ckpt.meta",
                "base_checkpoint_sha256=" + sha256_file(stack_path));

    std::string curve = "step,loss\n";
    for (size_t i = 0; i < result.loss_curve.size(); ++i)
        curve += std::to_string(i) + "," + fmt_double(result.loss_curve[i]) + "\n";
    write_file(out_dir / "adapt_loss.csv", curve);

    write_manifest(out_dir, "adapt", seed, &cfg, {{"stack", stack_path}},
                   {{"adapters", out_dir / "adapters.ckpt"},
                    {"loss_curve", out_dir / "adapt_loss.csv"}});
    std::cout << "adapted " << result.adapters.layer_keys.size() << " layers over " << lc.steps
              << " steps (" << fmt_double(result.wall_time_sec, 3) << "s) -> "
              << (out_dir / "adapters.ckpt").string() << "\n";
    return 0;
}

int cmd_synth(const fs::path& stack_dir, const fs::path& adapters_dir, const fs::path& corpus_dir,
              const std::string& prompt_id, const std::string& text, int ode_steps, bool make_wav,
              const fs::path& out_dir, uint64_t seed) {
    fs::path stack_path = require_file(fs::path(stack_dir) / "stack.ckpt");
    TrainedStack stack = load_stack(stack_path);
    auto [samples, vocab] = corpus::load_corpus(require_dir(corpus_dir));
    const PromptSample& prompt = find_utterance(samples, prompt_id);
    std::vector<int> tokens = parse_token_string(text, vocab.size());

    std::optional<lora::AdapterSet> adapters;
    std::map<std::string, fs::path> inputs{{"stack", stack_path}};
    if (!adapters_dir.empty()) {
        fs::path apath = require_file(fs::path(adapters_dir) / "adapters.ckpt");
        adapters = lora::load(apath);
        KeyValueConfig meta = KeyValueConfig::parse_file(apath.string() + ".meta");
        std::string expected = meta.get_string("base_checkpoint_sha256", "");
        if (!expected.empty() && expected != sha256_file(stack_path))
            throw HashMismatchError("adapters were trained against a different base checkpoint");
        inputs["adapters"] = apath;
    }

    SynthesisOutput synth =
        synthesize(stack, adapters ? &*adapters : nullptr, prompt, tokens, ode_steps, seed);
    fs::create_directories(out_dir);
    NamedMatrices feat;
    feat["frames"] = synth.generated.frames;
    feat["frame_rate"] = Matrix::Constant(1, 1, synth.generated.frame_rate);
    save_matrix_archive(out_dir / "features.ckpt", feat);

    std::string durs = "utterance,token_index,duration\n";
    std::string utt_id = prompt_id + "-synth";
    for (size_t i = 0; i < tokens.size(); ++i)
        durs += utt_id + "," + std::to_string(i) + "," +
                std::to_string(synth.durations.durations[i]) + "\n";
    write_file(out_dir / "durations.csv", durs);

    std::map<std::string, fs::path> outputs{{"features", out_dir / "features.ckpt"},
                                            {"durations", out_dir / "durations.csv"}};
    if (make_wav) {
        audio::MelConfig mc;
        mc.mels = synth.generated.dim();
        std::vector<double> wav =
            audio::griffin_lim(synth.generated, mc, 16, derive_seed(seed, "wav-phase"));
        double peak = 1e-9;
        for (double s : wav) peak = std::max(peak, std::abs(s));
        for (double& s : wav) s = s / peak * 0.9;
        audio::write_wav16(out_dir / "synth.wav", wav, mc.sample_rate);
        outputs["wav"] = out_dir / "synth.wav";
    }
    write_manifest(out_dir, "synth", seed, nullptr, inputs, outputs);
    std::cout << "synthesized " << synth.generated.length() << " frames -> "
              << (out_dir / "features.ckpt").string() << "\n";
    return 0;
}

eval::SweepSpec shared_spec_from(const KeyValueConfig& cfg, const std::string& prefix) {
    eval::SweepSpec spec;
    spec.speakers = static_cast<int>(cfg.get_int(prefix + ".speakers", 4));
    spec.texts_per_cell = static_cast<int>(cfg.get_int(prefix + ".texts", 25));
    spec.text_len_lo = static_cast<int>(cfg.get_int(prefix + ".text_len_lo", 4));
    spec.text_len_hi = static_cast<int>(cfg.get_int(prefix + ".text_len_hi", 8));
    spec.adapt_lr = cfg.get_double(prefix + ".adapt_lr", 1e-3);
    std::string quality = cfg.get_string(prefix + ".quality_command", "");
    double timeout = cfg.get_double(prefix + ".quality_timeout", 30.0);
    if (!quality.empty()) spec.scorer = eval::QualityScorer{quality, timeout};
    return spec;
}

int cmd_eval(const fs::path& stack_dir, const fs::path& config_path, const fs::path& out_dir,
             uint64_t seed, int jobs) {
    KeyValueConfig cfg = load_config(config_path);
    eval::SweepSpec spec = shared_spec_from(cfg, "eval");
    eval::SweepCell cell;
    cell.mode = eval::parse_mode(cfg.get_string("eval.mode", "baseline"));
    cell.regime = corpus::parse_regime(cfg.get_string("eval.regime", "wild"));
    cell.samples = static_cast<int>(cfg.get_int("eval.samples", 1));
    cell.adapt_steps =
        static_cast<int>(cfg.get_int("eval.steps", cell.mode == eval::Mode::Baseline ? 0 : 100));
    cell.rank = static_cast<int>(cfg.get_int("eval.rank", 16));
    cell.alpha = cfg.get_double("eval.alpha", 16.0);
    cell.ode_steps = static_cast<int>(cfg.get_int("eval.ode_steps", 30));
    spec.cells = {cell};
    reject_unknown_keys(cfg);

    fs::path stack_path = require_file(fs::path(stack_dir) / "stack.ckpt");
    TrainedStack stack = load_stack(stack_path);
    corpus::Vocab vocab = vocab_from_archive(fs::path(stack_dir) / "vocab.ckpt");

    eval::EvalReport report = eval::run_sweep(stack, vocab, spec, out_dir, seed, jobs);
    write_manifest(out_dir, "eval", seed, &cfg, {{"stack", stack_path}},
                   {{"report", out_dir / "report.csv"}});
    std::cout << report.to_csv();
    return 0;
}

int cmd_sweep(const fs::path& stack_dir, const fs::path& config_path, const fs::path& out_dir,
              uint64_t seed, int jobs) {
    KeyValueConfig cfg = load_config(config_path);
    eval::SweepSpec spec = shared_spec_from(cfg, "sweep");

    std::vector<std::string> modes = cfg.get_string_list("sweep.modes", {"baseline", "lorp"});
    std::vector<std::string> regimes = cfg.get_string_list("sweep.regimes", {"wild"});
    std::vector<int> samples = cfg.get_int_list("sweep.samples", {1});
    std::vector<int> steps = cfg.get_int_list("sweep.steps", {100});
    std::vector<int> ranks = cfg.get_int_list("sweep.ranks", {16});
    std::vector<int> ode_steps = cfg.get_int_list("sweep.ode_steps", {30});
    int multi_samples = static_cast<int>(cfg.get_int("sweep.multi_samples", 10));
    int multi_steps = static_cast<int>(cfg.get_int("sweep.multi_steps", 3200));
    reject_unknown_keys(cfg);

    for (const std::string& regime_name : regimes) {
        corpus::Regime regime = corpus::parse_regime(regime_name);
        for (int ode : ode_steps) {
            for (const std::string& mode_name : modes) {
                eval::Mode mode = eval::parse_mode(mode_name);
                if (mode == eval::Mode::Baseline) {
                    eval::SweepCell cell;
                    cell.mode = mode;
                    cell.regime = regime;
                    cell.samples = 1;
                    cell.adapt_steps = 0;
                    cell.ode_steps = ode;
                    spec.cells.push_back(cell);
                } else if (mode == eval::Mode::Lorp) {
                    for (int r : ranks)
                        for (int s : samples)
                            for (int k : steps) {
                                eval::SweepCell cell;
                                cell.mode = mode;
                                cell.regime = regime;
                                cell.samples = s;
                                cell.adapt_steps = k;
                                cell.rank = r;
                                cell.alpha = static_cast<double>(r);
                                cell.ode_steps = ode;
                                spec.cells.push_back(cell);
                            }
                } else {
                    for (int r : ranks) {
                        eval::SweepCell cell;
                        cell.mode = mode;
                        cell.regime = regime;
                        cell.samples = multi_samples;
                        cell.adapt_steps = multi_steps;
                        cell.rank = r;
                        cell.alpha = static_cast<double>(r);
                        cell.ode_steps = ode;
                        spec.cells.push_back(cell);
                    }
                }
            }
        }
    }

    fs::path stack_path = require_file(fs::path(stack_dir) / "stack.ckpt");
    TrainedStack stack = load_stack(stack_path);
    corpus::Vocab vocab = vocab_from_archive(fs::path(stack_dir) / "vocab.ckpt");

    eval::EvalReport report = eval::run_sweep(stack, vocab, spec, out_dir, seed, jobs);
    write_manifest(out_dir, "sweep", seed, &cfg, {{"stack", stack_path}},
                   {{"report", out_dir / "report.csv"}});
    std::cout << "sweep wrote " << report.rows.size() << " rows -> "
              << (out_dir / "report.csv").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lorp: low-rank personalization of a flow-matching synthesizer"};
    app.set_version_flag("--version", std::string("checkpoint format LORPCKPT1"));
    app.require_subcommand(1);

    uint64_t seed = 1234;
    app.add_option("--seed", seed, "master seed; per-component sub-seeds derive from it");
    app.fallthrough();  // let subcommands hand --seed back to the parent

    std::string config_path, corpus_dir, out_dir, stack_dir, adapters_dir, prompt, text;
    int ode_steps = 30;
    int jobs = 1;
    bool make_wav = false;

    CLI::App* gen = app.add_subcommand("gen-corpus", "generate a synthetic speaker corpus");
    gen->add_option("--config", config_path)->required();
    gen->add_option("--out", out_dir)->required();

    CLI::App* train =
        app.add_subcommand("train", "train base model, duration predictor, frame classifier");
    train->add_option("--config", config_path)->required();
    train->add_option("--corpus", corpus_dir)->required();
    train->add_option("--out", out_dir)->required();

    CLI::App* adapt_cmd = app.add_subcommand("adapt", "fit low-rank adapters on prompt utterances");
    adapt_cmd->add_option("--stack", stack_dir)->required();
    adapt_cmd->add_option("--corpus", corpus_dir)->required();
    adapt_cmd->add_option("--prompt", prompt, "comma-separated utterance ids")->required();
    adapt_cmd->add_option("--config", config_path)->required();
    adapt_cmd->add_option("--out", out_dir)->required();

    CLI::App* synth = app.add_subcommand("synth", "synthesize new text as the prompt speaker");
    synth->add_option("--stack", stack_dir)->required();
    synth->add_option("--adapters", adapters_dir);
    synth->add_option("--corpus", corpus_dir)->required();
    synth->add_option("--prompt", prompt, "prompt utterance id")->required();
    synth->add_option("--text", text, "token ids, e.g. \"3 7 2\"")->required();
    synth->add_option("--ode-steps", ode_steps);
    synth->add_flag("--wav", make_wav, "also write a Griffin-Lim waveform");
    synth->add_option("--out", out_dir)->required();

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate one configuration");
    eval_cmd->add_option("--stack", stack_dir)->required();
    eval_cmd->add_option("--config", config_path)->required();
    eval_cmd->add_option("--out", out_dir)->required();
    eval_cmd->add_option("--jobs", jobs);

    CLI::App* sweep = app.add_subcommand("sweep", "run a grid of evaluation cells");
    sweep->add_option("--stack", stack_dir)->required();
    sweep->add_option("--config", config_path)->required();
    sweep->add_option("--out", out_dir)->required();
    sweep->add_option("--jobs", jobs);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_corpus(config_path, out_dir, seed);
        if (train->parsed()) return cmd_train(config_path, corpus_dir, out_dir, seed);
        if (adapt_cmd->parsed())
            return cmd_adapt(stack_dir, corpus_dir, prompt, config_path, out_dir, seed);
        if (synth->parsed())
            return cmd_synth(stack_dir, adapters_dir, corpus_dir, prompt, text, ode_steps, make_wav,
                             out_dir, seed);
        if (eval_cmd->parsed()) return cmd_eval(stack_dir, config_path, out_dir, seed, jobs);
        if (sweep->parsed()) return cmd_sweep(stack_dir, config_path, out_dir, seed, jobs);
    } catch (const MissingFileError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissingFile;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSchema;
    } catch (const HashMismatchError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitHashMismatch;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
