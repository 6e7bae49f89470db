#include "lorp/cfm.hpp"

#include "lorp/checkpoint.hpp"
#include "lorp/util.hpp"

#include <cmath>

namespace lorp::cfm {

void CfmConfig::validate() const {
    if (sigma_min < 0.0 || sigma_min >= 1.0)
        throw std::invalid_argument("cfm config: sigma_min must be in [0, 1)");
    if (ode_steps < 1) throw std::invalid_argument("cfm config: ode_steps must be >= 1");
    if (mask_lo <= 0.0 || mask_hi > 1.0 || mask_lo > mask_hi)
        throw std::invalid_argument("cfm config: mask fraction range invalid");
    if (batch_size < 1) throw std::invalid_argument("cfm config: batch_size must be >= 1");
    if (train_steps < 0) throw std::invalid_argument("cfm config: train_steps must be >= 0");
}

PathSample ot_path(const Matrix& x0, const Matrix& x1, double t, double sigma_min) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols())
        throw std::invalid_argument("ot_path: x0/x1 shape mismatch");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("ot_path: t outside [0, 1]");
    PathSample p;
    p.x0 = x0;
    p.x1 = x1;
    p.t = t;
    p.x_t = (1.0 - (1.0 - sigma_min) * t) * x0 + t * x1;
    p.u_t = x1 - (1.0 - sigma_min) * x0;
    return p;
}

MaskSpan sample_mask_span(int total_frames, double lo, double hi, Rng& rng) {
    if (total_frames < 1) throw std::invalid_argument("sample_mask_span: empty sequence");
    double frac = rng.uniform(lo, hi);
    int len = std::clamp(static_cast<int>(std::lround(frac * total_frames)), 1, total_frames);
    int begin = rng.uniform_int(0, total_frames - len);
    return MaskSpan{begin, begin + len};
}

LossInstance make_loss_instance(const PromptSample& sample, const CfmConfig& config, Rng& rng) {
    const int T = sample.features.length();
    const int D = sample.features.dim();
    if (sample.alignment.total_frames() != T)
        throw std::invalid_argument("cfm: sample alignment does not cover its frames");

    LossInstance inst;
    MaskSpan span = sample_mask_span(T, config.mask_lo, config.mask_hi, rng);
    inst.given_mask.assign(static_cast<size_t>(T), 1);
    for (int f = span.begin; f < span.end; ++f) inst.given_mask[static_cast<size_t>(f)] = 0;
    inst.t = rng.uniform();
    Matrix x0 = rng.gauss_matrix(T, D);
    PathSample path = ot_path(x0, sample.features.frames, inst.t, config.sigma_min);
    inst.x_t = std::move(path.x_t);
    inst.u_t = std::move(path.u_t);
    inst.context = sample.features.frames;
    inst.token_frames = token_frames(sample.tokens, sample.alignment);
    return inst;
}

ad::Graph loss_graph(const net::NetConfig& config, int T, const net::AdapterMeta* lora) {
    ad::GraphBuilder b;
    ad::NodeId field = net::append_field_graph(b, config, T, lora);
    ad::NodeId u_t = b.input("u_t", T, config.feature_dim);
    ad::NodeId mask = b.input("loss_mask", T, config.feature_dim);
    ad::NodeId diff = b.sub(field, u_t);
    ad::NodeId sq = b.hadamard(diff, diff);
    ad::NodeId loss = b.sum_all(b.hadamard(sq, mask));
    b.mark_output("field", field);
    b.mark_output("loss", loss);
    return b.build();
}

NamedMatrices pack_loss_inputs(const net::NetConfig& config, const LossInstance& inst) {
    const int T = static_cast<int>(inst.x_t.rows());
    net::FieldInputs fin{inst.x_t, inst.t, inst.context, inst.given_mask, inst.token_frames};
    NamedMatrices inputs = net::pack_field_inputs(config, fin);
    int masked = 0;
    for (uint8_t g : inst.given_mask)
        if (!g) ++masked;
    if (masked == 0) throw std::invalid_argument("cfm: loss instance has no masked frames");
    // fold the 1/(masked*D) normalization into the mask weights
    double w = 1.0 / (static_cast<double>(masked) * config.feature_dim);
    Matrix mask = Matrix::Zero(T, config.feature_dim);
    for (int f = 0; f < T; ++f)
        if (!inst.given_mask[static_cast<size_t>(f)]) mask.row(f).setConstant(w);
    inputs["u_t"] = inst.u_t;
    inputs["loss_mask"] = std::move(mask);
    return inputs;
}

double cfm_loss(const net::Model& model, const lora::AdapterSet* adapters,
                const std::vector<PromptSample>& batch, const CfmConfig& config, Rng& rng,
                NamedMatrices* grads) {
    config.validate();
    if (batch.empty()) throw std::invalid_argument("cfm_loss: empty batch");

    std::optional<net::AdapterMeta> meta;
    const NamedMatrices* adapter_params = nullptr;
    if (adapters && !adapters->empty()) {
        meta = adapters->meta();
        adapter_params = &adapters->params;
    }

    double total = 0.0;
    if (grads) grads->clear();
    std::map<int, ad::Graph> graphs_by_len;
    for (const PromptSample& sample : batch) {
        LossInstance inst = make_loss_instance(sample, config, rng);
        const int T = sample.features.length();
        auto git = graphs_by_len.find(T);
        if (git == graphs_by_len.end())
            git = graphs_by_len.emplace(T, loss_graph(model.config(), T, meta ? &*meta : nullptr)).first;
        const ad::Graph& g = git->second;
        ad::ParamView view{&model.params(), adapter_params};
        NamedMatrices inputs = pack_loss_inputs(model.config(), inst);
        ad::ForwardResult fwd = ad::forward_eval(g, view, inputs);
        total += ad::output_value(g, fwd, "loss")(0, 0);
        if (grads) {
            NamedMatrices sample_grads = ad::backward(g, fwd, "loss");
            for (auto& [name, gmat] : sample_grads) {
                auto it = grads->find(name);
                if (it == grads->end())
                    (*grads)[name] = std::move(gmat);
                else
                    it->second += gmat;
            }
        }
    }
    double inv = 1.0 / static_cast<double>(batch.size());
    if (grads)
        for (auto& [name, gmat] : *grads) {
            (void)name;
            gmat *= inv;
        }
    return total * inv;
}

Matrix euler_integrate(const FieldFn& field, Matrix x0, int steps,
                       const std::vector<uint8_t>* clamp_mask, const Matrix* clamp_values) {
    if (steps < 1) throw std::invalid_argument("euler_integrate: steps must be >= 1");
    if ((clamp_mask == nullptr) != (clamp_values == nullptr))
        throw std::invalid_argument("euler_integrate: clamp mask and values must come together");
    auto clamp = [&](Matrix& x) {
        if (!clamp_mask) return;
        for (int f = 0; f < static_cast<int>(x.rows()); ++f)
            if ((*clamp_mask)[static_cast<size_t>(f)]) x.row(f) = clamp_values->row(f);
    };
    Matrix x = std::move(x0);
    clamp(x);
    const double dt = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        double t = static_cast<double>(k) / steps;
        x += dt * field(x, t);
        clamp(x);
    }
    return x;
}

FeatureSequence sample(const net::Model& model, const lora::AdapterSet* adapters,
                       const FeatureSequence& context, const std::vector<uint8_t>& given_mask,
                       const std::vector<int>& token_frames, int ode_steps, uint64_t seed) {
    const int T = context.length();
    const int D = context.dim();
    if (static_cast<int>(given_mask.size()) != T)
        throw std::invalid_argument("sample: mask length mismatch");
    if (static_cast<int>(token_frames.size()) != T)
        throw std::invalid_argument("sample: token frame length mismatch");

    std::optional<net::AdapterMeta> meta;
    const NamedMatrices* adapter_params = nullptr;
    if (adapters && !adapters->empty()) {
        meta = adapters->meta();
        adapter_params = &adapters->params;
    }

    Rng rng(derive_seed(seed, "cfm-sample"));
    Matrix x0 = rng.gauss_matrix(T, D);
    FieldFn field = [&](const Matrix& x, double t) {
        net::FieldInputs fin{x, t, context.frames, given_mask, token_frames};
        return model.vector_field(fin, meta ? &*meta : nullptr, adapter_params);
    };
    Matrix x1 = euler_integrate(field, std::move(x0), ode_steps, &given_mask, &context.frames);
    FeatureSequence out;
    out.frames = std::move(x1);
    out.frame_rate = context.frame_rate;
    return out;
}

TrainResult train_base(net::Model& model, const std::vector<PromptSample>& corpus,
                       const CfmConfig& config, const ad::AdamConfig& adam, uint64_t seed,
                       const std::string& checkpoint_path, const std::string& curve_csv_path) {
    config.validate();
    if (corpus.empty()) throw std::invalid_argument("train_base: empty corpus");

    Rng rng(derive_seed(seed, "cfm-train"));
    ad::AdamState opt;
    opt.config = adam;
    TrainResult result;
    result.loss_curve.reserve(static_cast<size_t>(config.train_steps));
    for (int step = 0; step < config.train_steps; ++step) {
        std::vector<PromptSample> batch;
        batch.reserve(static_cast<size_t>(config.batch_size));
        for (int i = 0; i < config.batch_size; ++i)
            batch.push_back(corpus[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int>(corpus.size()) - 1))]);
        NamedMatrices grads;
        double loss = cfm_loss(model, nullptr, batch, config, rng, &grads);
        if (!std::isfinite(loss)) throw DivergenceError(step);
        adam_step(model.mutable_params(), grads, opt);
        result.loss_curve.push_back(loss);
    }

    if (!checkpoint_path.empty()) save_matrix_archive(checkpoint_path, model.params());
    if (!curve_csv_path.empty()) {
        std::string csv = "step,loss\n";
        for (size_t i = 0; i < result.loss_curve.size(); ++i)
            csv += std::to_string(i) + "," + fmt_double(result.loss_curve[i]) + "\n";
        write_file(curve_csv_path, csv);
    }
    return result;
}

}  // namespace lorp::cfm
