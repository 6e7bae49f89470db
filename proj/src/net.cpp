#include "lorp/net.hpp"

#include <cmath>

namespace lorp::net {

void NetConfig::validate() const {
    if (feature_dim < 1 || model_dim < 1 || layers < 1 || heads < 1 || ffn_dim < 1 ||
        token_vocab < 1 || time_dim < 1)
        throw std::invalid_argument("net config: all dimensions must be >= 1");
    if (model_dim % heads != 0)
        throw std::invalid_argument("net config: model_dim must be divisible by heads");
    if ((model_dim / heads) % 2 != 0)
        throw std::invalid_argument("net config: head dimension must be even for rotary rotation");
    if (time_dim % 2 != 0)
        throw std::invalid_argument("net config: time_dim must be even");
}

NetConfig reference_large_config() {
    NetConfig c;
    c.feature_dim = 80;
    c.model_dim = 1024;
    c.layers = 24;
    c.heads = 16;
    c.ffn_dim = 4096;
    c.token_vocab = 256;
    c.time_dim = 256;
    return c;
}

const char* site_name(Site s) {
    switch (s) {
        case Site::Query: return "query";
        case Site::Key: return "key";
        case Site::Value: return "value";
        case Site::AttnOut: return "attn-out";
        case Site::FfnIn: return "ffn-in";
        case Site::FfnOut: return "ffn-out";
        case Site::InputProj: return "input-proj";
        case Site::OutputProj: return "output-proj";
        case Site::TimeProj: return "time-proj";
    }
    return "?";
}

std::string DenseLayerId::key() const {
    return "l" + std::to_string(layer) + "." + site_name(site);
}

std::vector<DenseShape> dense_layers(const NetConfig& c) {
    c.validate();
    const int in_dim = 2 * c.feature_dim + c.model_dim;  // [x_t ; context ; token emb]
    std::vector<DenseShape> out;
    out.push_back({{0, Site::InputProj}, in_dim, c.model_dim});
    out.push_back({{0, Site::TimeProj}, c.time_dim, c.model_dim});
    for (int l = 0; l < c.layers; ++l) {
        out.push_back({{l, Site::Query}, c.model_dim, c.model_dim});
        out.push_back({{l, Site::Key}, c.model_dim, c.model_dim});
        out.push_back({{l, Site::Value}, c.model_dim, c.model_dim});
        out.push_back({{l, Site::AttnOut}, c.model_dim, c.model_dim});
        out.push_back({{l, Site::FfnIn}, c.model_dim, c.ffn_dim});
        out.push_back({{l, Site::FfnOut}, c.ffn_dim, c.model_dim});
    }
    out.push_back({{0, Site::OutputProj}, c.model_dim, c.feature_dim});
    return out;
}

Matrix time_embedding(double t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("time_embedding: dim must be even and >= 2");
    Matrix e(1, dim);
    for (int k = 0; k < dim / 2; ++k) {
        // frequencies spread geometrically over [1, 1000]; t lives in [0, 1]
        double omega = std::pow(1000.0, static_cast<double>(k) / std::max(1, dim / 2 - 1));
        e(0, 2 * k) = std::sin(t * omega);
        e(0, 2 * k + 1) = std::cos(t * omega);
    }
    return e;
}

Matrix rotary_rotate(const Matrix& vectors, const std::vector<double>& positions) {
    if (vectors.cols() % 2 != 0)
        throw std::invalid_argument("rotary_rotate: dimension must be even");
    if (static_cast<int>(positions.size()) != vectors.rows())
        throw std::invalid_argument("rotary_rotate: one position per row required");
    return ad::rotary_apply(vectors, positions);
}

// ---------------------------------------------------------------------------
// Graph assembly

namespace {

std::string wname(const DenseLayerId& id) { return "net." + id.key() + ".w"; }
std::string bname(const DenseLayerId& id) { return "net." + id.key() + ".b"; }

// y = x W^T + b, optionally plus the low-rank delta (alpha/r) x A^T B^T.
// W is stored d_out x d_in; A is r x d_in, B is d_out x r.
ad::NodeId dense(ad::GraphBuilder& b, ad::NodeId x, const DenseShape& shape,
                 const AdapterMeta* lora) {
    ad::NodeId w = b.parameter(wname(shape.id), shape.d_out, shape.d_in);
    ad::NodeId bias = b.parameter(bname(shape.id), 1, shape.d_out);
    ad::NodeId y = b.add_row(b.matmul(x, b.transpose(w)), bias);
    if (lora && lora->targets.count(shape.id.key())) {
        ad::NodeId a_mat = b.parameter("lora." + shape.id.key() + ".A", lora->r, shape.d_in);
        ad::NodeId b_mat = b.parameter("lora." + shape.id.key() + ".B", shape.d_out, lora->r);
        ad::NodeId delta = b.matmul(b.matmul(x, b.transpose(a_mat)), b.transpose(b_mat));
        y = b.add(y, b.scale(delta, lora->alpha / lora->r));
    }
    return y;
}

}  // namespace

ad::NodeId append_field_graph(ad::GraphBuilder& b, const NetConfig& c, int T,
                              const AdapterMeta* lora) {
    c.validate();
    if (T < 1) throw std::invalid_argument("field graph: sequence length must be >= 1");
    const int D = c.feature_dim;
    const int M = c.model_dim;
    const int H = c.heads;
    const int dh = M / H;

    const std::vector<DenseShape> shapes = dense_layers(c);
    auto shape_of = [&](const DenseLayerId& id) -> const DenseShape& {
        for (const DenseShape& s : shapes)
            if (s.id == id) return s;
        throw std::logic_error("field graph: missing dense shape");
    };

    ad::NodeId x_t = b.input("x_t", T, D);
    ad::NodeId context = b.input("context", T, D);
    ad::NodeId tok_ids = b.input("tok_ids", T, 1);
    ad::NodeId time_emb = b.input("time_emb", 1, c.time_dim);

    ad::NodeId tok_table = b.parameter("net.tok_emb", c.token_vocab, M);
    ad::NodeId tok = b.embed(tok_table, tok_ids);

    ad::NodeId h = dense(b, b.concat_cols({x_t, context, tok}), shape_of({0, Site::InputProj}), lora);
    ad::NodeId t_proj = dense(b, time_emb, shape_of({0, Site::TimeProj}), lora);
    h = b.add_row(h, t_proj);

    std::vector<double> positions(static_cast<size_t>(T));
    for (int i = 0; i < T; ++i) positions[static_cast<size_t>(i)] = static_cast<double>(i);

    for (int l = 0; l < c.layers; ++l) {
        std::string p = "net.l" + std::to_string(l);
        ad::NodeId ln1_g = b.parameter(p + ".ln1.g", 1, M);
        ad::NodeId ln1_b = b.parameter(p + ".ln1.b", 1, M);
        ad::NodeId a_in = b.layer_norm_rows(h, ln1_g, ln1_b);

        ad::NodeId q = dense(b, a_in, shape_of({l, Site::Query}), lora);
        ad::NodeId k = dense(b, a_in, shape_of({l, Site::Key}), lora);
        ad::NodeId v = dense(b, a_in, shape_of({l, Site::Value}), lora);

        std::vector<ad::NodeId> head_outs;
        for (int hd = 0; hd < H; ++hd) {
            ad::NodeId qh = b.rotary(b.slice_cols(q, hd * dh, (hd + 1) * dh), positions);
            ad::NodeId kh = b.rotary(b.slice_cols(k, hd * dh, (hd + 1) * dh), positions);
            ad::NodeId vh = b.slice_cols(v, hd * dh, (hd + 1) * dh);
            // full bidirectional attention, no ALiBi bias
            ad::NodeId scores = b.scale(b.matmul(qh, b.transpose(kh)), 1.0 / std::sqrt(double(dh)));
            head_outs.push_back(b.matmul(b.softmax_rows(scores), vh));
        }
        ad::NodeId att = dense(b, b.concat_cols(head_outs), shape_of({l, Site::AttnOut}), lora);
        h = b.add(h, att);

        ad::NodeId ln2_g = b.parameter(p + ".ln2.g", 1, M);
        ad::NodeId ln2_b = b.parameter(p + ".ln2.b", 1, M);
        ad::NodeId f = b.layer_norm_rows(h, ln2_g, ln2_b);
        f = dense(b, f, shape_of({l, Site::FfnIn}), lora);
        f = b.gelu(f);
        f = dense(b, f, shape_of({l, Site::FfnOut}), lora);
        h = b.add(h, f);
    }

    ad::NodeId fin_g = b.parameter("net.final_ln.g", 1, M);
    ad::NodeId fin_b = b.parameter("net.final_ln.b", 1, M);
    h = b.layer_norm_rows(h, fin_g, fin_b);
    return dense(b, h, shape_of({0, Site::OutputProj}), lora);
}

NamedMatrices pack_field_inputs(const NetConfig& c, const FieldInputs& in) {
    const int T = static_cast<int>(in.x_t.rows());
    if (in.x_t.cols() != c.feature_dim)
        throw std::invalid_argument("vector_field: x_t feature dimension mismatch");
    if (in.context.rows() != T || in.context.cols() != c.feature_dim)
        throw std::invalid_argument("vector_field: context length/dim mismatch");
    if (static_cast<int>(in.given_mask.size()) != T)
        throw std::invalid_argument("vector_field: mask length mismatch");
    if (static_cast<int>(in.token_frames.size()) != T)
        throw std::invalid_argument("vector_field: token frame length mismatch");
    if (in.t < 0.0 || in.t > 1.0) throw std::invalid_argument("vector_field: t outside [0, 1]");

    Matrix masked = in.context;
    for (int f = 0; f < T; ++f)
        if (!in.given_mask[static_cast<size_t>(f)]) masked.row(f).setZero();
    Matrix ids(T, 1);
    for (int f = 0; f < T; ++f) {
        int id = in.token_frames[static_cast<size_t>(f)];
        if (id < 0 || id >= c.token_vocab)
            throw std::invalid_argument("vector_field: token id out of vocab range");
        ids(f, 0) = static_cast<double>(id);
    }
    NamedMatrices m;
    m["x_t"] = in.x_t;
    m["context"] = std::move(masked);
    m["tok_ids"] = std::move(ids);
    m["time_emb"] = time_embedding(in.t, c.time_dim);
    return m;
}

// ---------------------------------------------------------------------------
// Model

namespace {

NamedMatrices init_params(const NetConfig& c, uint64_t seed) {
    NamedMatrices p;
    Rng rng(derive_seed(seed, "net-init"));
    const double w_std = 0.02;
    for (const DenseShape& s : dense_layers(c)) {
        p[wname(s.id)] = rng.derive(wname(s.id)).gauss_matrix(s.d_out, s.d_in, w_std);
        p[bname(s.id)] = Matrix::Zero(1, s.d_out);
    }
    p["net.tok_emb"] = rng.derive("net.tok_emb").gauss_matrix(c.token_vocab, c.model_dim, w_std);
    for (int l = 0; l < c.layers; ++l) {
        std::string pre = "net.l" + std::to_string(l);
        p[pre + ".ln1.g"] = Matrix::Ones(1, c.model_dim);
        p[pre + ".ln1.b"] = Matrix::Zero(1, c.model_dim);
        p[pre + ".ln2.g"] = Matrix::Ones(1, c.model_dim);
        p[pre + ".ln2.b"] = Matrix::Zero(1, c.model_dim);
    }
    p["net.final_ln.g"] = Matrix::Ones(1, c.model_dim);
    p["net.final_ln.b"] = Matrix::Zero(1, c.model_dim);
    return p;
}

}  // namespace

Model::Model(NetConfig config, uint64_t seed) : config_(config) {
    config_.validate();
    params_ = init_params(config_, seed);
    dense_ = dense_layers(config_);
}

Model::Model(NetConfig config, NamedMatrices params)
    : config_(config), params_(std::move(params)) {
    config_.validate();
    dense_ = dense_layers(config_);
    // sanity: every expected tensor present with the right shape
    NamedMatrices expected = init_params(config_, 0);
    for (const auto& [name, m] : expected) {
        auto it = params_.find(name);
        if (it == params_.end())
            throw std::invalid_argument("model: checkpoint is missing tensor '" + name + "'");
        if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
            throw std::invalid_argument("model: checkpoint tensor '" + name + "' has wrong shape");
    }
}

Matrix Model::vector_field(const FieldInputs& in, const AdapterMeta* meta,
                           const NamedMatrices* adapter_params) const {
    const int T = static_cast<int>(in.x_t.rows());
    ad::GraphBuilder b;
    ad::NodeId field = append_field_graph(b, config_, T, meta);
    b.mark_output("field", field);
    ad::Graph g = b.build();
    ad::ParamView view{&params_, adapter_params};
    ad::ForwardResult fwd = ad::forward_eval(g, view, pack_field_inputs(config_, in));
    return ad::output_value(g, fwd, "field");
}

// ---------------------------------------------------------------------------
// Parameter accounting

ParamCounts count_params(const NetConfig& c, int rank) {
    c.validate();
    long long base = 0;
    for (const DenseShape& s : dense_layers(c))
        base += static_cast<long long>(s.d_in) * s.d_out + s.d_out;
    base += static_cast<long long>(c.token_vocab) * c.model_dim;      // embedding table
    base += (2LL * c.layers + 1) * 2 * c.model_dim;                   // layer norms
    long long adapters = 0;
    if (rank > 0)
        for (const DenseShape& s : dense_layers(c))
            adapters += static_cast<long long>(rank) * (s.d_in + s.d_out);
    ParamCounts out;
    out.base = base;
    out.adapters = adapters;
    out.ratio = base > 0 ? static_cast<double>(adapters) / static_cast<double>(base) : 0.0;
    return out;
}

ParamCounts count_params(const Model& model, const NamedMatrices* adapter_params) {
    ParamCounts out;
    for (const auto& [name, m] : model.params()) {
        (void)name;
        out.base += static_cast<long long>(m.size());
    }
    if (adapter_params)
        for (const auto& [name, m] : *adapter_params) {
            (void)name;
            out.adapters += static_cast<long long>(m.size());
        }
    out.ratio = out.base > 0 ? static_cast<double>(out.adapters) / static_cast<double>(out.base) : 0.0;
    return out;
}

}  // namespace lorp::net
