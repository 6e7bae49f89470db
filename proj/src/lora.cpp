#include "lorp/lora.hpp"

#include "lorp/checkpoint.hpp"
#include "lorp/util.hpp"

namespace lorp::lora {

const Matrix& AdapterSet::a(const std::string& layer_key) const {
    return params.at("lora." + layer_key + ".A");
}

const Matrix& AdapterSet::b(const std::string& layer_key) const {
    return params.at("lora." + layer_key + ".B");
}

net::AdapterMeta AdapterSet::meta() const {
    net::AdapterMeta m;
    m.r = r;
    m.alpha = alpha;
    m.targets.insert(layer_keys.begin(), layer_keys.end());
    return m;
}

long long AdapterSet::param_count() const {
    long long n = 0;
    for (const auto& [name, m] : params) {
        (void)name;
        n += static_cast<long long>(m.size());
    }
    return n;
}

AdapterSet inject(const net::Model& model, const LoraConfig& config, uint64_t seed) {
    if (config.r < 1) throw std::invalid_argument("lora: rank must be >= 1");
    if (config.alpha <= 0.0) throw std::invalid_argument("lora: alpha must be > 0");
    if (config.init_std <= 0.0) throw std::invalid_argument("lora: init_std must be > 0");

    AdapterSet set;
    set.r = config.r;
    set.alpha = config.alpha;
    set.init_std = config.init_std;
    set.filter_description = config.target_filter ? "custom" : "all-dense";
    Rng rng(derive_seed(seed, "lora-init"));
    for (const net::DenseShape& s : model.dense_layer_list()) {
        if (config.target_filter && !config.target_filter(s.id)) continue;
        if (config.r > std::min(s.d_in, s.d_out))
            throw std::invalid_argument("lora: rank " + std::to_string(config.r) +
                                        " exceeds min dimension of layer " + s.id.key());
        std::string key = s.id.key();
        set.layer_keys.push_back(key);
        set.params["lora." + key + ".A"] =
            rng.derive(key).gauss_matrix(config.r, s.d_in, config.init_std);
        set.params["lora." + key + ".B"] = Matrix::Zero(s.d_out, config.r);
    }
    return set;
}

AdapterSet reset(const AdapterSet& adapters, uint64_t seed) {
    AdapterSet out = adapters;
    Rng rng(derive_seed(seed, "lora-init"));
    for (const std::string& key : out.layer_keys) {
        Matrix& a = out.params["lora." + key + ".A"];
        a = rng.derive(key).gauss_matrix(static_cast<int>(a.rows()), static_cast<int>(a.cols()),
                                         out.init_std);
        Matrix& b = out.params["lora." + key + ".B"];
        b.setZero();
    }
    return out;
}

namespace {

void check_shapes(const Matrix& W, const Matrix& A, const Matrix& B, int r) {
    if (A.rows() != r || B.cols() != r)
        throw std::invalid_argument("lora: A/B rank dimension does not match r");
    if (A.cols() != W.cols() || B.rows() != W.rows())
        throw std::invalid_argument("lora: adapter shapes inconsistent with host layer");
}

}  // namespace

Vector adapted_forward(const Matrix& W, const Vector& bias, const Matrix& A, const Matrix& B,
                       double alpha, int r, const Vector& x) {
    check_shapes(W, A, B, r);
    if (x.size() != W.cols()) throw std::invalid_argument("lora: input size mismatch");
    if (bias.size() != W.rows()) throw std::invalid_argument("lora: bias size mismatch");
    return W * x + bias + (alpha / r) * (B * (A * x));
}

Matrix merge(const Matrix& W, const Matrix& A, const Matrix& B, double alpha, int r) {
    check_shapes(W, A, B, r);
    return W + (alpha / r) * B * A;
}

void save(const AdapterSet& adapters, const std::filesystem::path& archive_path) {
    save_matrix_archive(archive_path, adapters.params);
    std::string meta;
    meta += "r=" + std::to_string(adapters.r) + "\n";
    meta += "alpha=" + fmt_double(adapters.alpha) + "\n";
    meta += "init_std=" + fmt_double(adapters.init_std) + "\n";
    meta += "filter=" + adapters.filter_description + "\n";
    meta += "layers=" + join(adapters.layer_keys, ",") + "\n";
    write_file(archive_path.string() + ".meta", meta);
}

AdapterSet load(const std::filesystem::path& archive_path) {
    AdapterSet set;
    set.params = load_matrix_archive(archive_path);
    KeyValueConfig meta = KeyValueConfig::parse_file(archive_path.string() + ".meta");
    set.r = static_cast<int>(meta.get_int("r", 0));
    set.alpha = meta.get_double("alpha", 0.0);
    set.init_std = meta.get_double("init_std", 0.02);
    set.filter_description = meta.get_string("filter", "all-dense");
    for (const std::string& k : meta.get_string_list("layers", {}))
        set.layer_keys.push_back(k);
    if (set.r < 1) throw std::runtime_error("lora: adapter metadata missing rank");
    return set;
}

}  // namespace lorp::lora
