#pragma once

#include "lorp/autodiff.hpp"
#include "lorp/common.hpp"

#include <optional>
#include <set>

namespace lorp::net {

struct NetConfig {
    int feature_dim = 16;
    int model_dim = 64;
    int layers = 4;
    int heads = 4;
    int ffn_dim = 128;
    int token_vocab = 16;
    int time_dim = 32;

    void validate() const;  // throws on invalid combinations
};

// Documented reference scale for the adapter/base parameter-ratio check.
// Not asserted to be the true production configuration.
NetConfig reference_large_config();

enum class Site {
    Query,
    Key,
    Value,
    AttnOut,
    FfnIn,
    FfnOut,
    InputProj,
    OutputProj,
    TimeProj,
};

const char* site_name(Site s);

// Identifies one dense (affine) map inside the network. Global projections
// use layer 0; uniqueness comes from the site.
struct DenseLayerId {
    int layer = 0;
    Site site = Site::Query;

    std::string key() const;  // e.g. "l2.query", "l0.input-proj"
    auto operator<=>(const DenseLayerId&) const = default;
};

struct DenseShape {
    DenseLayerId id;
    int d_in = 0;
    int d_out = 0;
};

// Ordered enumeration of every dense layer: the adapter injection targets.
std::vector<DenseShape> dense_layers(const NetConfig& config);

// Adapter wiring info the graph builder needs; values arrive separately.
struct AdapterMeta {
    int r = 0;
    double alpha = 0.0;
    std::set<std::string> targets;  // DenseLayerId keys
};

// Sinusoidal embedding of a scalar time in [0, 1], 1 x dim.
Matrix time_embedding(double t, int dim);

// Pairwise 2-D rotations with the geometric frequency schedule; preserves
// per-row L2 norms. Rejects odd dimensions.
Matrix rotary_rotate(const Matrix& vectors, const std::vector<double>& positions);

struct FieldInputs {
    const Matrix& x_t;                      // T x D noisy features
    double t = 0.0;                         // scalar time in [0, 1]
    const Matrix& context;                  // T x D context features (raw)
    const std::vector<uint8_t>& given_mask; // 1 = frame given as prompt context
    const std::vector<int>& token_frames;   // per-frame token id
};

// The vector-field network. Parameters live in a NamedMatrices store owned
// by the model; the graph is rebuilt per call (cheap at this scale), which
// keeps concurrent evaluation safe.
class Model {
public:
    Model(NetConfig config, uint64_t seed);
    Model(NetConfig config, NamedMatrices params);  // from checkpoint

    const NetConfig& config() const { return config_; }
    const NamedMatrices& params() const { return params_; }
    NamedMatrices& mutable_params() { return params_; }
    const std::vector<DenseShape>& dense_layer_list() const { return dense_; }

    Matrix vector_field(const FieldInputs& in, const AdapterMeta* meta = nullptr,
                        const NamedMatrices* adapter_params = nullptr) const;

private:
    NetConfig config_;
    NamedMatrices params_;
    std::vector<DenseShape> dense_;
};

// Appends the vector-field body for sequence length T to `b` and returns the
// T x D field node. Declares inputs "x_t", "context", "tok_ids", "time_emb".
ad::NodeId append_field_graph(ad::GraphBuilder& b, const NetConfig& config, int T,
                              const AdapterMeta* lora);

// Packs FieldInputs into the named-input map the graph expects. The given
// mask zeroes masked-out context frames before the input projection.
NamedMatrices pack_field_inputs(const NetConfig& config, const FieldInputs& in);

struct ParamCounts {
    long long base = 0;
    long long adapters = 0;
    double ratio = 0.0;  // adapters / base
};

// Analytic count from shapes alone (never materializes weights), assuming
// adapters on every dense layer. rank <= 0 means no adapters.
ParamCounts count_params(const NetConfig& config, int rank);

// Count from actual stored matrices.
ParamCounts count_params(const Model& model, const NamedMatrices* adapter_params);

}  // namespace lorp::net
