#pragma once

#include "lorp/common.hpp"
#include "lorp/lora.hpp"
#include "lorp/net.hpp"
#include "lorp/optim.hpp"

#include <functional>

namespace lorp::cfm {

struct CfmConfig {
    double sigma_min = 1e-4;
    int ode_steps = 30;
    double mask_lo = 0.7;   // masked span covers a uniform fraction of frames
    double mask_hi = 1.0;
    int batch_size = 8;
    int train_steps = 2000;

    void validate() const;
};

// One draw from the optimal-transport probability path:
//   x_t = (1 - (1 - sigma_min) t) x0 + t x1
//   u_t = x1 - (1 - sigma_min) x0
struct PathSample {
    Matrix x0;
    Matrix x1;
    double t = 0.0;
    Matrix x_t;
    Matrix u_t;
};

PathSample ot_path(const Matrix& x0, const Matrix& x1, double t, double sigma_min);

struct MaskSpan {
    int begin = 0;
    int end = 0;  // masked frames are [begin, end)
};

MaskSpan sample_mask_span(int total_frames, double lo, double hi, Rng& rng);

// Fixed randomness for one training example; everything the loss graph needs.
struct LossInstance {
    Matrix x_t;
    Matrix context;                  // raw features; masking happens at packing
    std::vector<uint8_t> given_mask; // 1 = frame is prompt context
    std::vector<int> token_frames;
    double t = 0.0;
    Matrix u_t;
};

LossInstance make_loss_instance(const PromptSample& sample, const CfmConfig& config, Rng& rng);

// Masked-infilling MSE graph: the field body plus
//   loss = sum(((field - u_t) .* w)^2-weighted) with w folded to 1/(masked*D).
// Inputs: the field inputs plus "u_t" and "loss_mask". Output: "loss".
ad::Graph loss_graph(const net::NetConfig& config, int T, const net::AdapterMeta* lora);
NamedMatrices pack_loss_inputs(const net::NetConfig& config, const LossInstance& instance);

// Mean masked MSE over the batch. When `grads` is non-null it receives the
// mean gradient for every parameter in the graph (base and adapters alike).
double cfm_loss(const net::Model& model, const lora::AdapterSet* adapters,
                const std::vector<PromptSample>& batch, const CfmConfig& config, Rng& rng,
                NamedMatrices* grads = nullptr);

using FieldFn = std::function<Matrix(const Matrix& x, double t)>;

// Plain Euler integration of dx/dt = field(x, t) from t=0 to t=1 with a
// uniform grid. When a clamp mask is given, rows marked 1 are pinned to
// `clamp_values` after every step (and at initialization).
Matrix euler_integrate(const FieldFn& field, Matrix x0, int steps,
                       const std::vector<uint8_t>* clamp_mask = nullptr,
                       const Matrix* clamp_values = nullptr);

// Draws Gaussian noise on generated frames, keeps context frames pinned, and
// integrates the learned field. Deterministic given the seed.
FeatureSequence sample(const net::Model& model, const lora::AdapterSet* adapters,
                       const FeatureSequence& context, const std::vector<uint8_t>& given_mask,
                       const std::vector<int>& token_frames, int ode_steps, uint64_t seed);

struct TrainResult {
    std::vector<double> loss_curve;
};

struct DivergenceError : std::runtime_error {
    int step;
    explicit DivergenceError(int s)
        : std::runtime_error("training diverged (non-finite loss) at step " + std::to_string(s)),
          step(s) {}
};

// In-place base-model training. Optionally serializes the final checkpoint
// and the per-step loss curve as CSV.
TrainResult train_base(net::Model& model, const std::vector<PromptSample>& corpus,
                       const CfmConfig& config, const ad::AdamConfig& adam, uint64_t seed,
                       const std::string& checkpoint_path = "",
                       const std::string& curve_csv_path = "");

}  // namespace lorp::cfm
