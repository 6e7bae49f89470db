#pragma once

#include "lorp/common.hpp"
#include "lorp/net.hpp"

#include <filesystem>
#include <functional>

namespace lorp::lora {

struct LoraConfig {
    int r = 16;
    double alpha = 16.0;
    double init_std = 0.02;
    // null filter targets every dense layer
    std::function<bool(const net::DenseLayerId&)> target_filter;
};

// Per-layer (A, B) pairs stored as a flat parameter map so the optimizer can
// update them directly: "lora.<layer>.A" (r x d_in) and "lora.<layer>.B"
// (d_out x r). B starts at zero, so a fresh adapter is a no-op.
struct AdapterSet {
    int r = 0;
    double alpha = 0.0;
    double init_std = 0.02;
    std::string filter_description = "all-dense";
    std::vector<std::string> layer_keys;
    NamedMatrices params;

    bool empty() const { return layer_keys.empty(); }
    const Matrix& a(const std::string& layer_key) const;
    const Matrix& b(const std::string& layer_key) const;
    net::AdapterMeta meta() const;
    long long param_count() const;
};

AdapterSet inject(const net::Model& model, const LoraConfig& config, uint64_t seed);

// Fresh adapters for a new adaptation run: A resampled, B zeroed again.
AdapterSet reset(const AdapterSet& adapters, uint64_t seed);

// W x + bias + (alpha/r) B (A x) for a single input vector.
Vector adapted_forward(const Matrix& W, const Vector& bias, const Matrix& A, const Matrix& B,
                       double alpha, int r, const Vector& x);

// W + (alpha/r) B A
Matrix merge(const Matrix& W, const Matrix& A, const Matrix& B, double alpha, int r);

void save(const AdapterSet& adapters, const std::filesystem::path& archive_path);
AdapterSet load(const std::filesystem::path& archive_path);

}  // namespace lorp::lora
