#include "lorp/optim.hpp"

#include <cmath>

namespace lorp::ad {

void adam_step(NamedMatrices& params, const NamedMatrices& grads, AdamState& state) {
    if (state.config.lr <= 0.0) throw std::invalid_argument("adam_step: learning rate must be > 0");
    state.step += 1;
    const double b1 = state.config.beta1;
    const double b2 = state.config.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw std::invalid_argument("adam_step: gradient for unknown parameter '" + name + "'");
        Matrix& p = it->second;
        if (g.rows() != p.rows() || g.cols() != p.cols())
            throw std::invalid_argument("adam_step: gradient shape mismatch for '" + name + "'");

        auto mit = state.m.find(name);
        if (mit == state.m.end()) {
            mit = state.m.emplace(name, Matrix::Zero(p.rows(), p.cols())).first;
            state.v.emplace(name, Matrix::Zero(p.rows(), p.cols()));
        }
        Matrix& m = mit->second;
        Matrix& v = state.v[name];
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
        Matrix m_hat = m / bc1;
        Matrix v_hat = v / bc2;
        p -= state.config.lr * (m_hat.array() / (v_hat.array().sqrt() + state.config.eps)).matrix();
    }
}

}  // namespace lorp::ad
