#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lorp/checkpoint.hpp"
#include "lorp/lora.hpp"
#include "lorp/util.hpp"

#include <filesystem>

using namespace lorp;
using namespace lorp::lora;

namespace {

net::NetConfig toy_config() {
    net::NetConfig c;
    c.feature_dim = 4;
    c.model_dim = 8;
    c.layers = 2;
    c.heads = 2;
    c.ffn_dim = 12;
    c.token_vocab = 5;
    c.time_dim = 8;
    return c;
}

Matrix field_at(const net::Model& m, const AdapterSet* adapters, uint64_t seed) {
    const int T = 4;
    Matrix x_t = Rng(seed).gauss_matrix(T, 4);
    Matrix ctx = Rng(seed + 1).gauss_matrix(T, 4);
    std::vector<uint8_t> mask{1, 1, 0, 0};
    std::vector<int> toks{0, 1, 2, 3};
    std::optional<net::AdapterMeta> meta;
    if (adapters && !adapters->empty()) meta = adapters->meta();
    return m.vector_field(net::FieldInputs{x_t, 0.5, ctx, mask, toks},
                          meta ? &*meta : nullptr, adapters ? &adapters->params : nullptr);
}

}  // namespace

TEST_CASE("default filter injects one adapter per dense layer (15 on the toy model)") {
    net::Model m(toy_config(), 1);
    LoraConfig cfg;
    cfg.r = 2;
    AdapterSet set = inject(m, cfg, 9);
    CHECK(set.layer_keys.size() == 15);
    CHECK(set.params.size() == 30);  // A and B per layer
    // B starts at zero, A is Gaussian
    for (const std::string& key : set.layer_keys) {
        CHECK(set.b(key).isZero(0.0));
        CHECK(set.a(key).cwiseAbs().maxCoeff() > 0.0);
    }
}

TEST_CASE("empty filter yields an empty set and an unchanged model output") {
    net::Model m(toy_config(), 1);
    LoraConfig cfg;
    cfg.r = 2;
    cfg.target_filter = [](const net::DenseLayerId&) { return false; };
    AdapterSet set = inject(m, cfg, 9);
    CHECK(set.empty());
    CHECK(field_at(m, &set, 5) == field_at(m, nullptr, 5));
}

TEST_CASE("r and alpha are stored as configured (the r=alpha=16 default)") {
    LoraConfig cfg;
    CHECK(cfg.r == 16);
    CHECK(cfg.alpha == 16.0);
    net::NetConfig big = toy_config();
    big.model_dim = 32;
    big.ffn_dim = 64;
    big.feature_dim = 16;  // input concat = 64, min dim = 16 at output-proj... use r=8
    net::Model m(big, 2);
    cfg.r = 8;
    cfg.alpha = 16.0;
    AdapterSet set = inject(m, cfg, 3);
    CHECK(set.r == 8);
    CHECK(set.alpha == 16.0);
}

TEST_CASE("rank exceeding a layer's min dimension is rejected naming the layer") {
    net::Model m(toy_config(), 1);
    LoraConfig cfg;
    cfg.r = 6;  // output-proj is 8 -> 4, so min dim 4 < 6
    CHECK_THROWS_WITH_AS(inject(m, cfg, 9), doctest::Contains("output-proj"),
                         std::invalid_argument);
}

TEST_CASE("fresh adapters are a no-op on the model output") {
    net::Model m(toy_config(), 1);
    LoraConfig cfg;
    cfg.r = 2;
    AdapterSet set = inject(m, cfg, 9);
    Matrix base = field_at(m, nullptr, 7);
    Matrix adapted = field_at(m, &set, 7);
    CHECK((adapted - base).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("adapted_forward matches the hand example and is linear in alpha") {
    Matrix W = Matrix::Zero(2, 2);
    Vector bias = Vector::Zero(2);
    Matrix A(1, 2);
    A << 1.0, 1.0;
    Matrix B(2, 1);
    B << 2.0, 3.0;
    Vector x(2);
    x << 1.0, 1.0;
    Vector y = adapted_forward(W, bias, A, B, 1.0, 1, x);
    CHECK(y(0) == doctest::Approx(4.0));
    CHECK(y(1) == doctest::Approx(6.0));

    // B = 0 gives exactly W x + bias
    Rng rng(4);
    Matrix W2 = rng.gauss_matrix(3, 2);
    Vector b2 = rng.gauss_matrix(3, 1).col(0);
    Matrix A2 = rng.gauss_matrix(2, 2);
    Matrix B0 = Matrix::Zero(3, 2);
    Vector x2 = rng.gauss_matrix(2, 1).col(0);
    CHECK((adapted_forward(W2, b2, A2, B0, 16.0, 2, x2) - (W2 * x2 + b2)).norm() == 0.0);

    // doubling alpha doubles the delta exactly
    Matrix B2 = rng.gauss_matrix(3, 2);
    Vector base = W2 * x2 + b2;
    Vector d1 = adapted_forward(W2, b2, A2, B2, 8.0, 2, x2) - base;
    Vector d2 = adapted_forward(W2, b2, A2, B2, 16.0, 2, x2) - base;
    CHECK((d2 - 2.0 * d1).cwiseAbs().maxCoeff() < 1e-12);

    Vector bad(3);
    CHECK_THROWS_AS(adapted_forward(W2, b2, A2, B2, 1.0, 2, bad), std::invalid_argument);
}

TEST_CASE("merge folds the delta into the dense weight") {
    // hand outer product from the r=1 example
    Matrix W = Matrix::Zero(2, 2);
    Matrix A(1, 2);
    A << 1.0, 1.0;
    Matrix B(2, 1);
    B << 2.0, 3.0;
    Matrix merged = merge(W, A, B, 1.0, 1);
    Matrix expected(2, 2);
    expected << 2, 2, 3, 3;
    CHECK(merged == expected);

    // B = 0 leaves W untouched
    Rng rng(5);
    Matrix W2 = rng.gauss_matrix(4, 4);
    CHECK(merge(W2, rng.gauss_matrix(2, 4), Matrix::Zero(4, 2), 16.0, 2) == W2);
}

TEST_CASE("merged and unmerged forwards agree for r in {1,2,4,8,16}") {
    Rng rng(6);
    for (int r : {1, 2, 4, 8, 16}) {
        Matrix W = rng.gauss_matrix(16, 16);
        Vector bias = rng.gauss_matrix(16, 1).col(0);
        Matrix A = rng.gauss_matrix(r, 16, 0.3);
        Matrix B = rng.gauss_matrix(16, r, 0.3);
        Matrix merged = merge(W, A, B, 16.0, r);
        for (int trial = 0; trial < 4; ++trial) {
            Vector x = rng.gauss_matrix(16, 1).col(0);
            Vector via_adapter = adapted_forward(W, bias, A, B, 16.0, r, x);
            Vector via_merge = merged * x + bias;
            CHECK((via_adapter - via_merge).cwiseAbs().maxCoeff() < 1e-5);
        }
    }
}

TEST_CASE("adapter parameter count is exactly r*(d_in + d_out)") {
    net::Model m(toy_config(), 1);
    for (int r : {1, 2, 4}) {
        LoraConfig cfg;
        cfg.r = r;
        AdapterSet set = inject(m, cfg, 9);
        long long expected = 0;
        for (const net::DenseShape& s : m.dense_layer_list())
            expected += static_cast<long long>(r) * (s.d_in + s.d_out);
        CHECK(set.param_count() == expected);
    }
}

TEST_CASE("reset resamples A, zeroes B, and is seed-deterministic") {
    net::Model m(toy_config(), 1);
    LoraConfig cfg;
    cfg.r = 2;
    AdapterSet set = inject(m, cfg, 9);
    set.params["lora." + set.layer_keys[0] + ".B"].setConstant(1.0);  // simulate training

    AdapterSet r1 = reset(set, 33);
    AdapterSet r2 = reset(set, 33);
    CHECK(r1.params == r2.params);
    CHECK(r1.b(r1.layer_keys[0]).isZero(0.0));
    CHECK(r1.param_count() == set.param_count());
    CHECK(field_at(m, &r1, 8) == field_at(m, nullptr, 8));  // no-op again after reset

    AdapterSet r3 = reset(set, 34);
    CHECK(r3.params != r1.params);
}

TEST_CASE("adapters round-trip through the archive with their metadata") {
    net::Model m(toy_config(), 1);
    LoraConfig cfg;
    cfg.r = 2;
    cfg.alpha = 4.0;
    AdapterSet set = inject(m, cfg, 9);
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "lorp_test_lora";
    fs::create_directories(dir);
    save(set, dir / "adapters.ckpt");
    AdapterSet back = load(dir / "adapters.ckpt");
    CHECK(back.r == 2);
    CHECK(back.alpha == 4.0);
    CHECK(back.layer_keys == set.layer_keys);
    CHECK(back.params.size() == set.params.size());
    fs::remove_all(dir);
}

TEST_CASE("adapted graph output moves once B is nonzero, scaled by alpha") {
    net::Model m(toy_config(), 1);
    LoraConfig cfg;
    cfg.r = 2;
    cfg.alpha = 2.0;
    AdapterSet set = inject(m, cfg, 9);
    for (const std::string& key : set.layer_keys)
        set.params["lora." + key + ".B"] = Rng(derive_seed(77, key)).gauss_matrix(
            static_cast<int>(set.b(key).rows()), static_cast<int>(set.b(key).cols()), 0.05);

    Matrix base = field_at(m, nullptr, 9);
    Matrix adapted = field_at(m, &set, 9);
    CHECK((adapted - base).cwiseAbs().maxCoeff() > 1e-6);
}
