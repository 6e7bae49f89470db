#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lorp/checkpoint.hpp"
#include "lorp/util.hpp"

#include <filesystem>

using namespace lorp;

TEST_CASE("sha256 matches the NIST reference vectors") {
    CHECK(sha256_hex(std::string("")) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex(std::string("abc")) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex(std::string("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")) ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST_CASE("seed derivation is stable and stream-separated") {
    CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
    CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
    CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
}

TEST_CASE("rng is deterministic per seed") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        double va = a.uniform();
        CHECK(va == b.uniform());
        CHECK(va >= 0.0);
        CHECK(va < 1.0);
    }
    CHECK(a.gauss() == b.gauss());
    CHECK(a.uniform() != c.uniform());
}

TEST_CASE("rng gaussian moments are sane") {
    Rng rng(7);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double g = rng.gauss();
        sum += g;
        sq += g * g;
    }
    CHECK(std::abs(sum / n) < 0.03);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("uniform_int covers inclusive bounds") {
    Rng rng(5);
    bool lo = false, hi = false;
    for (int i = 0; i < 1000; ++i) {
        int v = rng.uniform_int(2, 4);
        CHECK(v >= 2);
        CHECK(v <= 4);
        lo = lo || v == 2;
        hi = hi || v == 4;
    }
    CHECK(lo);
    CHECK(hi);
}

TEST_CASE("key-value config parses, types and tracks unknown keys") {
    auto cfg = KeyValueConfig::parse_string(
        "# comment\n"
        "lora.r = 16\n"
        "lora.alpha=16.5\n"
        "sweep.steps = 10,25,50\n"
        "name = hello\n"
        "mystery = 1\n");
    CHECK(cfg.get_int("lora.r", 0) == 16);
    CHECK(cfg.get_double("lora.alpha", 0) == doctest::Approx(16.5));
    CHECK(cfg.get_int_list("sweep.steps", {}) == std::vector<int>{10, 25, 50});
    CHECK(cfg.get_string("name", "") == "hello");
    CHECK(cfg.get_int("absent", 7) == 7);
    CHECK(cfg.unconsumed_keys() == std::vector<std::string>{"mystery"});
    CHECK_THROWS_AS(cfg.get_int("name", 0), ConfigError);
    CHECK_THROWS_AS(KeyValueConfig::parse_string("no equals sign"), ConfigError);
    CHECK_THROWS_AS(KeyValueConfig::parse_string("a=1\na=2\n"), ConfigError);
}

TEST_CASE("matrix archive round-trips through LORPCKPT1") {
    NamedMatrices m;
    m["alpha"] = Matrix::Random(3, 5);
    m["beta.weight"] = Matrix::Random(1, 1);
    std::string bytes = encode_matrix_archive(m);
    CHECK(bytes.substr(0, 9) == "LORPCKPT1");
    NamedMatrices back = decode_matrix_archive(bytes);
    REQUIRE(back.size() == 2);
    // storage is float32, so round-tripping is exact only to single precision
    CHECK((back["alpha"] - m["alpha"]).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((back["beta.weight"] - m["beta.weight"]).cwiseAbs().maxCoeff() < 1e-6);

    // float32 values survive a second round-trip bit-exactly
    std::string bytes2 = encode_matrix_archive(back);
    NamedMatrices back2 = decode_matrix_archive(bytes2);
    CHECK(back2["alpha"] == back["alpha"]);

    CHECK_THROWS(decode_matrix_archive("not an archive"));
}

TEST_CASE("archive writes a text manifest next to the file") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "lorp_test_util";
    fs::create_directories(dir);
    NamedMatrices m;
    m["w"] = Matrix::Zero(2, 3);
    save_matrix_archive(dir / "x.ckpt", m);
    CHECK(read_file(dir / "x.ckpt.manifest") == "w 2 3\n");
    NamedMatrices back = load_matrix_archive(dir / "x.ckpt");
    CHECK(back.at("w").rows() == 2);
    fs::remove_all(dir);
}

TEST_CASE("fmt_double is deterministic and compact") {
    CHECK(fmt_double(0.5) == "0.5");
    CHECK(fmt_double(1e-9) == "1e-09");
    CHECK(fmt_double(3.0) == "3");
}
