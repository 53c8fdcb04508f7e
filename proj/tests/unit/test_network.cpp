#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "dualseg/checkpoint.hpp"
#include "dualseg/gradcheck.hpp"
#include "dualseg/network.hpp"
#include "helpers.hpp"

using namespace dualseg;
using network::Model;
using network::NetConfig;

namespace {

NetConfig small_config(std::int64_t size = 32) {
    NetConfig c;
    c.base_channels = 8;
    c.input_size = size;
    return c;
}

Tensor<float> image_batch(std::int64_t n, std::int64_t size, std::uint64_t seed) {
    Rng rng(seed);
    return testing::random_tensor<float>({n, 1, size, size}, rng, 0.0, 1.0);
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("dualseg_test_" + name);
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("parameter count is a fixed function of the config") {
    NetConfig c;
    CHECK(Model<float>::build(c, 1).parameter_count() == 889721);
    CHECK(Model<float>::build(c, 2).parameter_count() == 889721);
    c.input_size = 128;
    CHECK(Model<float>::build(c, 1).parameter_count() == 889721);
    c.attention = false;
    const auto plain = Model<float>::build(c, 1).parameter_count();
    // bottleneck (q, k, v, fusion at 128 channels) plus four 2x7x7 gates
    const std::int64_t attn = (16 * 128 * 3 + 16) * 2 + (128 * 128 + 128) + (128 * 256 + 128) + 4 * 98;
    CHECK(plain + attn == 889721);
}

TEST_CASE("config violations name the invariant") {
    NetConfig c;
    c.input_size = 40;
    CHECK_THROWS_WITH_AS(Model<float>::build(c, 1), doctest::Contains("input_size"), ParameterError);
    c = NetConfig{};
    c.reduction = 7;
    CHECK_THROWS_WITH_AS(Model<float>::build(c, 1), doctest::Contains("reduction"), ParameterError);
    c = NetConfig{};
    c.dropout = 1.0;
    CHECK_THROWS_WITH_AS(Model<float>::build(c, 1), doctest::Contains("dropout"), ParameterError);
}

TEST_CASE("same seed builds identical weights") {
    auto a = Model<float>::build(small_config(), 7);
    auto b = Model<float>::build(small_config(), 7);
    auto c = Model<float>::build(small_config(), 8);
    CHECK(checkpoint::serialize(a) == checkpoint::serialize(b));
    CHECK(checkpoint::serialize(a) != checkpoint::serialize(c));
}

TEST_CASE("parameter names are unique") {
    auto m = Model<float>::build(NetConfig{}, 1);
    std::set<std::string> names;
    for (const auto& p : m.parameters()) names.insert(p.name);
    for (const auto& b : m.buffers()) names.insert(b.name);
    CHECK(names.size() == m.parameters().size() + m.buffers().size());
}

TEST_CASE("forward produces probabilities of the input shape") {
    for (std::int64_t size : {32, 64}) {
        auto m = Model<float>::build(small_config(size), 3);
        Rng rng(1);
        auto out = m.forward(Tensor<float>::zeros({1, 1, size, size}), Mode::eval, rng);
        CHECK(out.shape() == Shape{1, 1, size, size});
        for (float v : out.data()) {
            REQUIRE(v > 0.0f);
            REQUIRE(v < 1.0f);
        }
        auto train = m.forward(image_batch(2, size, 4), Mode::train, rng);
        CHECK(train.shape() == Shape{2, 1, size, size});
    }
}

TEST_CASE("forward enforces the configured input size") {
    auto m = Model<float>::build(small_config(32), 3);
    Rng rng(1);
    CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({1, 1, 64, 64}), Mode::eval, rng), DimensionError);
    CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({1, 2, 32, 32}), Mode::eval, rng), DimensionError);
    CHECK_THROWS_AS(m.infer(Tensor<float>::zeros({1, 1, 40, 32})), DimensionError);
}

TEST_CASE("eval forward is deterministic and matches infer") {
    auto m = Model<float>::build(small_config(), 5);
    auto x = image_batch(2, 32, 9);
    Rng r1(1), r2(2);
    auto a = m.forward(x, Mode::eval, r1);
    auto b = m.forward(x, Mode::eval, r2);
    CHECK(testing::bit_equal(a, b));
    CHECK(testing::bit_equal(a, m.infer(x)));
    CHECK(r1.counter() == 0);
}

TEST_CASE("infer accepts padded sizes other than the training size") {
    auto m = Model<float>::build(small_config(32), 5);
    GrayImage img(48, 80, 0.25f);
    auto p = m.infer(img);
    CHECK(p.height == 48);
    CHECK(p.width == 80);
}

TEST_CASE("train mode without dropout equals eval with the batch statistics") {
    auto c = small_config();
    c.dropout = 0.0;
    auto m = Model<double>::build(c, 11);
    m.bn_momentum = 0.0;  // running stats become exactly the batch stats
    Rng rng(3);
    auto x = testing::random_tensor<double>({1, 1, 32, 32}, rng, 0.0, 1.0);
    Tensor<double> train;
    {
        NoGradGuard g;
        train = m.forward(x, Mode::train, rng);
    }
    auto eval = m.forward(x, Mode::eval, rng);
    CHECK(testing::max_abs_diff(train, eval) < 1e-9);
}

TEST_CASE("train mode updates running statistics, eval does not") {
    auto m = Model<float>::build(small_config(), 2);
    auto before = m.buffers()[0].values->at(0);
    Rng rng(1);
    m.forward(image_batch(2, 32, 1), Mode::eval, rng);
    CHECK(m.buffers()[0].values->at(0) == before);
    m.forward(image_batch(2, 32, 1), Mode::train, rng);
    CHECK(m.buffers()[0].values->at(0) != before);
}

TEST_CASE("ablation variant has no attention parameters") {
    auto c = small_config();
    c.attention = false;
    auto m = Model<float>::build(c, 1);
    for (const auto& p : m.parameters()) {
        CHECK(p.name.find("bottleneck") == std::string::npos);
        CHECK(p.name.find("gate") == std::string::npos);
    }
    Rng rng(1);
    CHECK(m.forward(image_batch(1, 32, 2), Mode::eval, rng).shape() == Shape{1, 1, 32, 32});
}

TEST_CASE("gradient flows to every parameter") {
    auto m = Model<float>::build(small_config(), 4);
    Rng rng(2);
    auto x = image_batch(2, 32, 3);
    auto target = Tensor<float>::full({2, 1, 32, 32}, 0.0f);
    backward(ops::bce_with_logits(m.forward_logits(x, Mode::train, rng), target));
    for (const auto& p : m.parameters()) {
        INFO(p.name);
        CHECK(p.tensor->has_grad());
    }
}

TEST_CASE("full-model gradient check on sampled parameters") {
    NetConfig c;
    c.base_channels = 4;
    c.input_size = 16;
    c.dropout = 0.0;
    auto m = Model<double>::build(c, 21);
    Rng rng(5);
    auto x = testing::random_tensor<double>({2, 1, 16, 16}, rng, 0.0, 1.0);
    std::vector<double> t(2 * 16 * 16);
    for (auto& v : t) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    Tensor<double> target({2, 1, 16, 16}, t);

    auto params = m.parameters();
    std::vector<GradProbe> probes;
    for (int i = 0; i < 50; ++i) {
        const auto& p = params[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(params.size())))];
        probes.push_back({*p.tensor, static_cast<std::size_t>(rng.uniform_int(0, p.tensor->size()))});
    }
    Rng unused(0);
    auto result = grad_check_probes(
        [&] { return ops::bce_with_logits(m.forward_logits(x, Mode::train, unused), target); },
        probes);
    INFO("worst probe " << result.worst_probe << " analytic " << result.worst_analytic
                        << " numeric " << result.worst_numeric);
    CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("double and float copies agree") {
    auto m = Model<float>::build(small_config(), 6);
    auto d = m.cast<double>();
    auto x = image_batch(1, 32, 1);
    auto pf = m.infer(x);
    auto pd = d.infer(x.cast<double>());
    CHECK(testing::max_abs_diff(pf.cast<double>(), pd) < 1e-4);
}

TEST_CASE("checkpoint round trip") {
    auto m = Model<float>::build(small_config(), 12);
    Rng rng(1);
    // Non-trivial BN statistics.
    m.forward(image_batch(2, 32, 2), Mode::train, rng);
    const auto path = temp_path("roundtrip.ckpt");
    checkpoint::save(m, path.string());
    auto loaded = checkpoint::load(path.string());
    auto x = image_batch(2, 32, 3);
    CHECK(testing::bit_equal(m.infer(x), loaded.infer(x)));
    CHECK(loaded.config() == m.config());
    CHECK(loaded.init_seed() == 12);
    CHECK(checkpoint::serialize(loaded) == read_file(path));
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint header is readable text") {
    auto m = Model<float>::build(small_config(), 1);
    auto bytes = checkpoint::serialize(m);
    CHECK(bytes.rfind("dualseg-checkpoint\nversion 1\nconfig in_channels 1 base_channels 8 levels 4 "
                      "dropout 0.2 reduction 8 input_size 32 attention 1\ninit_seed 1\n"
                      "param encoder.0.conv1.weight f32 8,1,3,3 0\n",
                      0) == 0);
    const auto header_end = bytes.find("\nend\n") + 5;
    CHECK(bytes.size() - header_end ==
          4 * static_cast<std::size_t>(m.parameter_count() + [&] {
              std::int64_t n = 0;
              for (const auto& b : m.buffers()) n += static_cast<std::int64_t>(b.values->size());
              return n;
          }()));
}

TEST_CASE("damaged checkpoints raise typed errors") {
    auto m = Model<float>::build(small_config(), 1);
    const auto good = checkpoint::serialize(m);

    SUBCASE("truncated payload") {
        CHECK_THROWS_AS(checkpoint::deserialize(good.substr(0, good.size() - 10)), CorruptCheckpointError);
    }
    SUBCASE("truncated header") {
        CHECK_THROWS_AS(checkpoint::deserialize(good.substr(0, 100)), CorruptCheckpointError);
    }
    SUBCASE("empty") {
        CHECK_THROWS_AS(checkpoint::deserialize(""), CorruptCheckpointError);
    }
    SUBCASE("flipped payload byte") {
        auto bad = good;
        bad[bad.size() - 3] ^= 0x10;
        CHECK_THROWS_WITH_AS(checkpoint::deserialize(bad), doctest::Contains("checksum"),
                             CorruptCheckpointError);
    }
    SUBCASE("wrong magic") {
        auto bad = good;
        bad[0] = 'X';
        CHECK_THROWS_AS(checkpoint::deserialize(bad), CorruptCheckpointError);
    }
    SUBCASE("version bump") {
        auto bad = good;
        bad.replace(bad.find("version 1"), 9, "version 2");
        CHECK_THROWS_AS(checkpoint::deserialize(bad), UnsupportedVersionError);
    }
    SUBCASE("shape disagrees with architecture") {
        auto bad = good;
        bad.replace(bad.find("f32 8,1,3,3"), 11, "f32 8,1,1,9");
        CHECK_THROWS_AS(checkpoint::deserialize(bad), CheckpointShapeError);
    }
    SUBCASE("tensor renamed") {
        auto bad = good;
        bad.replace(bad.find("encoder.0.bn1.beta"), 18, "encoder.0.bn9.beta");
        CHECK_THROWS_AS(checkpoint::deserialize(bad), CheckpointShapeError);
    }
    SUBCASE("config altered") {
        auto bad = good;
        bad.replace(bad.find("base_channels 8"), 15, "base_channels 4");
        CHECK_THROWS_AS(checkpoint::deserialize(bad), CheckpointShapeError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(checkpoint::load(temp_path("does_not_exist.ckpt").string()), IoError);
    }
}
