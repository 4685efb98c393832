#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "fever/errors.hpp"
#include "fever/models/network.hpp"
#include "test_util.hpp"

using namespace fever;
using namespace fever::models;
using fever::testing::random_array;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.input = {3, 8, 8};
    c.backbone_blocks = {{4, 2}, {6, 2}};
    c.d_face = 8;
    return c;
}

Array<float>& param(Network<float>& net, const std::string& name) {
    for (auto& p : net.params())
        if (p.name == name) return p.value;
    throw std::out_of_range(name);
}

}  // namespace

TEST_CASE("init is deterministic in (config, seed) and seed-sensitive") {
    const auto cfg = tiny_config();
    Network<float> a(cfg, 1), b(cfg, 1), c(cfg, 2);
    REQUIRE(a.params().size() == b.params().size());
    bool any_diff = false;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        CHECK(bitwise_equal(a.params()[i].value, b.params()[i].value));
        any_diff |= !bitwise_equal(a.params()[i].value, c.params()[i].value);
    }
    CHECK(any_diff);
    CHECK(parameter_checksum(a) == parameter_checksum(b));
    CHECK(parameter_checksum(a) != parameter_checksum(c));
}

TEST_CASE("biases start at zero and batchnorm at identity") {
    Network<float> net(tiny_config(), 3);
    for (const auto& p : net.params()) {
        if (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
            CHECK(p.value == Array<float>::zeros(p.value.shape()));
        }
        if (p.name.ends_with(".gamma")) CHECK(p.value == Array<float>::ones(p.value.shape()));
    }
}

TEST_CASE("bottleneck and head shapes follow d_face") {
    ModelConfig c;
    for (std::size_t d : {256u, 128u}) {
        c.d_face = d;
        Network<float> net(c, 0);
        CHECK(find_array(net.params(), "proj.conv.weight").shape() == ndgrad::Shape{d, 64, 1, 1});
        CHECK(find_array(net.params(), "head.fec.weight").shape() == ndgrad::Shape{32, d});
        CHECK(find_array(net.params(), "head.cls.weight").shape() == ndgrad::Shape{8, d});
    }
}

TEST_CASE("parameter count matches the closed form") {
    for (std::size_t d : {8u, 32u, 256u}) {
        ModelConfig c = tiny_config();
        c.d_face = d;
        CHECK(Network<float>(c, 0).parameter_count() == expected_parameter_count(c));
        c.heads.distill = 80;
        CHECK(Network<float>(c, 0).parameter_count() == expected_parameter_count(c));
    }
    // Default desk backbone, by hand.
    ModelConfig desk;
    const std::size_t backbone = (3 * 9 * 16 + 32) + (16 * 9 * 32 + 64) + (32 * 9 * 64 + 128) + (64 * 9 * 64 + 128);
    CHECK(expected_parameter_count(desk) == backbone + (64 * 32 + 64) + (32 * 32 + 32) + (8 * 32 + 8));
}

TEST_CASE("teacher forward at full scale") {
    ModelConfig c;
    c.input = {3, 140, 140};
    c.d_face = 256;
    Network<float> net(c, 5);
    Tape<float> tape(Mode::train);
    Rng rng(1);
    const auto bound = net.bind(tape);
    auto out = net.forward(bound, tape.constant(random_array<float>({64, 3, 140, 140}, 2, 0, 1)), rng);
    CHECK(out.embedding.shape() == ndgrad::Shape{64, 256});
    CHECK(out.fec.shape() == ndgrad::Shape{64, 32});
    CHECK(out.logits.shape() == ndgrad::Shape{64, 8});
    CHECK_FALSE(out.distill.has_value());
}

TEST_CASE("eval-mode prediction is bitwise reproducible and RNG-free") {
    ModelConfig c = tiny_config();
    c.heads.distill = 80;
    Network<float> net(c, 9);
    const auto x = random_array<float>({10, 3, 8, 8}, 4, 0, 1);
    const auto a = net.predict(x);
    const auto b = net.predict(x, 3);
    CHECK(bitwise_equal(a.fec, b.fec));
    CHECK(bitwise_equal(a.logits, b.logits));
    REQUIRE(a.distill.has_value());
    CHECK(a.distill->shape() == ndgrad::Shape{10, 80});
    CHECK(bitwise_equal(*a.distill, *b.distill));

    // Through forward() with two different generators.
    Rng r1(1), r2(999);
    Tape<float> t1(Mode::eval), t2(Mode::eval);
    auto o1 = net.forward(net.bind(t1), t1.constant(x), r1);
    auto o2 = net.forward(net.bind(t2), t2.constant(x), r2);
    CHECK(bitwise_equal(o1.distill->value(), o2.distill->value()));
}

TEST_CASE("zero input with zero heads gives zero outputs") {
    Network<float> net(tiny_config(), 2);
    for (auto& p : net.params()) {
        if (p.name.starts_with("head.")) p.value = Array<float>::zeros(p.value.shape());
    }
    const auto out = net.predict(Array<float>::zeros({4, 3, 8, 8}));
    CHECK(out.fec == Array<float>::zeros({4, 32}));
    CHECK(out.logits == Array<float>::zeros({4, 8}));
}

TEST_CASE("heads read one shared dropped-out vector") {
    ModelConfig c = tiny_config();
    c.dropout_rate = 0.5;
    Network<float> net(c, 2);
    // fec rows 0..7 and the class head both select the embedding coordinates.
    auto& wf = param(net, "head.fec.weight");
    auto& wc = param(net, "head.cls.weight");
    wf = Array<float>::zeros(wf.shape());
    wc = Array<float>::zeros(wc.shape());
    for (std::size_t i = 0; i < 8; ++i) {
        wf[i * 8 + i] = 1.0f;
        wc[i * 8 + i] = 1.0f;
    }
    Tape<float> tape(Mode::train);
    Rng rng(17);
    const auto bound = net.bind(tape);
    auto out = net.heads(bound, tape.constant(Array<float>::ones({50, 8})), rng);
    std::size_t zeros = 0;
    for (std::size_t r = 0; r < 50; ++r) {
        for (std::size_t j = 0; j < 8; ++j) {
            const float v = out.fec.value()[r * 32 + j];
            CHECK(v == out.logits.value()[r * 8 + j]);
            zeros += v == 0.0f;
        }
    }
    CHECK(zeros > 100);
    CHECK(zeros < 300);
}

TEST_CASE("student config echoes d_face and dropout rate") {
    ModelConfig c;
    c.d_face = 256;
    c.dropout_rate = 0.2;
    c.heads.distill = 80;
    Network<float> net(c, 4);
    auto& wf = param(net, "head.fec.weight");
    wf = Array<float>::zeros(wf.shape());
    for (std::size_t i = 0; i < 32; ++i) wf[i * 256 + i] = 1.0f;
    Tape<float> tape(Mode::train);
    Rng rng(3);
    auto out = net.heads(net.bind(tape), tape.constant(Array<float>::ones({400, 256})), rng);
    CHECK(out.embedding.shape() == ndgrad::Shape{400, 256});
    CHECK(out.distill->shape() == ndgrad::Shape{400, 80});
    double zeros = 0;
    for (float v : out.fec.value().data()) zeros += v == 0.0f;
    const double n = 400 * 32, rate = zeros / n;
    CHECK(std::abs(rate - 0.2) <= 3 * std::sqrt(0.2 * 0.8 / n));
    for (float v : out.fec.value().data()) CHECK((v == 0.0f || v == doctest::Approx(1.25f)));
}

TEST_CASE("zeroed embedding zeroes every head before bias") {
    ModelConfig c = tiny_config();
    c.heads.distill = 12;
    Network<float> net(c, 6);
    for (auto& p : net.params()) {
        if (p.name.ends_with(".bias")) p.value = random_array<float>(p.value.shape(), 8);
    }
    Tape<float> tape(Mode::eval);
    Rng rng(0);
    const auto bound = net.bind(tape);
    auto out = net.heads(bound, tape.constant(Array<float>::zeros({3, 8})), rng);
    auto expect_bias = [&](const Var<float>& v, const std::string& bias) {
        const auto& b = find_array(net.params(), bias);
        const std::size_t w = b.size();
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t j = 0; j < w; ++j) CHECK(v.value()[r * w + j] == b[j]);
    };
    expect_bias(out.fec, "head.fec.bias");
    expect_bias(out.logits, "head.cls.bias");
    expect_bias(*out.distill, "head.distill.bias");
}

TEST_CASE("eval forward is batch-equivariant") {
    Network<float> net(tiny_config(), 7);
    const auto x = random_array<float>({6, 3, 8, 8}, 1, 0, 1);
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    Array<float> xp(x.shape());
    const std::size_t per = 3 * 8 * 8;
    for (std::size_t i = 0; i < 6; ++i)
        std::copy_n(x.data().begin() + perm[i] * per, per, xp.data().begin() + i * per);
    const auto a = net.predict(x), b = net.predict(xp);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 32; ++j) CHECK(b.fec[i * 32 + j] == a.fec[perm[i] * 32 + j]);
}

TEST_CASE("train-mode forward updates running statistics, eval does not") {
    Network<float> net(tiny_config(), 7);
    const auto before = parameter_checksum(net);
    net.predict(random_array<float>({4, 3, 8, 8}, 1, 0, 1));
    CHECK(parameter_checksum(net) == before);
    Tape<float> tape(Mode::train);
    Rng rng(0);
    net.forward(net.bind(tape), tape.constant(random_array<float>({4, 3, 8, 8}, 1, 0, 1)), rng);
    CHECK(parameter_checksum(net) != before);
}

TEST_CASE("input shape mismatch is rejected") {
    Network<float> net(tiny_config(), 7);
    CHECK_THROWS_AS(net.predict(Array<float>::zeros({2, 3, 9, 8})), ShapeError);
}

TEST_CASE("config validation and text round trip") {
    ModelConfig c = tiny_config();
    c.dropout_rate = 0.2;
    c.heads.distill = 80;
    CHECK(ModelConfig::from_text(c.to_text()) == c);
    c.dropout_rate = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.d_face = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
