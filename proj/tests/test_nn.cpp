#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "tal/error.hpp"
#include "tal/nn/checkpoint.hpp"
#include "tal/nn/lgte.hpp"
#include "tal/nn/optim.hpp"

using namespace tal;
using namespace tal::nn;
namespace fs = std::filesystem;

namespace {

// Fixed random projection so every loss depends on every output entry.
double probe_loss(const Mat& y, const Mat& probe) { return (y.array() * probe.array()).sum(); }

}  // namespace

TEST_CASE("conv1d same padding matches a direct sum")
{
    Rng rng(1);
    Conv1d conv("c", 3, 2, 5);
    conv.init(rng);
    const Mat x = Mat::Random(3, 9);
    const Mat y = conv.forward(x, nullptr);
    REQUIRE(y.rows() == 2);
    REQUIRE(y.cols() == 9);
    for (int o = 0; o < 2; ++o)
        for (int t = 0; t < 9; ++t) {
            double s = conv.bias.value(o, 0);
            for (int k = 0; k < 5; ++k) {
                const int src = t + k - 2;
                if (src < 0 || src >= 9)
                    continue;
                for (int i = 0; i < 3; ++i)
                    s += conv.weight.value(o, k * 3 + i) * x(i, src);
            }
            CHECK(y(o, t) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("conv1d rejects even kernels")
{
    CHECK_THROWS(Conv1d("c", 2, 2, 4));
}

TEST_CASE("conv1d and layernorm gradients")
{
    Rng rng(2);
    Conv1d conv("c", 4, 3, 3);
    conv.init(rng);
    LayerNorm norm("n", 3);
    init_uniform(norm.gamma, rng, 1.0);
    init_uniform(norm.beta, rng, 1.0);
    Mat x = Mat::Random(4, 11);
    const Mat probe = Mat::Random(3, 11);

    ParamList params;
    conv.collect(params);
    norm.collect(params);
    Param input("input", 4, 11);
    input.value = x;
    params.push_back(&input);

    auto loss = [&](bool backprop) {
        Conv1d::Cache cc;
        LayerNorm::Cache nc;
        const Mat h = conv.forward(input.value, &cc);
        const Mat y = norm.forward(h, &nc);
        if (backprop)
            input.grad += conv.backward(norm.backward(probe, nc), cc);
        return probe_loss(y, probe);
    };
    const auto r = testing::check_gradients(params, loss, 60, rng);
    CHECK(r.worst_rel < 1e-6);
}

TEST_CASE("lgte preserves shape")
{
    Rng rng(3);
    for (auto [C, T, heads] : {std::tuple{8, 5, 2}, {16, 37, 4}, {12, 1, 3}, {8, 64, 8}}) {
        LGTE block("l", C, heads);
        block.init(rng);
        const Mat x = Mat::Random(C, T);
        const Mat y = block.forward(x, std::max(1, (T + 9) / 10), nullptr);
        CHECK(y.rows() == C);
        CHECK(y.cols() == T);
        CHECK(y.allFinite());
    }
}

TEST_CASE("lgte rejects heads that do not divide channels")
{
    try {
        LGTE block("l", 10, 4);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.section() == "lgte");
        CHECK(e.field() == "heads");
    }
}

TEST_CASE("lgte window saturates to full attention")
{
    Rng rng(4);
    LGTE local("l", 8, 2);
    local.init(rng);
    const Mat x = Mat::Random(8, 20);
    LGTE::Cache c;
    local.forward(x, 20, &c);
    // With the window covering the sequence, the local head's attention
    // pattern is computed over the same keys as a global head would use.
    REQUIRE(c.attention.size() == 2);
    for (int i = 0; i < 20; ++i)
        CHECK(c.attention[0].row(i).sum() == doctest::Approx(1.0));
    CHECK((c.attention[0].array() > 0.0).all());

    // Output is unchanged by any window at least as long as the sequence.
    CHECK(local.forward(x, 20, nullptr).isApprox(local.forward(x, 1000, nullptr), 1e-14));

    LGTE::Cache narrow;
    local.forward(x, 3, &narrow);
    for (int i = 0; i < 20; ++i)
        CHECK((narrow.attention[0].row(i).array() > 0.0).count() == 3);
}

TEST_CASE("lgte window start stays inside the sequence")
{
    for (int T = 1; T <= 30; ++T)
        for (int w = 1; w <= 35; ++w)
            for (int q = 0; q < T; ++q) {
                const int s = LGTE::window_start(q, w, T);
                const int width = std::min(w, T);
                REQUIRE(s >= 0);
                REQUIRE(s + width <= T);
                REQUIRE(q >= s);
                REQUIRE(q < s + width);
            }
}

TEST_CASE("lgte global heads are position-sensitive")
{
    Rng rng(5);
    LGTE block("l", 8, 2);
    block.init(rng);
    const Mat x = Mat::Random(8, 12);
    Mat permuted(8, 12);
    for (int t = 0; t < 12; ++t)
        permuted.col(t) = x.col((t * 5) % 12);
    const Mat y = block.forward(x, 12, nullptr);
    const Mat yp = block.forward(permuted, 12, nullptr);
    Mat unpermuted(8, 12);
    for (int t = 0; t < 12; ++t)
        unpermuted.col((t * 5) % 12) = yp.col(t);
    CHECK((y - unpermuted).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("lgte gradients")
{
    Rng rng(6);
    LGTE block("l", 8, 4);
    block.init(rng);
    Param input("input", 8, 13);
    input.value = Mat::Random(8, 13);
    const Mat probe = Mat::Random(8, 13);
    ParamList params;
    block.collect(params);
    params.push_back(&input);

    auto loss = [&](bool backprop) {
        LGTE::Cache c;
        const Mat y = block.forward(input.value, 4, &c);
        if (backprop)
            input.grad += block.backward(probe, c);
        return probe_loss(y, probe);
    };
    const auto r = testing::check_gradients(params, loss, 120, rng);
    CHECK(r.worst_rel < 1e-5);
}

TEST_CASE("adam minimizes a quadratic")
{
    Param p("p", 3, 1);
    p.value << 5.0, -3.0, 1.0;
    Adam opt({&p}, {.lr = 0.1});
    for (int i = 0; i < 500; ++i) {
        p.grad = 2.0 * p.value;
        opt.step();
    }
    CHECK(p.value.norm() < 1e-2);
    CHECK(opt.steps_taken() == 500);
}

TEST_CASE("decoupled decay shrinks weights with zero gradient")
{
    Param a("a", 1, 1), b("b", 1, 1);
    a.value(0, 0) = b.value(0, 0) = 1.0;
    Adam w({&a}, {.lr = 0.1, .weight_decay = 0.5, .decoupled = true});
    Adam l2({&b}, {.lr = 0.1, .weight_decay = 0.5, .decoupled = false});
    a.zero_grad();
    b.zero_grad();
    w.step();
    l2.step();
    CHECK(a.value(0, 0) == doctest::Approx(1.0 - 0.1 * 0.5));
    // L2 folds the decay into the gradient, which Adam normalizes to a unit step.
    CHECK(b.value(0, 0) == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
}

TEST_CASE("cosine schedule")
{
    CHECK(cosine_lr(1.0, 0, 10) == doctest::Approx(1.0));
    CHECK(cosine_lr(1.0, 5, 10) == doctest::Approx(0.5));
    for (int e = 1; e < 10; ++e)
        CHECK(cosine_lr(0.0016, e, 10) < cosine_lr(0.0016, e - 1, 10));
}

TEST_CASE("checkpoint round-trip and errors")
{
    const fs::path dir = fs::temp_directory_path() / "tal_nn_ckpt";
    fs::remove_all(dir);
    fs::create_directories(dir);

    Rng rng(7);
    Conv1d conv("conv", 3, 4, 3);
    conv.init(rng);
    ParamList params;
    conv.collect(params);
    const nlohmann::json cfg{{"kind", "test"}, {"width", 4}};
    save_checkpoint(dir / "a.talc", cfg, params);

    const Checkpoint ck = read_checkpoint(dir / "a.talc");
    CHECK(ck.config == cfg);
    REQUIRE(ck.arrays.size() == 2);

    Conv1d other("conv", 3, 4, 3);
    ParamList other_params;
    other.collect(other_params);
    load_params(ck, other_params);
    CHECK(other.weight.value == conv.weight.value);
    CHECK(other.bias.value == conv.bias.value);

    Conv1d wrong("conv", 3, 5, 3);
    ParamList wrong_params;
    wrong.collect(wrong_params);
    CHECK_THROWS_AS(load_params(ck, wrong_params), CheckpointError);

    Conv1d renamed("other", 3, 4, 3);
    ParamList renamed_params;
    renamed.collect(renamed_params);
    CHECK_THROWS_AS(load_params(ck, renamed_params), CheckpointError);

    CHECK_THROWS_AS(read_checkpoint(dir / "missing.talc"), CheckpointError);
    fs::copy_file(dir / "a.talc", dir / "short.talc");
    fs::resize_file(dir / "short.talc", fs::file_size(dir / "a.talc") - 3);
    CHECK_THROWS_AS(read_checkpoint(dir / "short.talc"), CheckpointError);
    {
        std::ofstream out(dir / "junk.talc", std::ios::binary);
        out << "not a checkpoint at all";
    }
    CHECK_THROWS_AS(read_checkpoint(dir / "junk.talc"), CheckpointError);
}
