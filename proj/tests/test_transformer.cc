#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support.h"
#include "teaforn/errors.h"
#include "teaforn/stack.h"
#include "teaforn/transformer.h"

using namespace teaforn;
using namespace teaforn::testing;

namespace {

TokenGrid grid(std::vector<TokenId> ids, std::size_t rows) {
    const std::size_t cols = ids.size() / rows;
    return {std::move(ids), rows, cols};
}

}  // namespace

TEST_CASE("timing signal") {
    auto t0 = timing_signal<double>(0, 4, 16);
    CHECK(t0 == std::vector<double>{0, 1, 0, 1});

    for (std::size_t p : {1, 5, 13}) CHECK(timing_signal<double>(p, 6, 16)[1] == doctest::Approx(std::cos(double(p))));

    auto t3 = timing_signal<double>(3, 8, 16);
    for (std::size_t i = 0; i < 4; ++i) {
        const double angle = 3.0 / std::pow(10000.0, 2.0 * i / 8.0);
        CHECK(std::abs(t3[2 * i] - std::sin(angle)) < 1e-6);
        CHECK(std::abs(t3[2 * i + 1] - std::cos(angle)) < 1e-6);
    }
    CHECK_THROWS_AS(timing_signal<double>(16, 8, 16), IndexError);

    auto rows = timing_rows<double>(2, 3, 8, 16);
    CHECK(rows.shape() == Shape{3, 8});
    auto t4 = timing_signal<double>(4, 8, 16);
    CHECK(std::equal(t4.begin(), t4.end(), rows.values().begin() + 16));
}

TEST_CASE("presets keep the size ratios") {
    const auto base = preset_config("base-like", 50);
    const auto big = preset_config("big-like", 50);
    CHECK(base.d_ff == 4 * base.d_model);
    CHECK(big.d_ff == 4 * big.d_model);
    CHECK(big.d_model == 2 * base.d_model);
    CHECK(big.heads == 2 * base.heads);
    CHECK(big.dropout == doctest::Approx(3 * base.dropout));
    CHECK(base.d_model == 64);
    CHECK(base.vocab_size == 50);
    CHECK_THROWS_AS(preset_config("huge", 50), ParameterError);

    auto bad = base;
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("encode shape, determinism and position use") {
    Seq2Seq<double> model(tiny_config(9), 1, 4);
    const ForwardContext<double> ctx{};
    auto src = grid({4, 5, 6, 7, 8, 4, 4, 0}, 2);
    auto a = model.encode(src, ctx);
    auto b = model.encode(src, ctx);
    CHECK(a.states.shape() == Shape{2, 4, 8});
    CHECK(std::equal(a.states.values().begin(), a.states.values().end(), b.states.values().begin()));

    auto swapped = model.encode(grid({5, 4, 6, 7}, 1), ctx);
    auto original = model.encode(grid({4, 5, 6, 7}, 1), ctx);
    CHECK_FALSE(std::equal(swapped.states.values().begin(), swapped.states.values().end(),
                           original.states.values().begin()));

    CHECK_THROWS_AS(model.encode(TokenGrid{}, ctx), ContractError);
    CHECK_THROWS_AS(model.encode(grid({0, 0}, 1), ctx), ContractError);
}

TEST_CASE("decoder is causal") {
    std::mt19937_64 rng(8);
    Seq2Seq<double> model(tiny_config(9, 2), 1, 2);
    const ForwardContext<double> ctx{};
    auto memory = model.encode(grid({4, 5, 6}, 1), ctx);
    const std::size_t len = 5;
    auto inputs = random_tensor<double>(rng, {1, len, 8}, false);
    auto base = model.decode(0, inputs, memory, ctx);
    CHECK(base.shape() == Shape{1, len, 8});

    for (std::size_t t = 0; t + 1 < len; ++t) {
        std::vector<double> perturbed(inputs.values().begin(), inputs.values().end());
        for (std::size_t i = (t + 1) * 8; i < perturbed.size(); ++i) perturbed[i] += 0.5 + 0.01 * i;
        auto out = model.decode(0, Tensor<double>::from({1, len, 8}, perturbed), memory, ctx);
        for (std::size_t q = 0; q <= t; ++q)
            for (std::size_t d = 0; d < 8; ++d) CHECK(out.values()[q * 8 + d] == base.values()[q * 8 + d]);
        CHECK(out.values()[(t + 1) * 8] != base.values()[(t + 1) * 8]);
    }

    std::vector<std::uint8_t> wrong(16, 1);
    CHECK_THROWS_AS(model.decode(0, inputs, memory, wrong, ctx), ContractError);
    auto full = std::vector<std::uint8_t>(len * len, 1);
    CHECK_THROWS_AS(model.decode(0, inputs, memory, full, ctx), ContractError);
}

TEST_CASE("project_logits") {
    auto eye = Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto o = Tensor<double>::from({2, 3}, {0.5, -1, 2, 3, 4, 5});
    auto logits = project_logits(o, eye);
    CHECK(std::equal(logits.values().begin(), logits.values().end(), o.values().begin()));
    CHECK_THROWS_AS(project_logits(o, Tensor<double>::zeros({3, 4})), DimensionError);

    Seq2Seq<double> model(tiny_config(9), 1, 1);
    std::mt19937_64 rng(2);
    auto outs = random_tensor<double>(rng, {4, 8}, false);
    auto before = model.project_logits(outs);
    CHECK(before.shape() == Shape{4, 9});
    CHECK(model.embedding().same_storage(model.output_projection()));
    auto table = model.embedding();
    table.mutable_values()[0] += 1.0;
    auto after = model.project_logits(outs);
    CHECK(after.values()[0] != before.values()[0]);
}

TEST_CASE("tied parameter count") {
    auto cfg = tiny_config(11);
    Seq2Seq<float> tied(cfg, 1, 1);
    cfg.tie_embeddings = false;
    Seq2Seq<float> untied(cfg, 1, 1);
    CHECK(tied.parameter_count() == untied.parameter_count() - 11 * 8);
    CHECK(untied.parameters().size() == tied.parameters().size() + 1);
}

TEST_CASE("every parameter of a 2-layer d_model=8 model passes finite differences") {
    std::mt19937_64 rng(21);
    auto cfg = tiny_config(7, 2);
    Seq2Seq<double> model(cfg, 1, 9);
    const ForwardContext<double> ctx{};
    auto batch = random_batch(rng, 2, 7, 2, 4);
    auto checks = check_gradients<double>([&] { return teacher_forcing_loss(model, batch, ctx); }, model.parameters());
    CHECK(checks.size() == model.parameters().size());
    for (const auto &c : checks) {
        INFO(c.name << " rel " << c.relative_error);
        CHECK(c.relative_error < 1e-4);
    }
}

TEST_CASE("attention weight gradient of sum(o)") {
    Seq2Seq<double> model(tiny_config(7), 1, 3);
    const ForwardContext<double> ctx{};
    std::mt19937_64 rng(4);
    auto memory = model.encode(grid({4, 5, 6}, 1), ctx);
    auto inputs = random_tensor<double>(rng, {1, 4, 8}, false);
    auto weight = model.decoder(0).layers[0].self_attention.query.weight;
    auto checks = check_gradients<double>([&] { return sum(mul(model.decode(0, inputs, memory, ctx), inputs)); },
                                          {{"query", weight}});
    CHECK(checks[0].relative_error < 1e-4);
}

TEST_CASE("initial loss is near ln V") {
    auto cfg = preset_config("base-like", 64);
    Seq2Seq<float> model(cfg, 1, 17);
    std::mt19937_64 rng(3);
    auto batch = random_batch(rng, 32, 64, 8, 16);
    const double loss = teacher_forcing_loss(model, batch, ForwardContext<float>{}).item();
    CHECK(std::abs(loss - std::log(64.0)) < 0.1 * std::log(64.0));
}
