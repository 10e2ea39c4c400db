#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support.h"
#include "teaforn/errors.h"
#include "teaforn/stack.h"

using namespace teaforn;
using namespace teaforn::testing;
using D = Tensor<double>;

namespace {

std::vector<double> flat_grads(const std::vector<NamedTensor<double>> &params) {
    std::vector<double> out;
    for (const auto &[name, p] : params) {
        if (p.has_grad())
            out.insert(out.end(), p.grad().begin(), p.grad().end());
        else
            out.insert(out.end(), p.numel(), 0.0);
    }
    return out;
}

std::vector<double> decoder0_gradient(Seq2Seq<double> &model, const Batch &batch, const StackConfig &stack) {
    model.zero_grad();
    backward(teaforn_loss(model, batch, stack, ForwardContext<double>{}).total);
    auto g = flat_grads(model.decoder_parameters(0));
    model.zero_grad();
    return g;
}

StackConfig stack_of(std::size_t n, double lambda, bool shared = true, FeedingMode mode = FeedingMode::direct,
                     std::size_t top_k = 1) {
    StackConfig c;
    c.n = n;
    c.lambda = lambda;
    c.share_weights = shared;
    c.mode = mode;
    c.top_k = top_k;
    return c;
}

double norm(const std::vector<double> &v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

std::vector<double> minus(const std::vector<double> &a, const std::vector<double> &b) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

}  // namespace

TEST_CASE("discount weights") {
    for (double l : {0.1, 0.5, 1.0}) CHECK(discount_weights(1, l) == std::vector<double>{1.0});
    CHECK(discount_weights(3, 0.5) == std::vector<double>{1.0, 0.5, 0.25});
    CHECK(discount_weights(2, 1.0) == std::vector<double>{1.0, 1.0});
    CHECK_THROWS_AS(discount_weights(2, 0.0), ParameterError);
    CHECK_THROWS_AS(discount_weights(2, 1.5), ParameterError);
    CHECK_THROWS_AS(discount_weights(0, 0.5), ParameterError);
}

TEST_CASE("stack config validation and mode names") {
    StackConfig c;
    c.n = 2;
    c.top_k = 9;
    CHECK_THROWS_AS(c.validate(8), ParameterError);
    c.top_k = 8;
    CHECK_NOTHROW(c.validate(8));
    c.weight_override = {1.0};
    CHECK_THROWS_AS(c.validate(8), ParameterError);
    c.weight_override = {1.0, 1.0};
    CHECK(c.weights() == std::vector<double>{1.0, 1.0});

    for (auto m : {FeedingMode::direct, FeedingMode::argmax_embed, FeedingMode::top_k_expect})
        CHECK(parse_feeding_mode(to_string(m)) == m);
    CHECK(parse_feeding_mode("top_k_expect") == FeedingMode::top_k_expect);
    CHECK_THROWS_AS(parse_feeding_mode("sample"), ParameterError);
}

TEST_CASE("offset 0 input at the first position is GO plus timing(1)") {
    Seq2Seq<double> model(tiny_config(9), 1, 3);
    std::mt19937_64 rng(1);
    auto batch = random_batch(rng, 2, 9);
    auto x = decoder0_inputs(model, batch, ForwardContext<double>{}, nullptr, nullptr);
    auto t1 = timing_signal<double>(1, 8, model.config().max_len);
    const double scale = std::sqrt(8.0);
    for (std::size_t d = 0; d < 8; ++d) {
        const double expect = t1[d] + scale * model.embedding().values()[kGo * 8 + d];
        CHECK(x.values()[d] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("build_inputs requires its operand") {
    auto e = D::zeros({5, 4});
    CHECK_THROWS_AS(build_inputs<double>(0, D{}, D::zeros({1, 2, 4}), FeedingMode::direct, e, e, 1, 16),
                    ContractError);
    CHECK_THROWS_AS(build_inputs<double>(1, D::zeros({1, 2, 4}), D{}, FeedingMode::direct, e, e, 1, 16),
                    ContractError);
    auto x = build_inputs<double>(2, D{}, D::zeros({1, 3, 4}), FeedingMode::direct, e, e, 1, 16);
    auto t3 = timing_signal<double>(3, 4, 16);
    CHECK(std::equal(t3.begin(), t3.end(), x.values().begin()));
}

TEST_CASE("feeding-mode reductions") {
    std::mt19937_64 rng(13);
    const std::size_t v = 6, d = 4;
    for (int trial = 0; trial < 20; ++trial) {
        auto e = random_tensor<double>(rng, {v, d}, false);
        auto w = random_tensor<double>(rng, {v, d}, false);
        auto o = random_tensor<double>(rng, {2, 3, d}, false);
        auto top1 = feed_core(o, FeedingMode::top_k_expect, e, w, 1);
        auto arg = feed_core(o, FeedingMode::argmax_embed, e, w, 1);
        CHECK(std::equal(top1.values().begin(), top1.values().end(), arg.values().begin()));

        auto full = feed_core(o, FeedingMode::top_k_expect, e, w, v);
        auto expect = matmul(softmax(project_logits(o, w)), e);
        for (std::size_t i = 0; i < full.numel(); ++i) CHECK(std::abs(full.values()[i] - expect.values()[i]) < 1e-12);
    }
}

TEST_CASE("argmax feeding blocks the gradient; direct and top-k pass it") {
    std::mt19937_64 rng(2);
    auto e = random_tensor<double>(rng, {6, 4}, false);
    auto w = random_tensor<double>(rng, {6, 4}, false);
    for (auto mode : {FeedingMode::direct, FeedingMode::argmax_embed, FeedingMode::top_k_expect}) {
        auto o = random_tensor<double>(rng, {1, 3, 4});
        backward(sum(mul(feed_core(o, mode, e, w, 3), feed_core(o, mode, e, w, 3))));
        const double g = o.has_grad() ? norm({o.grad().begin(), o.grad().end()}) : 0.0;
        if (mode == FeedingMode::argmax_embed)
            CHECK(g == 0.0);
        else
            CHECK(g > 0.0);
    }
}

TEST_CASE("decoder offset loss: perfect and uniform predictors") {
    const std::size_t v = 6;
    Batch batch = make_batch(std::vector<SequencePair>{{{4}, {4, 5, 4}}});  // GO 4 5 4 EOS
    auto eye = D::from({v, v}, [] {
        std::vector<double> m(36, 0.0);
        for (std::size_t i = 0; i < 6; ++i) m[i * 6 + i] = 1.0;
        return m;
    }());
    const std::size_t steps = batch.target.cols - 1;
    for (std::size_t s = 0; s < 3; ++s) {
        std::vector<double> o(steps * v, 0.0);
        for (std::size_t t = 1; t + s <= 4; ++t) o[(t - 1) * v + batch.target.at(0, t + s)] = 1000.0;
        auto perfect = decoder_offset_loss(s, D::from({1, steps, v}, o), batch.target, eye);
        CHECK(perfect.loss.item() == 0.0);
        CHECK(perfect.positions == 4 - s);

        auto uniform = decoder_offset_loss(s, D::zeros({1, steps, v}), batch.target, eye);
        const double expect = static_cast<double>(4 - s) * std::log(6.0);
        CHECK(std::abs(uniform.nll_sum.item() - expect) < 1e-5);
        CHECK(std::abs(uniform.loss.item() - std::log(6.0)) < 1e-12);
    }
    auto none = decoder_offset_loss(4, D::zeros({1, steps, v}), batch.target, eye);
    CHECK(none.all_masked);
    CHECK(none.loss.item() == 0.0);
    CHECK(none.positions == 0);
}

TEST_CASE("masked offset positions get exactly zero gradient") {
    std::mt19937_64 rng(6);
    auto batch = make_batch(std::vector<SequencePair>{{{4, 5}, {4, 5, 6, 7}}, {{4}, {6}}});
    auto w = random_tensor<double>(rng, {8, 4}, false);
    const std::size_t steps = batch.target.cols - 1;
    auto o = random_tensor<double>(rng, {2, steps, 4});
    backward(decoder_offset_loss(2, o, batch.target, w).loss);
    // Row 0 scores 5 targets, so offset 2 keeps t = 1..3; row 1 scores 2 and keeps none.
    for (std::size_t t = 0; t < steps; ++t) {
        double row0 = 0, row1 = 0;
        for (std::size_t d = 0; d < 4; ++d) {
            row0 += std::abs(o.grad()[(0 * steps + t) * 4 + d]);
            row1 += std::abs(o.grad()[(1 * steps + t) * 4 + d]);
        }
        CHECK(row1 == 0.0);
        if (t < 3)
            CHECK(row0 > 0.0);
        else
            CHECK(row0 == 0.0);
    }
}

TEST_CASE("offset 0 loss matches a scalar teacher-forcing oracle") {
    std::mt19937_64 rng(31);
    Seq2Seq<double> model(tiny_config(9), 1, 5);
    auto batch = random_batch(rng, 3, 9, 2, 5);
    StackConfig stack;
    auto sl = teaforn_loss(model, batch, stack, ForwardContext<double>{});
    const auto &o = sl.outputs[0];
    const auto &w = model.output_projection();
    const std::size_t steps = o.dim(1), d = o.dim(2), v = 9;
    double total = 0;
    std::size_t count = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (std::size_t t = 1; t <= batch.target_length(b); ++t) {
            std::vector<double> logits(v, 0.0);
            for (std::size_t k = 0; k < v; ++k)
                for (std::size_t j = 0; j < d; ++j)
                    logits[k] += o.values()[(b * steps + t - 1) * d + j] * w.values()[k * d + j];
            double mx = logits[0];
            for (double l : logits) mx = std::max(mx, l);
            double z = 0;
            for (double l : logits) z += std::exp(l - mx);
            total -= logits[batch.target.at(b, t)] - mx - std::log(z);
            ++count;
        }
    }
    CHECK(std::abs(sl.total.item() - total / count) < 1e-6);
    CHECK(std::abs(teacher_forcing_loss(model, batch, ForwardContext<double>{}).item() - total / count) < 1e-6);
}

TEST_CASE("N=1 equals teacher forcing bit for bit") {
    std::mt19937_64 rng(4);
    Seq2Seq<float> model(tiny_config(9), 1, 8);
    auto batch = random_batch(rng, 4, 9);
    const auto tf = teacher_forcing_loss(model, batch, ForwardContext<float>{}).item();
    for (auto mode : {FeedingMode::direct, FeedingMode::argmax_embed, FeedingMode::top_k_expect}) {
        for (double lambda : {0.3, 1.0}) {
            StackConfig stack;
            stack.mode = mode;
            stack.lambda = lambda;
            stack.top_k = 3;
            CHECK(teaforn_loss(model, batch, stack, ForwardContext<float>{}).total.item() == tf);
        }
    }
}

TEST_CASE("total recomposes from the offset losses") {
    std::mt19937_64 rng(9);
    Seq2Seq<double> model(tiny_config(9), 1, 6);
    auto batch = random_batch(rng, 3, 9, 2, 5);
    StackConfig stack;
    stack.n = 2;
    stack.lambda = 0.5;
    auto sl = teaforn_loss(model, batch, stack, ForwardContext<double>{});
    CHECK(std::abs(sl.total.item() - (sl.offset_losses[0].item() + 0.5 * sl.offset_losses[1].item())) < 1e-6);

    // L_1 recomputed from the returned decoder-1 outputs.
    auto l1 = decoder_offset_loss(1, sl.outputs[1], batch.target, model.output_projection());
    CHECK(std::abs(l1.loss.item() - sl.offset_losses[1].item()) < 1e-12);

    stack.n = 3;
    stack.weight_override = {1.0, 1.0, 0.5};
    auto over = teaforn_loss(model, batch, stack, ForwardContext<double>{});
    const double expect = over.offset_losses[0].item() + over.offset_losses[1].item() + 0.5 * over.offset_losses[2].item();
    CHECK(std::abs(over.total.item() - expect) < 1e-9);
}

TEST_CASE("offset 0 is independent of the stack configuration") {
    std::mt19937_64 rng(10);
    Seq2Seq<double> model(tiny_config(9), 3, 6);
    auto batch = random_batch(rng, 3, 9, 3, 5);
    const double tf = teacher_forcing_loss(model, batch, ForwardContext<double>{}).item();
    for (auto mode : {FeedingMode::direct, FeedingMode::argmax_embed, FeedingMode::top_k_expect}) {
        for (std::size_t n : {1, 2, 3}) {
            for (bool shared : {true, false}) {
                auto stack = stack_of(n, 0.5, shared, mode, 2);
                auto sl = teaforn_loss(model, batch, stack, ForwardContext<double>{});
                CHECK(sl.offset_losses[0].item() == tf);
                for (std::size_t s = 1; s < n; ++s) CHECK_FALSE(depends_on(sl.inputs[0], sl.outputs[s]));
                // Argmax feeding reads token ids, so no graph edge leads back to o_0.
                if (n > 1) CHECK(depends_on(sl.inputs[1], sl.outputs[0]) == (mode != FeedingMode::argmax_embed));
            }
        }
    }
}

TEST_CASE("parameter counts") {
    const auto cfg = tiny_config(9);
    Seq2Seq<float> one(cfg, 1, 1);
    auto shared = stack_of(3, 0.5, true);
    auto unshared = stack_of(3, 0.5, false);
    Seq2Seq<float> s3(cfg, shared.decoder_stacks(), 1);
    Seq2Seq<float> u3(cfg, unshared.decoder_stacks(), 1);
    CHECK(s3.parameter_count() == one.parameter_count());
    std::size_t dec = 0;
    for (const auto &[n, t] : one.decoder_parameters(0)) dec += t.numel();
    CHECK(u3.parameter_count() == one.parameter_count() + 2 * dec);
}

TEST_CASE("contract errors") {
    std::mt19937_64 rng(3);
    Seq2Seq<float> model(tiny_config(9), 1, 1);
    auto batch = make_batch(std::vector<SequencePair>{{{4, 5}, {4}}, {{6}, {5, 6}}});
    auto stack = stack_of(4, 0.5);
    CHECK_THROWS_AS(teaforn_loss(model, batch, stack, ForwardContext<float>{}), ContractError);
    stack.n = 3;  // longest row scores 3 tokens (two words + EOS)
    CHECK_NOTHROW(teaforn_loss(model, batch, stack, ForwardContext<float>{}));
    stack.share_weights = false;
    CHECK_THROWS_AS(teaforn_loss(model, batch, stack, ForwardContext<float>{}), ContractError);
}

TEST_CASE("cross-timestep gradient reaches decoder 0 and scales with lambda") {
    std::mt19937_64 rng(12);
    Seq2Seq<double> model(tiny_config(9), 1, 11);
    auto batch = random_batch(rng, 3, 9, 3, 5);
    const auto g1 = decoder0_gradient(model, batch, stack_of(1, 1.0));
    const auto g_half = minus(decoder0_gradient(model, batch, stack_of(2, 0.5)), g1);
    const auto g_full = minus(decoder0_gradient(model, batch, stack_of(2, 1.0)), g1);
    CHECK(norm(g_half) / norm(g1) > 1e-6);
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(g_half[i] - 0.5 * g_full[i]) < 1e-9);
}

TEST_CASE("teaforn loss passes finite differences in every mode") {
    std::mt19937_64 rng(17);
    for (auto mode : {FeedingMode::direct, FeedingMode::argmax_embed, FeedingMode::top_k_expect}) {
        for (bool shared : {true, false}) {
            auto stack = stack_of(3, 0.5, shared, mode, 3);
            Seq2Seq<double> model(tiny_config(7), stack.decoder_stacks(), 23);
            auto batch = random_batch(rng, 2, 7, 3, 4);
            auto checks = check_gradients<double>(
                [&] { return teaforn_loss(model, batch, stack, ForwardContext<double>{}).total; }, model.parameters());
            for (const auto &c : checks) {
                INFO(to_string(mode) << " shared=" << shared << " " << c.name << " rel " << c.relative_error);
                CHECK(c.relative_error < 1e-4);
            }
        }
    }
}

TEST_CASE("dropout mask reuse replays decoder 0's masks") {
    std::mt19937_64 rng(1);
    auto cfg = tiny_config(9);
    cfg.dropout = 0.3;
    Seq2Seq<float> model(cfg, 1, 2);
    auto batch = random_batch(rng, 2, 9, 3, 5);
    auto stack = stack_of(2, 0.5, true);
    stack.reuse_dropout_masks = true;
    std::mt19937_64 a(5), b(5);
    auto first = teaforn_loss(model, batch, stack, ForwardContext<float>{true, &a, nullptr});
    stack.reuse_dropout_masks = false;
    auto second = teaforn_loss(model, batch, stack, ForwardContext<float>{true, &b, nullptr});
    CHECK(first.offset_losses[0].item() == second.offset_losses[0].item());
    // Reuse draws no masks for offset 1, so the generators end in different states.
    CHECK(a() != b());
}

TEST_CASE("word drop only touches training inputs") {
    std::mt19937_64 rng(2);
    Seq2Seq<double> model(tiny_config(9), 1, 2);
    auto batch = random_batch(rng, 2, 9, 3, 5);
    WordDropConfig wd{1.0};
    std::mt19937_64 wrng(1);
    auto eval = decoder0_inputs(model, batch, ForwardContext<double>{}, &wd, &wrng);
    auto clean = decoder0_inputs(model, batch, ForwardContext<double>{}, nullptr, nullptr);
    CHECK(std::equal(eval.values().begin(), eval.values().end(), clean.values().begin()));

    std::mt19937_64 drng(3);
    auto dropped = decoder0_inputs(model, batch, ForwardContext<double>{true, &drng, nullptr}, &wd, &wrng);
    auto timing = model.timing(1, batch.target.cols - 1);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < timing.numel(); ++i)
            CHECK(dropped.values()[b * timing.numel() + i] == timing.values()[i]);
}
