#include "teaforn/stack.h"

#include <cmath>
#include <string>

#include "teaforn/errors.h"

namespace teaforn {

std::string_view to_string(FeedingMode mode) {
    switch (mode) {
        case FeedingMode::direct:
            return "direct";
        case FeedingMode::argmax_embed:
            return "argmax";
        case FeedingMode::top_k_expect:
            return "topk";
    }
    return "?";
}

FeedingMode parse_feeding_mode(std::string_view name) {
    if (name == "direct") return FeedingMode::direct;
    if (name == "argmax" || name == "argmax_embed") return FeedingMode::argmax_embed;
    if (name == "topk" || name == "top_k_expect") return FeedingMode::top_k_expect;
    throw ParameterError("unknown feeding mode '" + std::string(name) + "'");
}

std::vector<double> discount_weights(std::size_t n, double lambda) {
    if (n < 1) throw ParameterError("stack depth N must be at least 1");
    if (!(lambda > 0.0 && lambda <= 1.0))
        throw ParameterError("discount factor " + std::to_string(lambda) + " outside (0, 1]");
    std::vector<double> w(n);
    double v = 1.0;
    for (std::size_t s = 0; s < n; ++s, v *= lambda) w[s] = v;
    return w;
}

void StackConfig::validate(std::size_t vocab_size) const {
    if (n < 1) throw ParameterError("stack depth N must be at least 1");
    if (!(lambda > 0.0 && lambda <= 1.0))
        throw ParameterError("discount factor " + std::to_string(lambda) + " outside (0, 1]");
    if (top_k < 1 || top_k > vocab_size)
        throw ParameterError("top-k " + std::to_string(top_k) + " outside [1, " + std::to_string(vocab_size) + "]");
    if (!weight_override.empty()) {
        if (weight_override.size() != n)
            throw ParameterError("weight override holds " + std::to_string(weight_override.size()) +
                                 " entries for N = " + std::to_string(n));
        for (double w : weight_override)
            if (!(w >= 0.0) || !std::isfinite(w)) throw ParameterError("offset weights must be finite and >= 0");
    }
}

std::vector<double> StackConfig::weights() const {
    return weight_override.empty() ? discount_weights(n, lambda) : weight_override;
}

template <typename T>
Tensor<T> feed_core(const Tensor<T> &previous, FeedingMode mode, const Tensor<T> &embedding,
                    const Tensor<T> &projection, std::size_t top_k) {
    switch (mode) {
        case FeedingMode::direct:
            return previous;
        case FeedingMode::argmax_embed: {
            std::vector<std::int32_t> ids;
            {
                NoGradGuard guard;
                ids = argmax(project_logits(previous, projection));
            }
            Shape shape = previous.shape();
            return reshape(gather_rows(embedding, ids), std::move(shape));
        }
        case FeedingMode::top_k_expect: {
            auto probs = softmax(top_k_mask(project_logits(previous, projection), top_k));
            return matmul(probs, embedding);
        }
    }
    throw ContractError("unhandled feeding mode");
}

template <typename T>
Tensor<T> build_inputs(std::size_t offset, const Tensor<T> &groundtruth, const Tensor<T> &previous, FeedingMode mode,
                       const Tensor<T> &embedding, const Tensor<T> &projection, std::size_t top_k,
                       std::size_t max_len) {
    const Tensor<T> &operand = offset == 0 ? groundtruth : previous;
    if (!operand.defined())
        throw ContractError(offset == 0 ? "offset 0 needs groundtruth embeddings"
                                        : "offset " + std::to_string(offset) + " needs the previous decoder outputs");
    if (operand.rank() != 3) throw DimensionError("decoder inputs must be [B, T, D], got " + shape_string(operand.shape()));
    auto core = offset == 0 ? groundtruth : feed_core(previous, mode, embedding, projection, top_k);
    const std::size_t steps = core.dim(1), d = core.dim(2);
    return add(core, timing_rows<T>(1 + offset, steps, d, max_len));
}

template <typename T>
OffsetLoss<T> decoder_offset_loss(std::size_t offset, const Tensor<T> &outputs, const TokenGrid &target,
                                  const Tensor<T> &projection, double label_smoothing) {
    if (outputs.rank() != 3) throw DimensionError("decoder outputs must be [B, T, D], got " + shape_string(outputs.shape()));
    const std::size_t b_count = outputs.dim(0), steps = outputs.dim(1);
    if (target.rows != b_count || target.cols < steps + 1)
        throw DimensionError("target grid " + std::to_string(target.rows) + "x" + std::to_string(target.cols) +
                             " does not cover outputs " + shape_string(outputs.shape()));

    std::vector<std::int32_t> ids(b_count * steps, 0);
    std::vector<T> keep(b_count * steps, T(0));
    std::size_t positions = 0;
    for (std::size_t b = 0; b < b_count; ++b) {
        std::size_t len = 0;
        for (std::size_t c = 1; c < target.cols && target.at(b, c) != kPad; ++c) ++len;
        for (std::size_t t = 1; t <= steps; ++t) {
            if (t + offset > len) continue;
            ids[b * steps + t - 1] = target.at(b, t + offset);
            keep[b * steps + t - 1] = T(1);
            ++positions;
        }
    }

    OffsetLoss<T> result;
    result.positions = positions;
    if (positions == 0) {
        result.loss = Tensor<T>::scalar(T(0));
        result.nll_sum = Tensor<T>::scalar(T(0));
        result.all_masked = true;
        return result;
    }

    auto logp = log_softmax(project_logits(outputs, projection));
    auto nll = scale(pick(logp, ids), T(-1));
    if (label_smoothing > 0.0) {
        const std::size_t v = logp.dim(2);
        auto ones = Tensor<T>::full({v, 1}, T(1) / static_cast<T>(v));
        auto uniform = scale(reshape(matmul(logp, ones), {b_count, steps}), T(-1));
        nll = add(scale(nll, static_cast<T>(1.0 - label_smoothing)), scale(uniform, static_cast<T>(label_smoothing)));
    }
    result.nll_sum = sum(apply_mask(nll, std::move(keep)));
    result.loss = scale(result.nll_sum, T(1) / static_cast<T>(positions));
    return result;
}

template <typename T>
Tensor<T> decoder0_inputs(const Seq2Seq<T> &model, const Batch &batch, const ForwardContext<T> &ctx,
                          const WordDropConfig *word_drop, std::mt19937_64 *word_drop_rng) {
    if (batch.target.cols < 2) throw ContractError("target rows need GO plus at least one token");
    const std::size_t steps = batch.target.cols - 1;
    TokenGrid inputs{{}, batch.target.rows, steps};
    inputs.ids.reserve(inputs.rows * steps);
    for (std::size_t b = 0; b < inputs.rows; ++b)
        for (std::size_t c = 0; c < steps; ++c) inputs.ids.push_back(batch.target.at(b, c));

    const bool drop = ctx.training && word_drop && word_drop->p_drop > 0.0;
    if (drop && !word_drop_rng) throw ContractError("word drop needs an rng stream");
    auto embedded = model.embed(inputs);
    if (drop && word_drop->before_timing) embedded = teaforn::word_drop(embedded, *word_drop, *word_drop_rng);
    auto x = build_inputs<T>(0, embedded, Tensor<T>{}, FeedingMode::direct, Tensor<T>{}, Tensor<T>{}, 1,
                             model.config().max_len);
    if (drop && !word_drop->before_timing) x = teaforn::word_drop(x, *word_drop, *word_drop_rng);
    return x;
}

template <typename T>
Tensor<T> teacher_forcing_loss(const Seq2Seq<T> &model, const Batch &batch, const ForwardContext<T> &ctx,
                               const WordDropConfig *word_drop, std::mt19937_64 *word_drop_rng) {
    auto memory = model.encode(batch.source, ctx);
    auto x = decoder0_inputs(model, batch, ctx, word_drop, word_drop_rng);
    auto o = model.decode(0, x, memory, ctx);
    auto l = decoder_offset_loss(0, o, batch.target, model.output_projection(), model.config().label_smoothing);
    if (l.all_masked) throw ContractError("batch has no scored target positions");
    return l.loss;
}

template <typename T>
StackLoss<T> teaforn_loss(const Seq2Seq<T> &model, const Batch &batch, const StackConfig &stack,
                          const ForwardContext<T> &ctx, const WordDropConfig *word_drop,
                          std::mt19937_64 *word_drop_rng) {
    const auto &config = model.config();
    stack.validate(config.vocab_size);
    if (model.decoder_stacks() < stack.decoder_stacks())
        throw ContractError("model has " + std::to_string(model.decoder_stacks()) + " decoder stacks, N = " +
                            std::to_string(stack.n) + " unshared needs " + std::to_string(stack.decoder_stacks()));
    std::size_t longest = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) longest = std::max(longest, batch.target_length(b));
    if (stack.n > longest)
        throw ContractError("N = " + std::to_string(stack.n) + " exceeds every target length in the batch (max " +
                            std::to_string(longest) + ")");

    StackLoss<T> result;
    result.weights = stack.weights();
    auto memory = model.encode(batch.source, ctx);

    const auto input_table = stack.n > 1 && stack.mode != FeedingMode::direct ? model.input_embedding() : Tensor<T>{};
    MaskTape<T> tape;
    const bool replay = ctx.training && stack.share_weights && stack.reuse_dropout_masks && stack.n > 1;
    for (std::size_t s = 0; s < stack.n; ++s) {
        ForwardContext<T> offset_ctx = ctx;
        if (replay) {
            tape.mode = s == 0 ? MaskTape<T>::Mode::record : MaskTape<T>::Mode::replay;
            tape.cursor = 0;
            offset_ctx.tape = &tape;
        }
        auto x = s == 0 ? decoder0_inputs(model, batch, ctx, word_drop, word_drop_rng)
                        : build_inputs(s, Tensor<T>{}, result.outputs.back(), stack.mode, input_table,
                                       model.output_projection(), stack.top_k, config.max_len);
        auto o = model.decode(stack.stack_for(s), x, memory, offset_ctx);
        auto l = decoder_offset_loss(s, o, batch.target, model.output_projection(), config.label_smoothing);
        result.inputs.push_back(x);
        result.outputs.push_back(o);
        result.offset_losses.push_back(l.loss);
        result.positions.push_back(l.positions);

        if (s == 0) {
            result.total = result.weights[0] == 1.0 ? l.loss : scale(l.loss, static_cast<T>(result.weights[0]));
        } else if (!l.all_masked && result.weights[s] != 0.0) {
            result.total = add(result.total, scale(l.loss, static_cast<T>(result.weights[s])));
        }
    }
    return result;
}

#define TEAFORN_INSTANTIATE(T)                                                                                       \
    template Tensor<T> feed_core(const Tensor<T> &, FeedingMode, const Tensor<T> &, const Tensor<T> &, std::size_t); \
    template Tensor<T> build_inputs(std::size_t, const Tensor<T> &, const Tensor<T> &, FeedingMode,                  \
                                    const Tensor<T> &, const Tensor<T> &, std::size_t, std::size_t);                 \
    template OffsetLoss<T> decoder_offset_loss(std::size_t, const Tensor<T> &, const TokenGrid &, const Tensor<T> &, \
                                               double);                                                              \
    template Tensor<T> decoder0_inputs(const Seq2Seq<T> &, const Batch &, const ForwardContext<T> &,                 \
                                       const WordDropConfig *, std::mt19937_64 *);                                   \
    template Tensor<T> teacher_forcing_loss(const Seq2Seq<T> &, const Batch &, const ForwardContext<T> &,            \
                                            const WordDropConfig *, std::mt19937_64 *);                              \
    template StackLoss<T> teaforn_loss(const Seq2Seq<T> &, const Batch &, const StackConfig &,                       \
                                       const ForwardContext<T> &, const WordDropConfig *, std::mt19937_64 *);

TEAFORN_INSTANTIATE(float)
TEAFORN_INSTANTIATE(double)

}  // namespace teaforn
