#include "teaforn/transformer.h"

#include <cmath>
#include <unordered_set>

#include "teaforn/errors.h"

namespace teaforn {

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || d_ff < 1 || heads < 1 || encoder_layers < 1 || decoder_layers < 1 ||
        max_len < 1) {
        throw ParameterError("model config: sizes must be positive");
    }
    if (d_model % heads != 0) {
        throw ParameterError("model config: d_model " + std::to_string(d_model) + " not divisible by heads " +
                             std::to_string(heads));
    }
    if (dropout < 0.0 || dropout > 1.0) throw ParameterError("model config: dropout outside [0, 1]");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
        throw ParameterError("model config: label_smoothing outside [0, 1)");
    }
}

ModelConfig preset_config(std::string_view name, std::size_t vocab_size, std::size_t max_len) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.max_len = max_len;
    if (name == "base-like") {
        c.d_model = 64;
        c.d_ff = 256;
        c.heads = 4;
        c.dropout = 0.1;
    } else if (name == "big-like") {
        c.d_model = 128;
        c.d_ff = 512;
        c.heads = 8;
        c.dropout = 0.3;
    } else {
        throw ParameterError("unknown preset '" + std::string(name) + "'");
    }
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.validate();
    return c;
}

template <typename T>
std::vector<T> timing_signal(std::size_t position, std::size_t d_model, std::size_t max_len) {
    if (position >= max_len) {
        throw IndexError("timing_signal: position " + std::to_string(position) + " >= max_len " +
                         std::to_string(max_len));
    }
    std::vector<T> out(d_model);
    for (std::size_t i = 0; 2 * i < d_model; ++i) {
        const double angle =
            static_cast<double>(position) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
        out[2 * i] = static_cast<T>(std::sin(angle));
        if (2 * i + 1 < d_model) out[2 * i + 1] = static_cast<T>(std::cos(angle));
    }
    return out;
}

template <typename T>
Tensor<T> timing_rows(std::size_t first_position, std::size_t count, std::size_t d_model, std::size_t max_len) {
    std::vector<T> values;
    values.reserve(count * d_model);
    for (std::size_t i = 0; i < count; ++i) {
        auto row = timing_signal<T>(first_position + i, d_model, max_len);
        values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor<T>::from({count, d_model}, std::move(values));
}

std::vector<std::uint8_t> causal_mask(std::size_t len) {
    std::vector<std::uint8_t> keep(len * len, 0);
    for (std::size_t q = 0; q < len; ++q)
        for (std::size_t k = 0; k <= q; ++k) keep[q * len + k] = 1;
    return keep;
}

template <typename T>
Tensor<T> ForwardContext<T>::dropout(const Tensor<T> &x, double p) const {
    if (!training || p <= 0.0) return x;
    if (tape && tape->mode == MaskTape<T>::Mode::replay) {
        if (tape->cursor >= tape->masks.size() || tape->masks[tape->cursor].size() != x.numel()) {
            throw ContractError("dropout replay: recorded masks do not match this forward pass");
        }
        return apply_mask(x, tape->masks[tape->cursor++]);
    }
    if (!rng) throw ContractError("dropout in training mode needs a random generator");
    auto mask = dropout_mask<T>(x.numel(), p, *rng);
    if (tape) tape->masks.push_back(mask);
    return apply_mask(x, std::move(mask));
}

namespace {

template <typename T>
Tensor<T> xavier(std::size_t in, std::size_t out, std::mt19937_64 &rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<T> v(in * out);
    for (auto &x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>::from({in, out}, std::move(v), true);
}

template <typename T>
LinearParams<T> make_linear(std::size_t in, std::size_t out, std::mt19937_64 &rng) {
    return {xavier<T>(in, out, rng), Tensor<T>::zeros({out}, true)};
}

template <typename T>
LayerNormParams<T> make_norm(std::size_t d) {
    return {Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true)};
}

template <typename T>
AttentionParams<T> make_attention(std::size_t d, std::mt19937_64 &rng) {
    AttentionParams<T> p;
    p.query = make_linear<T>(d, d, rng);
    p.key = make_linear<T>(d, d, rng);
    p.value = make_linear<T>(d, d, rng);
    p.output = make_linear<T>(d, d, rng);
    return p;
}

template <typename T>
Tensor<T> embedding_table(std::size_t v, std::size_t d, std::mt19937_64 &rng) {
    // Small enough that logits start near uniform (initial loss close to ln V).
    std::normal_distribution<double> dist(0.0, 0.5 / std::sqrt(static_cast<double>(d)));
    std::vector<T> values(v * d);
    for (auto &x : values) x = static_cast<T>(dist(rng));
    return Tensor<T>::from({v, d}, std::move(values), true);
}

template <typename T>
Tensor<T> linear(const Tensor<T> &x, const LinearParams<T> &p) {
    return add(matmul(x, p.weight), p.bias);
}

template <typename T>
Tensor<T> norm(const Tensor<T> &x, const LayerNormParams<T> &p) {
    return layer_norm(x, p.gain, p.bias);
}

// [B, T, D] -> [B, h, T, D/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T> &x, std::size_t heads) {
    const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
    return swap_axes(reshape(x, {b, t, heads, d / heads}), 1, 2);
}

// [B, h, T, dk] -> [B, T, h * dk]
template <typename T>
Tensor<T> merge_heads(const Tensor<T> &x) {
    const std::size_t b = x.dim(0), h = x.dim(1), t = x.dim(2), dk = x.dim(3);
    return reshape(swap_axes(x, 1, 2), {b, t, h * dk});
}

// keep(b, q, k) expanded over heads to [B, h, Tq, Tk].
template <typename KeepFn>
std::vector<std::uint8_t> expand_mask(std::size_t batch, std::size_t heads, std::size_t tq, std::size_t tk, KeepFn keep) {
    std::vector<std::uint8_t> out(batch * heads * tq * tk);
    std::size_t i = 0;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t q = 0; q < tq; ++q)
                for (std::size_t k = 0; k < tk; ++k) out[i++] = keep(b, q, k);
    return out;
}

template <typename T>
Tensor<T> attend(const AttentionParams<T> &p, const Tensor<T> &query_in, const Tensor<T> &memory_in,
                 std::span<const std::uint8_t> keep, std::size_t heads, double dropout, const ForwardContext<T> &ctx) {
    const std::size_t dk = query_in.dim(2) / heads;
    auto q = split_heads(linear(query_in, p.query), heads);
    auto k = split_heads(linear(memory_in, p.key), heads);
    auto v = split_heads(linear(memory_in, p.value), heads);
    auto scores = scale(matmul(q, k, Transpose::yes), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
    auto weights = ctx.dropout(softmax(masked_fill(scores, keep)), dropout);
    return linear(merge_heads(matmul(weights, v)), p.output);
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T> &x, const LinearParams<T> &inner, const LinearParams<T> &outer, double dropout,
                       const ForwardContext<T> &ctx) {
    return linear(ctx.dropout(relu(linear(x, inner)), dropout), outer);
}

template <typename T>
void visit_linear(const std::string &prefix, const LinearParams<T> &p, std::vector<NamedTensor<T>> &out) {
    out.emplace_back(prefix + ".weight", p.weight);
    out.emplace_back(prefix + ".bias", p.bias);
}

template <typename T>
void visit_norm(const std::string &prefix, const LayerNormParams<T> &p, std::vector<NamedTensor<T>> &out) {
    out.emplace_back(prefix + ".gain", p.gain);
    out.emplace_back(prefix + ".bias", p.bias);
}

template <typename T>
void visit_attention(const std::string &prefix, const AttentionParams<T> &p, std::vector<NamedTensor<T>> &out) {
    visit_linear(prefix + ".query", p.query, out);
    visit_linear(prefix + ".key", p.key, out);
    visit_linear(prefix + ".value", p.value, out);
    visit_linear(prefix + ".output", p.output, out);
}

template <typename T>
void visit_decoder(const std::string &prefix, const DecoderParams<T> &d, std::vector<NamedTensor<T>> &out) {
    for (std::size_t l = 0; l < d.layers.size(); ++l) {
        const auto &layer = d.layers[l];
        const std::string p = prefix + ".layer" + std::to_string(l);
        visit_attention(p + ".self_attention", layer.self_attention, out);
        visit_norm(p + ".self_norm", layer.self_norm, out);
        visit_attention(p + ".cross_attention", layer.cross_attention, out);
        visit_norm(p + ".cross_norm", layer.cross_norm, out);
        visit_linear(p + ".ffn_inner", layer.ffn_inner, out);
        visit_linear(p + ".ffn_outer", layer.ffn_outer, out);
        visit_norm(p + ".ffn_norm", layer.ffn_norm, out);
    }
}

}  // namespace

template <typename T>
Seq2Seq<T>::Seq2Seq(const ModelConfig &config, std::size_t decoder_stacks, std::uint64_t seed) : config_(config) {
    config_.validate();
    if (decoder_stacks < 1) throw ParameterError("a model needs at least one decoder stack");
    std::mt19937_64 rng(seed);
    const std::size_t d = config_.d_model;
    embedding_ = embedding_table<T>(config_.vocab_size, d, rng);
    projection_ = config_.tie_embeddings ? embedding_ : embedding_table<T>(config_.vocab_size, d, rng);
    for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
        EncoderLayerParams<T> layer;
        layer.self_attention = make_attention<T>(d, rng);
        layer.attention_norm = make_norm<T>(d);
        layer.ffn_inner = make_linear<T>(d, config_.d_ff, rng);
        layer.ffn_outer = make_linear<T>(config_.d_ff, d, rng);
        layer.ffn_norm = make_norm<T>(d);
        encoder_.push_back(std::move(layer));
    }
    for (std::size_t s = 0; s < decoder_stacks; ++s) {
        DecoderParams<T> dec;
        for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
            DecoderLayerParams<T> layer;
            layer.self_attention = make_attention<T>(d, rng);
            layer.self_norm = make_norm<T>(d);
            layer.cross_attention = make_attention<T>(d, rng);
            layer.cross_norm = make_norm<T>(d);
            layer.ffn_inner = make_linear<T>(d, config_.d_ff, rng);
            layer.ffn_outer = make_linear<T>(config_.d_ff, d, rng);
            layer.ffn_norm = make_norm<T>(d);
            dec.layers.push_back(std::move(layer));
        }
        decoders_.push_back(std::move(dec));
    }
}

template <typename T>
Tensor<T> Seq2Seq<T>::embed(const TokenGrid &tokens) const {
    auto rows = scale(gather_rows(embedding_, std::span<const TokenId>(tokens.ids)), input_scale());
    return reshape(rows, {tokens.rows, tokens.cols, config_.d_model});
}

template <typename T>
Tensor<T> Seq2Seq<T>::input_embedding() const {
    return scale(embedding_, input_scale());
}

template <typename T>
T Seq2Seq<T>::input_scale() const {
    return static_cast<T>(std::sqrt(static_cast<double>(config_.d_model)));
}

template <typename T>
Tensor<T> Seq2Seq<T>::timing(std::size_t first_position, std::size_t count) const {
    return timing_rows<T>(first_position, count, config_.d_model, config_.max_len);
}

template <typename T>
EncoderMemory<T> Seq2Seq<T>::encode(const TokenGrid &source, const ForwardContext<T> &ctx) const {
    if (source.rows == 0 || source.cols == 0) throw ContractError("encode: empty source");
    if (source.cols > config_.max_len) {
        throw ContractError("encode: source length " + std::to_string(source.cols) + " exceeds max_len " +
                            std::to_string(config_.max_len));
    }
    EncoderMemory<T> mem;
    mem.batch = source.rows;
    mem.length = source.cols;
    mem.source_keep.resize(source.ids.size());
    for (std::size_t i = 0; i < source.ids.size(); ++i) mem.source_keep[i] = source.ids[i] != kPad;
    for (std::size_t b = 0; b < source.rows; ++b) {
        bool any = false;
        for (std::size_t t = 0; t < source.cols; ++t) any = any || mem.source_keep[b * source.cols + t];
        if (!any) throw ContractError("encode: source row " + std::to_string(b) + " is empty");
    }

    const double p = config_.dropout;
    auto x = ctx.dropout(add(embed(source), timing(1, source.cols)), p);
    const std::size_t len = source.cols;
    const auto &keep_src = mem.source_keep;
    auto keep = expand_mask(source.rows, config_.heads, len, len,
                            [&](std::size_t b, std::size_t, std::size_t k) { return keep_src[b * len + k]; });
    for (const auto &layer : encoder_) {
        x = norm(add(x, ctx.dropout(attend(layer.self_attention, x, x, keep, config_.heads, p, ctx), p)),
                 layer.attention_norm);
        x = norm(add(x, ctx.dropout(feed_forward(x, layer.ffn_inner, layer.ffn_outer, p, ctx), p)), layer.ffn_norm);
    }
    mem.states = x;
    return mem;
}

template <typename T>
Tensor<T> Seq2Seq<T>::decode(std::size_t stack, const Tensor<T> &inputs, const EncoderMemory<T> &memory,
                             std::span<const std::uint8_t> self_keep, const ForwardContext<T> &ctx) const {
    if (inputs.rank() != 3 || inputs.dim(2) != config_.d_model || inputs.dim(0) != memory.batch) {
        throw DimensionError("decode: inputs " + shape_string(inputs.shape()) + " incompatible with batch " +
                             std::to_string(memory.batch) + " and d_model " + std::to_string(config_.d_model));
    }
    const std::size_t len = inputs.dim(1);
    if (self_keep.size() != len * len) {
        throw ContractError("decode: self-attention mask has " + std::to_string(self_keep.size()) +
                            " entries for " + std::to_string(len) + " positions");
    }
    for (std::size_t q = 0; q < len; ++q)
        for (std::size_t k = q + 1; k < len; ++k)
            if (self_keep[q * len + k]) throw ContractError("decode: self-attention mask is not lower-triangular");

    const auto &dec = decoders_.at(stack);
    const double p = config_.dropout;
    const std::size_t batch = memory.batch, heads = config_.heads, src_len = memory.length;
    auto self_mask = expand_mask(batch, heads, len, len,
                                 [&](std::size_t, std::size_t q, std::size_t k) { return self_keep[q * len + k]; });
    const auto &keep_src = memory.source_keep;
    auto cross_mask = expand_mask(batch, heads, len, src_len,
                                  [&](std::size_t b, std::size_t, std::size_t k) { return keep_src[b * src_len + k]; });

    auto x = ctx.dropout(inputs, p);
    for (const auto &layer : dec.layers) {
        x = norm(add(x, ctx.dropout(attend(layer.self_attention, x, x, self_mask, heads, p, ctx), p)), layer.self_norm);
        x = norm(add(x, ctx.dropout(attend(layer.cross_attention, x, memory.states, cross_mask, heads, p, ctx), p)),
                 layer.cross_norm);
        x = norm(add(x, ctx.dropout(feed_forward(x, layer.ffn_inner, layer.ffn_outer, p, ctx), p)), layer.ffn_norm);
    }
    return x;
}

template <typename T>
Tensor<T> Seq2Seq<T>::decode(std::size_t stack, const Tensor<T> &inputs, const EncoderMemory<T> &memory,
                             const ForwardContext<T> &ctx) const {
    const std::size_t len = inputs.rank() >= 2 ? inputs.dim(1) : 0;
    auto keep = causal_mask(len);
    return decode(stack, inputs, memory, keep, ctx);
}

template <typename T>
Tensor<T> project_logits(const Tensor<T> &outputs, const Tensor<T> &projection) {
    if (projection.rank() != 2 || outputs.rank() < 1 || outputs.shape().back() != projection.dim(1)) {
        throw DimensionError("project_logits: outputs " + shape_string(outputs.shape()) + " vs projection " +
                             shape_string(projection.shape()));
    }
    return matmul(outputs, projection, Transpose::yes);
}

template <typename T>
Tensor<T> Seq2Seq<T>::project_logits(const Tensor<T> &outputs) const {
    return teaforn::project_logits(outputs, projection_);
}

template <typename T>
std::vector<NamedTensor<T>> Seq2Seq<T>::parameters() const {
    std::vector<NamedTensor<T>> out;
    out.emplace_back("embedding", embedding_);
    if (!config_.tie_embeddings) out.emplace_back("output_projection", projection_);
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
        const auto &layer = encoder_[l];
        const std::string p = "encoder.layer" + std::to_string(l);
        visit_attention(p + ".self_attention", layer.self_attention, out);
        visit_norm(p + ".attention_norm", layer.attention_norm, out);
        visit_linear(p + ".ffn_inner", layer.ffn_inner, out);
        visit_linear(p + ".ffn_outer", layer.ffn_outer, out);
        visit_norm(p + ".ffn_norm", layer.ffn_norm, out);
    }
    for (std::size_t s = 0; s < decoders_.size(); ++s) visit_decoder("decoder" + std::to_string(s), decoders_[s], out);
    return out;
}

template <typename T>
std::vector<NamedTensor<T>> Seq2Seq<T>::decoder_parameters(std::size_t stack) const {
    std::vector<NamedTensor<T>> out;
    visit_decoder("decoder" + std::to_string(stack), decoders_.at(stack), out);
    return out;
}

template <typename T>
std::size_t Seq2Seq<T>::parameter_count() const {
    std::unordered_set<const void *> seen;
    std::size_t total = 0;
    for (const auto &[name, t] : parameters()) {
        if (seen.insert(t.storage_id()).second) total += t.numel();
    }
    return total;
}

template <typename T>
void Seq2Seq<T>::zero_grad() {
    for (auto &[name, t] : parameters()) {
        Tensor<T> handle = t;
        handle.zero_grad();
    }
}

template std::vector<float> timing_signal<float>(std::size_t, std::size_t, std::size_t);
template std::vector<double> timing_signal<double>(std::size_t, std::size_t, std::size_t);
template Tensor<float> timing_rows<float>(std::size_t, std::size_t, std::size_t, std::size_t);
template Tensor<double> timing_rows<double>(std::size_t, std::size_t, std::size_t, std::size_t);
template struct ForwardContext<float>;
template struct ForwardContext<double>;
template class Seq2Seq<float>;
template class Seq2Seq<double>;
template Tensor<float> project_logits(const Tensor<float> &, const Tensor<float> &);
template Tensor<double> project_logits(const Tensor<double> &, const Tensor<double> &);

}  // namespace teaforn
