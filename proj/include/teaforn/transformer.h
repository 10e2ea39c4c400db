#pragma once

// Encoder-decoder Transformer (post-norm) with tied or untied output
// projection. A model owns one encoder, one vocabulary embedding table and
// one or more decoder parameter sets ("stacks"); only stack 0 is used at
// inference time.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "teaforn/tensor.h"
#include "teaforn/tokens.h"

namespace teaforn {

struct ModelConfig {
    std::size_t vocab_size = 64;
    std::size_t d_model = 64;
    std::size_t d_ff = 256;
    std::size_t heads = 4;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 2;
    double dropout = 0.1;
    std::size_t max_len = 64;
    bool tie_embeddings = true;
    // Applied by the training losses; 0 keeps the loss a pure NLL.
    double label_smoothing = 0.0;

    void validate() const;
    bool operator==(const ModelConfig &) const = default;
};

// "base-like": d_model 64, d_ff 256, 4 heads, dropout 0.1.
// "big-like":  d_model 128, d_ff 512, 8 heads, dropout 0.3.
// Both use 2 encoder and 2 decoder layers.
ModelConfig preset_config(std::string_view name, std::size_t vocab_size, std::size_t max_len = 64);

// Sinusoid for one position: [2i] = sin(p / 10000^(2i/d)), [2i+1] = cos(same).
template <typename T>
std::vector<T> timing_signal(std::size_t position, std::size_t d_model, std::size_t max_len);

// Rows timing_signal(first), ..., timing_signal(first + count - 1) as a [count, d_model] constant.
template <typename T>
Tensor<T> timing_rows(std::size_t first_position, std::size_t count, std::size_t d_model, std::size_t max_len);

template <typename T>
struct LinearParams {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gain;
    Tensor<T> bias;
};

template <typename T>
struct AttentionParams {
    LinearParams<T> query, key, value, output;
};

template <typename T>
struct EncoderLayerParams {
    AttentionParams<T> self_attention;
    LayerNormParams<T> attention_norm;
    LinearParams<T> ffn_inner, ffn_outer;
    LayerNormParams<T> ffn_norm;
};

template <typename T>
struct DecoderLayerParams {
    AttentionParams<T> self_attention;
    LayerNormParams<T> self_norm;
    AttentionParams<T> cross_attention;
    LayerNormParams<T> cross_norm;
    LinearParams<T> ffn_inner, ffn_outer;
    LayerNormParams<T> ffn_norm;
};

template <typename T>
struct DecoderParams {
    std::vector<DecoderLayerParams<T>> layers;
};

template <typename T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

// Dropout masks drawn during a forward pass. In record mode every mask is
// appended; in replay mode masks are consumed in the order they were recorded.
template <typename T>
struct MaskTape {
    enum class Mode { record, replay };
    Mode mode = Mode::record;
    std::vector<std::vector<T>> masks;
    std::size_t cursor = 0;
};

template <typename T>
struct ForwardContext {
    bool training = false;
    std::mt19937_64 *rng = nullptr;
    MaskTape<T> *tape = nullptr;

    // Applies inverted dropout with probability p when training.
    Tensor<T> dropout(const Tensor<T> &x, double p) const;
};

template <typename T>
struct EncoderMemory {
    Tensor<T> states;                  // [B, Ts, D]
    std::vector<std::uint8_t> source_keep;  // [B * Ts], 1 on real tokens
    std::size_t batch = 0;
    std::size_t length = 0;
};

// keep[q * len + k] = (k <= q).
std::vector<std::uint8_t> causal_mask(std::size_t len);

template <typename T>
class Seq2Seq {
   public:
    Seq2Seq(const ModelConfig &config, std::size_t decoder_stacks, std::uint64_t seed);

    const ModelConfig &config() const { return config_; }
    std::size_t decoder_stacks() const { return decoders_.size(); }

    // Token embeddings scaled by sqrt(d_model), [B, T, D], no timing signal.
    Tensor<T> embed(const TokenGrid &tokens) const;
    // The table embed() reads rows from: sqrt(d_model) * E.
    Tensor<T> input_embedding() const;
    T input_scale() const;

    Tensor<T> timing(std::size_t first_position, std::size_t count) const;

    EncoderMemory<T> encode(const TokenGrid &source, const ForwardContext<T> &ctx) const;

    // inputs: [B, T, D] with the timing signal already added.
    // self_keep: [T * T] lower-triangular decoder self-attention mask.
    Tensor<T> decode(std::size_t stack, const Tensor<T> &inputs, const EncoderMemory<T> &memory,
                     std::span<const std::uint8_t> self_keep, const ForwardContext<T> &ctx) const;
    Tensor<T> decode(std::size_t stack, const Tensor<T> &inputs, const EncoderMemory<T> &memory,
                     const ForwardContext<T> &ctx) const;

    // logits = o * W^T, [..., V].
    Tensor<T> project_logits(const Tensor<T> &outputs) const;

    const Tensor<T> &embedding() const { return embedding_; }
    const Tensor<T> &output_projection() const { return projection_; }
    DecoderParams<T> &decoder(std::size_t stack) { return decoders_.at(stack); }
    const DecoderParams<T> &decoder(std::size_t stack) const { return decoders_.at(stack); }

    // Unique parameters in a stable order. Tied tensors appear once.
    std::vector<NamedTensor<T>> parameters() const;
    // Parameters of decoder stack s (its layers only).
    std::vector<NamedTensor<T>> decoder_parameters(std::size_t stack) const;
    std::size_t parameter_count() const;
    void zero_grad();

   private:
    ModelConfig config_;
    Tensor<T> embedding_;
    Tensor<T> projection_;
    std::vector<EncoderLayerParams<T>> encoder_;
    std::vector<DecoderParams<T>> decoders_;
};

// Standalone output projection: logits = o * W^T.
template <typename T>
Tensor<T> project_logits(const Tensor<T> &outputs, const Tensor<T> &projection);

}  // namespace teaforn
