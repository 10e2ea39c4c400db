#pragma once

// A stack of N decoders along a secondary time
// axis. Decoder 0 reads groundtruth embeddings; decoder s > 0 reads the
// outputs of decoder s-1 (through a feeding mode) and predicts the target
// shifted by s positions. The training loss is sum_s w_s * L_s.

#include <cstddef>
#include <random>
#include <string_view>
#include <vector>

#include "teaforn/data.h"
#include "teaforn/tensor.h"
#include "teaforn/transformer.h"
#include "teaforn/word_drop.h"

namespace teaforn {

enum class FeedingMode {
    direct,        // x_s = o_{s-1}
    argmax_embed,  // x_s = E[argmax(W o_{s-1})]
    top_k_expect,  // x_s = E^T softmax(top_k(W o_{s-1}))
};

std::string_view to_string(FeedingMode mode);
// Accepts "direct", "argmax", "argmax_embed", "topk", "top_k_expect".
FeedingMode parse_feeding_mode(std::string_view name);

struct StackConfig {
    std::size_t n = 1;
    double lambda = 1.0;
    bool share_weights = true;
    FeedingMode mode = FeedingMode::direct;
    std::size_t top_k = 1;
    // With shared weights, replay decoder 0's dropout masks in every offset
    // instead of drawing fresh ones.
    bool reuse_dropout_masks = false;
    // Replaces lambda^s when non-empty; must hold n entries.
    std::vector<double> weight_override;

    void validate(std::size_t vocab_size) const;
    std::size_t decoder_stacks() const { return share_weights ? 1 : n; }
    std::vector<double> weights() const;
    // Decoder parameter set used by offset s.
    std::size_t stack_for(std::size_t offset) const { return share_weights ? 0 : offset; }
};

// w_s = lambda^s for s in [0, n).
std::vector<double> discount_weights(std::size_t n, double lambda);

// Feeding-mode core applied to decoder outputs [..., D]. `embedding` is the
// table groundtruth inputs are read from (Seq2Seq::input_embedding()).
template <typename T>
Tensor<T> feed_core(const Tensor<T> &previous_outputs, FeedingMode mode, const Tensor<T> &embedding,
                    const Tensor<T> &projection, std::size_t top_k);

// x_s^(t) = timing_signal(t + s) + core(t) for t = 1..T, shape [B, T, D].
// Offset 0 needs `groundtruth` (embeddings e_gt^(t-1)); offsets > 0 need
// `previous_outputs` (o_{s-1}). Undefined tensors stand for absent operands.
template <typename T>
Tensor<T> build_inputs(std::size_t offset, const Tensor<T> &groundtruth, const Tensor<T> &previous_outputs,
                       FeedingMode mode, const Tensor<T> &embedding, const Tensor<T> &projection, std::size_t top_k,
                       std::size_t max_len);

template <typename T>
struct OffsetLoss {
    Tensor<T> loss;     // mean NLL over scored positions
    Tensor<T> nll_sum;  // summed NLL over the same positions
    std::size_t positions = 0;
    bool all_masked = false;
};

// L_s: position t of `outputs` [B, T, D] is scored against target[b][t + s]
// (target rows start with GO). Positions with t + s beyond the row's last
// real token are masked out.
template <typename T>
OffsetLoss<T> decoder_offset_loss(std::size_t offset, const Tensor<T> &outputs, const TokenGrid &target,
                                  const Tensor<T> &projection, double label_smoothing = 0.0);

template <typename T>
struct StackLoss {
    Tensor<T> total;
    std::vector<Tensor<T>> offset_losses;
    std::vector<std::size_t> positions;
    std::vector<double> weights;
    std::vector<Tensor<T>> inputs;   // x_s, [B, T, D]
    std::vector<Tensor<T>> outputs;  // o_s, [B, T, D]
};

// x_0: timing signal plus groundtruth embeddings of GO y_1 .. y_{T-1}, with
// word drop applied when configured and training.
template <typename T>
Tensor<T> decoder0_inputs(const Seq2Seq<T> &model, const Batch &batch, const ForwardContext<T> &ctx,
                             const WordDropConfig *word_drop, std::mt19937_64 *word_drop_rng);

template <typename T>
StackLoss<T> teaforn_loss(const Seq2Seq<T> &model, const Batch &batch, const StackConfig &stack,
                          const ForwardContext<T> &ctx, const WordDropConfig *word_drop = nullptr,
                          std::mt19937_64 *word_drop_rng = nullptr);

// Plain teacher forcing through decoder 0.
template <typename T>
Tensor<T> teacher_forcing_loss(const Seq2Seq<T> &model, const Batch &batch, const ForwardContext<T> &ctx,
                               const WordDropConfig *word_drop = nullptr, std::mt19937_64 *word_drop_rng = nullptr);

}  // namespace teaforn
