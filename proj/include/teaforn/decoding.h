#pragma once

// Inference with Decoder-0 only. Prefixes are re-run through the decoder at
// every step (no key/value cache).

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "teaforn/tokens.h"
#include "teaforn/transformer.h"

namespace teaforn {

struct Hypothesis {
    std::vector<TokenId> tokens;  // after GO; ends with EOS when finished
    double log_prob = 0.0;
    bool finished = false;
};

struct DecodeOptions {
    // 0 selects 2 * source length + 8, capped so timing positions stay below max_len.
    std::size_t max_steps = 0;
    // GNMT-style exponent for ranking finished hypotheses: score = log_prob / ((5 + len) / 6)^alpha.
    double length_penalty = 0.0;
};

std::size_t resolve_max_steps(const ModelConfig &config, std::size_t source_length, std::size_t requested);

// Ranking score under the options' length penalty.
double hypothesis_score(const Hypothesis &h, double length_penalty);

// Log-probabilities [prefixes.size() x V] of the token following GO + prefix.
// All prefixes of one call have equal length.
using NextTokenFn = std::function<std::vector<double>(const std::vector<std::vector<TokenId>> &prefixes)>;

// Model-independent search over a next-token distribution.
Hypothesis greedy_search(const NextTokenFn &next, std::size_t vocab_size, std::size_t max_steps);
std::vector<Hypothesis> beam_search(const NextTokenFn &next, std::size_t vocab_size, std::size_t k,
                                    std::size_t max_steps, double length_penalty = 0.0);

template <typename T>
Hypothesis greedy_decode(const Seq2Seq<T> &model, std::span<const TokenId> source, const DecodeOptions &options = {});

// Returns up to k hypotheses: finished ones by descending score, then (only if
// fewer than k finished) unfinished ones by descending score.
template <typename T>
std::vector<Hypothesis> beam_search(const Seq2Seq<T> &model, std::span<const TokenId> source, std::size_t k,
                                    const DecodeOptions &options = {});

// Teacher-forced sum of log P(tokens[i] | GO, tokens[0..i)).
template <typename T>
double score_sequence(const Seq2Seq<T> &model, std::span<const TokenId> source, std::span<const TokenId> tokens);

}  // namespace teaforn
