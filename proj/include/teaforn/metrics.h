#pragma once

// Corpus metrics over token ids. Scores are on a 0..100 scale.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "teaforn/tokens.h"

namespace teaforn {

using Sequence = std::vector<TokenId>;

struct CorpusScore {
    std::string metric;
    double value = 0.0;
    std::vector<double> precisions;  // BLEU: clipped n-gram precisions, n = 1..max_n
    double brevity_penalty = 1.0;
    std::size_t candidate_length = 0;
    std::size_t reference_length = 0;
    double precision = 0.0;  // ROUGE: mean over pairs, 0..1
    double recall = 0.0;
    double f_measure = 0.0;
    std::size_t sentences = 0;
};

struct BleuOptions {
    std::size_t max_n = 4;
    // Add one to numerator and denominator of precisions for n >= 2.
    bool add_one_smoothing = false;
};

CorpusScore bleu(std::span<const Sequence> candidates, std::span<const Sequence> references,
                 const BleuOptions &options = {});

struct RougeScores {
    CorpusScore rouge1, rouge2, rouge_l;
};

RougeScores rouge(std::span<const Sequence> candidates, std::span<const Sequence> references);

// Positionwise matches over the shorter sequence divided by the longer
// length, averaged over pairs. Two empty sequences count as a full match.
double token_accuracy(std::span<const Sequence> candidates, std::span<const Sequence> references);

// Drops GO/PAD and truncates at the first EOS.
Sequence strip_special(std::span<const TokenId> tokens);

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b);

}  // namespace teaforn
