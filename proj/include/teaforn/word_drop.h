#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "teaforn/tensor.h"

namespace teaforn {

struct WordDropConfig {
    double p_drop = 0.0;
    std::uint64_t seed = 0;
    // Scale surviving rows by 1 / (1 - p_drop), as inverted dropout would.
    bool rescale = false;
    // Drop the token embedding before the timing signal is added; when false
    // the whole decoder input row (position included) is zeroed.
    bool before_timing = true;

    void validate() const;
};

// One keep/drop decision per row, drawn independently with probability p_drop.
std::vector<std::uint8_t> word_drop_rows(std::size_t rows, double p_drop, std::mt19937_64 &rng);

// Zeroes whole rows (last axis) of `embedded`. Rows are [..., T, D] flattened
// over the leading axes.
template <typename T>
Tensor<T> word_drop(const Tensor<T> &embedded, const WordDropConfig &config, std::mt19937_64 &rng);

}  // namespace teaforn
