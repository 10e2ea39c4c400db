#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace teaforn {

using TokenId = std::int32_t;

// Reserved ids. The layout is part of the checkpoint and vocabulary formats.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kGo = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kFirstWordId = 4;

// Row-major [rows x cols] token matrix; kPad marks padding.
struct TokenGrid {
    std::vector<TokenId> ids;
    std::size_t rows = 0;
    std::size_t cols = 0;

    TokenId at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
};

}  // namespace teaforn
