#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace fever {

// Which two of the three images in a triplet were annotated as most similar.
// Codes follow the 1-based positions: 12, 13, 23.
enum class SimilarPair : std::uint8_t { p12 = 0, p13 = 1, p23 = 2 };

inline int pair_code(SimilarPair p) {
    static constexpr std::array<int, 3> codes{12, 13, 23};
    return codes.at(static_cast<std::size_t>(p));
}

inline SimilarPair pair_from_code(int code) {
    switch (code) {
        case 12: return SimilarPair::p12;
        case 13: return SimilarPair::p13;
        case 23: return SimilarPair::p23;
        default: throw std::invalid_argument("invalid similar-pair code " + std::to_string(code));
    }
}

// 0-based positions (first, second, odd one out) within the triplet.
inline std::array<std::size_t, 3> pair_positions(SimilarPair p) {
    switch (p) {
        case SimilarPair::p12: return {0, 1, 2};
        case SimilarPair::p13: return {0, 2, 1};
        case SimilarPair::p23: return {1, 2, 0};
    }
    throw std::invalid_argument("invalid similar-pair value " + std::to_string(static_cast<int>(p)));
}

}  // namespace fever
