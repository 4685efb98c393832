#pragma once

#include <cstddef>
#include <string>

namespace fever {

// Channels x height x width of one image.
struct ImageShape {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;

    std::size_t size() const { return channels * height * width; }
    std::string str() const {
        return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
    }
    friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

}  // namespace fever
