#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attnstyle/attention.hpp"
#include "attnstyle/tensor.hpp"

namespace attnstyle {

// 8-bit interleaved image, c in {1, 3}.
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<uint8_t> pixels;

    uint8_t at(int y, int x, int ch) const {
        return pixels[(static_cast<size_t>(y) * w + x) * c + ch];
    }
    uint8_t& at(int y, int x, int ch) {
        return pixels[(static_cast<size_t>(y) * w + x) * c + ch];
    }
};

// Supported formats: PNG (.png) and PNM (.ppm/.pgm), chosen by extension.
// Both are lossless; saving embeds `seed`, when given, as metadata (a PNG
// tEXt chunk or a PNM comment).
Image load_image(const std::string& path);
void save_image(const Image& img, const std::string& path,
                std::optional<uint64_t> seed = std::nullopt);
std::optional<uint64_t> read_image_seed(const std::string& path);

// Loads a segmentation map: each distinct pixel value is one label. Grayscale
// and paletted images map pixel values/indices straight to labels; RGB images
// use the packed 24-bit color. No interpolation anywhere.
LabelMap load_labels(const std::string& path);

// [-1,1] planar CHW <-> 8-bit interleaved.
Tensor image_to_chw(const Image& img);
Image chw_to_image(const Tensor& chw);

}  // namespace attnstyle
