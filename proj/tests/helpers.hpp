#pragma once

#include <filesystem>
#include <fstream>

#include "attnstyle/backbone.hpp"
#include "attnstyle/image.hpp"

namespace testutil {
using namespace attnstyle;

// Small toy network: enough layers for last-6 selection to be meaningful but
// cheap enough for gradient checks.
inline BackboneDescriptor tiny_desc(uint64_t seed = 1) {
    BackboneDescriptor d;
    d.kind = BackboneDescriptor::Kind::Toy;
    d.seed = seed;
    d.t_max = 100;
    d.codec_factor = 2;
    d.select_last = 2;
    d.arch.n_layers = 8;
    d.arch.d_model = 16;
    d.arch.heads = 2;
    d.arch.d_mlp = 32;
    d.arch.latent_channels = 4;
    return d;
}

inline BackboneDescriptor default_desc(uint64_t seed = 1) {
    BackboneDescriptor d;
    d.kind = BackboneDescriptor::Kind::Toy;
    d.seed = seed;
    return d;
}

inline Image noise_image(int h, int w, uint64_t seed, int c = 3) {
    Image img;
    img.h = h;
    img.w = w;
    img.c = c;
    img.pixels.resize(size_t(h) * w * c);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(0, 255);
    for (auto& p : img.pixels) p = uint8_t(d(rng));
    return img;
}

// Smooth two-tone ramp; a stand-in for natural-image structure.
inline Image gradient_image(int h, int w) {
    Image img;
    img.h = h;
    img.w = w;
    img.c = 3;
    img.pixels.resize(size_t(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            img.at(y, x, 0) = uint8_t(255 * x / std::max(1, w - 1));
            img.at(y, x, 1) = uint8_t(255 * y / std::max(1, h - 1));
            img.at(y, x, 2) = uint8_t(128);
        }
    return img;
}

inline std::string tmp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "attnstyle_tests";
    std::filesystem::create_directories(dir);
    return dir.string();
}

inline std::string write_text(const std::string& name, const std::string& text) {
    std::string path = tmp_dir() + "/" + name;
    std::ofstream out(path);
    out << text;
    return path;
}

inline std::string tiny_descriptor_file(const std::string& name = "tiny_backbone.json",
                                        uint64_t seed = 1) {
    return write_text(name, R"({"kind":"toy","seed":)" + std::to_string(seed) +
                                R"(,"t_max":100,"codec_factor":2,"select_last":2,)"
                                R"("d_model":16,"heads":2,"layers":8,"d_mlp":32})");
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace testutil
