#include "attnstyle/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace attnstyle {

namespace {

constexpr const char* kSeedKey = "attnstyle-seed";

std::string lower_ext(const std::string& path) {
    auto dot = path.find_last_of('.');
    if (dot == std::string::npos) return "";
    std::string ext = path.substr(dot + 1);
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    return ext;
}

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

struct PngRead {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngRead() { png_destroy_read_struct(&png, &info, nullptr); }
};
struct PngWrite {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWrite() { png_destroy_write_struct(&png, &info); }
};

// raw=true keeps palette indices and 16->8 untouched for label maps.
Image load_png(const std::string& path, bool expand_palette,
               std::optional<uint64_t>* seed_out = nullptr) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("cannot open image: " + path);
    PngRead ctx;
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    ctx.info = png_create_info_struct(ctx.png);
    if (setjmp(png_jmpbuf(ctx.png))) throw std::runtime_error("failed to decode PNG: " + path);
    png_init_io(ctx.png, f.get());
    png_read_info(ctx.png, ctx.info);

    png_uint_32 w, h;
    int bit_depth, color_type;
    png_get_IHDR(ctx.png, ctx.info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);

    if (color_type == PNG_COLOR_TYPE_PALETTE && expand_palette) png_set_palette_to_rgb(ctx.png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(ctx.png);
    if (color_type == PNG_COLOR_TYPE_PALETTE && !expand_palette && bit_depth < 8)
        png_set_packing(ctx.png);
    if (bit_depth == 16) png_set_strip_16(ctx.png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(ctx.png);
    png_read_update_info(ctx.png, ctx.info);

    int channels = png_get_channels(ctx.png, ctx.info);
    if (channels != 1 && channels != 3)
        throw std::runtime_error("unsupported PNG channel count " + std::to_string(channels) +
                                 " in " + path);

    Image img;
    img.h = int(h);
    img.w = int(w);
    img.c = channels;
    img.pixels.resize(size_t(h) * w * channels);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = img.pixels.data() + size_t(y) * w * channels;
    png_read_image(ctx.png, rows.data());
    png_read_end(ctx.png, ctx.info);

    if (seed_out) {
        png_textp text = nullptr;
        int n = png_get_text(ctx.png, ctx.info, &text, nullptr);
        for (int i = 0; i < n; ++i)
            if (text[i].key && std::strcmp(text[i].key, kSeedKey) == 0 && text[i].text)
                *seed_out = std::stoull(text[i].text);
    }
    return img;
}

void save_png(const Image& img, const std::string& path, std::optional<uint64_t> seed) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("cannot open image for writing: " + path);
    PngWrite ctx;
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    ctx.info = png_create_info_struct(ctx.png);
    if (setjmp(png_jmpbuf(ctx.png))) throw std::runtime_error("failed to encode PNG: " + path);
    png_init_io(ctx.png, f.get());
    int color = img.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(ctx.png, ctx.info, png_uint_32(img.w), png_uint_32(img.h), 8, color,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    std::string seed_str;
    png_text text;
    if (seed) {
        seed_str = std::to_string(*seed);
        std::memset(&text, 0, sizeof(text));
        text.compression = PNG_TEXT_COMPRESSION_NONE;
        text.key = const_cast<char*>(kSeedKey);
        text.text = seed_str.data();
        text.text_length = seed_str.size();
        png_set_text(ctx.png, ctx.info, &text, 1);
    }
    png_write_info(ctx.png, ctx.info);
    std::vector<png_bytep> rows(size_t(img.h));
    for (int y = 0; y < img.h; ++y)
        rows[size_t(y)] = const_cast<png_bytep>(img.pixels.data() + size_t(y) * img.w * img.c);
    png_write_image(ctx.png, rows.data());
    png_write_end(ctx.png, ctx.info);
}

void skip_pnm_ws(std::istream& is, std::optional<uint64_t>* seed_out) {
    for (;;) {
        int ch = is.peek();
        if (ch == '#') {
            std::string line;
            std::getline(is, line);
            if (seed_out) {
                auto p = line.find(kSeedKey);
                if (p != std::string::npos) {
                    auto eq = line.find('=', p);
                    if (eq != std::string::npos) *seed_out = std::stoull(line.substr(eq + 1));
                }
            }
        } else if (std::isspace(ch)) {
            is.get();
        } else {
            return;
        }
    }
}

Image load_pnm(const std::string& path, std::optional<uint64_t>* seed_out = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open image: " + path);
    std::string magic;
    is >> magic;
    int channels;
    if (magic == "P6")
        channels = 3;
    else if (magic == "P5")
        channels = 1;
    else
        throw std::runtime_error("unsupported PNM magic '" + magic + "' in " + path);
    int w, h, maxval;
    skip_pnm_ws(is, seed_out);
    is >> w;
    skip_pnm_ws(is, seed_out);
    is >> h;
    skip_pnm_ws(is, seed_out);
    is >> maxval;
    if (!is || maxval != 255) throw std::runtime_error("unsupported PNM header in " + path);
    is.get();  // single whitespace before raster
    Image img;
    img.h = h;
    img.w = w;
    img.c = channels;
    img.pixels.resize(size_t(h) * w * channels);
    is.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!is) throw std::runtime_error("truncated PNM raster in " + path);
    return img;
}

void save_pnm(const Image& img, const std::string& path, std::optional<uint64_t> seed) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open image for writing: " + path);
    os << (img.c == 3 ? "P6" : "P5") << "\n";
    if (seed) os << "# " << kSeedKey << "=" << *seed << "\n";
    os << img.w << " " << img.h << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()),
             static_cast<std::streamsize>(img.pixels.size()));
    if (!os) throw std::runtime_error("image write failed: " + path);
}

}  // namespace

Image load_image(const std::string& path) {
    std::string ext = lower_ext(path);
    if (ext == "png") return load_png(path, /*expand_palette=*/true);
    if (ext == "ppm" || ext == "pgm" || ext == "pnm") return load_pnm(path);
    throw std::runtime_error("unsupported image format '." + ext + "' (supported: png, ppm, pgm): " +
                             path);
}

void save_image(const Image& img, const std::string& path, std::optional<uint64_t> seed) {
    if (img.c != 1 && img.c != 3)
        throw std::invalid_argument("save_image: channel count must be 1 or 3");
    std::string ext = lower_ext(path);
    if (ext == "png")
        save_png(img, path, seed);
    else if (ext == "ppm" || ext == "pgm" || ext == "pnm")
        save_pnm(img, path, seed);
    else
        throw std::runtime_error("unsupported image format '." + ext +
                                 "' (supported: png, ppm, pgm): " + path);
}

std::optional<uint64_t> read_image_seed(const std::string& path) {
    std::optional<uint64_t> seed;
    std::string ext = lower_ext(path);
    if (ext == "png")
        load_png(path, true, &seed);
    else if (ext == "ppm" || ext == "pgm" || ext == "pnm")
        load_pnm(path, &seed);
    else
        throw std::runtime_error("unsupported image format '." + ext + "': " + path);
    return seed;
}

LabelMap load_labels(const std::string& path) {
    std::string ext = lower_ext(path);
    Image img;
    if (ext == "png")
        img = load_png(path, /*expand_palette=*/false);  // palette indices are the labels
    else if (ext == "ppm" || ext == "pgm" || ext == "pnm")
        img = load_pnm(path);
    else
        throw std::runtime_error("unsupported label map format '." + ext + "': " + path);
    LabelMap m;
    m.h = img.h;
    m.w = img.w;
    m.labels.resize(size_t(img.h) * img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            int v;
            if (img.c == 1)
                v = img.at(y, x, 0);
            else
                v = (img.at(y, x, 0) << 16) | (img.at(y, x, 1) << 8) | img.at(y, x, 2);
            m.labels[size_t(y) * img.w + x] = v;
        }
    return m;
}

Tensor image_to_chw(const Image& img) {
    if (img.c != 3) throw std::invalid_argument("image_to_chw: expected 3-channel image");
    Tensor t({3, int64_t(img.h), int64_t(img.w)});
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                t[int64_t(ch) * img.h * img.w + int64_t(y) * img.w + x] =
                    double(img.at(y, x, ch)) / 127.5 - 1.0;
    return t;
}

Image chw_to_image(const Tensor& chw) {
    if (chw.rank() != 3 || chw.dim(0) != 3)
        throw std::invalid_argument("chw_to_image: expected [3,H,W]");
    Image img;
    img.h = int(chw.dim(1));
    img.w = int(chw.dim(2));
    img.c = 3;
    img.pixels.resize(size_t(img.h) * img.w * 3);
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                double v = (chw[int64_t(ch) * img.h * img.w + int64_t(y) * img.w + x] + 1.0) * 127.5;
                img.at(y, x, ch) = uint8_t(std::clamp(v, 0.0, 255.0) + 0.5);
            }
    return img;
}

}  // namespace attnstyle
