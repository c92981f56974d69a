#include "conceptforge/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "conceptforge/error.hpp"

namespace conceptforge {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image read_png(const std::filesystem::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        throw IoError("cannot read PNG '" + path.string() + "': " + img.message);
    }
    img.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&img);
        throw IoError("cannot decode PNG '" + path.string() + "': " + img.message);
    }
    Image out(static_cast<int>(img.width), static_cast<int>(img.height));
    for (std::size_t i = 0; i < buffer.size(); ++i) out.pixels[i] = static_cast<float>(buffer[i]) / 255.0f;
    return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
    require(image.width > 0 && image.height > 0, "cannot write an empty image");
    std::vector<png_byte> buffer(image.pixels.size());
    for (std::size_t i = 0; i < buffer.size(); ++i) {
        const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
        buffer[i] = static_cast<png_byte>(std::lround(v * 255.0f));
    }
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw IoError("cannot open '" + path.string() + "' for writing");
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_stdio(&img, file.get(), 0, buffer.data(), 0, nullptr)) {
        throw IoError("cannot encode PNG '" + path.string() + "': " + img.message);
    }
}

Image mask_to_image(const MaskGrid& mask, int width, int height) {
    Image out(width, height);
    for (int y = 0; y < height; ++y) {
        const int r = std::min(mask.side - 1, y * mask.side / height);
        for (int x = 0; x < width; ++x) {
            const int c = std::min(mask.side - 1, x * mask.side / width);
            const float v = mask.at(r, c) ? 1.0f : 0.0f;
            for (int ch = 0; ch < 3; ++ch) out.at(x, y, ch) = v;
        }
    }
    return out;
}

Image map_to_heatmap(const Matrix& map, int width, int height) {
    require(map.square() && map.rows > 0, "heatmap source must be a non-empty square map");
    const auto [lo, hi] = std::minmax_element(map.data.begin(), map.data.end());
    const double span = *hi - *lo;
    Image out(width, height);
    for (int y = 0; y < height; ++y) {
        const int r = std::min(map.rows - 1, y * map.rows / height);
        for (int x = 0; x < width; ++x) {
            const int c = std::min(map.cols - 1, x * map.cols / width);
            const float v = span > 0 ? static_cast<float>((map(r, c) - *lo) / span) : 0.0f;
            for (int ch = 0; ch < 3; ++ch) out.at(x, y, ch) = v;
        }
    }
    return out;
}

}  // namespace conceptforge
