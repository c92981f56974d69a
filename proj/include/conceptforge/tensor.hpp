#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace conceptforge {

/// Dense row-major matrix of doubles. Square matrices double as 2-D maps.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0);
    Matrix(int r, int c, std::vector<double> values);

    double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    std::span<double> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
    std::span<const double> row(int r) const {
        return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }

    std::size_t size() const { return data.size(); }
    bool square() const { return rows == cols; }
    int side() const { return rows; }

    static Matrix identity(int n);

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Boolean grid at some square resolution; cells hold 0 or 1.
struct MaskGrid {
    int side = 0;
    std::vector<std::uint8_t> cells;

    MaskGrid() = default;
    explicit MaskGrid(int s) : side(s), cells(static_cast<std::size_t>(s) * s, 0) {}

    bool at(int r, int c) const { return cells[static_cast<std::size_t>(r) * side + c] != 0; }
    void set(int r, int c, bool v) { cells[static_cast<std::size_t>(r) * side + c] = v ? 1 : 0; }
    std::size_t count() const;
    bool empty() const { return count() == 0; }

    friend bool operator==(const MaskGrid&, const MaskGrid&) = default;
};

MaskGrid mask_union(std::span<const MaskGrid> masks);
double mask_iou(const MaskGrid& a, const MaskGrid& b);

/// Resample a mask. Integer downsampling uses area-majority vote (a coarse cell
/// is set iff more than half of its fine cells are set); upsampling and
/// non-integer factors use nearest-neighbour lookup.
MaskGrid resample_mask(const MaskGrid& mask, int target_side);

/// RGB image, HWC layout, channel values in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0.0f) {}

    float& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int x, int y, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    friend bool operator==(const Image&, const Image&) = default;
};

Image crop(const Image& image, int x, int y, int w, int h);

/// Latent tensor, position-major: value(p, c) = values[p * channels + c],
/// p = row * side + col.
struct Latent {
    int side = 0;
    int channels = 0;
    std::vector<double> values;

    Latent() = default;
    Latent(int s, int c, double fill = 0.0)
        : side(s), channels(c), values(static_cast<std::size_t>(s) * s * c, fill) {}

    int positions() const { return side * side; }
    double& operator()(int p, int c) { return values[static_cast<std::size_t>(p) * channels + c]; }
    double operator()(int p, int c) const { return values[static_cast<std::size_t>(p) * channels + c]; }

    friend bool operator==(const Latent&, const Latent&) = default;
};

}  // namespace conceptforge
