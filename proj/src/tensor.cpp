#include "conceptforge/tensor.hpp"

#include <algorithm>
#include <numeric>

#include "conceptforge/error.hpp"

namespace conceptforge {

Matrix::Matrix(int r, int c, double fill)
    : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {
    require(r >= 0 && c >= 0, "matrix dimensions must be non-negative");
}

Matrix::Matrix(int r, int c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != static_cast<std::size_t>(r) * static_cast<std::size_t>(c)) {
        throw ShapeMismatch("matrix value count does not match " + std::to_string(r) + "x" + std::to_string(c));
    }
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

std::size_t MaskGrid::count() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](std::uint8_t v) { return v != 0; }));
}

MaskGrid mask_union(std::span<const MaskGrid> masks) {
    require(!masks.empty(), "mask union of an empty set");
    MaskGrid out(masks.front().side);
    for (const auto& m : masks) {
        if (m.side != out.side) throw ShapeMismatch("mask union over differing sides");
        for (std::size_t i = 0; i < out.cells.size(); ++i) out.cells[i] |= m.cells[i] ? 1 : 0;
    }
    return out;
}

double mask_iou(const MaskGrid& a, const MaskGrid& b) {
    if (a.side != b.side) throw ShapeMismatch("IoU over differing mask sides");
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
        const bool x = a.cells[i] != 0;
        const bool y = b.cells[i] != 0;
        inter += (x && y) ? 1 : 0;
        uni += (x || y) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MaskGrid resample_mask(const MaskGrid& mask, int target_side) {
    require(mask.side >= 1 && target_side >= 1, "mask sides must be positive");
    if (target_side == mask.side) return mask;
    MaskGrid out(target_side);
    if (mask.side > target_side && mask.side % target_side == 0) {
        const int f = mask.side / target_side;
        for (int r = 0; r < target_side; ++r) {
            for (int c = 0; c < target_side; ++c) {
                int set = 0;
                for (int dr = 0; dr < f; ++dr)
                    for (int dc = 0; dc < f; ++dc) set += mask.at(r * f + dr, c * f + dc) ? 1 : 0;
                out.set(r, c, 2 * set > f * f);
            }
        }
        return out;
    }
    for (int r = 0; r < target_side; ++r) {
        const int sr = std::min(mask.side - 1, static_cast<int>((r + 0.5) * mask.side / target_side));
        for (int c = 0; c < target_side; ++c) {
            const int sc = std::min(mask.side - 1, static_cast<int>((c + 0.5) * mask.side / target_side));
            out.set(r, c, mask.at(sr, sc));
        }
    }
    return out;
}

Image crop(const Image& image, int x, int y, int w, int h) {
    require(w > 0 && h > 0 && x >= 0 && y >= 0 && x + w <= image.width && y + h <= image.height,
            "crop box outside image bounds");
    Image out(w, h);
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx)
            for (int c = 0; c < 3; ++c) out.at(xx, yy, c) = image.at(x + xx, y + yy, c);
    return out;
}

}  // namespace conceptforge
