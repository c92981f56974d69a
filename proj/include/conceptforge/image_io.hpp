#pragma once

#include <filesystem>

#include "conceptforge/tensor.hpp"

namespace conceptforge {

/// 8-bit RGB PNG. Grayscale and alpha inputs are converted to RGB on read.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

/// Nearest-neighbour upsample of a mask to width x height, white on black.
Image mask_to_image(const MaskGrid& mask, int width, int height);

/// Grayscale heatmap of a square map, min-max scaled, nearest-neighbour upsampled.
Image map_to_heatmap(const Matrix& map, int width, int height);

}  // namespace conceptforge
