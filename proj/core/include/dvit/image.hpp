#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dvit/errors.hpp"
#include "dvit/tensor.hpp"

namespace dvit {

/// RGB image in f32, values in [0,1], planar CHW layout.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> data;  // 3 * height * width

    Image() = default;
    Image(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(3) * w * h, 0.0f) {}

    float& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

/// Single-channel integer label map (segmentation mask).
struct LabelMap {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;

    LabelMap() = default;
    LabelMap(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

    std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

/// Single-channel float raster (depth map, meters).
struct DepthMap {
    int width = 0;
    int height = 0;
    std::vector<float> data;

    DepthMap() = default;
    DepthMap(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0.0f) {}

    float& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    float at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

// PNG io. Images are written as 8-bit RGB, masks as 8-bit grayscale.
// Readers throw DecodeError naming the file; writers throw IoError.
void write_png_rgb(const std::filesystem::path& path, const Image& img);
Image read_png_rgb(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const LabelMap& mask);
LabelMap read_png_gray(const std::filesystem::path& path);

// Depth raster: 16-byte header (magic "DPTH", u32 version=1, u32 width,
// u32 height, all little-endian) followed by row-major little-endian f32.
void write_depth_raster(const std::filesystem::path& path, const DepthMap& depth);
DepthMap read_depth_raster(const std::filesystem::path& path);

/// Bilinear resize (half-pixel centers, edge clamp). Plain image utility,
/// not part of the autodiff graph.
Image resize_bilinear(const Image& src, int out_w, int out_h);

/// Crop a rectangle; the caller guarantees it lies inside the image.
Image crop(const Image& src, int x0, int y0, int w, int h);

Image flip_horizontal(const Image& src);

/// Stack images (all the same size) into a [B,3,H,W] tensor.
Tensor images_to_tensor(const std::vector<Image>& batch);

}  // namespace dvit
