#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmfl/tensor.hpp"

namespace mmfl {

// Planar RGB image, values in [0,1], layout (3, H, W).
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(3) * h * w, 0.0f) {}

    float& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

Image read_image(const std::string& path);               // PNG or JPEG, by magic bytes
void write_png(const std::string& path, const Image& img);
void write_jpeg(const std::string& path, const Image& img, int quality = 90);

// Scale the longest edge to `target` preserving aspect ratio, then pad the
// short edge symmetrically with `fill` to a target x target square.
Image pad_resize(const Image& img, int target, const std::array<float, 3>& fill = {});

// Crop the axis-aligned box (x, y, w, h), clamped to the image bounds.
Image crop(const Image& img, int x, int y, int w, int h);

struct AugmentConfig {
    double flip_prob = 0.5;
    double rotate_prob = 0.5;
    double rotate_degrees = 10.0;     // uniform in [-d, d]
    double crop_prob = 0.5;
    double crop_min_scale = 0.8;      // center crop keeps [min,1] of each edge
    double jitter_prob = 0.5;
    double jitter_strength = 0.2;     // brightness/contrast/saturation range
    std::array<float, 3> fill{};      // out-of-frame value for rotation
};

// Horizontal flip -> rotation -> center crop -> color jitter, each gated by
// its probability. Pure function of (image, config, seed).
Image augment(const Image& img, const AugmentConfig& cfg, std::uint64_t seed);

// Image <-> tensor bridges, CHW <-> (B,3,H,W) rows.
void copy_into_batch(const Image& img, Tensor& batch, int row);
Image image_from_batch(const Tensor& batch, int row);

}  // namespace mmfl
