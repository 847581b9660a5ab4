#pragma once

#include <string>
#include <vector>

#include "moekit/geometry.hpp"

namespace moekit {

/// Planar-free HWC float image, values in [0, 1].
struct Image {
    int w = 0;
    int h = 0;
    int c = 0;
    std::vector<float> data; // h * w * c, row-major

    Image() = default;
    Image(int w_, int h_, int c_, float fill = 0.f)
        : w(w_), h(h_), c(c_), data(static_cast<size_t>(w_) * h_ * c_, fill) {}

    float & at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
    float at(int y, int x, int ch) const { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
};

Image resize_bilinear(const Image & src, int out_w, int out_h);

// Exact block-mean downsample; out dims must divide the input dims.
Image downsample_mean(const Image & src, int out_w, int out_h);

struct SplitResult {
    Image global_image;                       // full padded canvas at sub_res
    std::vector<std::pair<int, int>> coords;  // (row, col) of each real sub-image
    std::vector<Image> real_subimages;        // aligned with coords
};

// Scale, zero-pad and divide per the plan. Only Real slots are materialized.
SplitResult pad_and_split(const Image & image, const PartitionPlan & plan);

// Binary PPM (P6), 8-bit, 3 channels.
void write_ppm(const std::string & path, const Image & img);
Image read_ppm(const std::string & path);

} // namespace moekit
