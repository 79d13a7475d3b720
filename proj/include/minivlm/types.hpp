#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace minivlm {

// All numerics are row-major f64 so serialized buffers match in-memory layout.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BoolMat = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Nonlin { Gelu, Silu };
enum class VideoPooling { Mean, Max };

// Dense H x W x C image, values in [0, 1], row-major (y, x, channel).
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, int c)
        : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, 0.0) {}

    double& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
};

// (y, x) coordinate in a token grid; fractional values are allowed so that
// compression queries can sit between token centers.
struct Coord {
    double y = 0.0;
    double x = 0.0;
};

}  // namespace minivlm
