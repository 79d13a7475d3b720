#include "minivlm/posenc.hpp"

#include <cmath>
#include <stdexcept>

namespace minivlm {

Mat posenc_2d(const std::vector<Coord>& coords, int d_h) {
    if (d_h <= 0 || d_h % 4 != 0) {
        throw std::invalid_argument("posenc_2d: d_h must be a positive multiple of 4, got " +
                                    std::to_string(d_h));
    }
    const int quarter = d_h / 4;
    const Eigen::Index rows = static_cast<Eigen::Index>(coords.size());
    Mat pe(rows, d_h);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const Coord& c = coords[static_cast<size_t>(i)];
        for (int k = 0; k < quarter; ++k) {
            const double omega = std::pow(10000.0, -4.0 * k / d_h);
            pe(i, 2 * k) = std::sin(c.y * omega);
            pe(i, 2 * k + 1) = std::cos(c.y * omega);
            pe(i, d_h / 2 + 2 * k) = std::sin(c.x * omega);
            pe(i, d_h / 2 + 2 * k + 1) = std::cos(c.x * omega);
        }
    }
    return pe;
}

std::vector<Coord> grid_coords(int n) {
    if (n < 1) throw std::invalid_argument("grid_coords: n must be >= 1, got " + std::to_string(n));
    std::vector<Coord> coords;
    coords.reserve(static_cast<size_t>(n) * n);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) coords.push_back({static_cast<double>(r), static_cast<double>(c)});
    return coords;
}

std::vector<Coord> align_query_coords(int c_grid, int n) {
    if (c_grid < 1 || c_grid > n) {
        throw std::invalid_argument("align_query_coords: need 1 <= C <= N, got C=" +
                                    std::to_string(c_grid) + " N=" + std::to_string(n));
    }
    const double step = static_cast<double>(n) / c_grid;
    std::vector<Coord> coords;
    coords.reserve(static_cast<size_t>(c_grid) * c_grid);
    for (int r = 0; r < c_grid; ++r) {
        for (int c = 0; c < c_grid; ++c) {
            coords.push_back({(r + 0.5) * step - 0.5, (c + 0.5) * step - 0.5});
        }
    }
    return coords;
}

}  // namespace minivlm
