#pragma once

#include "minivlm/types.hpp"

#include <vector>

namespace minivlm {

// 2D sinusoidal positional encoding over (y, x) coordinates. The first d_h/2
// columns encode y, the last d_h/2 encode x; within each half, columns
// alternate sin/cos of coord * w_k with w_k = 10000^(-4k/d_h), k = 0..d_h/4-1.
// Weight-free and deterministic; d_h must be divisible by 4.
Mat posenc_2d(const std::vector<Coord>& coords, int d_h);

// Integer (y, x) coordinates of an n x n token grid in row-major order.
std::vector<Coord> grid_coords(int n);

// C^2 query coordinates placed at compression-cell centers inside the n x n
// token frame: query cell (r, c) sits at ((r+0.5)*n/c_grid - 0.5, ...), so
// c_grid == n reduces to the token coordinates themselves.
std::vector<Coord> align_query_coords(int c_grid, int n);

}  // namespace minivlm
