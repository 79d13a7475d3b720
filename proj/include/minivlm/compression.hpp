#pragma once

#include "minivlm/rng.hpp"
#include "minivlm/tape.hpp"

#include <string>
#include <vector>

namespace minivlm {

// Learnable compression queries plus the flags of the cross-attention form:
//   A = softmax((Q + PE(Q)) . (H + PE(H))^T . s),  compressed = A . H
// with s = 1/sqrt(d_h) when use_scale is set and 1 for the literal form.
struct CompressionState {
    Parameter queries;  // C^2 x d_h
    int grid_c = 1;
    bool use_pe = true;
    bool use_scale = true;

    static CompressionState init(int c_grid, int d_h, Rng& rng);
    std::vector<Parameter*> parameters() { return {&queries}; }
};

struct CompressResult {
    Var compressed;  // C^2 x d_h, rows are convex combinations of vision tokens
    Var attention;   // C^2 x L_v, row-stochastic
};

// Single-head query-based compression with no output projection. Coordinates
// give the grid positions of the vision tokens and the queries for PE.
CompressResult compress_query(Tape& tape, CompressionState& state, Var h_v,
                              const std::vector<Coord>& token_coords,
                              const std::vector<Coord>& query_coords);

// Pooling matrix whose row (r, c) averages the (n/c_grid)^2 block of an
// n x n token grid it covers; c_grid must divide n.
Mat avgpool_matrix(int n, int c_grid);

// Block-mean baseline over an n x n token grid (n inferred from rows).
Mat compress_avgpool(const Mat& h_v, int c_grid);

// Heat-map export: one CSV row per query, one column per source token.
void write_attention_csv(const std::string& path, const Mat& attention);

}  // namespace minivlm
