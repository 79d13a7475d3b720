#include "minivlm/compression.hpp"

#include "minivlm/posenc.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace minivlm {

CompressionState CompressionState::init(int c_grid, int d_h, Rng& rng) {
    CompressionState s;
    s.grid_c = c_grid;
    s.queries = Parameter("compression.queries",
                          rng.normal_mat(c_grid * c_grid, d_h, 1.0 / std::sqrt(d_h)));
    return s;
}

CompressResult compress_query(Tape& tape, CompressionState& state, Var h_v,
                              const std::vector<Coord>& token_coords,
                              const std::vector<Coord>& query_coords) {
    if (h_v.rows() < 1) throw std::invalid_argument("compress_query: empty vision tokens");
    if (static_cast<Eigen::Index>(token_coords.size()) != h_v.rows()) {
        throw std::invalid_argument("compress_query: " + std::to_string(token_coords.size()) +
                                    " token coords for " + std::to_string(h_v.rows()) + " tokens");
    }
    Var q = tape.param(state.queries);
    if (static_cast<Eigen::Index>(query_coords.size()) != q.rows()) {
        throw std::invalid_argument("compress_query: " + std::to_string(query_coords.size()) +
                                    " query coords for " + std::to_string(q.rows()) + " queries");
    }
    const int d = static_cast<int>(h_v.cols());
    Var q_pe = q, h_pe = h_v;
    if (state.use_pe) {
        q_pe = add(q, tape.constant(posenc_2d(query_coords, d)));
        h_pe = add(h_v, tape.constant(posenc_2d(token_coords, d)));
    }
    Var logits = matmul(q_pe, transpose(h_pe));
    if (state.use_scale) logits = scale(logits, 1.0 / std::sqrt(static_cast<double>(d)));
    CompressResult res;
    res.attention = softmax_rows(logits);
    res.compressed = matmul(res.attention, h_v);
    return res;
}

Mat avgpool_matrix(int n, int c_grid) {
    if (c_grid < 1 || n % c_grid != 0) {
        throw std::invalid_argument("avgpool_matrix: C=" + std::to_string(c_grid) +
                                    " must divide N=" + std::to_string(n));
    }
    const int block = n / c_grid;
    const double w = 1.0 / static_cast<double>(block * block);
    Mat p = Mat::Zero(c_grid * c_grid, n * n);
    for (int r = 0; r < c_grid; ++r) {
        for (int c = 0; c < c_grid; ++c) {
            for (int y = 0; y < block; ++y) {
                for (int x = 0; x < block; ++x) {
                    p(r * c_grid + c, (r * block + y) * n + (c * block + x)) = w;
                }
            }
        }
    }
    return p;
}

Mat compress_avgpool(const Mat& h_v, int c_grid) {
    const int n = static_cast<int>(std::lround(std::sqrt(static_cast<double>(h_v.rows()))));
    if (static_cast<Eigen::Index>(n) * n != h_v.rows()) {
        throw std::invalid_argument("compress_avgpool: " + std::to_string(h_v.rows()) +
                                    " rows is not a square token grid");
    }
    return avgpool_matrix(n, c_grid) * h_v;
}

void write_attention_csv(const std::string& path, const Mat& attention) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os << "query";
    for (Eigen::Index j = 0; j < attention.cols(); ++j) os << ",src" << j;
    os << "\n";
    char buf[32];
    for (Eigen::Index i = 0; i < attention.rows(); ++i) {
        os << i;
        for (Eigen::Index j = 0; j < attention.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.12g", attention(i, j));
            os << "," << buf;
        }
        os << "\n";
    }
}

}  // namespace minivlm
