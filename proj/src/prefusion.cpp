#include "minivlm/prefusion.hpp"

#include <stdexcept>

namespace minivlm {

PrefusionStack PrefusionStack::init(const ModelConfig& cfg, Rng& rng) {
    PrefusionStack s;
    s.n_heads = cfg.n_heads;
    s.nl = cfg.nonlinearity;
    for (int i = 0; i < cfg.n_fusion_layers; ++i) {
        s.blocks.push_back(
            BlockWeights::init("prefusion.blocks." + std::to_string(i), cfg.d_h, cfg.d_ffn, rng));
    }
    return s;
}

std::vector<Parameter*> PrefusionStack::parameters() {
    std::vector<Parameter*> ps;
    for (BlockWeights& b : blocks) {
        for (Parameter* p : b.parameters()) ps.push_back(p);
    }
    return ps;
}

Var prefuse(Tape& tape, PrefusionStack& stack, Var h_v_all, Var h_q) {
    const Eigen::Index l_q = h_q.rows();
    if (l_q < 1) throw std::invalid_argument("prefuse: zero text tokens");
    if (h_v_all.cols() != h_q.cols()) {
        throw std::invalid_argument("prefuse: width mismatch, vision " +
                                    std::to_string(h_v_all.cols()) + " vs text " +
                                    std::to_string(h_q.cols()));
    }
    Var x = concat_rows({h_v_all, h_q});
    const BoolMat mask = causal_mask(static_cast<int>(x.rows()));
    for (BlockWeights& b : stack.blocks) {
        x = decoder_block(tape, b, x, mask, stack.n_heads, stack.nl);
    }
    return slice_rows(x, x.rows() - l_q, l_q);
}

}  // namespace minivlm
