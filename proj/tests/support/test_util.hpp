#pragma once

#include "minivlm/model.hpp"
#include "minivlm/rng.hpp"

namespace testutil {

// Small full model used where test speed matters more than capacity.
inline minivlm::ModelConfig micro_config(int n = 2, int c = 1, int fusion = 1) {
    minivlm::ModelConfig cfg;
    cfg.d_h = 16;
    cfg.n_llm_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ffn = 32;
    cfg.vocab_size = 24;
    cfg.max_seq_len = 96;
    cfg.d_vit = 12;
    cfg.n_vit_layers = 1;
    cfg.n_vit_heads = 2;
    cfg.d_vit_ffn = 24;
    cfg.patch_size = 4;
    cfg.patch_grid = n;
    cfg.compression_grid = c;
    cfg.n_fusion_layers = fusion;
    return cfg;
}

inline minivlm::Image random_image(minivlm::Rng& rng, int side, int channels = 3) {
    minivlm::Image img(side, side, channels);
    for (double& v : img.data) v = rng.uniform();
    return img;
}

inline double max_abs_diff(const minivlm::Mat& a, const minivlm::Mat& b) {
    return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace testutil
