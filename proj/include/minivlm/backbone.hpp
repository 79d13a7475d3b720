#pragma once

#include "minivlm/config.hpp"
#include "minivlm/rng.hpp"
#include "minivlm/tape.hpp"
#include "minivlm/trace.hpp"

#include <string>
#include <vector>

namespace minivlm {

// Weights of one pre-norm residual block:
//   x + Wo . attn(rms(x))  then  + W2 . act(W1 . rms(.))
struct BlockWeights {
    Parameter wq, wk, wv, wo;            // d x d
    Parameter attn_gain, ffn_gain;       // 1 x d RMS-norm gains
    Parameter w1, w2;                    // d x ffn, ffn x d

    static BlockWeights init(const std::string& prefix, int d, int d_ffn, Rng& rng);
    std::vector<Parameter*> parameters();
    void zero_all();  // degenerate block for passthrough checks
};

// One decoder block forward. `visible(i, j)` gates attention of target i on
// source j. If `head_attn` is non-null, per-head attention matrices (with
// exact zeros at masked entries) are appended.
Var decoder_block(Tape& tape, BlockWeights& w, Var x, const BoolMat& visible, int n_heads,
                  Nonlin nl, std::vector<Mat>* head_attn = nullptr);

// Toy vision encoder: patch embedding + learned grid positions + a stack of
// bidirectional blocks + final norm. Stands in for a pretrained encoder; the
// compression/pre-fusion mechanics do not depend on its weights.
struct ToyViT {
    Parameter patch_w;  // (patch^2 * channels) x d_vit
    Parameter patch_b;  // 1 x d_vit
    Parameter pos;      // N^2 x d_vit
    std::vector<BlockWeights> blocks;
    Parameter final_gain;
    int patch_size = 0;
    int patch_grid = 0;
    int channels = 0;
    int n_heads = 1;
    Nonlin nl = Nonlin::Silu;

    static ToyViT init(const ModelConfig& cfg, Rng& rng);
    std::vector<Parameter*> parameters();

    // Image rows -> N^2 x (patch^2 * channels), patches row-major over the grid.
    Mat patchify(const Image& img) const;
    Var encode(Tape& tape, const Image& img);
};

// Toy decoder-only LM over continuous token representations. Callers embed
// text themselves (embed() below); llm_forward consumes the assembled matrix.
struct ToyLLM {
    Parameter tok_embed;  // vocab x d
    Parameter pos_embed;  // max_seq_len x d
    std::vector<BlockWeights> blocks;
    Parameter final_gain;
    Parameter lm_head;  // d x vocab
    int n_heads = 1;
    Nonlin nl = Nonlin::Silu;

    static ToyLLM init(const ModelConfig& cfg, Rng& rng);
    std::vector<Parameter*> parameters();

    Var embed(Tape& tape, const std::vector<int>& ids);
};

struct LLMResult {
    Var logits;  // L x vocab
    AttentionTrace trace;
};

// Causal forward over the assembled sequence. When `drop` names layer l, all
// vision-span source positions are masked out of attention at layer l only.
// With `record`, per-head attention and per-layer inputs go into the trace.
LLMResult llm_forward(Tape& tape, ToyLLM& llm, Var tokens, const TokenLayout& layout, bool record,
                      const DropSpec* drop = nullptr);

}  // namespace minivlm
