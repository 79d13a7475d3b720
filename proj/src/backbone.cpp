#include "minivlm/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace minivlm {

BlockWeights BlockWeights::init(const std::string& prefix, int d, int d_ffn, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    const double sf = 1.0 / std::sqrt(static_cast<double>(d_ffn));
    BlockWeights b;
    b.wq = Parameter(prefix + ".wq", rng.normal_mat(d, d, s));
    b.wk = Parameter(prefix + ".wk", rng.normal_mat(d, d, s));
    b.wv = Parameter(prefix + ".wv", rng.normal_mat(d, d, s));
    b.wo = Parameter(prefix + ".wo", rng.normal_mat(d, d, s));
    b.attn_gain = Parameter(prefix + ".attn_gain", Mat::Ones(1, d));
    b.ffn_gain = Parameter(prefix + ".ffn_gain", Mat::Ones(1, d));
    b.w1 = Parameter(prefix + ".w1", rng.normal_mat(d, d_ffn, s));
    b.w2 = Parameter(prefix + ".w2", rng.normal_mat(d_ffn, d, sf));
    return b;
}

std::vector<Parameter*> BlockWeights::parameters() {
    return {&wq, &wk, &wv, &wo, &attn_gain, &ffn_gain, &w1, &w2};
}

void BlockWeights::zero_all() {
    for (Parameter* p : parameters()) p->value.setZero();
}

Var decoder_block(Tape& tape, BlockWeights& w, Var x, const BoolMat& visible, int n_heads,
                  Nonlin nl, std::vector<Mat>* head_attn) {
    const Eigen::Index d = x.cols();
    if (w.wq.value.rows() != d) {
        throw std::invalid_argument("decoder_block: input width " + std::to_string(x.cols()) +
                                    " does not match block width " +
                                    std::to_string(w.wq.value.rows()));
    }
    if (d % n_heads != 0) throw std::invalid_argument("decoder_block: d not divisible by heads");
    const Eigen::Index dk = d / n_heads;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

    Var normed = rms_norm(x, tape.param(w.attn_gain));
    Var q = matmul(normed, tape.param(w.wq));
    Var k = matmul(normed, tape.param(w.wk));
    Var v = matmul(normed, tape.param(w.wv));

    std::vector<Var> head_outs;
    head_outs.reserve(static_cast<size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Var qh = slice_cols(q, h * dk, dk);
        Var kh = slice_cols(k, h * dk, dk);
        Var vh = slice_cols(v, h * dk, dk);
        Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
        Var attn = softmax_rows(scores, visible);
        if (head_attn != nullptr) head_attn->push_back(attn.value());
        head_outs.push_back(matmul(attn, vh));
    }
    Var attn_out = matmul(n_heads == 1 ? head_outs[0] : concat_cols(head_outs), tape.param(w.wo));
    Var h1 = add(x, attn_out);

    Var ffn_in = rms_norm(h1, tape.param(w.ffn_gain));
    Var ffn = matmul(activation(matmul(ffn_in, tape.param(w.w1)), nl), tape.param(w.w2));
    return add(h1, ffn);
}

ToyViT ToyViT::init(const ModelConfig& cfg, Rng& rng) {
    ToyViT v;
    v.patch_size = cfg.patch_size;
    v.patch_grid = cfg.patch_grid;
    v.channels = cfg.image_channels;
    v.n_heads = cfg.n_vit_heads;
    v.nl = cfg.nonlinearity;
    const int pdim = cfg.patch_size * cfg.patch_size * cfg.image_channels;
    const double s = 1.0 / std::sqrt(static_cast<double>(pdim));
    v.patch_w = Parameter("vit.patch_w", rng.normal_mat(pdim, cfg.d_vit, s));
    v.patch_b = Parameter("vit.patch_b", Mat::Zero(1, cfg.d_vit));
    v.pos = Parameter("vit.pos", rng.normal_mat(cfg.vision_tokens(), cfg.d_vit,
                                                 1.0 / std::sqrt(cfg.d_vit)));
    for (int i = 0; i < cfg.n_vit_layers; ++i) {
        v.blocks.push_back(
            BlockWeights::init("vit.blocks." + std::to_string(i), cfg.d_vit, cfg.d_vit_ffn, rng));
    }
    v.final_gain = Parameter("vit.final_gain", Mat::Ones(1, cfg.d_vit));
    return v;
}

std::vector<Parameter*> ToyViT::parameters() {
    std::vector<Parameter*> ps = {&patch_w, &patch_b, &pos};
    for (BlockWeights& b : blocks) {
        for (Parameter* p : b.parameters()) ps.push_back(p);
    }
    ps.push_back(&final_gain);
    return ps;
}

Mat ToyViT::patchify(const Image& img) const {
    const int side = patch_grid * patch_size;
    if (img.height != side || img.width != side || img.channels != channels) {
        throw std::invalid_argument("patchify: image " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width) + "x" + std::to_string(img.channels) +
                                    " does not match patch grid " + std::to_string(patch_grid) +
                                    " of size " + std::to_string(patch_size));
    }
    const int pdim = patch_size * patch_size * channels;
    Mat out(patch_grid * patch_grid, pdim);
    for (int pr = 0; pr < patch_grid; ++pr) {
        for (int pc = 0; pc < patch_grid; ++pc) {
            Eigen::Index col = 0;
            for (int y = 0; y < patch_size; ++y) {
                for (int x = 0; x < patch_size; ++x) {
                    for (int c = 0; c < channels; ++c) {
                        out(pr * patch_grid + pc, col++) =
                            img.at(pr * patch_size + y, pc * patch_size + x, c);
                    }
                }
            }
        }
    }
    return out;
}

Var ToyViT::encode(Tape& tape, const Image& img) {
    Var patches = tape.constant(patchify(img));
    Var x = add_row_broadcast(matmul(patches, tape.param(patch_w)), tape.param(patch_b));
    x = add(x, tape.param(pos));
    const BoolMat all = BoolMat::Constant(x.rows(), x.rows(), true);
    for (BlockWeights& b : blocks) x = decoder_block(tape, b, x, all, n_heads, nl);
    return rms_norm(x, tape.param(final_gain));
}

ToyLLM ToyLLM::init(const ModelConfig& cfg, Rng& rng) {
    ToyLLM m;
    m.n_heads = cfg.n_heads;
    m.nl = cfg.nonlinearity;
    const double s = 1.0 / std::sqrt(static_cast<double>(cfg.d_h));
    m.tok_embed = Parameter("llm.tok_embed", rng.normal_mat(cfg.vocab_size, cfg.d_h, s));
    m.pos_embed = Parameter("llm.pos_embed", rng.normal_mat(cfg.max_seq_len, cfg.d_h, s));
    for (int i = 0; i < cfg.n_llm_layers; ++i) {
        m.blocks.push_back(
            BlockWeights::init("llm.blocks." + std::to_string(i), cfg.d_h, cfg.d_ffn, rng));
    }
    m.final_gain = Parameter("llm.final_gain", Mat::Ones(1, cfg.d_h));
    m.lm_head = Parameter("llm.lm_head", rng.normal_mat(cfg.d_h, cfg.vocab_size, s));
    return m;
}

std::vector<Parameter*> ToyLLM::parameters() {
    std::vector<Parameter*> ps = {&tok_embed, &pos_embed};
    for (BlockWeights& b : blocks) {
        for (Parameter* p : b.parameters()) ps.push_back(p);
    }
    ps.push_back(&final_gain);
    ps.push_back(&lm_head);
    return ps;
}

Var ToyLLM::embed(Tape& tape, const std::vector<int>& ids) {
    return embedding_rows(tape.param(tok_embed), ids);
}

LLMResult llm_forward(Tape& tape, ToyLLM& llm, Var tokens, const TokenLayout& layout, bool record,
                      const DropSpec* drop) {
    layout.validate();
    const int len = static_cast<int>(tokens.rows());
    if (layout.total() != len) {
        throw std::invalid_argument("llm_forward: layout covers " + std::to_string(layout.total()) +
                                    " tokens but sequence has " + std::to_string(len));
    }
    if (len > llm.pos_embed.value.rows()) {
        throw std::invalid_argument("llm_forward: sequence length " + std::to_string(len) +
                                    " exceeds max_seq_len " +
                                    std::to_string(llm.pos_embed.value.rows()));
    }
    const int n_layers = static_cast<int>(llm.blocks.size());
    if (drop != nullptr) {
        for (int l : *drop) {
            if (l < 0 || l >= n_layers) {
                throw std::out_of_range("llm_forward: drop layer " + std::to_string(l) +
                                        " outside [0, " + std::to_string(n_layers) + ")");
            }
        }
    }

    Var x = add(tokens, slice_rows(tape.param(llm.pos_embed), 0, len));

    const BoolMat plain = causal_mask(len);
    const BoolMat dropped = (drop != nullptr && !drop->empty())
                                ? causal_mask_drop_vision(len, layout)
                                : BoolMat();

    LLMResult res;
    res.trace.layout = layout;
    for (int l = 0; l < n_layers; ++l) {
        const bool drop_here = drop != nullptr && drop->count(l) > 0;
        if (record) res.trace.layer_inputs.push_back(x.value());
        std::vector<Mat> heads;
        Var y = decoder_block(tape, llm.blocks[static_cast<size_t>(l)], x,
                              drop_here ? dropped : plain, llm.n_heads, llm.nl,
                              record ? &heads : nullptr);
        if (record) res.trace.layers.push_back(LayerAttention{std::move(heads)});
        x = y;
    }
    Var normed = rms_norm(x, tape.param(llm.final_gain));
    res.logits = matmul(normed, tape.param(llm.lm_head));
    return res;
}

}  // namespace minivlm
