#pragma once

#include "minivlm/types.hpp"

#include <set>
#include <string>
#include <vector>

namespace minivlm {

enum class SpanType { Instruction, Vision, Response };

const char* span_type_name(SpanType t);

struct Span {
    SpanType type;
    int start = 0;
    int length = 0;
};

// Ordered typed spans over an LLM input sequence. Spans must be contiguous,
// non-overlapping and cover [0, total).
struct TokenLayout {
    std::vector<Span> spans;

    int total() const;
    void validate() const;
    std::vector<int> positions_of(SpanType t) const;
    bool has(SpanType t) const;
};

// Layers at which all vision-span source positions are masked out of
// attention (token positions are preserved, only visibility changes).
using DropSpec = std::set<int>;

struct LayerAttention {
    std::vector<Mat> heads;  // per head, target x source with exact zeros where masked
};

// Per-layer, per-head attention recorded during one forward pass, plus the
// states entering each layer (used by layer-wise ablation checks).
struct AttentionTrace {
    std::vector<LayerAttention> layers;
    TokenLayout layout;
    std::vector<Mat> layer_inputs;

    bool empty() const { return layers.empty(); }
    // Head-averaged attention at one layer.
    Mat head_mean(int layer) const;
};

// Visibility masks: entry (i, j) says whether target i may attend source j.
BoolMat causal_mask(int len);
// Causal visibility with every vision-span source position hidden.
BoolMat causal_mask_drop_vision(int len, const TokenLayout& layout);

}  // namespace minivlm
