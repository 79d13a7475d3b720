#include "minivlm/trace.hpp"

#include <stdexcept>

namespace minivlm {

const char* span_type_name(SpanType t) {
    switch (t) {
        case SpanType::Instruction: return "instruction";
        case SpanType::Vision: return "vision";
        case SpanType::Response: return "response";
    }
    return "?";
}

int TokenLayout::total() const {
    int n = 0;
    for (const Span& s : spans) n += s.length;
    return n;
}

void TokenLayout::validate() const {
    int at = 0;
    for (const Span& s : spans) {
        if (s.length < 0) throw std::invalid_argument("TokenLayout: negative span length");
        if (s.start != at) {
            throw std::invalid_argument("TokenLayout: span at " + std::to_string(s.start) +
                                        " leaves a gap or overlap (expected " +
                                        std::to_string(at) + ")");
        }
        at += s.length;
    }
}

std::vector<int> TokenLayout::positions_of(SpanType t) const {
    std::vector<int> out;
    for (const Span& s : spans) {
        if (s.type != t) continue;
        for (int i = 0; i < s.length; ++i) out.push_back(s.start + i);
    }
    return out;
}

bool TokenLayout::has(SpanType t) const {
    for (const Span& s : spans) {
        if (s.type == t && s.length > 0) return true;
    }
    return false;
}

Mat AttentionTrace::head_mean(int layer) const {
    const LayerAttention& la = layers[static_cast<size_t>(layer)];
    if (la.heads.empty()) throw std::runtime_error("AttentionTrace: layer has no heads");
    Mat m = la.heads[0];
    for (size_t h = 1; h < la.heads.size(); ++h) m += la.heads[h];
    return m / static_cast<double>(la.heads.size());
}

BoolMat causal_mask(int len) {
    BoolMat m(len, len);
    for (int i = 0; i < len; ++i)
        for (int j = 0; j < len; ++j) m(i, j) = j <= i;
    return m;
}

BoolMat causal_mask_drop_vision(int len, const TokenLayout& layout) {
    BoolMat m = causal_mask(len);
    for (int j : layout.positions_of(SpanType::Vision)) {
        for (int i = 0; i < len; ++i) m(i, j) = false;
    }
    return m;
}

}  // namespace minivlm
