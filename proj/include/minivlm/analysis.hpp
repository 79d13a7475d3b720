#pragma once

#include "minivlm/model.hpp"
#include "minivlm/trace.hpp"

#include <array>
#include <string>
#include <vector>

namespace minivlm {

constexpr int kNumSpanTypes = 3;  // instruction, vision, response

inline int span_type_index(SpanType t) { return static_cast<int>(t); }
SpanType span_type_from_index(int i);

// Per-layer average attention from tgt_type tokens to src_type tokens:
// numerator sums head-averaged weights over all (tgt, src) token pairs,
// denominator counts tgt tokens with positive mass on that source type.
// Cells with a zero denominator are reported absent, not divided.
struct TypeAttention {
    std::array<std::array<double, kNumSpanTypes>, kNumSpanTypes> value{};  // [tgt][src]
    std::array<std::array<bool, kNumSpanTypes>, kNumSpanTypes> present{};
};

std::vector<TypeAttention> aggregate_attention(const AttentionTrace& trace);

// Per-layer, per-source-type Shannon entropy (nats): each target token's row
// is restricted to that type's positions, renormalized to sum 1, and the
// entropies are averaged over target tokens with positive mass on the type.
struct TypeEntropy {
    std::array<double, kNumSpanTypes> value{};  // [src]
    std::array<bool, kNumSpanTypes> present{};
};

std::vector<TypeEntropy> attention_entropy(const AttentionTrace& trace);

// CSV schemas: (layer, tgt_type, src_type, value) and (layer, src_type, value).
// Values are means over the given per-pass results; absent cells are skipped.
void write_attention_by_type_csv(const std::string& path,
                                 const std::vector<std::vector<TypeAttention>>& per_pass);
void write_entropy_csv(const std::string& path,
                       const std::vector<std::vector<TypeEntropy>>& per_pass);

// Half-open layer window [start, end); start == end means no layers dropped.
struct LayerWindow {
    int start = 0;
    int end = 0;

    DropSpec to_drop_spec() const;
    bool empty() const { return start == end; }
};

struct SyntheticSample;  // training.hpp

struct DropSweepRow {
    LayerWindow window;
    double accuracy = 0.0;
};

// Evaluates single-token answer accuracy of the baseline path under each
// vision-drop window. Windows outside the layer range are an error.
std::vector<DropSweepRow> run_drop_sweep(MiniModel& model,
                                         const std::vector<SyntheticSample>& dataset,
                                         const std::vector<LayerWindow>& windows);

void write_drop_sweep_csv(const std::string& path, const std::vector<DropSweepRow>& rows);

// Accuracy of greedy single-token answers on the given path (no drop).
double answer_accuracy(MiniModel& model, PathKind path,
                       const std::vector<SyntheticSample>& dataset,
                       const DropSpec* drop = nullptr);

}  // namespace minivlm
