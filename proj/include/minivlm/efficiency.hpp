#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace minivlm {

// Transformer stack shape for analytic counting. ffn_matmuls is 2 for a plain
// MLP (up/down) and 3 for gated (SwiGLU-family) FFNs.
struct TransformerShape {
    int layers = 0;
    int width = 0;
    int ffn = 0;
    int ffn_matmuls = 2;
};

// Full-scale architecture description for the cost model. Token counts are
// stored explicitly and validated against published shapes, not derived.
struct ArchPreset {
    std::string name;

    TransformerShape vit;
    int vit_tokens_per_pass = 0;  // includes the class token when present
    int vit_patch = 0;
    int vit_channels = 3;
    bool vit_has_cls = true;
    int vision_passes_per_image = 1;

    std::vector<int> projector_widths;   // e.g. {1024, 4096, 4096}
    int projector_tokens_per_image = 0;  // patch tokens entering the projector

    TransformerShape llm;
    int llm_vocab = 0;

    int prefusion_layers = 0;            // 0 = no pre-fusion stage
    int compression_c = 0;               // 0 = no compression stage
    int compression_source_tokens = 0;   // vision tokens the queries attend to, per image
    int prefusion_source_tokens = 0;     // vision rows entering pre-fusion, per image
    int vision_tokens_to_llm = 0;        // vision tokens in the LLM input, per image

    void validate() const;
    static ArchPreset from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

ArchPreset preset_by_name(const std::string& name);  // throws on unknown name
std::vector<std::string> preset_names();

// Exact FLOP counts (f64-free integer arithmetic). Convention, documented in
// the report: one multiply-accumulate = 2 FLOPs; per token and layer a block
// costs 2*(4*d^2 + ffn_matmuls*d*d_ffn) plus attention score/value products
// 2*2*L*d at sequence length L; prefill counting (each token processed once);
// the LM head is counted at every position.
struct FlopsReport {
    std::string preset;
    int n_images = 1;
    int l_q = 0;
    uint64_t vision_encoder = 0;
    uint64_t projection = 0;
    uint64_t compression = 0;
    uint64_t prefusion = 0;
    uint64_t llm = 0;
    uint64_t total = 0;

    double tflops(uint64_t flops) const { return static_cast<double>(flops) * 1e-12; }
    nlohmann::ordered_json to_json() const;
    std::string table() const;  // aligned text, one column per component
};

// C and n_fusion <= 0 mean "use the preset's values". n_images counts encoder
// passes of independent images (video frames for mini presets).
FlopsReport estimate_flops(const ArchPreset& preset, int n_images, int l_q, int c_override = 0,
                           int n_fusion_override = -1);

// 100 * (1 - b/a); a.total must be positive.
double estimate_reduction(const FlopsReport& a, const FlopsReport& b);

struct MemoryReport {
    uint64_t per_token_bytes = 0;  // 2 (K and V) * layers * width * element size
    uint64_t n_tokens = 0;
    uint64_t total_bytes = 0;

    nlohmann::ordered_json to_json() const;
};

MemoryReport estimate_kv_memory(const ArchPreset& preset, uint64_t n_tokens,
                                int bytes_per_element = 2);

// Principal-term parameter count of everything the preset describes.
uint64_t parameter_count(const ArchPreset& preset);

// Frames whose C^2-token KV caches fit in budget_bytes after reserving the
// model weights (parameter_count * bytes_per_element). Throws if the budget
// does not cover the reserve.
uint64_t frames_within_budget(const ArchPreset& preset, uint64_t budget_bytes, int c_override = 0,
                              int bytes_per_element = 2, bool reserve_weights = true);

}  // namespace minivlm
