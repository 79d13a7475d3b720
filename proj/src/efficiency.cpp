#include "minivlm/efficiency.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace minivlm {

namespace {

uint64_t u(int v) { return static_cast<uint64_t>(v); }

// 2 * MACs of one transformer block, per token, linear parts only.
uint64_t block_linear_flops_per_token(const TransformerShape& s) {
    return 2ull * (4ull * u(s.width) * u(s.width) +
                   u(s.ffn_matmuls) * u(s.width) * u(s.ffn));
}

// Attention score + value products per token at sequence length L.
uint64_t attn_score_flops_per_token(const TransformerShape& s, uint64_t seq_len) {
    return 2ull * 2ull * seq_len * u(s.width);
}

// Whole stack over a sequence processed once (prefill).
uint64_t stack_flops(const TransformerShape& s, uint64_t seq_len) {
    const uint64_t per_token = block_linear_flops_per_token(s) +
                               attn_score_flops_per_token(s, seq_len);
    return u(s.layers) * seq_len * per_token;
}

}  // namespace

void ArchPreset::validate() const {
    auto positive = [this](long long v, const char* key) {
        if (v <= 0) {
            throw std::invalid_argument("preset '" + name + "': " + key + " must be positive");
        }
    };
    positive(llm.layers, "llm.layers");
    positive(llm.width, "llm.width");
    positive(llm.ffn, "llm.ffn");
    positive(llm_vocab, "llm_vocab");
    if (llm.ffn_matmuls != 2 && llm.ffn_matmuls != 3) {
        throw std::invalid_argument("preset '" + name + "': llm.ffn_matmuls must be 2 or 3");
    }
    if (vit.layers > 0) {
        positive(vit.width, "vit.width");
        positive(vit.ffn, "vit.ffn");
        positive(vit_tokens_per_pass, "vit_tokens_per_pass");
        positive(vit_patch, "vit_patch");
        positive(vision_passes_per_image, "vision_passes_per_image");
    }
    if (compression_c > 0) positive(compression_source_tokens, "compression_source_tokens");
    if (prefusion_layers > 0) positive(prefusion_source_tokens, "prefusion_source_tokens");
    if (vision_tokens_to_llm < 0) {
        throw std::invalid_argument("preset '" + name + "': vision_tokens_to_llm must be >= 0");
    }
}

FlopsReport estimate_flops(const ArchPreset& preset, int n_images, int l_q, int c_override,
                           int n_fusion_override) {
    preset.validate();
    if (n_images < 0) throw std::invalid_argument("estimate_flops: n_images must be >= 0");
    if (l_q < 0) throw std::invalid_argument("estimate_flops: l_q must be >= 0");
    const int c = c_override > 0 ? c_override : preset.compression_c;
    const int n_fusion = n_fusion_override >= 0 ? n_fusion_override : preset.prefusion_layers;

    FlopsReport r;
    r.preset = preset.name;
    r.n_images = n_images;
    r.l_q = l_q;

    const uint64_t images = u(n_images);
    if (preset.vit.layers > 0 && n_images > 0) {
        const uint64_t tokens = u(preset.vit_tokens_per_pass);
        const uint64_t patches = tokens - (preset.vit_has_cls ? 1 : 0);
        const uint64_t embed =
            2ull * patches * u(preset.vit_patch) * u(preset.vit_patch) * u(preset.vit_channels) *
            u(preset.vit.width);
        r.vision_encoder =
            images * u(preset.vision_passes_per_image) * (stack_flops(preset.vit, tokens) + embed);
    }
    if (!preset.projector_widths.empty() && n_images > 0) {
        uint64_t per_token = 0;
        for (size_t i = 0; i + 1 < preset.projector_widths.size(); ++i) {
            per_token += 2ull * u(preset.projector_widths[i]) * u(preset.projector_widths[i + 1]);
        }
        r.projection = images * u(preset.projector_tokens_per_image) * per_token;
    }
    if (c > 0 && n_images > 0) {
        // A = (Q+PE)(H+PE)^T and A.H, each C^2 x L x d MACs per image.
        r.compression = images * 4ull * u(c) * u(c) * u(preset.compression_source_tokens) *
                        u(preset.llm.width);
    }
    if (n_fusion > 0 && n_images > 0) {
        TransformerShape pf = preset.llm;
        pf.layers = n_fusion;
        r.prefusion = images * stack_flops(pf, u(preset.prefusion_source_tokens) + u(l_q));
    }
    const uint64_t vision_to_llm =
        c > 0 ? images * u(c) * u(c) : images * u(preset.vision_tokens_to_llm);
    const uint64_t llm_len = vision_to_llm + u(l_q);
    if (llm_len > 0) {
        r.llm = stack_flops(preset.llm, llm_len) +
                2ull * llm_len * u(preset.llm.width) * u(preset.llm_vocab);
    }
    r.total = r.vision_encoder + r.projection + r.compression + r.prefusion + r.llm;
    return r;
}

double estimate_reduction(const FlopsReport& a, const FlopsReport& b) {
    if (a.total == 0) throw std::invalid_argument("estimate_reduction: zero baseline total");
    return 100.0 * (1.0 - static_cast<double>(b.total) / static_cast<double>(a.total));
}

MemoryReport estimate_kv_memory(const ArchPreset& preset, uint64_t n_tokens,
                                int bytes_per_element) {
    if (bytes_per_element <= 0) {
        throw std::invalid_argument("estimate_kv_memory: bytes_per_element must be positive");
    }
    MemoryReport r;
    r.per_token_bytes = 2ull * u(preset.llm.layers) * u(preset.llm.width) * u(bytes_per_element);
    r.n_tokens = n_tokens;
    r.total_bytes = r.per_token_bytes * n_tokens;
    return r;
}

uint64_t parameter_count(const ArchPreset& preset) {
    uint64_t total = 0;
    // LLM: embeddings, blocks (attention + FFN + norms), final norm, LM head.
    total += u(preset.llm_vocab) * u(preset.llm.width);
    total += u(preset.llm.layers) *
             (4ull * u(preset.llm.width) * u(preset.llm.width) +
              u(preset.llm.ffn_matmuls) * u(preset.llm.width) * u(preset.llm.ffn) +
              2ull * u(preset.llm.width));
    total += u(preset.llm.width);
    total += u(preset.llm.width) * u(preset.llm_vocab);
    if (preset.vit.layers > 0) {
        total += u(preset.vit_patch) * u(preset.vit_patch) * u(preset.vit_channels) *
                     u(preset.vit.width) +
                 u(preset.vit.width);
        total += u(preset.vit_tokens_per_pass) * u(preset.vit.width);
        total += u(preset.vit.layers) *
                 (4ull * u(preset.vit.width) * u(preset.vit.width) +
                  u(preset.vit.ffn_matmuls) * u(preset.vit.width) * u(preset.vit.ffn) +
                  2ull * u(preset.vit.width));
        total += u(preset.vit.width);
    }
    for (size_t i = 0; i + 1 < preset.projector_widths.size(); ++i) {
        total += u(preset.projector_widths[i]) * u(preset.projector_widths[i + 1]) +
                 u(preset.projector_widths[i + 1]);
    }
    total += u(preset.prefusion_layers) *
             (4ull * u(preset.llm.width) * u(preset.llm.width) +
              u(preset.llm.ffn_matmuls) * u(preset.llm.width) * u(preset.llm.ffn) +
              2ull * u(preset.llm.width));
    total += u(preset.compression_c) * u(preset.compression_c) * u(preset.llm.width);
    return total;
}

uint64_t frames_within_budget(const ArchPreset& preset, uint64_t budget_bytes, int c_override,
                              int bytes_per_element, bool reserve_weights) {
    const int c = c_override > 0 ? c_override : preset.compression_c;
    if (c <= 0) throw std::invalid_argument("frames_within_budget: C must be positive");
    ArchPreset effective = preset;
    effective.compression_c = c;
    uint64_t available = budget_bytes;
    if (reserve_weights) {
        const uint64_t reserve = parameter_count(effective) * u(bytes_per_element);
        if (budget_bytes <= reserve) {
            throw std::invalid_argument("frames_within_budget: budget " +
                                        std::to_string(budget_bytes) +
                                        " bytes does not cover the weight reserve of " +
                                        std::to_string(reserve));
        }
        available -= reserve;
    }
    const uint64_t per_frame =
        estimate_kv_memory(preset, 1, bytes_per_element).per_token_bytes * u(c) * u(c);
    return available / per_frame;
}

// ---- presets ---------------------------------------------------------------

namespace {

// Published backbone shapes. CLIP ViT-L/336px: 24 layers, width 1024, GELU
// MLP, patch 14 => 576 patch tokens + CLS. Vicuna-v1.5-7B: 32 layers, width
// 4096, SwiGLU FFN 11008, vocab 32000. LLaVA's projector is a 2-layer MLP.
ArchPreset base_336() {
    ArchPreset p;
    p.vit = {24, 1024, 4096, 2};
    p.vit_tokens_per_pass = 577;
    p.vit_patch = 14;
    p.vit_channels = 3;
    p.vit_has_cls = true;
    p.vision_passes_per_image = 1;
    p.projector_widths = {1024, 4096, 4096};
    p.projector_tokens_per_image = 576;
    p.llm = {32, 4096, 11008, 3};
    p.llm_vocab = 32000;
    p.vision_tokens_to_llm = 576;
    return p;
}

}  // namespace

ArchPreset preset_by_name(const std::string& name) {
    if (name == "llava-v1.5-336") {
        ArchPreset p = base_336();
        p.name = name;
        return p;
    }
    if (name == "llava-mini-336") {
        ArchPreset p = base_336();
        p.name = name;
        p.prefusion_layers = 4;
        p.compression_c = 1;
        p.compression_source_tokens = 576;
        p.prefusion_source_tokens = 576;
        p.vision_tokens_to_llm = 1;
        return p;
    }
    if (name == "llava-v1.5-672") {
        // Four sub-images plus the original through the encoder and projector.
        ArchPreset p = base_336();
        p.name = name;
        p.vision_passes_per_image = 5;
        p.projector_tokens_per_image = 5 * 576;
        p.vision_tokens_to_llm = 5 * 576;
        return p;
    }
    if (name == "llava-mini-672") {
        ArchPreset p = base_336();
        p.name = name;
        p.vision_passes_per_image = 5;
        p.projector_tokens_per_image = 5 * 576;
        p.prefusion_layers = 4;
        p.compression_c = 8;
        p.compression_source_tokens = 4 * 576;  // queries read the sub-image tokens
        p.prefusion_source_tokens = 5 * 576;    // pre-fusion reads sub-images + original
        p.vision_tokens_to_llm = 64;
        return p;
    }
    if (name == "vicuna7b") {
        // LLM-only preset for KV-memory and prefill questions.
        ArchPreset p;
        p.name = name;
        p.llm = {32, 4096, 11008, 3};
        p.llm_vocab = 32000;
        return p;
    }
    if (name == "toy") {
        ArchPreset p;
        p.name = name;
        p.vit = {2, 48, 192, 2};
        p.vit_tokens_per_pass = 16;
        p.vit_patch = 4;
        p.vit_channels = 3;
        p.vit_has_cls = false;
        p.projector_widths = {48, 64};
        p.projector_tokens_per_image = 16;
        p.llm = {4, 64, 256, 2};
        p.llm_vocab = 256;
        p.prefusion_layers = 2;
        p.compression_c = 1;
        p.compression_source_tokens = 16;
        p.prefusion_source_tokens = 16;
        p.vision_tokens_to_llm = 1;
        return p;
    }
    throw std::invalid_argument("preset: unknown name '" + name + "' (known: llava-v1.5-336, " +
                                "llava-mini-336, llava-v1.5-672, llava-mini-672, vicuna7b, toy)");
}

std::vector<std::string> preset_names() {
    return {"llava-v1.5-336", "llava-mini-336", "llava-v1.5-672",
            "llava-mini-672", "vicuna7b",       "toy"};
}

namespace {

TransformerShape shape_from_json(const nlohmann::json& j, const std::string& key) {
    TransformerShape s;
    if (!j.contains(key)) return s;
    const nlohmann::json& o = j[key];
    s.layers = o.value("layers", 0);
    s.width = o.value("width", 0);
    s.ffn = o.value("ffn", 0);
    s.ffn_matmuls = o.value("ffn_matmuls", 2);
    return s;
}

nlohmann::ordered_json shape_to_json(const TransformerShape& s) {
    return {{"layers", s.layers}, {"width", s.width}, {"ffn", s.ffn},
            {"ffn_matmuls", s.ffn_matmuls}};
}

}  // namespace

ArchPreset ArchPreset::from_json(const nlohmann::json& j) {
    ArchPreset p;
    p.name = j.value("name", "custom");
    p.vit = shape_from_json(j, "vit");
    p.vit_tokens_per_pass = j.value("vit_tokens_per_pass", 0);
    p.vit_patch = j.value("vit_patch", 0);
    p.vit_channels = j.value("vit_channels", 3);
    p.vit_has_cls = j.value("vit_has_cls", true);
    p.vision_passes_per_image = j.value("vision_passes_per_image", 1);
    if (j.contains("projector_widths")) {
        p.projector_widths = j["projector_widths"].get<std::vector<int>>();
    }
    p.projector_tokens_per_image = j.value("projector_tokens_per_image", 0);
    p.llm = shape_from_json(j, "llm");
    p.llm_vocab = j.value("llm_vocab", 0);
    p.prefusion_layers = j.value("prefusion_layers", 0);
    p.compression_c = j.value("compression_c", 0);
    p.compression_source_tokens = j.value("compression_source_tokens", 0);
    p.prefusion_source_tokens = j.value("prefusion_source_tokens", 0);
    p.vision_tokens_to_llm = j.value("vision_tokens_to_llm", 0);
    p.validate();
    return p;
}

nlohmann::ordered_json ArchPreset::to_json() const {
    nlohmann::ordered_json j;
    j["name"] = name;
    j["vit"] = shape_to_json(vit);
    j["vit_tokens_per_pass"] = vit_tokens_per_pass;
    j["vit_patch"] = vit_patch;
    j["vit_channels"] = vit_channels;
    j["vit_has_cls"] = vit_has_cls;
    j["vision_passes_per_image"] = vision_passes_per_image;
    j["projector_widths"] = projector_widths;
    j["projector_tokens_per_image"] = projector_tokens_per_image;
    j["llm"] = shape_to_json(llm);
    j["llm_vocab"] = llm_vocab;
    j["prefusion_layers"] = prefusion_layers;
    j["compression_c"] = compression_c;
    j["compression_source_tokens"] = compression_source_tokens;
    j["prefusion_source_tokens"] = prefusion_source_tokens;
    j["vision_tokens_to_llm"] = vision_tokens_to_llm;
    return j;
}

namespace {

std::string fmt3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

}  // namespace

nlohmann::ordered_json FlopsReport::to_json() const {
    nlohmann::ordered_json j;
    j["preset"] = preset;
    j["n_images"] = n_images;
    j["l_q"] = l_q;
    j["convention"] =
        "FLOPs = 2*MACs; per token and layer 2*(4*d^2 + ffn_matmuls*d*d_ffn) + 2*2*L*d; "
        "prefill counting; LM head at every position";
    nlohmann::ordered_json f;
    f["vision_encoder"] = vision_encoder;
    f["projection"] = projection;
    f["compression"] = compression;
    f["prefusion"] = prefusion;
    f["llm"] = llm;
    f["total"] = total;
    j["flops"] = f;
    nlohmann::ordered_json t;
    t["vision_encoder"] = tflops(vision_encoder);
    t["projection"] = tflops(projection);
    t["compression"] = tflops(compression);
    t["prefusion"] = tflops(prefusion);
    t["llm"] = tflops(llm);
    t["total"] = tflops(total);
    j["tflops"] = t;
    return j;
}

std::string FlopsReport::table() const {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof(line), "%-18s %14s %11s %12s %11s %9s %8s\n", "Preset",
                  "VisionEncoder", "Projection", "Compression", "Pre-fusion", "LLM", "Total");
    os << line;
    std::snprintf(line, sizeof(line), "%-18s %14s %11s %12s %11s %9s %8s\n", preset.c_str(),
                  fmt3(tflops(vision_encoder)).c_str(), fmt3(tflops(projection)).c_str(),
                  fmt3(tflops(compression)).c_str(), fmt3(tflops(prefusion)).c_str(),
                  fmt3(tflops(llm)).c_str(), fmt3(tflops(total)).c_str());
    os << line << "(TFLOPs, prefill at l_q=" << l_q << ", n_images=" << n_images << ")\n";
    return os.str();
}

nlohmann::ordered_json MemoryReport::to_json() const {
    nlohmann::ordered_json j;
    j["per_token_bytes"] = per_token_bytes;
    j["n_tokens"] = n_tokens;
    j["total_bytes"] = total_bytes;
    j["total_mib"] = static_cast<double>(total_bytes) / (1024.0 * 1024.0);
    return j;
}

}  // namespace minivlm
