#pragma once

#include "minivlm/types.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>

namespace minivlm {

enum class CompressionMode { Query, AvgPool, Identity };

// Raised on a bad or unknown configuration value; the message names the key.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Architecture hyperparameters for both the toy presets and anything the
// config file overrides. Widths are f64 model dimensions, not byte sizes.
struct ModelConfig {
    // LLM backbone
    int d_h = 64;
    int n_llm_layers = 4;
    int n_heads = 2;
    int d_ffn = 256;
    int vocab_size = 256;
    int max_seq_len = 512;

    // toy vision encoder (bidirectional)
    int d_vit = 48;
    int n_vit_layers = 2;
    int n_vit_heads = 2;
    int d_vit_ffn = 192;
    int patch_size = 4;
    int patch_grid = 4;  // N: an image yields N^2 vision tokens
    int image_channels = 3;

    // compression + pre-fusion
    int compression_grid = 1;  // C: C^2 compressed vision tokens
    int n_fusion_layers = 2;
    CompressionMode compression_mode = CompressionMode::Query;
    bool compress_use_pe = true;
    bool compress_use_scale = true;  // 1/sqrt(d_h) on Eq.-style logits; off = literal form

    // assembly
    int projector_layers = 1;     // 1 plain linear or a 2-layer MLP
    int baseline_insert_k = -1;   // vision insertion point; -1 = middle of the instruction
    int max_frames = 64;
    VideoPooling video_pooling = VideoPooling::Mean;
    Nonlin nonlinearity = Nonlin::Silu;

    int vision_tokens() const { return patch_grid * patch_grid; }
    int compressed_tokens() const { return compression_grid * compression_grid; }
    int image_side() const { return patch_grid * patch_size; }

    void validate() const;  // throws ConfigError naming the offending key

    static ModelConfig from_json(const nlohmann::json& j);  // unknown keys are errors
    nlohmann::ordered_json to_json() const;
    uint64_t hash() const;  // FNV-1a over the canonical JSON dump
};

}  // namespace minivlm
