#include "minivlm/config.hpp"

namespace minivlm {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

}  // namespace

void ModelConfig::validate() const {
    require(d_h > 0, "d_h: must be positive");
    require(n_heads > 0 && d_h % n_heads == 0, "n_heads: d_h must be divisible by n_heads");
    require(d_h % 4 == 0, "d_h: must be divisible by 4 for 2D positional encoding");
    require(n_llm_layers >= 0, "n_llm_layers: must be >= 0");
    require(d_ffn > 0, "d_ffn: must be positive");
    require(vocab_size > 1, "vocab_size: must be > 1");
    require(max_seq_len > 0, "max_seq_len: must be positive");
    require(d_vit > 0, "d_vit: must be positive");
    require(n_vit_heads > 0 && d_vit % n_vit_heads == 0,
            "n_vit_heads: d_vit must be divisible by n_vit_heads");
    require(n_vit_layers >= 0, "n_vit_layers: must be >= 0");
    require(d_vit_ffn > 0, "d_vit_ffn: must be positive");
    require(patch_size > 0, "patch_size: must be positive");
    require(patch_grid >= 1, "patch_grid: must be >= 1");
    require(image_channels > 0, "image_channels: must be positive");
    require(compression_grid >= 1 && compression_grid <= patch_grid,
            "compression_grid: need 1 <= C <= N (patch_grid)");
    require(n_fusion_layers >= 0, "n_fusion_layers: must be >= 0");
    require(projector_layers == 1 || projector_layers == 2, "projector_layers: must be 1 or 2");
    require(max_frames >= 1, "max_frames: must be >= 1");
    if (compression_mode == CompressionMode::AvgPool) {
        require(patch_grid % compression_grid == 0,
                "compression_grid: average pooling needs C to divide N");
    }
    if (compression_mode == CompressionMode::Identity) {
        require(compression_grid == patch_grid,
                "compression_grid: identity compression needs C == N");
    }
}

namespace {

int get_int(const nlohmann::json& j, const std::string& key, int cur) {
    if (!j.contains(key)) return cur;
    if (!j[key].is_number_integer()) throw ConfigError(key + ": expected an integer");
    return j[key].get<int>();
}

bool get_bool(const nlohmann::json& j, const std::string& key, bool cur) {
    if (!j.contains(key)) return cur;
    if (!j[key].is_boolean()) throw ConfigError(key + ": expected a boolean");
    return j[key].get<bool>();
}

}  // namespace

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    static const char* known[] = {
        "d_h", "n_llm_layers", "n_heads", "d_ffn", "vocab_size", "max_seq_len",
        "d_vit", "n_vit_layers", "n_vit_heads", "d_vit_ffn", "patch_size", "patch_grid",
        "image_channels", "compression_grid", "n_fusion_layers", "compression_mode",
        "compress_use_pe", "compress_use_scale", "projector_layers", "baseline_insert_k",
        "max_frames", "video_pooling", "nonlinearity"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError(it.key() + ": unknown config key");
    }

    ModelConfig c;
    c.d_h = get_int(j, "d_h", c.d_h);
    c.n_llm_layers = get_int(j, "n_llm_layers", c.n_llm_layers);
    c.n_heads = get_int(j, "n_heads", c.n_heads);
    c.d_ffn = get_int(j, "d_ffn", c.d_ffn);
    c.vocab_size = get_int(j, "vocab_size", c.vocab_size);
    c.max_seq_len = get_int(j, "max_seq_len", c.max_seq_len);
    c.d_vit = get_int(j, "d_vit", c.d_vit);
    c.n_vit_layers = get_int(j, "n_vit_layers", c.n_vit_layers);
    c.n_vit_heads = get_int(j, "n_vit_heads", c.n_vit_heads);
    c.d_vit_ffn = get_int(j, "d_vit_ffn", c.d_vit_ffn);
    c.patch_size = get_int(j, "patch_size", c.patch_size);
    c.patch_grid = get_int(j, "patch_grid", c.patch_grid);
    c.image_channels = get_int(j, "image_channels", c.image_channels);
    c.compression_grid = get_int(j, "compression_grid", c.compression_grid);
    c.n_fusion_layers = get_int(j, "n_fusion_layers", c.n_fusion_layers);
    c.projector_layers = get_int(j, "projector_layers", c.projector_layers);
    c.baseline_insert_k = get_int(j, "baseline_insert_k", c.baseline_insert_k);
    c.max_frames = get_int(j, "max_frames", c.max_frames);
    c.compress_use_pe = get_bool(j, "compress_use_pe", c.compress_use_pe);
    c.compress_use_scale = get_bool(j, "compress_use_scale", c.compress_use_scale);

    if (j.contains("compression_mode")) {
        const std::string v = j["compression_mode"].get<std::string>();
        if (v == "query") c.compression_mode = CompressionMode::Query;
        else if (v == "avgpool") c.compression_mode = CompressionMode::AvgPool;
        else if (v == "identity") c.compression_mode = CompressionMode::Identity;
        else throw ConfigError("compression_mode: expected query|avgpool|identity, got '" + v + "'");
    }
    if (j.contains("video_pooling")) {
        const std::string v = j["video_pooling"].get<std::string>();
        if (v == "mean") c.video_pooling = VideoPooling::Mean;
        else if (v == "max") c.video_pooling = VideoPooling::Max;
        else throw ConfigError("video_pooling: expected mean|max, got '" + v + "'");
    }
    if (j.contains("nonlinearity")) {
        const std::string v = j["nonlinearity"].get<std::string>();
        if (v == "gelu") c.nonlinearity = Nonlin::Gelu;
        else if (v == "silu") c.nonlinearity = Nonlin::Silu;
        else throw ConfigError("nonlinearity: expected gelu|silu, got '" + v + "'");
    }
    c.validate();
    return c;
}

nlohmann::ordered_json ModelConfig::to_json() const {
    nlohmann::ordered_json j;
    j["d_h"] = d_h;
    j["n_llm_layers"] = n_llm_layers;
    j["n_heads"] = n_heads;
    j["d_ffn"] = d_ffn;
    j["vocab_size"] = vocab_size;
    j["max_seq_len"] = max_seq_len;
    j["d_vit"] = d_vit;
    j["n_vit_layers"] = n_vit_layers;
    j["n_vit_heads"] = n_vit_heads;
    j["d_vit_ffn"] = d_vit_ffn;
    j["patch_size"] = patch_size;
    j["patch_grid"] = patch_grid;
    j["image_channels"] = image_channels;
    j["compression_grid"] = compression_grid;
    j["n_fusion_layers"] = n_fusion_layers;
    j["compression_mode"] = compression_mode == CompressionMode::Query     ? "query"
                            : compression_mode == CompressionMode::AvgPool ? "avgpool"
                                                                           : "identity";
    j["compress_use_pe"] = compress_use_pe;
    j["compress_use_scale"] = compress_use_scale;
    j["projector_layers"] = projector_layers;
    j["baseline_insert_k"] = baseline_insert_k;
    j["max_frames"] = max_frames;
    j["video_pooling"] = video_pooling == VideoPooling::Mean ? "mean" : "max";
    j["nonlinearity"] = nonlinearity == Nonlin::Gelu ? "gelu" : "silu";
    return j;
}

uint64_t ModelConfig::hash() const {
    const std::string s = to_json().dump();
    uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace minivlm
