#pragma once

#include "minivlm/backbone.hpp"
#include "minivlm/compression.hpp"
#include "minivlm/config.hpp"
#include "minivlm/prefusion.hpp"

#include <optional>
#include <string>
#include <vector>

namespace minivlm {

enum class Module { VisionEncoder, Projection, Compression, Prefusion, Llm };

// Linear (or 2-layer MLP) map from encoder width to LLM width.
struct Projector {
    Parameter w1, b1;
    Parameter w2, b2;  // present only with projector_layers == 2
    int layers = 1;

    static Projector init(const ModelConfig& cfg, Rng& rng);
    std::vector<Parameter*> parameters();
    Var apply(Tape& tape, Var x, Nonlin nl);
};

// The full model: encoder, projector, compression queries, pre-fusion stack
// and the LLM backbone, owned together so checkpoints capture everything.
struct MiniModel {
    ModelConfig cfg;
    ToyViT vit;
    Projector proj;
    CompressionState comp;
    PrefusionStack fusion;
    ToyLLM llm;

    static MiniModel init(const ModelConfig& cfg, uint64_t seed);

    std::vector<Parameter*> parameters();
    std::vector<Parameter*> module_parameters(Module m);
    Parameter* find_parameter(const std::string& name);
};

struct LlmInput {
    Var tokens;
    TokenLayout layout;
};

// [compressed vision ; fusion tokens] with a vision-then-instruction layout.
// Response rows, when training or decoding, are appended by the callers.
LlmInput build_llm_input(Var compressed_vision, Var fusion_tokens);

struct ForwardOptions {
    bool record = false;               // capture attention trace in the LLM
    const DropSpec* drop = nullptr;    // vision-drop layers (baseline path)
    const std::vector<int>* response = nullptr;  // teacher-forced response ids
};

struct ForwardOutput {
    Var logits;
    TokenLayout layout;
    AttentionTrace trace;
    Mat compression_attention;  // C^2 x L_v (empty for baseline/identity paths)
    Mat fusion_tokens;          // l_q x d_h pre-fused text rows (pooled for video)
    int llm_input_len = 0;          // length before any response tokens
    int prefusion_vision_rows = 0;  // vision rows fed to pre-fusion (per frame for video)
};

// Standard image path: encode -> project -> compress to C^2 + pre-fuse text
// -> [compressed vision ; fusion tokens] -> LLM.
ForwardOutput forward_image(Tape& tape, MiniModel& m, const Image& image,
                            const std::vector<int>& instruction, const ForwardOptions& opt = {});

// High-resolution path over a 2x-side image: four sub-images plus the
// pooled-down original. Compression reads the 4N^2 sub-image tokens in a
// 2N x 2N coordinate frame; pre-fusion reads all 5N^2 vision tokens.
ForwardOutput forward_hires(Tape& tape, MiniModel& m, const Image& image,
                            const std::vector<int>& instruction, const ForwardOptions& opt = {});

// Video path: per-frame compression (concatenated in frame order) and
// per-frame fusion tokens pooled across frames; LLM input is M*C^2 + l_q.
ForwardOutput forward_video(Tape& tape, MiniModel& m, const std::vector<Image>& frames,
                            const std::vector<int>& instruction, const ForwardOptions& opt = {});

// Uncompressed baseline: N^2 vision tokens spliced into the instruction at
// position k (config; default middle). No compression or pre-fusion.
ForwardOutput forward_baseline(Tape& tape, MiniModel& m, const Image& image,
                               const std::vector<int>& instruction,
                               const ForwardOptions& opt = {});

// Text-only control: instruction (and optional response) with no image.
ForwardOutput forward_text(Tape& tape, MiniModel& m, const std::vector<int>& instruction,
                           const ForwardOptions& opt = {});

// Mean cross-entropy of the response ids under teacher forcing; out must have
// been produced with opt.response set.
Var response_loss(Tape& tape, const ForwardOutput& out, const std::vector<int>& response);

enum class PathKind { Image, Hires, Video, Baseline, Text };

// Greedy argmax continuation of the assembled input; deterministic, stops
// after max_new_tokens or at stop_id (if >= 0).
std::vector<int> greedy_decode(MiniModel& m, PathKind path, const std::vector<Image>& images,
                               const std::vector<int>& instruction, int max_new_tokens,
                               int stop_id = -1, const DropSpec* drop = nullptr);

// Checkpoints: every parameter in a tensor archive plus JSON metadata
// (stage, step, config and config hash).
void save_checkpoint(const std::string& path, MiniModel& m, int stage, int step);
MiniModel load_checkpoint(const std::string& path);

}  // namespace minivlm
