#include "minivlm/model.hpp"

#include "minivlm/posenc.hpp"
#include "minivlm/tensor_io.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace minivlm {

Projector Projector::init(const ModelConfig& cfg, Rng& rng) {
    Projector p;
    p.layers = cfg.projector_layers;
    const double s = 1.0 / std::sqrt(static_cast<double>(cfg.d_vit));
    p.w1 = Parameter("proj.w1", rng.normal_mat(cfg.d_vit, cfg.d_h, s));
    p.b1 = Parameter("proj.b1", Mat::Zero(1, cfg.d_h));
    if (p.layers == 2) {
        const double s2 = 1.0 / std::sqrt(static_cast<double>(cfg.d_h));
        p.w2 = Parameter("proj.w2", rng.normal_mat(cfg.d_h, cfg.d_h, s2));
        p.b2 = Parameter("proj.b2", Mat::Zero(1, cfg.d_h));
    }
    return p;
}

std::vector<Parameter*> Projector::parameters() {
    if (layers == 2) return {&w1, &b1, &w2, &b2};
    return {&w1, &b1};
}

Var Projector::apply(Tape& tape, Var x, Nonlin nl) {
    Var h = add_row_broadcast(matmul(x, tape.param(w1)), tape.param(b1));
    if (layers == 2) {
        h = add_row_broadcast(matmul(activation(h, nl), tape.param(w2)), tape.param(b2));
    }
    return h;
}

MiniModel MiniModel::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    MiniModel m;
    m.cfg = cfg;
    m.vit = ToyViT::init(cfg, rng);
    m.proj = Projector::init(cfg, rng);
    m.comp = CompressionState::init(cfg.compression_grid, cfg.d_h, rng);
    m.comp.use_pe = cfg.compress_use_pe;
    m.comp.use_scale = cfg.compress_use_scale;
    m.fusion = PrefusionStack::init(cfg, rng);
    m.llm = ToyLLM::init(cfg, rng);
    return m;
}

std::vector<Parameter*> MiniModel::parameters() {
    std::vector<Parameter*> ps;
    for (Module mod : {Module::VisionEncoder, Module::Projection, Module::Compression,
                       Module::Prefusion, Module::Llm}) {
        for (Parameter* p : module_parameters(mod)) ps.push_back(p);
    }
    return ps;
}

std::vector<Parameter*> MiniModel::module_parameters(Module m) {
    switch (m) {
        case Module::VisionEncoder: return vit.parameters();
        case Module::Projection: return proj.parameters();
        case Module::Compression: return comp.parameters();
        case Module::Prefusion: return fusion.parameters();
        case Module::Llm: return llm.parameters();
    }
    return {};
}

Parameter* MiniModel::find_parameter(const std::string& name) {
    for (Parameter* p : parameters()) {
        if (p->name == name) return p;
    }
    return nullptr;
}

LlmInput build_llm_input(Var compressed_vision, Var fusion_tokens) {
    if (compressed_vision.cols() != fusion_tokens.cols()) {
        throw std::invalid_argument("build_llm_input: width mismatch, vision " +
                                    std::to_string(compressed_vision.cols()) + " vs text " +
                                    std::to_string(fusion_tokens.cols()));
    }
    LlmInput out;
    const int lv = static_cast<int>(compressed_vision.rows());
    const int lq = static_cast<int>(fusion_tokens.rows());
    out.layout.spans.push_back({SpanType::Vision, 0, lv});
    out.layout.spans.push_back({SpanType::Instruction, lv, lq});
    out.tokens = concat_rows({compressed_vision, fusion_tokens});
    return out;
}

namespace {

void check_instruction(const std::vector<int>& instruction) {
    if (instruction.empty()) throw std::invalid_argument("instruction: empty");
}

// [compressed vision ; fusion tokens] (+ teacher-forced response rows).
struct AssembledInput {
    Var tokens;
    TokenLayout layout;
};

AssembledInput assemble(Tape& tape, MiniModel& m, Var vision_rows, Var text_rows,
                        const std::vector<int>* response) {
    LlmInput base = build_llm_input(vision_rows, text_rows);
    AssembledInput out{base.tokens, base.layout};
    if (response != nullptr && !response->empty()) {
        out.layout.spans.push_back(
            {SpanType::Response, base.layout.total(), static_cast<int>(response->size())});
        out.tokens = concat_rows({base.tokens, m.llm.embed(tape, *response)});
    }
    return out;
}

Var project_image(Tape& tape, MiniModel& m, const Image& image) {
    return m.proj.apply(tape, m.vit.encode(tape, image), m.cfg.nonlinearity);
}

// Compression front-end for one token set living on an n x n grid.
struct CompressedVision {
    Var tokens;
    Mat attention;  // empty unless query-based
};

CompressedVision compress_tokens(Tape& tape, MiniModel& m, Var h_v,
                                 const std::vector<Coord>& token_coords, int grid_n) {
    CompressedVision out;
    switch (m.cfg.compression_mode) {
        case CompressionMode::Query: {
            CompressResult r = compress_query(tape, m.comp, h_v, token_coords,
                                              align_query_coords(m.cfg.compression_grid, grid_n));
            out.tokens = r.compressed;
            out.attention = r.attention.value();
            break;
        }
        case CompressionMode::AvgPool: {
            // Pooling matrix indexed by the tokens' integer grid coordinates,
            // so concatenated sub-image orders pool correctly too.
            const int c_grid = m.cfg.compression_grid;
            if (grid_n % c_grid != 0) {
                throw std::invalid_argument("compression_grid: average pooling needs C to divide " +
                                            std::to_string(grid_n));
            }
            const int block = grid_n / c_grid;
            Mat p = Mat::Zero(c_grid * c_grid, h_v.rows());
            for (Eigen::Index t = 0; t < h_v.rows(); ++t) {
                const Coord& co = token_coords[static_cast<size_t>(t)];
                const int br = static_cast<int>(co.y) / block;
                const int bc = static_cast<int>(co.x) / block;
                p(br * c_grid + bc, t) = 1.0 / static_cast<double>(block * block);
            }
            out.tokens = matmul(tape.constant(std::move(p)), h_v);
            break;
        }
        case CompressionMode::Identity: {
            if (m.cfg.compressed_tokens() != static_cast<int>(h_v.rows())) {
                throw std::invalid_argument(
                    "compression_mode: identity needs C^2 == vision token count");
            }
            out.tokens = h_v;
            break;
        }
    }
    return out;
}

ForwardOutput run_llm(Tape& tape, MiniModel& m, const AssembledInput& in, const ForwardOptions& opt,
                      int llm_input_len, Mat compression_attention, int prefusion_rows,
                      Mat fusion_tokens = Mat()) {
    LLMResult r = llm_forward(tape, m.llm, in.tokens, in.layout, opt.record, opt.drop);
    ForwardOutput out;
    out.logits = r.logits;
    out.layout = in.layout;
    out.trace = std::move(r.trace);
    out.compression_attention = std::move(compression_attention);
    out.llm_input_len = llm_input_len;
    out.prefusion_vision_rows = prefusion_rows;
    out.fusion_tokens = std::move(fusion_tokens);
    return out;
}

}  // namespace

ForwardOutput forward_image(Tape& tape, MiniModel& m, const Image& image,
                            const std::vector<int>& instruction, const ForwardOptions& opt) {
    check_instruction(instruction);
    const int n = m.cfg.patch_grid;
    Var h_v = project_image(tape, m, image);
    CompressedVision cv = compress_tokens(tape, m, h_v, grid_coords(n), n);
    Var h_q = m.llm.embed(tape, instruction);
    Var fused = prefuse(tape, m.fusion, h_v, h_q);
    AssembledInput in = assemble(tape, m, cv.tokens, fused, opt.response);
    const int base_len = static_cast<int>(cv.tokens.rows()) + static_cast<int>(instruction.size());
    return run_llm(tape, m, in, opt, base_len, std::move(cv.attention), n * n, fused.value());
}

namespace {

Image downsample_2x(const Image& img) {
    Image out(img.height / 2, img.width / 2, img.channels);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            for (int c = 0; c < out.channels; ++c) {
                out.at(y, x, c) = 0.25 * (img.at(2 * y, 2 * x, c) + img.at(2 * y, 2 * x + 1, c) +
                                          img.at(2 * y + 1, 2 * x, c) + img.at(2 * y + 1, 2 * x + 1, c));
            }
        }
    }
    return out;
}

Image crop(const Image& img, int y0, int x0, int side) {
    Image out(side, side, img.channels);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

}  // namespace

ForwardOutput forward_hires(Tape& tape, MiniModel& m, const Image& image,
                            const std::vector<int>& instruction, const ForwardOptions& opt) {
    check_instruction(instruction);
    const int side = m.cfg.image_side();
    if (image.height != 2 * side || image.width != 2 * side) {
        throw std::invalid_argument("forward_hires: image " + std::to_string(image.height) + "x" +
                                    std::to_string(image.width) + " is not 2x2 of encoder size " +
                                    std::to_string(side));
    }
    const int n = m.cfg.patch_grid;

    // Four sub-images row-major, then the pooled-down original.
    std::vector<Var> sub_tokens;
    std::vector<Coord> sub_coords;
    for (int sr = 0; sr < 2; ++sr) {
        for (int sc = 0; sc < 2; ++sc) {
            sub_tokens.push_back(project_image(tape, m, crop(image, sr * side, sc * side, side)));
            for (const Coord& c : grid_coords(n)) {
                sub_coords.push_back({c.y + sr * n, c.x + sc * n});
            }
        }
    }
    Var sub_all = concat_rows(sub_tokens);
    Var orig = project_image(tape, m, downsample_2x(image));

    CompressedVision cv = compress_tokens(tape, m, sub_all, sub_coords, 2 * n);
    Var h_q = m.llm.embed(tape, instruction);
    Var fused = prefuse(tape, m.fusion, concat_rows({sub_all, orig}), h_q);
    AssembledInput in = assemble(tape, m, cv.tokens, fused, opt.response);
    const int base_len = static_cast<int>(cv.tokens.rows()) + static_cast<int>(instruction.size());
    return run_llm(tape, m, in, opt, base_len, std::move(cv.attention), 5 * n * n, fused.value());
}

ForwardOutput forward_video(Tape& tape, MiniModel& m, const std::vector<Image>& frames,
                            const std::vector<int>& instruction, const ForwardOptions& opt) {
    check_instruction(instruction);
    if (frames.empty()) throw std::invalid_argument("forward_video: zero frames");
    if (static_cast<int>(frames.size()) > m.cfg.max_frames) {
        throw std::invalid_argument("forward_video: " + std::to_string(frames.size()) +
                                    " frames exceed max_frames " + std::to_string(m.cfg.max_frames));
    }
    const int n = m.cfg.patch_grid;
    const std::vector<Coord> coords = grid_coords(n);
    std::vector<Var> compressed;
    Var fused_pool;
    Mat attention;
    for (size_t f = 0; f < frames.size(); ++f) {
        Var h_v = project_image(tape, m, frames[f]);
        CompressedVision cv = compress_tokens(tape, m, h_v, coords, n);
        compressed.push_back(cv.tokens);
        if (f == 0) attention = std::move(cv.attention);
        Var h_q = m.llm.embed(tape, instruction);
        Var fused = prefuse(tape, m.fusion, h_v, h_q);
        if (f == 0) {
            fused_pool = fused;
        } else if (m.cfg.video_pooling == VideoPooling::Mean) {
            fused_pool = add(fused_pool, fused);
        } else {
            fused_pool = emax(fused_pool, fused);
        }
    }
    if (m.cfg.video_pooling == VideoPooling::Mean) {
        fused_pool = scale(fused_pool, 1.0 / static_cast<double>(frames.size()));
    }
    AssembledInput in = assemble(tape, m, concat_rows(compressed), fused_pool, opt.response);
    const int base_len = static_cast<int>(frames.size()) * m.cfg.compressed_tokens() +
                         static_cast<int>(instruction.size());
    return run_llm(tape, m, in, opt, base_len, std::move(attention), n * n, fused_pool.value());
}

ForwardOutput forward_baseline(Tape& tape, MiniModel& m, const Image& image,
                               const std::vector<int>& instruction, const ForwardOptions& opt) {
    check_instruction(instruction);
    const int lq = static_cast<int>(instruction.size());
    int k = m.cfg.baseline_insert_k;
    if (k < 0) k = lq / 2;
    if (k > lq) {
        throw std::invalid_argument("baseline_insert_k: " + std::to_string(k) + " exceeds l_q " +
                                    std::to_string(lq));
    }
    Var h_v = project_image(tape, m, image);
    Var h_q = m.llm.embed(tape, instruction);
    const int lv = static_cast<int>(h_v.rows());

    std::vector<Var> parts;
    TokenLayout layout;
    int at = 0;
    if (k > 0) {
        parts.push_back(slice_rows(h_q, 0, k));
        layout.spans.push_back({SpanType::Instruction, at, k});
        at += k;
    }
    parts.push_back(h_v);
    layout.spans.push_back({SpanType::Vision, at, lv});
    at += lv;
    if (lq - k > 0) {
        parts.push_back(slice_rows(h_q, k, lq - k));
        layout.spans.push_back({SpanType::Instruction, at, lq - k});
        at += lq - k;
    }
    if (opt.response != nullptr && !opt.response->empty()) {
        parts.push_back(m.llm.embed(tape, *opt.response));
        layout.spans.push_back({SpanType::Response, at, static_cast<int>(opt.response->size())});
    }
    AssembledInput in{concat_rows(parts), layout};
    return run_llm(tape, m, in, opt, lv + lq, Mat(), 0);
}

ForwardOutput forward_text(Tape& tape, MiniModel& m, const std::vector<int>& instruction,
                           const ForwardOptions& opt) {
    check_instruction(instruction);
    Var h_q = m.llm.embed(tape, instruction);
    std::vector<Var> parts = {h_q};
    TokenLayout layout;
    const int lq = static_cast<int>(instruction.size());
    layout.spans.push_back({SpanType::Instruction, 0, lq});
    if (opt.response != nullptr && !opt.response->empty()) {
        parts.push_back(m.llm.embed(tape, *opt.response));
        layout.spans.push_back({SpanType::Response, lq, static_cast<int>(opt.response->size())});
    }
    AssembledInput in{concat_rows(parts), layout};
    return run_llm(tape, m, in, opt, lq, Mat(), 0);
}

Var response_loss(Tape& tape, const ForwardOutput& out, const std::vector<int>& response) {
    (void)tape;
    if (response.empty()) throw std::invalid_argument("response_loss: empty response");
    int start = -1;
    for (const Span& s : out.layout.spans) {
        if (s.type == SpanType::Response) start = s.start;
    }
    if (start <= 0) throw std::invalid_argument("response_loss: layout has no response span");
    Var rows = slice_rows(out.logits, start - 1, static_cast<Eigen::Index>(response.size()));
    return cross_entropy(rows, response);
}

std::vector<int> greedy_decode(MiniModel& m, PathKind path, const std::vector<Image>& images,
                               const std::vector<int>& instruction, int max_new_tokens,
                               int stop_id, const DropSpec* drop) {
    std::vector<int> out;
    for (int step = 0; step < max_new_tokens; ++step) {
        Tape tape;
        ForwardOptions opt;
        opt.response = out.empty() ? nullptr : &out;
        opt.drop = drop;
        ForwardOutput fo;
        switch (path) {
            case PathKind::Image: fo = forward_image(tape, m, images.at(0), instruction, opt); break;
            case PathKind::Hires: fo = forward_hires(tape, m, images.at(0), instruction, opt); break;
            case PathKind::Video: fo = forward_video(tape, m, images, instruction, opt); break;
            case PathKind::Baseline:
                fo = forward_baseline(tape, m, images.at(0), instruction, opt);
                break;
            case PathKind::Text: fo = forward_text(tape, m, instruction, opt); break;
        }
        Eigen::Index best = 0;
        fo.logits.value().row(fo.logits.rows() - 1).maxCoeff(&best);
        out.push_back(static_cast<int>(best));
        if (stop_id >= 0 && static_cast<int>(best) == stop_id) break;
    }
    return out;
}

void save_checkpoint(const std::string& path, MiniModel& m, int stage, int step) {
    std::vector<NamedTensor> tensors;
    for (Parameter* p : m.parameters()) {
        tensors.push_back(NamedTensor::from_mat(p->name, p->value));
    }
    nlohmann::ordered_json meta;
    meta["stage"] = stage;
    meta["step"] = step;
    meta["config"] = m.cfg.to_json();
    std::ostringstream hash;
    hash << std::hex << m.cfg.hash();
    meta["config_hash"] = hash.str();
    write_archive(path, tensors, meta);
}

MiniModel load_checkpoint(const std::string& path) {
    Archive a = read_archive(path);
    if (!a.metadata.contains("config")) {
        throw std::runtime_error("checkpoint '" + path + "' has no config metadata");
    }
    ModelConfig cfg = ModelConfig::from_json(a.metadata["config"]);
    MiniModel m = MiniModel::init(cfg, 0);
    for (Parameter* p : m.parameters()) {
        const NamedTensor* t = a.find(p->name);
        if (t == nullptr) throw std::runtime_error("checkpoint missing tensor '" + p->name + "'");
        Mat v = t->to_mat();
        if (v.rows() != p->value.rows() || v.cols() != p->value.cols()) {
            throw std::runtime_error("checkpoint tensor '" + p->name + "' has wrong shape");
        }
        p->value = std::move(v);
        p->zero_grad();
    }
    return m;
}

}  // namespace minivlm
