// Invariant suite behind `minivlm selftest`. Output is deterministic: one
// line per check, exit 0 only if every check passes.

#include "minivlm/analysis.hpp"
#include "minivlm/compression.hpp"
#include "minivlm/efficiency.hpp"
#include "minivlm/model.hpp"
#include "minivlm/posenc.hpp"
#include "minivlm/tensor_io.hpp"
#include "minivlm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace mv = minivlm;

namespace {

int g_failures = 0;
int g_index = 0;

void check(const char* name, bool ok) {
    ++g_index;
    std::printf("%s - %02d %s\n", ok ? "ok" : "FAIL", g_index, name);
    if (!ok) ++g_failures;
}

bool matmul_matches_triple_loop() {
    mv::Rng rng(7);
    const mv::Mat a = rng.normal_mat(3, 4, 1.0);
    const mv::Mat b = rng.normal_mat(4, 2, 1.0);
    mv::Tape tape;
    const mv::Mat y = mv::matmul(tape.constant(a), tape.constant(b)).value();
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 2; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) acc += a(i, k) * b(k, j);
            if (std::abs(acc - y(i, j)) > 1e-12) return false;
        }
    }
    return true;
}

bool softmax_basics() {
    mv::Tape tape;
    mv::Mat x(3, 3);
    x << 0, 0, 0, 1000, 0, 0, 1, 2, 3;
    // Third column of row 0/1 masked to exercise exact zeros.
    mv::BoolMat mask = mv::BoolMat::Constant(3, 3, true);
    const mv::Mat y = mv::softmax_rows(tape.constant(x)).value();
    if (std::abs(y(0, 0) - 1.0 / 3.0) > 1e-15) return false;
    if (std::abs(y(1, 0) - 1.0) > 1e-12 || !std::isfinite(y(1, 0))) return false;
    if (std::abs(y(2, 0) - 0.09003057317038046) > 1e-11) return false;
    if (std::abs(y(2, 1) - 0.24472847105479767) > 1e-11) return false;
    if (std::abs(y(2, 2) - 0.66524095577482186) > 1e-11) return false;
    for (int i = 0; i < 3; ++i) {
        if (std::abs(y.row(i).sum() - 1.0) > 1e-12) return false;
    }
    mask(0, 2) = false;
    const mv::Mat ym = mv::softmax_rows(tape.constant(x), mask).value();
    if (ym(0, 2) != 0.0) return false;
    if (std::abs(ym(0, 0) - 0.5) > 1e-15) return false;
    return true;
}

bool backward_analytic_cases() {
    {
        mv::Tape tape;
        mv::Mat x(1, 2);
        x << 1.0, -2.0;
        mv::Var v = tape.leaf(x);
        mv::Var loss = mv::sum_all(mv::mul(v, v));
        tape.backward(loss);
        const mv::Mat g = v.grad();
        if (std::abs(g(0, 0) - 2.0) > 1e-12 || std::abs(g(0, 1) + 4.0) > 1e-12) return false;
    }
    {
        mv::Tape tape;
        mv::Rng rng(3);
        mv::Var v = tape.leaf(rng.normal_mat(2, 5, 1.0));
        tape.backward(mv::sum_all(mv::softmax_rows(v)));
        if (v.grad().cwiseAbs().maxCoeff() > 1e-12) return false;
    }
    return true;
}

bool backward_matches_fd() {
    mv::Rng rng(11);
    mv::Parameter w("w", rng.normal_mat(4, 3, 0.5));
    const mv::Mat x = rng.normal_mat(2, 4, 1.0);
    auto loss_fn = [&]() {
        mv::Tape tape;
        return mv::sum_all(mv::silu(mv::matmul(tape.constant(x), tape.param(w)))).value()(0, 0);
    };
    auto backward_fn = [&]() {
        mv::Tape tape;
        mv::Var loss = mv::sum_all(mv::silu(mv::matmul(tape.constant(x), tape.param(w))));
        tape.backward(loss);
    };
    const mv::GradCheckReport r = mv::finite_difference_check({&w}, loss_fn, backward_fn);
    return r.pass;
}

bool posenc_cases() {
    const mv::Mat pe = mv::posenc_2d({{0.0, 0.0}}, 8);
    for (int k = 0; k < 2; ++k) {
        if (pe(0, 2 * k) != 0.0 || pe(0, 2 * k + 1) != 1.0) return false;
        if (pe(0, 4 + 2 * k) != 0.0 || pe(0, 4 + 2 * k + 1) != 1.0) return false;
    }
    const mv::Mat any = mv::posenc_2d({{3.7, 55.1}, {-2.0, 9.0}}, 16);
    if (any.cwiseAbs().maxCoeff() > 1.0) return false;
    // Injectivity over the 64 x 64 integer grid at d_h = 8.
    const mv::Mat grid = mv::posenc_2d(mv::grid_coords(64), 8);
    std::vector<int> order(static_cast<size_t>(grid.rows()));
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        for (int c = 0; c < 8; ++c) {
            if (grid(a, c) != grid(b, c)) return grid(a, c) < grid(b, c);
        }
        return false;
    });
    for (size_t i = 0; i + 1 < order.size(); ++i) {
        if (grid.row(order[i]) == grid.row(order[i + 1])) return false;
    }
    return true;
}

bool query_alignment_cases() {
    const auto same = mv::align_query_coords(4, 4);
    const auto toks = mv::grid_coords(4);
    for (size_t i = 0; i < same.size(); ++i) {
        if (std::abs(same[i].y - toks[i].y) > 1e-15 || std::abs(same[i].x - toks[i].x) > 1e-15)
            return false;
    }
    const auto center = mv::align_query_coords(1, 4);
    if (center.size() != 1 || center[0].y != 1.5 || center[0].x != 1.5) return false;
    const auto two = mv::align_query_coords(2, 4);
    for (const mv::Coord& c : two) {
        if (c.y != 0.5 && c.y != 2.5) return false;
        if (c.x != 0.5 && c.x != 2.5) return false;
    }
    return true;
}

bool compression_invariants() {
    mv::Rng rng(5);
    {
        // Single vision token: every output row equals it, attention is 1.
        mv::Tape tape;
        mv::CompressionState st = mv::CompressionState::init(1, 8, rng);
        mv::Var h = tape.constant(rng.normal_mat(1, 8, 1.0));
        auto r = mv::compress_query(tape, st, h, {{0.0, 0.0}}, mv::align_query_coords(1, 1));
        if ((r.compressed.value() - h.value()).cwiseAbs().maxCoeff() != 0.0) return false;
        if (r.attention.value()(0, 0) != 1.0) return false;
    }
    {
        // Zero queries without PE give uniform logits: exact average pooling.
        mv::Tape tape;
        mv::CompressionState st = mv::CompressionState::init(1, 8, rng);
        st.queries.value.setZero();
        st.use_pe = false;
        const mv::Mat h = rng.normal_mat(16, 8, 1.0);
        auto r = mv::compress_query(tape, st, tape.constant(h), mv::grid_coords(4),
                                    mv::align_query_coords(1, 4));
        const mv::Mat pooled = mv::compress_avgpool(h, 1);
        if (r.compressed.value() != pooled) return false;
    }
    {
        mv::Tape tape;
        mv::CompressionState st = mv::CompressionState::init(2, 8, rng);
        const mv::Mat h = rng.normal_mat(16, 8, 1.0);
        auto r = mv::compress_query(tape, st, tape.constant(h), mv::grid_coords(4),
                                    mv::align_query_coords(2, 4));
        const mv::Mat a = r.attention.value();
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            if (std::abs(a.row(i).sum() - 1.0) > 1e-12 || a.row(i).minCoeff() < 0.0) return false;
        }
        // Convex combination: inside per-dimension min/max of the inputs.
        for (Eigen::Index j = 0; j < h.cols(); ++j) {
            const double lo = h.col(j).minCoeff(), hi = h.col(j).maxCoeff();
            for (Eigen::Index i = 0; i < r.compressed.rows(); ++i) {
                const double v = r.compressed.value()(i, j);
                if (v < lo - 1e-12 || v > hi + 1e-12) return false;
            }
        }
    }
    return true;
}

bool avgpool_cases() {
    mv::Rng rng(9);
    const mv::Mat h = rng.normal_mat(16, 4, 1.0);
    if (mv::compress_avgpool(h, 4) != h) return false;  // 1x1 blocks
    const mv::Mat one = mv::compress_avgpool(h, 1);
    const mv::Mat two = mv::compress_avgpool(h, 2);
    for (Eigen::Index j = 0; j < 4; ++j) {
        if (std::abs(one(0, j) - h.col(j).mean()) > 1e-12) return false;
    }
    // Brute-force block mean for block (0, 0).
    mv::Mat blk = mv::Mat::Zero(1, 4);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) blk += h.row(r * 4 + c);
    if ((two.row(0) - blk / 4.0).cwiseAbs().maxCoeff() > 1e-12) return false;
    return true;
}

bool prefusion_passthrough() {
    mv::ModelConfig cfg;
    cfg.d_h = 16;
    cfg.d_ffn = 32;
    cfg.n_heads = 2;
    cfg.n_fusion_layers = 0;
    mv::Rng rng(4);
    {
        mv::PrefusionStack empty = mv::PrefusionStack::init(cfg, rng);
        mv::Tape tape;
        mv::Var v = tape.constant(rng.normal_mat(5, 16, 1.0));
        mv::Var q = tape.constant(rng.normal_mat(3, 16, 1.0));
        if (mv::prefuse(tape, empty, v, q).value() != q.value()) return false;
    }
    {
        cfg.n_fusion_layers = 2;
        mv::PrefusionStack stack = mv::PrefusionStack::init(cfg, rng);
        for (auto& b : stack.blocks) b.zero_all();
        mv::Tape tape;
        mv::Var v = tape.constant(rng.normal_mat(5, 16, 1.0));
        mv::Var q = tape.constant(rng.normal_mat(3, 16, 1.0));
        if (mv::prefuse(tape, stack, v, q).value() != q.value()) return false;
    }
    return true;
}

mv::ModelConfig micro_config(int n = 2, int c = 1, int fusion = 1) {
    mv::ModelConfig cfg;
    cfg.d_h = 16;
    cfg.n_llm_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ffn = 32;
    cfg.vocab_size = 24;
    cfg.max_seq_len = 96;
    cfg.d_vit = 12;
    cfg.n_vit_layers = 1;
    cfg.n_vit_heads = 2;
    cfg.d_vit_ffn = 24;
    cfg.patch_size = 4;
    cfg.patch_grid = n;
    cfg.compression_grid = c;
    cfg.n_fusion_layers = fusion;
    return cfg;
}

mv::Image random_image(mv::Rng& rng, int side, int channels = 3) {
    mv::Image img(side, side, channels);
    for (double& v : img.data) v = rng.uniform();
    return img;
}

bool token_count_identities() {
    mv::Rng rng(21);
    for (int it = 0; it < 60; ++it) {
        const int n = rng.uniform_int(2, 4);
        const int c = rng.uniform_int(1, n);
        const mv::ModelConfig cfg = micro_config(n, c, rng.uniform_int(0, 2));
        mv::MiniModel m = mv::MiniModel::init(cfg, static_cast<uint64_t>(it));
        const int lq = rng.uniform_int(1, 6);
        std::vector<int> instr(static_cast<size_t>(lq), 3);
        mv::Image img = random_image(rng, cfg.image_side());
        {
            mv::Tape tape;
            auto out = mv::forward_image(tape, m, img, instr);
            if (out.llm_input_len != c * c + lq) return false;
            if (out.logits.rows() != c * c + lq) return false;
        }
        {
            mv::Tape tape;
            auto out = mv::forward_hires(tape, m, random_image(rng, 2 * cfg.image_side()), instr);
            if (out.llm_input_len != c * c + lq) return false;
        }
        {
            const int frames = rng.uniform_int(1, 3);
            std::vector<mv::Image> vid;
            for (int f = 0; f < frames; ++f) vid.push_back(random_image(rng, cfg.image_side()));
            mv::Tape tape;
            auto out = mv::forward_video(tape, m, vid, instr);
            if (out.llm_input_len != frames * c * c + lq) return false;
        }
        {
            mv::Tape tape;
            auto out = mv::forward_baseline(tape, m, img, instr);
            if (out.llm_input_len != n * n + lq) return false;
        }
    }
    return true;
}

bool drop_spec_checks() {
    const mv::ModelConfig cfg = micro_config(2, 1, 0);
    mv::MiniModel m = mv::MiniModel::init(cfg, 3);
    mv::Rng rng(13);
    mv::Image img = random_image(rng, cfg.image_side());
    const std::vector<int> instr = {2, 3, 4};
    mv::ForwardOptions plain_opt;
    mv::Tape t0;
    const mv::Mat plain = mv::forward_baseline(t0, m, img, instr, plain_opt).logits.value();
    {
        mv::Tape t1;
        mv::DropSpec none;
        mv::ForwardOptions opt;
        opt.drop = &none;
        const mv::Mat dropped = mv::forward_baseline(t1, m, img, instr, opt).logits.value();
        if (dropped != plain) return false;
    }
    {
        mv::DropSpec all = {0, 1};
        mv::ForwardOptions opt;
        opt.drop = &all;
        mv::Tape t1;
        const mv::Mat dropped = mv::forward_baseline(t1, m, img, instr, opt).logits.value();
        // Oracle: run the same stack with an explicit vision-excluding mask.
        mv::Tape t2;
        mv::ForwardOptions rec;
        rec.record = true;
        auto out = mv::forward_baseline(t2, m, img, instr, rec);
        mv::Tape t3;
        mv::Var h_v = m.proj.apply(t3, m.vit.encode(t3, img), m.cfg.nonlinearity);
        mv::Var h_q = m.llm.embed(t3, instr);
        const int k = static_cast<int>(instr.size()) / 2;
        mv::Var seq = mv::concat_rows({mv::slice_rows(h_q, 0, k), h_v,
                                       mv::slice_rows(h_q, k, static_cast<int>(instr.size()) - k)});
        const int len = static_cast<int>(seq.rows());
        mv::Var x = mv::add(seq, mv::slice_rows(t3.param(m.llm.pos_embed), 0, len));
        const mv::BoolMat mask = mv::causal_mask_drop_vision(len, out.layout);
        for (auto& b : m.llm.blocks) {
            x = mv::decoder_block(t3, b, x, mask, m.llm.n_heads, m.llm.nl);
        }
        const mv::Mat oracle =
            mv::matmul(mv::rms_norm(x, t3.param(m.llm.final_gain)), t3.param(m.llm.lm_head)).value();
        if ((dropped - oracle).cwiseAbs().maxCoeff() > 1e-9) return false;
    }
    {
        // Dropping at layer 1 leaves the layer-0 input and attention unchanged.
        mv::DropSpec late = {1};
        mv::ForwardOptions opt;
        opt.drop = &late;
        opt.record = true;
        mv::Tape t1, t2;
        mv::ForwardOptions rec;
        rec.record = true;
        auto a = mv::forward_baseline(t1, m, img, instr, rec);
        auto b = mv::forward_baseline(t2, m, img, instr, opt);
        if (a.trace.layer_inputs[1] != b.trace.layer_inputs[1]) return false;
        if (a.trace.layers[0].heads[0] != b.trace.layers[0].heads[0]) return false;
    }
    return true;
}

bool analysis_cases() {
    // Hand case: 2 tokens, instruction then response, uniform response row.
    mv::AttentionTrace trace;
    trace.layout.spans = {{mv::SpanType::Instruction, 0, 1}, {mv::SpanType::Response, 1, 1}};
    mv::Mat a(2, 2);
    a << 1.0, 0.0, 0.5, 0.5;
    trace.layers.push_back({{a}});
    const auto agg = mv::aggregate_attention(trace);
    const int ins = mv::span_type_index(mv::SpanType::Instruction);
    const int rsp = mv::span_type_index(mv::SpanType::Response);
    if (std::abs(agg[0].value[rsp][ins] - 0.5) > 1e-15) return false;
    if (std::abs(agg[0].value[rsp][rsp] - 0.5) > 1e-15) return false;
    if (agg[0].present[ins][rsp]) return false;  // instruction token sees no response
    // Entropy: uniform over k sources -> ln k, one-hot -> 0, [0.2, 0.3] -> 0.67301.
    mv::AttentionTrace tr2;
    tr2.layout.spans = {{mv::SpanType::Vision, 0, 2}, {mv::SpanType::Instruction, 2, 1}};
    mv::Mat b(3, 3);
    b << 1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.2, 0.3, 0.5;
    tr2.layers.push_back({{b}});
    const auto ent = mv::attention_entropy(tr2);
    const int vis = mv::span_type_index(mv::SpanType::Vision);
    // Rows: token0 one-hot (0), token1 uniform (ln 2), token2 renormalized
    // [0.4, 0.6] (0.67301); the layer value averages the three.
    const double expect = (0.0 + std::log(2.0) + 0.6730116670092565) / 3.0;
    if (std::abs(ent[0].value[vis] - expect) > 1e-9) return false;
    return true;
}

bool analysis_mass_decomposition() {
    const mv::ModelConfig cfg = micro_config(2, 1, 1);
    mv::MiniModel m = mv::MiniModel::init(cfg, 17);
    mv::Rng rng(17);
    const std::vector<int> instr = {2, 3, 4};
    const std::vector<int> resp = {5};
    mv::Tape tape;
    mv::ForwardOptions opt;
    opt.record = true;
    opt.response = &resp;
    auto out = mv::forward_baseline(tape, m, random_image(rng, cfg.image_side()), instr, opt);
    for (size_t layer = 0; layer < out.trace.layers.size(); ++layer) {
        const mv::Mat a = out.trace.head_mean(static_cast<int>(layer));
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            double total = 0.0;
            for (int t = 0; t < mv::kNumSpanTypes; ++t) {
                for (int j : out.trace.layout.positions_of(mv::span_type_from_index(t))) {
                    total += a(i, j);
                }
            }
            if (std::abs(total - 1.0) > 1e-12) return false;
        }
    }
    return true;
}

bool efficiency_report_checks() {
    const auto b336 = mv::estimate_flops(mv::preset_by_name("llava-v1.5-336"), 1, 34);
    const auto m336 = mv::estimate_flops(mv::preset_by_name("llava-mini-336"), 1, 34);
    const auto b672 = mv::estimate_flops(mv::preset_by_name("llava-v1.5-672"), 1, 34);
    const auto m672 = mv::estimate_flops(mv::preset_by_name("llava-mini-672"), 1, 34);
    auto within = [](double v, double target, double frac) {
        return std::abs(v - target) <= frac * target;
    };
    if (!within(b336.tflops(b336.total), 8.55, 0.15)) return false;
    if (!within(m336.tflops(m336.total), 1.96, 0.15)) return false;
    if (!within(b672.tflops(b672.total), 40.49, 0.15)) return false;
    if (std::abs(mv::estimate_reduction(b336, m336) - 77.0) > 5.0) return false;
    if (std::abs(mv::estimate_reduction(b672, m672) - 82.0) > 5.0) return false;
    if (mv::estimate_reduction(b336, b336) != 0.0) return false;

    const auto vic = mv::preset_by_name("vicuna7b");
    const auto kv = mv::estimate_kv_memory(vic, 1);
    if (kv.per_token_bytes != 2ull * 32 * 4096 * 2) return false;
    const auto kv576 = mv::estimate_kv_memory(vic, 576);
    if (kv576.total_bytes < 200000000ull || kv576.total_bytes > 358000000ull) return false;
    if (mv::frames_within_budget(mv::preset_by_name("llava-mini-336"), 24000000000ull, 1) < 10000)
        return false;
    if (mv::estimate_kv_memory(vic, 0).total_bytes != 0) return false;

    // Monotonicity in each shape parameter and in sequence length.
    mv::ArchPreset p = mv::preset_by_name("llava-mini-336");
    const uint64_t base = mv::estimate_flops(p, 1, 34).total;
    auto bump = [&](auto f) {
        mv::ArchPreset q = p;
        f(q);
        return mv::estimate_flops(q, 1, 34).total;
    };
    if (bump([](mv::ArchPreset& q) { q.llm.width += 64; }) <= base) return false;
    if (bump([](mv::ArchPreset& q) { q.llm.layers += 1; }) <= base) return false;
    if (bump([](mv::ArchPreset& q) { q.llm.ffn += 64; }) <= base) return false;
    if (bump([](mv::ArchPreset& q) { q.llm_vocab += 1000; }) <= base) return false;
    if (bump([](mv::ArchPreset& q) { q.vit.width += 64; }) <= base) return false;
    if (mv::estimate_flops(p, 1, 35).total <= base) return false;

    // One token, zero-width everything else: the closed form exactly.
    mv::ArchPreset tiny;
    tiny.name = "hand";
    tiny.llm = {1, 8, 16, 2};
    tiny.llm_vocab = 10;
    tiny.vision_tokens_to_llm = 0;
    const auto hand = mv::estimate_flops(tiny, 0, 1);
    const uint64_t expect = 1ull * (2 * (4 * 8 * 8 + 2 * 8 * 16) + 2 * 2 * 1 * 8) + 2 * 8 * 10;
    return hand.llm == expect && hand.total == expect;
}

bool micro_gradcheck() {
    const mv::ModelConfig cfg = micro_config(2, 1, 1);
    mv::MiniModel m = mv::MiniModel::init(cfg, 23);
    mv::Rng rng(23);
    const mv::Image img = random_image(rng, cfg.image_side());
    const std::vector<int> instr = {2, 3, 4};
    const std::vector<int> resp = {5, 6};
    auto loss_fn = [&]() {
        mv::Tape tape;
        mv::ForwardOptions opt;
        opt.response = &resp;
        auto out = mv::forward_image(tape, m, img, instr, opt);
        return mv::response_loss(tape, out, resp).value()(0, 0);
    };
    auto backward_fn = [&]() {
        mv::Tape tape;
        mv::ForwardOptions opt;
        opt.response = &resp;
        auto out = mv::forward_image(tape, m, img, instr, opt);
        tape.backward(mv::response_loss(tape, out, resp));
    };
    const auto report = mv::finite_difference_check(m.parameters(), loss_fn, backward_fn);
    return report.pass;
}

bool determinism_and_serialization() {
    const mv::ModelConfig cfg = micro_config(2, 1, 1);
    mv::MiniModel a = mv::MiniModel::init(cfg, 42);
    mv::MiniModel b = mv::MiniModel::init(cfg, 42);
    mv::Rng rng(1);
    const mv::Image img = random_image(rng, cfg.image_side());
    const std::vector<int> instr = {2, 3};
    mv::Tape t1, t2;
    if (mv::forward_image(t1, a, img, instr).logits.value() !=
        mv::forward_image(t2, b, img, instr).logits.value())
        return false;

    const auto tmp = std::filesystem::temp_directory_path() / "minivlm_selftest_ck.bin";
    mv::save_checkpoint(tmp.string(), a, 0, 0);
    std::ifstream f1(tmp, std::ios::binary);
    std::stringstream s1;
    s1 << f1.rdbuf();
    mv::MiniModel c = mv::load_checkpoint(tmp.string());
    mv::save_checkpoint(tmp.string(), c, 0, 0);
    std::ifstream f2(tmp, std::ios::binary);
    std::stringstream s2;
    s2 << f2.rdbuf();
    std::filesystem::remove(tmp);
    std::filesystem::remove(tmp.string() + ".json");
    return s1.str() == s2.str() && !s1.str().empty();
}

bool training_micro_invariants() {
    const mv::ModelConfig cfg = micro_config(2, 1, 1);
    const auto data = mv::gen_synthetic_data(3, 16, [] {
        mv::SyntheticTaskSpec s;
        s.grid = 2;
        s.cell_px = 4;
        s.n_colors = 2;
        s.instruction = {2, 3};
        s.answer_base = 8;
        return s;
    }());
    for (const auto& s : data) {
        mv::SyntheticTaskSpec spec;
        spec.grid = 2;
        spec.cell_px = 4;
        spec.n_colors = 2;
        if (mv::rule_check_label(s.image, spec) != s.label) return false;
    }
    mv::MiniModel m = mv::MiniModel::init(cfg, 7);
    std::vector<mv::Mat> before;
    for (mv::Parameter* p : m.parameters()) before.push_back(p->value);
    mv::TrainOptions opt;
    opt.steps = 2;
    opt.batch_size = 4;
    opt.lr = 1e-3;
    mv::train_stage1(m, data, opt);
    const auto params = m.parameters();
    for (size_t i = 0; i < params.size(); ++i) {
        const bool is_proj = params[i]->name.rfind("proj.", 0) == 0;
        const bool changed = params[i]->value != before[i];
        if (is_proj != changed) return false;
    }
    // lr = 0 leaves even the projection untouched.
    mv::MiniModel z = mv::MiniModel::init(cfg, 7);
    std::vector<mv::Mat> zbefore;
    for (mv::Parameter* p : z.parameters()) zbefore.push_back(p->value);
    opt.lr = 0.0;
    mv::train_stage1(z, data, opt);
    const auto zp = z.parameters();
    for (size_t i = 0; i < zp.size(); ++i) {
        if (zp[i]->value != zbefore[i]) return false;
    }
    return true;
}

}  // namespace

int run_selftest() {
    check("matmul matches triple-loop oracle", matmul_matches_triple_loop());
    check("softmax rows: symmetry, stability, frozen case, masking", softmax_basics());
    check("backward: analytic cases", backward_analytic_cases());
    check("backward matches central differences", backward_matches_fd());
    check("2D positional encoding: zeros, range, injectivity", posenc_cases());
    check("query coordinate alignment", query_alignment_cases());
    check("compression: identity, uniform=avgpool, row-stochastic, hull", compression_invariants());
    check("average pooling cases", avgpool_cases());
    check("pre-fusion passthroughs", prefusion_passthrough());
    check("token count identities across paths", token_count_identities());
    check("vision-drop: empty identity, masked oracle, layer prefix", drop_spec_checks());
    check("attention aggregation and entropy cases", analysis_cases());
    check("per-token type-mass decomposition", analysis_mass_decomposition());
    check("cost model: totals, reductions, memory, monotonicity", efficiency_report_checks());
    check("full micro-model gradient check", micro_gradcheck());
    check("determinism and byte-stable serialization", determinism_and_serialization());
    check("training freeze and zero-lr invariants", training_micro_invariants());
    std::printf("%s (%d checks, %d failed)\n", g_failures == 0 ? "selftest passed" : "selftest FAILED",
                g_index, g_failures);
    return g_failures == 0 ? 0 : 1;
}
