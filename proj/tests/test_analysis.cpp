#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "minivlm/analysis.hpp"
#include "minivlm/training.hpp"
#include "support/test_util.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace minivlm;
using testutil::micro_config;
using testutil::random_image;

namespace {

AttentionTrace single_layer_trace(const TokenLayout& layout, const Mat& attn) {
    AttentionTrace t;
    t.layout = layout;
    t.layers.push_back({{attn}});
    return t;
}

}  // namespace

TEST_CASE("all tokens of one type: Attn(type->type) is 1 per layer") {
    TokenLayout layout;
    layout.spans = {{SpanType::Instruction, 0, 3}};
    Mat a(3, 3);
    a << 1, 0, 0, 0.5, 0.5, 0, 0.2, 0.3, 0.5;
    const auto agg = aggregate_attention(single_layer_trace(layout, a));
    const int ins = span_type_index(SpanType::Instruction);
    CHECK(agg[0].value[ins][ins] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("hand case: uniform response row gives 0.5 to each type") {
    TokenLayout layout;
    layout.spans = {{SpanType::Instruction, 0, 1}, {SpanType::Response, 1, 1}};
    Mat a(2, 2);
    a << 1.0, 0.0, 0.5, 0.5;
    const auto agg = aggregate_attention(single_layer_trace(layout, a));
    const int ins = span_type_index(SpanType::Instruction);
    const int rsp = span_type_index(SpanType::Response);
    CHECK(std::abs(agg[0].value[rsp][ins] - 0.5) <= 1e-12);
    CHECK(std::abs(agg[0].value[rsp][rsp] - 0.5) <= 1e-12);
}

TEST_CASE("a source type with zero mass is reported absent, never divided") {
    TokenLayout layout;
    layout.spans = {{SpanType::Instruction, 0, 1}, {SpanType::Response, 1, 1}};
    Mat a(2, 2);
    a << 1.0, 0.0, 0.5, 0.5;
    const auto agg = aggregate_attention(single_layer_trace(layout, a));
    const int ins = span_type_index(SpanType::Instruction);
    const int rsp = span_type_index(SpanType::Response);
    const int vis = span_type_index(SpanType::Vision);
    CHECK_FALSE(agg[0].present[ins][rsp]);  // the instruction token cannot see the response
    CHECK_FALSE(agg[0].present[ins][vis]);
    CHECK(agg[0].present[rsp][ins]);
}

TEST_CASE("empty trace is an error") {
    AttentionTrace t;
    CHECK_THROWS_AS(aggregate_attention(t), std::invalid_argument);
    CHECK_THROWS_AS(attention_entropy(t), std::invalid_argument);
}

TEST_CASE("entropy: uniform attention over k same-type sources gives ln k") {
    TokenLayout layout;
    layout.spans = {{SpanType::Vision, 0, 4}};
    Mat a(4, 4);
    a.setZero();
    a.row(3) << 0.25, 0.25, 0.25, 0.25;
    a(0, 0) = 1.0;
    a.row(1) << 0.5, 0.5, 0, 0;
    a.row(2) << 0.5, 0.25, 0.25, 0;
    const auto ent = attention_entropy(single_layer_trace(layout, a));
    const int vis = span_type_index(SpanType::Vision);
    // Rows: one-hot (0), uniform-2 (ln 2), [.5 .25 .25] (1.5 ln 2 - ... ), uniform-4 (ln 4).
    const double h2 = std::log(2.0);
    const double h3 = -(0.5 * std::log(0.5) + 2 * 0.25 * std::log(0.25));
    const double expect = (0.0 + h2 + h3 + std::log(4.0)) / 4.0;
    CHECK(ent[0].value[vis] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("entropy: one-hot attention gives 0, restricted row renormalizes first") {
    TokenLayout layout;
    layout.spans = {{SpanType::Vision, 0, 2}, {SpanType::Instruction, 2, 1}};
    Mat a(3, 3);
    a << 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.2, 0.3, 0.5;
    const auto ent = attention_entropy(single_layer_trace(layout, a));
    const int vis = span_type_index(SpanType::Vision);
    // Vision-type entropies: token0 one-hot 0, token1 one-hot 0, token2's
    // restriction [0.2, 0.3] renormalizes to [0.4, 0.6] -> 0.67301.
    const double expect = (0.0 + 0.0 + 0.6730116670092565) / 3.0;
    CHECK(ent[0].value[vis] == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("entropy stays within [0, ln(type token count)] on real traces") {
    const ModelConfig cfg = micro_config(2, 1, 0);
    MiniModel m = MiniModel::init(cfg, 3);
    Rng rng(3);
    const std::vector<int> instr = {2, 3, 4};
    const std::vector<int> resp = {5, 6};
    Tape tape;
    ForwardOptions opt;
    opt.record = true;
    opt.response = &resp;
    auto out = forward_baseline(tape, m, random_image(rng, 8), instr, opt);
    const auto ent = attention_entropy(out.trace);
    for (const auto& layer : ent) {
        for (int st = 0; st < kNumSpanTypes; ++st) {
            if (!layer.present[static_cast<size_t>(st)]) continue;
            const double k = static_cast<double>(
                out.trace.layout.positions_of(span_type_from_index(st)).size());
            CHECK(layer.value[static_cast<size_t>(st)] >= -1e-12);
            CHECK(layer.value[static_cast<size_t>(st)] <= std::log(k) + 1e-12);
        }
    }
}

TEST_CASE("per-token type masses sum to the row total of 1") {
    const ModelConfig cfg = micro_config(2, 1, 0);
    MiniModel m = MiniModel::init(cfg, 4);
    Rng rng(4);
    const std::vector<int> instr = {2, 3, 4};
    const std::vector<int> resp = {5};
    Tape tape;
    ForwardOptions opt;
    opt.record = true;
    opt.response = &resp;
    auto out = forward_baseline(tape, m, random_image(rng, 8), instr, opt);
    for (size_t layer = 0; layer < out.trace.layers.size(); ++layer) {
        const Mat a = out.trace.head_mean(static_cast<int>(layer));
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            double total = 0.0;
            for (int st = 0; st < kNumSpanTypes; ++st) {
                for (int j : out.trace.layout.positions_of(span_type_from_index(st))) {
                    total += a(i, j);
                }
            }
            CHECK(std::abs(total - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("aggregation is invariant to head permutation") {
    TokenLayout layout;
    layout.spans = {{SpanType::Vision, 0, 2}, {SpanType::Instruction, 2, 1}};
    Rng rng(5);
    Tape tape;
    Mat h1 = softmax_rows(tape.constant(rng.normal_mat(3, 3, 1.0)), causal_mask(3)).value();
    Mat h2 = softmax_rows(tape.constant(rng.normal_mat(3, 3, 1.0)), causal_mask(3)).value();
    AttentionTrace fwd, rev;
    fwd.layout = layout;
    rev.layout = layout;
    fwd.layers.push_back({{h1, h2}});
    rev.layers.push_back({{h2, h1}});
    const auto a = aggregate_attention(fwd);
    const auto b = aggregate_attention(rev);
    for (int tt = 0; tt < kNumSpanTypes; ++tt) {
        for (int st = 0; st < kNumSpanTypes; ++st) {
            CHECK(a[0].value[static_cast<size_t>(tt)][static_cast<size_t>(st)] ==
                  doctest::Approx(b[0].value[static_cast<size_t>(tt)][static_cast<size_t>(st)])
                      .epsilon(1e-13));
        }
    }
}

TEST_CASE("drop sweep: empty window reproduces undropped accuracy; full window matches oracle") {
    const ModelConfig cfg = micro_config(2, 1, 0);
    MiniModel m = MiniModel::init(cfg, 6);
    SyntheticTaskSpec task;
    task.grid = 2;
    task.cell_px = 4;
    task.n_colors = 2;
    task.instruction = {2, 3};
    task.answer_base = 8;
    const auto data = gen_synthetic_data(9, 12, task);

    const auto rows = run_drop_sweep(m, data, {{0, 0}, {0, 2}});
    CHECK(rows[0].accuracy == answer_accuracy(m, PathKind::Baseline, data));
    const DropSpec all = {0, 1};
    CHECK(rows[1].accuracy == answer_accuracy(m, PathKind::Baseline, data, &all));
}

TEST_CASE("drop sweep rejects an out-of-range window") {
    const ModelConfig cfg = micro_config(2, 1, 0);
    MiniModel m = MiniModel::init(cfg, 7);
    SyntheticTaskSpec task;
    task.grid = 2;
    task.cell_px = 4;
    task.n_colors = 2;
    task.instruction = {2, 3};
    task.answer_base = 8;
    const auto data = gen_synthetic_data(9, 4, task);
    CHECK_THROWS_AS(run_drop_sweep(m, data, {{0, 5}}), std::out_of_range);
}

TEST_CASE("CSV emitters write the documented schemas") {
    const auto dir = std::filesystem::temp_directory_path();
    TokenLayout layout;
    layout.spans = {{SpanType::Instruction, 0, 1}, {SpanType::Response, 1, 1}};
    Mat a(2, 2);
    a << 1.0, 0.0, 0.5, 0.5;
    const auto agg = aggregate_attention(single_layer_trace(layout, a));
    const auto ent = attention_entropy(single_layer_trace(layout, a));

    const std::string p1 = (dir / "minivlm_attn.csv").string();
    const std::string p2 = (dir / "minivlm_entropy.csv").string();
    const std::string p3 = (dir / "minivlm_sweep.csv").string();
    write_attention_by_type_csv(p1, {agg});
    write_entropy_csv(p2, {ent});
    write_drop_sweep_csv(p3, {{{0, 2}, 0.75}});

    auto first_line = [](const std::string& p) {
        std::ifstream is(p);
        std::string line;
        std::getline(is, line);
        return line;
    };
    CHECK(first_line(p1) == "layer,tgt_type,src_type,value");
    CHECK(first_line(p2) == "layer,src_type,value");
    CHECK(first_line(p3) == "window_start,window_end,accuracy");
    std::ifstream is(p3);
    std::string header, row;
    std::getline(is, header);
    std::getline(is, row);
    CHECK(row == "0,2,0.75");
    for (const auto& p : {p1, p2, p3}) std::filesystem::remove(p);
}
