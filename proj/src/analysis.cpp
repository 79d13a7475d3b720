#include "minivlm/analysis.hpp"

#include "minivlm/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace minivlm {

SpanType span_type_from_index(int i) {
    switch (i) {
        case 0: return SpanType::Instruction;
        case 1: return SpanType::Vision;
        case 2: return SpanType::Response;
    }
    throw std::out_of_range("span_type_from_index: " + std::to_string(i));
}

namespace {

std::array<std::vector<int>, kNumSpanTypes> positions_by_type(const TokenLayout& layout) {
    std::array<std::vector<int>, kNumSpanTypes> out;
    for (int t = 0; t < kNumSpanTypes; ++t) {
        out[static_cast<size_t>(t)] = layout.positions_of(span_type_from_index(t));
    }
    return out;
}

}  // namespace

std::vector<TypeAttention> aggregate_attention(const AttentionTrace& trace) {
    if (trace.empty()) throw std::invalid_argument("aggregate_attention: empty trace");
    const auto pos = positions_by_type(trace.layout);
    std::vector<TypeAttention> out;
    for (size_t layer = 0; layer < trace.layers.size(); ++layer) {
        const Mat a = trace.head_mean(static_cast<int>(layer));
        TypeAttention ta;
        for (int tt = 0; tt < kNumSpanTypes; ++tt) {
            for (int st = 0; st < kNumSpanTypes; ++st) {
                double num = 0.0;
                int den = 0;
                for (int i : pos[static_cast<size_t>(tt)]) {
                    double mass = 0.0;
                    for (int j : pos[static_cast<size_t>(st)]) mass += a(i, j);
                    num += mass;
                    if (mass > 0.0) ++den;
                }
                if (den > 0) {
                    ta.value[static_cast<size_t>(tt)][static_cast<size_t>(st)] = num / den;
                    ta.present[static_cast<size_t>(tt)][static_cast<size_t>(st)] = true;
                }
            }
        }
        out.push_back(ta);
    }
    return out;
}

std::vector<TypeEntropy> attention_entropy(const AttentionTrace& trace) {
    if (trace.empty()) throw std::invalid_argument("attention_entropy: empty trace");
    const auto pos = positions_by_type(trace.layout);
    const int len = trace.layout.total();
    std::vector<TypeEntropy> out;
    for (size_t layer = 0; layer < trace.layers.size(); ++layer) {
        const Mat a = trace.head_mean(static_cast<int>(layer));
        TypeEntropy te;
        for (int st = 0; st < kNumSpanTypes; ++st) {
            double sum = 0.0;
            int count = 0;
            for (int i = 0; i < len; ++i) {
                double mass = 0.0;
                for (int j : pos[static_cast<size_t>(st)]) mass += a(i, j);
                if (mass <= 0.0) continue;
                double h = 0.0;
                for (int j : pos[static_cast<size_t>(st)]) {
                    const double p = a(i, j) / mass;
                    if (p > 0.0) h -= p * std::log(p);
                }
                sum += h;
                ++count;
            }
            if (count > 0) {
                te.value[static_cast<size_t>(st)] = sum / count;
                te.present[static_cast<size_t>(st)] = true;
            }
        }
        out.push_back(te);
    }
    return out;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace

void write_attention_by_type_csv(const std::string& path,
                                 const std::vector<std::vector<TypeAttention>>& per_pass) {
    if (per_pass.empty()) throw std::invalid_argument("write_attention_by_type_csv: no passes");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os << "layer,tgt_type,src_type,value\n";
    const size_t n_layers = per_pass.front().size();
    for (size_t layer = 0; layer < n_layers; ++layer) {
        for (int tt = 0; tt < kNumSpanTypes; ++tt) {
            for (int st = 0; st < kNumSpanTypes; ++st) {
                double sum = 0.0;
                int count = 0;
                for (const auto& pass : per_pass) {
                    const TypeAttention& ta = pass[layer];
                    if (!ta.present[static_cast<size_t>(tt)][static_cast<size_t>(st)]) continue;
                    sum += ta.value[static_cast<size_t>(tt)][static_cast<size_t>(st)];
                    ++count;
                }
                if (count == 0) continue;
                os << layer << "," << span_type_name(span_type_from_index(tt)) << ","
                   << span_type_name(span_type_from_index(st)) << "," << fmt(sum / count) << "\n";
            }
        }
    }
}

void write_entropy_csv(const std::string& path,
                       const std::vector<std::vector<TypeEntropy>>& per_pass) {
    if (per_pass.empty()) throw std::invalid_argument("write_entropy_csv: no passes");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os << "layer,src_type,value\n";
    const size_t n_layers = per_pass.front().size();
    for (size_t layer = 0; layer < n_layers; ++layer) {
        for (int st = 0; st < kNumSpanTypes; ++st) {
            double sum = 0.0;
            int count = 0;
            for (const auto& pass : per_pass) {
                const TypeEntropy& te = pass[layer];
                if (!te.present[static_cast<size_t>(st)]) continue;
                sum += te.value[static_cast<size_t>(st)];
                ++count;
            }
            if (count == 0) continue;
            os << layer << "," << span_type_name(span_type_from_index(st)) << ","
               << fmt(sum / count) << "\n";
        }
    }
}

DropSpec LayerWindow::to_drop_spec() const {
    DropSpec s;
    for (int l = start; l < end; ++l) s.insert(l);
    return s;
}

double answer_accuracy(MiniModel& model, PathKind path,
                       const std::vector<SyntheticSample>& dataset, const DropSpec* drop) {
    if (dataset.empty()) throw std::invalid_argument("answer_accuracy: empty dataset");
    int correct = 0;
    for (const SyntheticSample& s : dataset) {
        const std::vector<Image> images = {s.image};
        const std::vector<int> decoded =
            greedy_decode(model, path, images, s.instruction,
                          static_cast<int>(s.answer.size()), -1, drop);
        if (decoded == s.answer) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

std::vector<DropSweepRow> run_drop_sweep(MiniModel& model,
                                         const std::vector<SyntheticSample>& dataset,
                                         const std::vector<LayerWindow>& windows) {
    const int n_layers = static_cast<int>(model.llm.blocks.size());
    std::vector<DropSweepRow> rows;
    for (const LayerWindow& w : windows) {
        if (w.start < 0 || w.end < w.start || w.end > n_layers) {
            throw std::out_of_range("run_drop_sweep: window [" + std::to_string(w.start) + ", " +
                                    std::to_string(w.end) + ") outside 0.." +
                                    std::to_string(n_layers));
        }
        const DropSpec spec = w.to_drop_spec();
        rows.push_back(
            {w, answer_accuracy(model, PathKind::Baseline, dataset, spec.empty() ? nullptr : &spec)});
    }
    return rows;
}

void write_drop_sweep_csv(const std::string& path, const std::vector<DropSweepRow>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os << "window_start,window_end,accuracy\n";
    for (const DropSweepRow& r : rows) {
        os << r.window.start << "," << r.window.end << "," << fmt(r.accuracy) << "\n";
    }
}

}  // namespace minivlm
