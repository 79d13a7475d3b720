#include "minivlm/training.hpp"

#include "minivlm/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace minivlm {

namespace {

// Fixed palette; values chosen to keep nearest-color assignment unambiguous
// under the +-0.08 pixel noise the generator adds.
const double kPalette[8][3] = {
    {0.9, 0.1, 0.1}, {0.1, 0.8, 0.1}, {0.15, 0.2, 0.9}, {0.85, 0.8, 0.1},
    {0.8, 0.15, 0.8}, {0.1, 0.8, 0.8}, {0.95, 0.55, 0.1}, {0.5, 0.5, 0.5},
};

void paint_cell(Image& img, const SyntheticTaskSpec& spec, int cell_r, int cell_c,
                const double* rgb, Rng& rng, double noise) {
    for (int y = 0; y < spec.cell_px; ++y) {
        for (int x = 0; x < spec.cell_px; ++x) {
            for (int c = 0; c < spec.channels; ++c) {
                const double base = c < 3 ? rgb[c] : 0.0;
                double v = base + noise * (2.0 * rng.uniform() - 1.0);
                img.at(cell_r * spec.cell_px + y, cell_c * spec.cell_px + x, c) =
                    std::min(1.0, std::max(0.0, v));
            }
        }
    }
}

}  // namespace

std::vector<SyntheticSample> gen_synthetic_data(uint64_t seed, int n,
                                                const SyntheticTaskSpec& spec) {
    if (n < 1) throw std::invalid_argument("gen_synthetic_data: n must be >= 1");
    if (spec.n_colors < 2 || spec.n_colors > 8) {
        throw std::invalid_argument("gen_synthetic_data: n_colors must be in [2, 8]");
    }
    Rng rng(seed);
    const int side = spec.grid * spec.cell_px;
    const int cells = spec.grid * spec.grid;

    // Round-robin labels, then shuffle: histogram deviates by at most 1.
    std::vector<int> labels(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = i % spec.n_classes();
    rng.shuffle(labels);

    std::vector<SyntheticSample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int label = labels[static_cast<size_t>(i)];
        SyntheticSample s;
        s.label = label;
        s.instruction = spec.instruction;
        s.answer = {spec.answer_base + label};
        s.image = Image(side, side, spec.channels);

        if (spec.task == TaskKind::DominantColor) {
            // The dominant color gets strictly more cells than any other.
            const int dom_cells = cells / 2 + 1;
            std::vector<int> cell_color(static_cast<size_t>(cells));
            for (int c = 0; c < cells; ++c) {
                if (c < dom_cells) {
                    cell_color[static_cast<size_t>(c)] = label;
                } else {
                    int other = rng.uniform_int(0, spec.n_colors - 2);
                    if (other >= label) ++other;
                    cell_color[static_cast<size_t>(c)] = other;
                }
            }
            rng.shuffle(cell_color);
            for (int c = 0; c < cells; ++c) {
                paint_cell(s.image, spec, c / spec.grid, c % spec.grid,
                           kPalette[cell_color[static_cast<size_t>(c)]], rng, 0.08);
            }
        } else {
            // One bright marked cell on a dark background; label = cell index.
            const double dark[3] = {0.05, 0.05, 0.05};
            const double bright[3] = {0.95, 0.95, 0.95};
            for (int c = 0; c < cells; ++c) {
                paint_cell(s.image, spec, c / spec.grid, c % spec.grid,
                           c == label ? bright : dark, rng, 0.04);
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

int rule_check_label(const Image& image, const SyntheticTaskSpec& spec) {
    const int cells = spec.grid * spec.grid;
    std::vector<double> mean_rgb(static_cast<size_t>(cells) * 3, 0.0);
    const double inv = 1.0 / (spec.cell_px * spec.cell_px);
    for (int cell = 0; cell < cells; ++cell) {
        const int r0 = (cell / spec.grid) * spec.cell_px;
        const int c0 = (cell % spec.grid) * spec.cell_px;
        for (int y = 0; y < spec.cell_px; ++y)
            for (int x = 0; x < spec.cell_px; ++x)
                for (int c = 0; c < 3; ++c)
                    mean_rgb[static_cast<size_t>(cell) * 3 + c] += inv * image.at(r0 + y, c0 + x, c);
    }
    if (spec.task == TaskKind::MarkedCell) {
        int best = 0;
        double best_sum = -1.0;
        for (int cell = 0; cell < cells; ++cell) {
            const double sum = mean_rgb[static_cast<size_t>(cell) * 3] +
                               mean_rgb[static_cast<size_t>(cell) * 3 + 1] +
                               mean_rgb[static_cast<size_t>(cell) * 3 + 2];
            if (sum > best_sum) {
                best_sum = sum;
                best = cell;
            }
        }
        return best;
    }
    std::vector<int> counts(static_cast<size_t>(spec.n_colors), 0);
    for (int cell = 0; cell < cells; ++cell) {
        int nearest = 0;
        double best = 1e18;
        for (int k = 0; k < spec.n_colors; ++k) {
            double d = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double diff = mean_rgb[static_cast<size_t>(cell) * 3 + c] - kPalette[k][c];
                d += diff * diff;
            }
            if (d < best) {
                best = d;
                nearest = k;
            }
        }
        ++counts[static_cast<size_t>(nearest)];
    }
    int best = 0;
    for (int k = 1; k < spec.n_colors; ++k) {
        if (counts[static_cast<size_t>(k)] > counts[static_cast<size_t>(best)]) best = k;
    }
    return best;
}

double cosine_warmup_factor(int step, int total_steps, double warmup_ratio) {
    if (total_steps <= 0) return 1.0;
    const double warmup = warmup_ratio * total_steps;
    if (warmup > 0.0 && step < warmup) return (step + 1) / warmup;
    if (total_steps == 1) return 1.0;
    const double progress = (step - warmup) / std::max(1.0, total_steps - warmup);
    return 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

AdamW::AdamW(std::vector<Group> groups, double beta1, double beta2, double eps,
             double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (const Group& g : groups) {
        for (Parameter* p : g.params) {
            slots_.push_back({p, g.lr, Mat::Zero(p->value.rows(), p->value.cols()),
                              Mat::Zero(p->value.rows(), p->value.cols())});
        }
    }
}

void AdamW::step(double lr_factor, double grad_scale) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (Slot& s : slots_) {
        if (!s.p->trainable) continue;
        const Mat g = s.p->grad / grad_scale;
        s.m = beta1_ * s.m + (1.0 - beta1_) * g;
        s.v = beta2_ * s.v + (1.0 - beta2_) * g.cwiseProduct(g);
        const double lr = s.lr * lr_factor;
        const Mat m_hat = s.m / bc1;
        const Mat v_hat = s.v / bc2;
        if (weight_decay_ != 0.0) s.p->value -= lr * weight_decay_ * s.p->value;
        s.p->value -=
            lr * (m_hat.array() / (v_hat.array().sqrt() + eps_)).matrix();
    }
}

FreezeSchedule FreezeSchedule::stage1() {
    FreezeSchedule f;
    f.stage = 1;
    f.projection = true;
    return f;
}

FreezeSchedule FreezeSchedule::stage2() {
    FreezeSchedule f;
    f.stage = 2;
    f.projection = true;
    f.compression = true;
    f.prefusion = true;
    f.llm = true;
    return f;
}

void FreezeSchedule::apply(MiniModel& m) const {
    auto set = [&m](Module mod, bool trainable) {
        for (Parameter* p : m.module_parameters(mod)) p->trainable = trainable;
    };
    set(Module::VisionEncoder, vision_encoder);
    set(Module::Projection, projection);
    set(Module::Compression, compression);
    set(Module::Prefusion, prefusion);
    set(Module::Llm, llm);
}

namespace {

ForwardOutput run_path(Tape& tape, MiniModel& m, PathKind path, const SyntheticSample& s,
                       const ForwardOptions& opt) {
    switch (path) {
        case PathKind::Image: return forward_image(tape, m, s.image, s.instruction, opt);
        case PathKind::Hires: return forward_hires(tape, m, s.image, s.instruction, opt);
        case PathKind::Video: {
            const std::vector<Image> frames = {s.image};
            return forward_video(tape, m, frames, s.instruction, opt);
        }
        case PathKind::Baseline: return forward_baseline(tape, m, s.image, s.instruction, opt);
        case PathKind::Text: return forward_text(tape, m, s.instruction, opt);
    }
    throw std::logic_error("run_path: bad path");
}

TrainStats train_loop(MiniModel& m, const std::vector<SyntheticSample>& data,
                      const TrainOptions& opt, PathKind path, AdamW& optimizer) {
    if (data.empty()) throw std::invalid_argument("train: empty data");
    Rng rng(opt.seed ^ 0x9e3779b97f4a7c15ull);
    TrainStats stats;
    stats.initial_loss = evaluate_loss(m, path, data);
    for (int step = 0; step < opt.steps; ++step) {
        for (Parameter* p : m.parameters()) p->zero_grad();
        double batch_loss = 0.0;
        for (int b = 0; b < opt.batch_size; ++b) {
            const SyntheticSample& s =
                data[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(data.size()) - 1))];
            Tape tape;
            ForwardOptions fopt;
            fopt.response = &s.answer;
            ForwardOutput out = run_path(tape, m, path, s, fopt);
            Var loss = response_loss(tape, out, s.answer);
            batch_loss += loss.value()(0, 0);
            tape.backward(loss);
        }
        optimizer.step(cosine_warmup_factor(step, opt.steps, opt.warmup_ratio), opt.batch_size);
        stats.losses.push_back(batch_loss / opt.batch_size);
    }
    stats.final_loss = evaluate_loss(m, path, data);
    return stats;
}

}  // namespace

double evaluate_loss(MiniModel& m, PathKind path, const std::vector<SyntheticSample>& data) {
    double total = 0.0;
    for (const SyntheticSample& s : data) {
        Tape tape;
        ForwardOptions fopt;
        fopt.response = &s.answer;
        ForwardOutput out = run_path(tape, m, path, s, fopt);
        total += response_loss(tape, out, s.answer).value()(0, 0);
    }
    return total / static_cast<double>(data.size());
}

TrainStats train_stage1(MiniModel& m, const std::vector<SyntheticSample>& data,
                        const TrainOptions& opt) {
    FreezeSchedule::stage1().apply(m);
    AdamW optimizer({{m.module_parameters(Module::Projection), opt.lr}}, 0.9, 0.999, 1e-8,
                    opt.weight_decay);
    return train_loop(m, data, opt, PathKind::Baseline, optimizer);
}

TrainStats train_stage2(MiniModel& m, const std::vector<SyntheticSample>& data,
                        const TrainOptions& opt) {
    FreezeSchedule::stage2().apply(m);
    std::vector<Parameter*> mm_group;
    for (Module mod : {Module::Projection, Module::Compression, Module::Prefusion}) {
        for (Parameter* p : m.module_parameters(mod)) mm_group.push_back(p);
    }
    AdamW optimizer({{mm_group, opt.lr}, {m.module_parameters(Module::Llm), opt.mm_lr}}, 0.9,
                    0.999, 1e-8, opt.weight_decay);
    return train_loop(m, data, opt, PathKind::Image, optimizer);
}

TrainStats train_baseline(MiniModel& m, const std::vector<SyntheticSample>& data,
                          const TrainOptions& opt) {
    FreezeSchedule f = FreezeSchedule::stage2();
    f.compression = false;
    f.prefusion = false;
    f.apply(m);
    std::vector<Parameter*> mm_group = m.module_parameters(Module::Projection);
    AdamW optimizer({{mm_group, opt.lr}, {m.module_parameters(Module::Llm), opt.mm_lr}}, 0.9,
                    0.999, 1e-8, opt.weight_decay);
    return train_loop(m, data, opt, PathKind::Baseline, optimizer);
}

TrainStats train_text_only(MiniModel& m, const std::vector<SyntheticSample>& data,
                           const TrainOptions& opt) {
    FreezeSchedule f = FreezeSchedule::stage2();
    f.projection = false;
    f.compression = false;
    f.prefusion = false;
    f.apply(m);
    AdamW optimizer({{m.module_parameters(Module::Llm), opt.mm_lr}}, 0.9, 0.999, 1e-8,
                    opt.weight_decay);
    return train_loop(m, data, opt, PathKind::Text, optimizer);
}

GradCheckReport finite_difference_check(const std::vector<Parameter*>& params,
                                        const std::function<double()>& loss_fn,
                                        const std::function<void()>& backward_fn,
                                        double eps, double tol, double denom_floor) {
    for (Parameter* p : params) p->zero_grad();
    backward_fn();

    GradCheckReport report;
    for (Parameter* p : params) {
        for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
            for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
                const double orig = p->value(i, j);
                p->value(i, j) = orig + eps;
                const double up = loss_fn();
                p->value(i, j) = orig - eps;
                const double down = loss_fn();
                p->value(i, j) = orig;
                const double fd = (up - down) / (2.0 * eps);
                const double ad = p->grad(i, j);
                const double denom = std::max({std::abs(fd), std::abs(ad), denom_floor});
                const double rel = std::abs(fd - ad) / denom;
                ++report.n_checked;
                if (rel > report.max_rel_error) {
                    report.max_rel_error = rel;
                    report.worst_parameter = p->name + "[" + std::to_string(i) + "," +
                                             std::to_string(j) + "]";
                }
                if (rel > tol) report.pass = false;
            }
        }
    }
    return report;
}

}  // namespace minivlm
