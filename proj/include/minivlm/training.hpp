#pragma once

#include "minivlm/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace minivlm {

enum class TaskKind { DominantColor, MarkedCell };

// Colored-grid image whose answer token is derivable from the pixels alone.
struct SyntheticSample {
    Image image;
    std::vector<int> instruction;
    std::vector<int> answer;  // single answer token
    int label = 0;
};

struct SyntheticTaskSpec {
    TaskKind task = TaskKind::DominantColor;
    int grid = 4;      // colored cells per side
    int cell_px = 4;   // pixels per cell side
    int channels = 3;
    int n_colors = 4;  // palette size for DominantColor
    // Token ids: a fixed question phrase and a contiguous answer block.
    std::vector<int> instruction = {2, 3, 4, 5, 6, 7};
    int answer_base = 16;

    int n_classes() const { return task == TaskKind::DominantColor ? n_colors : grid * grid; }
};

// Deterministic per seed; class-balanced up to +-1 per class.
std::vector<SyntheticSample> gen_synthetic_data(uint64_t seed, int n,
                                                const SyntheticTaskSpec& spec = {});

// Recomputes the label from pixels only (nearest palette color per cell /
// brightest cell), independent of the generator's bookkeeping.
int rule_check_label(const Image& image, const SyntheticTaskSpec& spec);

// ---- optimization ----------------------------------------------------------

// Warmup then cosine decay to zero; factor multiplies the group learning rate.
double cosine_warmup_factor(int step, int total_steps, double warmup_ratio);

// Decoupled-weight-decay adaptive optimizer over parameter groups.
class AdamW {
public:
    struct Group {
        std::vector<Parameter*> params;
        double lr = 1e-3;
    };

    AdamW(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
          double weight_decay = 0.0);

    // Applies one update from the accumulated grads: grad is divided by
    // grad_scale (the batch size) first. Does not zero grads.
    void step(double lr_factor, double grad_scale = 1.0);

private:
    struct Slot {
        Parameter* p;
        double lr;
        Mat m, v;
    };
    std::vector<Slot> slots_;
    double beta1_, beta2_, eps_, weight_decay_;
    int t_ = 0;
};

// ---- two-stage schedule ----------------------------------------------------

// Per-stage trainability. Stage 1 trains the projection only and runs the
// uncompressed path (compression and pre-fusion are not applied); stage 2
// attaches them and trains everything except the vision encoder.
struct FreezeSchedule {
    int stage = 1;
    bool vision_encoder = false;
    bool projection = false;
    bool compression = false;
    bool prefusion = false;
    bool llm = false;

    static FreezeSchedule stage1();
    static FreezeSchedule stage2();
    void apply(MiniModel& m) const;  // sets Parameter::trainable flags
};

struct TrainOptions {
    int steps = 200;
    int batch_size = 32;
    double lr = 1e-3;      // multimodal modules (projection/compression/pre-fusion)
    double mm_lr = 1e-3;   // LLM backbone group in stage 2
    double warmup_ratio = 0.03;
    double weight_decay = 0.0;
    uint64_t seed = 0;
};

struct TrainStats {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> losses;  // per step, batch means
};

// Stage 1: baseline (uncompressed) path, projection-only updates.
TrainStats train_stage1(MiniModel& m, const std::vector<SyntheticSample>& data,
                        const TrainOptions& opt);

// Stage 2: full mini path; `lr` drives projection/compression/pre-fusion and
// `mm_lr` drives the LLM group. The vision encoder stays frozen.
TrainStats train_stage2(MiniModel& m, const std::vector<SyntheticSample>& data,
                        const TrainOptions& opt);

// End-to-end training of the uncompressed baseline path (vision encoder
// frozen); used by the layer-drop ablation which needs a strong baseline.
TrainStats train_baseline(MiniModel& m, const std::vector<SyntheticSample>& data,
                          const TrainOptions& opt);

// Instruction-only control run (no image is ever shown to the model).
TrainStats train_text_only(MiniModel& m, const std::vector<SyntheticSample>& data,
                           const TrainOptions& opt);

// Mean response loss over a dataset on the given path, no parameter updates.
double evaluate_loss(MiniModel& m, PathKind path, const std::vector<SyntheticSample>& data);

// ---- gradient verification -------------------------------------------------

struct GradCheckReport {
    int n_checked = 0;
    double max_rel_error = 0.0;
    std::string worst_parameter;
    bool pass = true;
};

// Central-difference check of d(loss)/d(theta) for every trainable scalar of
// every listed parameter. `loss_fn` must be a pure function of the current
// parameter values. Relative error uses max(|a|, |b|, floor) as denominator.
GradCheckReport finite_difference_check(const std::vector<Parameter*>& params,
                                        const std::function<double()>& loss_fn,
                                        const std::function<void()>& backward_fn,
                                        double eps = 1e-4, double tol = 1e-5,
                                        double denom_floor = 1e-3);

}  // namespace minivlm
