// Command-line surface: training, forward passes, attention analysis, the
// vision-drop ablation, the analytic cost model and a self-test suite.

#include "minivlm/analysis.hpp"
#include "minivlm/compression.hpp"
#include "minivlm/efficiency.hpp"
#include "minivlm/model.hpp"
#include "minivlm/posenc.hpp"
#include "minivlm/tensor_io.hpp"
#include "minivlm/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace mv = minivlm;
using nlohmann::ordered_json;

namespace {

mv::ModelConfig load_model_config(const std::string& config_path,
                                  const std::vector<std::string>& overrides = {}) {
    std::string path = config_path;
    if (path.empty()) {
        if (const char* env = std::getenv("MINIVLM_CONFIG")) path = env;
    }
    nlohmann::json j = nlohmann::json::object();
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw mv::ConfigError("config: cannot open '" + path + "'");
        try {
            j = nlohmann::json::parse(is);
        } catch (const nlohmann::json::parse_error& e) {
            throw mv::ConfigError("config: '" + path + "' is not valid JSON (" + e.what() + ")");
        }
    }
    for (const std::string& kv : overrides) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            throw mv::ConfigError("set: expected key=value, got '" + kv + "'");
        }
        const std::string key = kv.substr(0, eq);
        const std::string value = kv.substr(eq + 1);
        try {
            j[key] = nlohmann::json::parse(value);  // ints, bools
        } catch (const nlohmann::json::parse_error&) {
            j[key] = value;  // bare strings
        }
    }
    return mv::ModelConfig::from_json(j);
}

// Synthetic inputs must match the encoder geometry of the model in hand.
mv::SyntheticTaskSpec task_for(const mv::ModelConfig& cfg, const std::string& task_name) {
    mv::SyntheticTaskSpec spec;
    spec.task = task_name == "cell" ? mv::TaskKind::MarkedCell : mv::TaskKind::DominantColor;
    spec.grid = cfg.patch_grid;
    spec.cell_px = cfg.patch_size;
    spec.channels = cfg.image_channels;
    return spec;
}

std::vector<int> parse_id_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(std::stoi(tok));
    }
    return out;
}

std::vector<mv::LayerWindow> parse_windows(const std::string& spec, int n_layers) {
    std::vector<mv::LayerWindow> out;
    if (spec == "auto") {
        out.push_back({0, 0});  // no-drop reference row
        const int quarter = std::max(1, n_layers / 4);
        for (int s = 0; s < n_layers; s += quarter) {
            out.push_back({s, std::min(n_layers, s + quarter)});
        }
        return out;
    }
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        if (tok == "none") {
            out.push_back({0, 0});
            continue;
        }
        const size_t dash = tok.find('-');
        if (dash == std::string::npos) {
            throw std::invalid_argument("windows: expected start-end, got '" + tok + "'");
        }
        out.push_back({std::stoi(tok.substr(0, dash)), std::stoi(tok.substr(dash + 1))});
    }
    return out;
}

mv::Image image_from_tensor(const mv::NamedTensor& t) {
    if (t.dims.size() != 3) {
        throw std::invalid_argument("input tensor '" + t.name + "' must be rank 3 (H x W x C)");
    }
    mv::Image img(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]),
                  static_cast<int>(t.dims[2]));
    img.data = t.data;
    return img;
}

std::vector<mv::Image> video_from_tensor(const mv::NamedTensor& t) {
    if (t.dims.size() != 4) {
        throw std::invalid_argument("input tensor '" + t.name + "' must be rank 4 (M x H x W x C)");
    }
    const size_t frame_sz = t.dims[1] * t.dims[2] * t.dims[3];
    std::vector<mv::Image> frames;
    for (uint64_t f = 0; f < t.dims[0]; ++f) {
        mv::Image img(static_cast<int>(t.dims[1]), static_cast<int>(t.dims[2]),
                      static_cast<int>(t.dims[3]));
        img.data.assign(t.data.begin() + static_cast<long>(f * frame_sz),
                        t.data.begin() + static_cast<long>((f + 1) * frame_sz));
        frames.push_back(std::move(img));
    }
    return frames;
}

void write_json_file(const std::string& path, const ordered_json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os << j.dump(2) << "\n";
}

// Doubles a hi-res synthetic image out of a normal one by pixel replication,
// so hires forwards have a deterministic source at any seed.
mv::Image upscale_2x(const mv::Image& img) {
    mv::Image out(img.height * 2, img.width * 2, img.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y / 2, x / 2, c);
    return out;
}

}  // namespace

int run_selftest();

int main(int argc, char** argv) {
    CLI::App app{"minivlm: minimal-vision-token multimodal model lab"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    std::string config_path;
    std::vector<std::string> config_sets;
    app.add_option("--config", config_path, "model config JSON (or MINIVLM_CONFIG)");
    app.add_option("--set", config_sets, "override a config key, e.g. --set compression_grid=2");

    // ---- train --------------------------------------------------------------
    auto* train = app.add_subcommand("train", "two-stage training on synthetic data");
    std::string stage = "1";
    uint64_t seed = 0;
    mv::TrainOptions topt;
    std::string init_from, out_ckpt = "checkpoint.bin", task = "dominant";
    int data_size = 256;
    train->add_option("--stage", stage, "1, 2, baseline or text")->capture_default_str();
    train->add_option("--seed", seed, "rng seed")->capture_default_str();
    train->add_option("--steps", topt.steps, "optimization steps")->capture_default_str();
    train->add_option("--batch-size", topt.batch_size, "")->capture_default_str();
    train->add_option("--lr", topt.lr, "multimodal-module learning rate")->capture_default_str();
    train->add_option("--mm-lr", topt.mm_lr, "LLM learning rate (stage 2)")->capture_default_str();
    train->add_option("--warmup-ratio", topt.warmup_ratio, "")->capture_default_str();
    train->add_option("--data-size", data_size, "synthetic samples")->capture_default_str();
    train->add_option("--task", task, "dominant or cell")->capture_default_str();
    train->add_option("--init-from", init_from, "checkpoint to continue from");
    train->add_option("--out", out_ckpt, "checkpoint path")->capture_default_str();

    // ---- forward ------------------------------------------------------------
    auto* forward = app.add_subcommand("forward", "single forward pass / greedy decode");
    std::string mode = "image", ckpt_path, input_path, instruction_csv, out_json = "forward.json";
    std::string dump_compression, dump_trace;
    int n_frames = 4, decode_tokens = 1;
    uint64_t fwd_seed = 0;
    forward->add_option("--mode", mode, "image, hires, video or baseline")->capture_default_str();
    forward->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    forward->add_option("--input", input_path, "tensor container (rank-3 image / rank-4 video)");
    forward->add_option("--seed", fwd_seed, "synthetic input seed")->capture_default_str();
    forward->add_option("--frames", n_frames, "synthetic video frames")->capture_default_str();
    forward->add_option("--instruction", instruction_csv, "comma-separated token ids");
    forward->add_option("--decode", decode_tokens, "greedy tokens to emit")->capture_default_str();
    forward->add_option("--out", out_json, "output JSON path")->capture_default_str();
    forward->add_option("--dump-compression", dump_compression, "compression attention CSV");
    forward->add_option("--dump-trace", dump_trace, "attention trace archive path");

    // ---- analyze-attention ----------------------------------------------------
    auto* analyze = app.add_subcommand("analyze-attention", "layer-wise attention statistics");
    std::string an_ckpt, out_attention = "attention_by_type.csv", out_entropy = "entropy.csv";
    int an_samples = 8;
    uint64_t an_seed = 0;
    analyze->add_option("--checkpoint", an_ckpt, "")->required();
    analyze->add_option("--samples", an_samples, "")->capture_default_str();
    analyze->add_option("--seed", an_seed, "")->capture_default_str();
    analyze->add_option("--out-attention", out_attention, "")->capture_default_str();
    analyze->add_option("--out-entropy", out_entropy, "")->capture_default_str();

    // ---- ablate-drop ----------------------------------------------------------
    auto* ablate = app.add_subcommand("ablate-drop", "vision-token drop sweep");
    std::string ab_ckpt, windows_spec = "auto", out_sweep = "drop_sweep.csv";
    int ab_samples = 64;
    uint64_t ab_seed = 0;
    std::string ab_task = "dominant";
    ablate->add_option("--checkpoint", ab_ckpt, "")->required();
    ablate->add_option("--windows", windows_spec, "start-end list, 'none', or 'auto'")
        ->capture_default_str();
    ablate->add_option("--samples", ab_samples, "")->capture_default_str();
    ablate->add_option("--seed", ab_seed, "")->capture_default_str();
    ablate->add_option("--task", ab_task, "dominant or cell")->capture_default_str();
    ablate->add_option("--out", out_sweep, "")->capture_default_str();

    // ---- estimate-flops ---------------------------------------------------------
    auto* flops = app.add_subcommand("estimate-flops", "analytic prefill FLOPs report");
    std::string preset_name = "llava-v1.5-336", preset_file, flops_json, baseline_name;
    int lq = 34, n_images = 1, c_override = 0, nf_override = -1;
    bool show_preset = false;
    flops->add_option("--preset", preset_name, "")->capture_default_str();
    flops->add_option("--preset-file", preset_file, "custom preset JSON");
    flops->add_option("--lq", lq, "instruction length")->capture_default_str();
    flops->add_option("--images", n_images, "images (frames for video)")->capture_default_str();
    flops->add_option("--c", c_override, "compression grid override");
    flops->add_option("--n-fusion", nf_override, "pre-fusion layer override");
    flops->add_option("--baseline", baseline_name, "also report reduction vs this preset");
    flops->add_option("--json", flops_json, "write the report as JSON");
    flops->add_flag("--show-preset", show_preset, "print the preset JSON and exit");

    // ---- estimate-memory ---------------------------------------------------------
    auto* memory = app.add_subcommand("estimate-memory", "KV-cache memory report");
    std::string mem_preset = "vicuna7b", mem_json;
    uint64_t tokens = 0, budget = 0;
    int mem_frames = 0, mem_c = 1, bytes_per_element = 2;
    memory->add_option("--preset", mem_preset, "")->capture_default_str();
    memory->add_option("--tokens", tokens, "token count");
    memory->add_option("--frames", mem_frames, "frame count (uses C^2 tokens per frame)");
    memory->add_option("--c", mem_c, "compression grid")->capture_default_str();
    memory->add_option("--budget", budget, "bytes; reports frames that fit");
    memory->add_option("--bytes-per-element", bytes_per_element, "")->capture_default_str();
    memory->add_option("--json", mem_json, "write the report as JSON");

    auto* selftest = app.add_subcommand("selftest", "run the invariant suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ExtrasError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    } catch (const CLI::RequiredError& e) {
        if (app.get_subcommands().empty()) {
            std::cerr << "error: " << e.what() << "\n\n" << app.help() << "\n";
            return 2;
        }
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (train->parsed()) {
            if (task != "cell" && task != "dominant") {
                throw mv::ConfigError("task: expected dominant or cell, got '" + task + "'");
            }
            topt.seed = seed;
            mv::MiniModel model = [&]() {
                if (!init_from.empty()) return mv::load_checkpoint(init_from);
                return mv::MiniModel::init(load_model_config(config_path, config_sets), seed);
            }();
            const auto data = mv::gen_synthetic_data(seed, data_size, task_for(model.cfg, task));
            mv::TrainStats stats;
            int stage_id = 0;
            if (stage == "1") {
                stats = mv::train_stage1(model, data, topt);
                stage_id = 1;
            } else if (stage == "2") {
                if (init_from.empty()) {
                    throw mv::ConfigError("init-from: stage 2 requires a stage-1 checkpoint");
                }
                stats = mv::train_stage2(model, data, topt);
                stage_id = 2;
            } else if (stage == "baseline") {
                stats = mv::train_baseline(model, data, topt);
                stage_id = 2;
            } else if (stage == "text") {
                stats = mv::train_text_only(model, data, topt);
                stage_id = 2;
            } else {
                throw mv::ConfigError("stage: expected 1, 2, baseline or text, got '" + stage + "'");
            }
            mv::save_checkpoint(out_ckpt, model, stage_id, topt.steps);
            std::printf("stage=%s steps=%d initial_loss=%.6f final_loss=%.6f checkpoint=%s\n",
                        stage.c_str(), topt.steps, stats.initial_loss, stats.final_loss,
                        out_ckpt.c_str());
            return 0;
        }

        if (forward->parsed()) {
            mv::MiniModel model = mv::load_checkpoint(ckpt_path);
            const mv::SyntheticTaskSpec tspec = task_for(model.cfg, "dominant");
            std::vector<int> instruction =
                instruction_csv.empty() ? tspec.instruction : parse_id_list(instruction_csv);

            std::vector<mv::Image> images;
            if (!input_path.empty()) {
                const mv::Archive a = mv::read_archive(input_path);
                if (a.tensors.empty()) throw std::invalid_argument("input: empty container");
                if (mode == "video") {
                    images = video_from_tensor(a.tensors.front());
                } else {
                    images = {image_from_tensor(a.tensors.front())};
                }
            } else {
                const auto data =
                    mv::gen_synthetic_data(fwd_seed, mode == "video" ? n_frames : 1, tspec);
                for (const auto& s : data) images.push_back(s.image);
                if (mode == "hires") images = {upscale_2x(images.front())};
            }

            mv::Tape tape;
            mv::ForwardOptions opt;
            opt.record = !dump_trace.empty();
            mv::ForwardOutput out;
            mv::PathKind path = mv::PathKind::Image;
            if (mode == "image") {
                out = mv::forward_image(tape, model, images.front(), instruction, opt);
            } else if (mode == "hires") {
                path = mv::PathKind::Hires;
                out = mv::forward_hires(tape, model, images.front(), instruction, opt);
            } else if (mode == "video") {
                path = mv::PathKind::Video;
                out = mv::forward_video(tape, model, images, instruction, opt);
            } else if (mode == "baseline") {
                path = mv::PathKind::Baseline;
                out = mv::forward_baseline(tape, model, images.front(), instruction, opt);
            } else {
                throw mv::ConfigError("mode: expected image, hires, video or baseline, got '" +
                                      mode + "'");
            }

            ordered_json j;
            j["mode"] = mode;
            j["llm_input_len"] = out.llm_input_len;
            j["decoded"] = mv::greedy_decode(model, path, images, instruction, decode_tokens);
            const Eigen::Index last = out.logits.rows() - 1;
            std::vector<double> last_logits(out.logits.value().row(last).data(),
                                            out.logits.value().row(last).data() +
                                                out.logits.cols());
            j["last_position_logits"] = last_logits;
            write_json_file(out_json, j);

            if (!dump_compression.empty()) {
                if (out.compression_attention.size() == 0) {
                    throw std::invalid_argument(
                        "dump-compression: this path has no query-based compression map");
                }
                mv::write_attention_csv(dump_compression, out.compression_attention);
            }
            if (!dump_trace.empty()) {
                std::vector<mv::NamedTensor> tensors;
                for (size_t l = 0; l < out.trace.layers.size(); ++l) {
                    for (size_t h = 0; h < out.trace.layers[l].heads.size(); ++h) {
                        tensors.push_back(mv::NamedTensor::from_mat(
                            "layer" + std::to_string(l) + ".head" + std::to_string(h),
                            out.trace.layers[l].heads[h]));
                    }
                }
                ordered_json spans = ordered_json::array();
                for (const mv::Span& s : out.layout.spans) {
                    spans.push_back({{"type", mv::span_type_name(s.type)},
                                     {"start", s.start},
                                     {"length", s.length}});
                }
                ordered_json meta;
                meta["layout"] = spans;
                mv::write_archive(dump_trace, tensors, meta);
            }
            std::printf("wrote %s\n", out_json.c_str());
            return 0;
        }

        if (analyze->parsed()) {
            mv::MiniModel model = mv::load_checkpoint(an_ckpt);
            const auto data =
                mv::gen_synthetic_data(an_seed, an_samples, task_for(model.cfg, "dominant"));
            std::vector<std::vector<mv::TypeAttention>> att;
            std::vector<std::vector<mv::TypeEntropy>> ent;
            for (const auto& s : data) {
                mv::Tape tape;
                mv::ForwardOptions opt;
                opt.record = true;
                opt.response = &s.answer;
                mv::ForwardOutput out = mv::forward_baseline(tape, model, s.image, s.instruction, opt);
                att.push_back(mv::aggregate_attention(out.trace));
                ent.push_back(mv::attention_entropy(out.trace));
            }
            mv::write_attention_by_type_csv(out_attention, att);
            mv::write_entropy_csv(out_entropy, ent);
            std::printf("wrote %s and %s\n", out_attention.c_str(), out_entropy.c_str());
            return 0;
        }

        if (ablate->parsed()) {
            mv::MiniModel model = mv::load_checkpoint(ab_ckpt);
            if (ab_task != "cell" && ab_task != "dominant") {
                throw mv::ConfigError("task: expected dominant or cell, got '" + ab_task + "'");
            }
            const auto data =
                mv::gen_synthetic_data(ab_seed, ab_samples, task_for(model.cfg, ab_task));
            const auto windows =
                parse_windows(windows_spec, static_cast<int>(model.llm.blocks.size()));
            const auto rows = mv::run_drop_sweep(model, data, windows);
            mv::write_drop_sweep_csv(out_sweep, rows);
            for (const auto& r : rows) {
                std::printf("window [%d, %d): accuracy %.4f\n", r.window.start, r.window.end,
                            r.accuracy);
            }
            std::printf("wrote %s\n", out_sweep.c_str());
            return 0;
        }

        if (flops->parsed()) {
            const mv::ArchPreset preset = [&]() {
                if (!preset_file.empty()) {
                    std::ifstream is(preset_file);
                    if (!is) throw mv::ConfigError("preset-file: cannot open '" + preset_file + "'");
                    return mv::ArchPreset::from_json(nlohmann::json::parse(is));
                }
                return mv::preset_by_name(preset_name);
            }();
            if (show_preset) {
                std::cout << preset.to_json().dump(2) << "\n";
                return 0;
            }
            const mv::FlopsReport r =
                mv::estimate_flops(preset, n_images, lq, c_override, nf_override);
            std::cout << r.table();
            ordered_json j = r.to_json();
            if (!baseline_name.empty()) {
                const mv::FlopsReport base =
                    mv::estimate_flops(mv::preset_by_name(baseline_name), n_images, lq);
                const double red = mv::estimate_reduction(base, r);
                std::printf("reduction vs %s: %.2f%%\n", baseline_name.c_str(), red);
                j["reduction_vs"] = baseline_name;
                j["reduction_percent"] = red;
            }
            if (!flops_json.empty()) write_json_file(flops_json, j);
            return 0;
        }

        if (memory->parsed()) {
            const mv::ArchPreset preset = mv::preset_by_name(mem_preset);
            ordered_json j;
            if (budget > 0) {
                const uint64_t frames =
                    mv::frames_within_budget(preset, budget, mem_c, bytes_per_element);
                j["budget_bytes"] = budget;
                j["c"] = mem_c;
                j["frames_within_budget"] = frames;
                std::printf("frames within %llu bytes at C=%d: %llu\n",
                            static_cast<unsigned long long>(budget), mem_c,
                            static_cast<unsigned long long>(frames));
            } else {
                const uint64_t n = mem_frames > 0
                                       ? static_cast<uint64_t>(mem_frames) * mem_c * mem_c
                                       : tokens;
                const mv::MemoryReport r = mv::estimate_kv_memory(preset, n, bytes_per_element);
                j = r.to_json();
                std::printf("%llu tokens -> %.3f MiB KV cache (%llu bytes per token)\n",
                            static_cast<unsigned long long>(r.n_tokens),
                            static_cast<double>(r.total_bytes) / (1024.0 * 1024.0),
                            static_cast<unsigned long long>(r.per_token_bytes));
            }
            if (!mem_json.empty()) write_json_file(mem_json, j);
            return 0;
        }

        if (selftest->parsed()) return run_selftest();
    } catch (const mv::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
