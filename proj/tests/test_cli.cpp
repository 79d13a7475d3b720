#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "minivlm/tensor_io.hpp"

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

RunResult run(const std::string& args) {
    const std::string cmd = std::string(MINIVLM_CLI_PATH) + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    RunResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    size_t n = 0;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
    const int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / "minivlm_cli_test";
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

// Small model so CLI-driven training stays fast.
void write_micro_config(const std::string& path) {
    std::ofstream os(path);
    os << R"({"d_h": 16, "n_llm_layers": 2, "n_heads": 2, "d_ffn": 32, "vocab_size": 32,
          "max_seq_len": 96, "d_vit": 12, "n_vit_layers": 1, "n_vit_heads": 2, "d_vit_ffn": 24,
          "patch_size": 4, "patch_grid": 4, "compression_grid": 1, "n_fusion_layers": 1})";
}

}  // namespace

TEST_CASE("no subcommand and unknown subcommands exit 2 with usage") {
    CHECK(run("").exit_code == 2);
    const RunResult r = run("frobnicate");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("Usage") != std::string::npos);
}

TEST_CASE("an unknown config key exits 1 and names the key") {
    TempDir dir;
    std::ofstream os(dir.file("bad.json"));
    os << R"({"d_h": 16, "mystery_knob": 3})";
    os.close();
    const RunResult r = run("--config " + dir.file("bad.json") + " train --steps 1");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("mystery_knob") != std::string::npos);
}

TEST_CASE("an invalid config value exits 1 and names the key") {
    TempDir dir;
    std::ofstream os(dir.file("bad.json"));
    os << R"({"d_h": 15})";
    os.close();
    const RunResult r = run("--config " + dir.file("bad.json") + " train --steps 1");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("d_h") != std::string::npos);
}

TEST_CASE("estimate-flops prints the component table and honors --json") {
    TempDir dir;
    const RunResult r = run("estimate-flops --preset llava-v1.5-336 --lq 34 --json " +
                            dir.file("a.json"));
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("Total") != std::string::npos);
    CHECK(run("estimate-flops --preset llava-v1.5-336 --lq 34 --json " + dir.file("b.json"))
              .exit_code == 0);
    CHECK(slurp(dir.file("a.json")) == slurp(dir.file("b.json")));
    CHECK(!slurp(dir.file("a.json")).empty());
}

TEST_CASE("estimate-flops reports the reduction against a baseline preset") {
    const RunResult r =
        run("estimate-flops --preset llava-mini-336 --lq 34 --baseline llava-v1.5-336");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("reduction") != std::string::npos);
}

TEST_CASE("estimate-memory reports per-token KV bytes") {
    const RunResult r = run("estimate-memory --preset vicuna7b --tokens 1");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("0.500 MiB") != std::string::npos);
    const RunResult b = run("estimate-memory --preset llava-mini-336 --budget 24000000000 --c 1");
    CHECK(b.exit_code == 0);
    CHECK(b.output.find("frames within") != std::string::npos);
}

TEST_CASE("unknown preset names exit 1 with the offending name") {
    const RunResult r = run("estimate-flops --preset not-a-preset");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("not-a-preset") != std::string::npos);
}

TEST_CASE("--set overrides config keys and rejects malformed overrides") {
    TempDir dir;
    write_micro_config(dir.file("cfg.json"));
    const RunResult bad = run("--config " + dir.file("cfg.json") +
                              " --set compression_grid=9 train --steps 1");
    CHECK(bad.exit_code == 1);
    CHECK(bad.output.find("compression_grid") != std::string::npos);
    CHECK(run("--set oops train --steps 1").exit_code == 1);
}

TEST_CASE("forward accepts a raw image in the tensor container format") {
    TempDir dir;
    write_micro_config(dir.file("cfg.json"));
    const RunResult t = run("--config " + dir.file("cfg.json") +
                            " train --stage 1 --seed 2 --steps 1 --batch-size 2 --data-size 4 "
                            "--out " + dir.file("ck.bin"));
    REQUIRE(t.exit_code == 0);

    minivlm::NamedTensor img;
    img.name = "image";
    img.dims = {16, 16, 3};
    img.data.assign(16 * 16 * 3, 0.5);
    minivlm::write_archive(dir.file("img.bin"), {img});
    const RunResult f = run("forward --mode image --checkpoint " + dir.file("ck.bin") +
                            " --input " + dir.file("img.bin") + " --out " + dir.file("out.json"));
    CHECK(f.exit_code == 0);
    CHECK(slurp(dir.file("out.json")).find("llm_input_len") != std::string::npos);
}

TEST_CASE("train / forward / analyze / ablate round-trip on a micro model") {
    TempDir dir;
    write_micro_config(dir.file("cfg.json"));
    const std::string common = "--config " + dir.file("cfg.json") + " ";

    const RunResult t1 = run(common + "train --stage 1 --seed 3 --steps 2 --batch-size 2 " +
                             "--data-size 8 --out " + dir.file("ck1.bin"));
    CHECK(t1.exit_code == 0);
    CHECK(fs::exists(dir.file("ck1.bin")));

    // Identical command lines produce byte-identical checkpoints.
    const RunResult t2 = run(common + "train --stage 1 --seed 3 --steps 2 --batch-size 2 " +
                             "--data-size 8 --out " + dir.file("ck1b.bin"));
    CHECK(t2.exit_code == 0);
    CHECK(slurp(dir.file("ck1.bin")) == slurp(dir.file("ck1b.bin")));

    // Stage 2 requires a starting checkpoint.
    CHECK(run(common + "train --stage 2 --steps 1").exit_code == 1);
    const RunResult t3 = run(common + "train --stage 2 --seed 3 --steps 2 --batch-size 2 " +
                             "--data-size 8 --init-from " + dir.file("ck1.bin") + " --out " +
                             dir.file("ck2.bin"));
    CHECK(t3.exit_code == 0);

    const RunResult f = run("forward --mode image --checkpoint " + dir.file("ck2.bin") +
                            " --seed 5 --decode 2 --out " + dir.file("fwd.json") +
                            " --dump-compression " + dir.file("attn.csv") +
                            " --dump-trace " + dir.file("trace.bin"));
    CHECK(f.exit_code == 0);
    const std::string fwd = slurp(dir.file("fwd.json"));
    CHECK(fwd.find("llm_input_len") != std::string::npos);
    CHECK(fwd.find("decoded") != std::string::npos);
    CHECK(slurp(dir.file("attn.csv")).rfind("query,", 0) == 0);
    // Trace archive: one tensor per layer/head plus the layout descriptor.
    const minivlm::Archive trace = minivlm::read_archive(dir.file("trace.bin"));
    CHECK(trace.tensors.size() == 2 * 2);  // 2 layers x 2 heads
    CHECK(trace.find("layer0.head0") != nullptr);
    CHECK(trace.metadata.contains("layout"));

    const RunResult v = run("forward --mode video --frames 3 --checkpoint " + dir.file("ck2.bin") +
                            " --seed 5 --out " + dir.file("vid.json"));
    CHECK(v.exit_code == 0);

    const RunResult h = run("forward --mode hires --checkpoint " + dir.file("ck2.bin") +
                            " --seed 5 --out " + dir.file("hr.json"));
    CHECK(h.exit_code == 0);

    const RunResult a = run("analyze-attention --checkpoint " + dir.file("ck2.bin") +
                            " --samples 2 --seed 4 --out-attention " + dir.file("at.csv") +
                            " --out-entropy " + dir.file("en.csv"));
    CHECK(a.exit_code == 0);
    CHECK(slurp(dir.file("at.csv")).rfind("layer,tgt_type,src_type,value", 0) == 0);
    CHECK(slurp(dir.file("en.csv")).rfind("layer,src_type,value", 0) == 0);

    const RunResult d = run("ablate-drop --checkpoint " + dir.file("ck2.bin") +
                            " --windows none,0-1,1-2 --samples 4 --seed 4 --out " +
                            dir.file("sweep.csv"));
    CHECK(d.exit_code == 0);
    CHECK(slurp(dir.file("sweep.csv")).rfind("window_start,window_end,accuracy", 0) == 0);

    // Drop windows outside the layer range are rejected.
    CHECK(run("ablate-drop --checkpoint " + dir.file("ck2.bin") + " --windows 0-9 --samples 2")
              .exit_code == 1);
}
