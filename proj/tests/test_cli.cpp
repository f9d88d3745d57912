#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>

#include "test_util.hpp"
#include "vesr/analysis.hpp"
#include "vesr/data.hpp"

using namespace vesr;
using vesr::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
};

// Runs the CLI with stdout and stderr captured together.
Run vesr_cli(const std::string& args) {
    const std::string cmd = std::string(VESR_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw std::runtime_error("popen failed");
    std::string out;
    std::array<char, 4096> buf{};
    while (const auto n = std::fread(buf.data(), 1, buf.size(), pipe)) out.append(buf.data(), n);
    const int status = pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kTinyRun = R"(preset = small
channels = 8
n_frames = 3
n_encoder_carbs = 1
n_recon_blocks = 1
reduction = 4
batch_size = 1
steps_per_epoch = 2
total_epochs = 1
patch_size = 8
n_clips = 1
clip_frames = 3
clip_size = 32
)";

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(vesr_cli("").code, 1);
    EXPECT_EQ(vesr_cli("frobnicate").code, 1);
    EXPECT_EQ(vesr_cli("psnr only_one.vesr").code, 1);
    EXPECT_EQ(vesr_cli("count-params --preset nonexistent").code, 1);
    EXPECT_EQ(vesr_cli("--help").code, 0);
}

TEST(Cli, PsnrOfAClipWithItselfIsTheCap) {
    const auto dir = scratch_dir("cli_psnr");
    const auto gen = vesr_cli("gen-data --output " + dir.string() + " --seed 3 --frames 3 --size 32");
    ASSERT_EQ(gen.code, 0) << gen.out;
    const auto a = (dir / "clip000_hr.vesr").string();
    ASSERT_TRUE(fs::exists(a));
    EXPECT_TRUE(fs::exists(dir / "clip000_lr.vesr"));
    const auto same = vesr_cli("psnr " + a + " " + a);
    EXPECT_EQ(same.code, 0);
    EXPECT_EQ(same.out, "PSNR: 100.00 dB\n");
    EXPECT_EQ(vesr_cli("psnr " + a + " " + (dir / "clip000_lr.vesr").string()).code, 1);
    EXPECT_EQ(vesr_cli("psnr " + a + " " + (dir / "missing.vesr").string()).code, 2);
}

TEST(Cli, CountParamsTotalMatchesLibrary) {
    const auto r = vesr_cli("count-params --preset full --csv");
    ASSERT_EQ(r.code, 0) << r.out;
    const auto pos = r.out.find("total,");
    ASSERT_NE(pos, std::string::npos);
    const auto total = std::stoll(r.out.substr(pos + 6));
    EXPECT_EQ(total, analytic_param_count(preset("full")));
    const auto flops = vesr_cli("count-flops --preset small");
    EXPECT_EQ(flops.code, 0);
    EXPECT_NE(flops.out.find("one multiply-accumulate = 2 FLOPs"), std::string::npos);
}

TEST(Cli, TrainThenInfer) {
    const auto dir = scratch_dir("cli_train");
    write_text(dir / "run.cfg", kTinyRun);
    const auto ckpt = (dir / "model.ckpt").string();
    const auto tr = vesr_cli("train --config " + (dir / "run.cfg").string() + " --checkpoint " + ckpt +
                             " --output " + (dir / "loss.csv").string());
    ASSERT_EQ(tr.code, 0) << tr.out;
    EXPECT_NE(tr.out.find("train-clip PSNR"), std::string::npos);
    ASSERT_TRUE(fs::exists(ckpt));
    EXPECT_TRUE(fs::exists(dir / "loss.csv"));

    // Resuming a finished run is a no-op that still succeeds.
    EXPECT_EQ(vesr_cli("train --resume --config " + (dir / "run.cfg").string() + " --checkpoint " + ckpt).code, 0);

    ASSERT_EQ(vesr_cli("gen-data --output " + dir.string() + " --seed 5 --frames 2 --size 32").code, 0);
    const auto out = (dir / "sr.vesr").string();
    const auto inf = vesr_cli("infer --checkpoint " + ckpt + " --input " + (dir / "clip000_lr.vesr").string() +
                              " --output " + out);
    ASSERT_EQ(inf.code, 0) << inf.out;
    const auto sr = read_clip(out);
    const auto lr = read_clip(dir / "clip000_lr.vesr");
    EXPECT_EQ(sr.n_frames(), lr.n_frames());
    EXPECT_EQ(sr.height(), 4 * lr.height());
    EXPECT_EQ(sr.width(), 4 * lr.width());
    EXPECT_TRUE(fs::exists(dir / "sr_frames" / "frame0000.ppm"));
    EXPECT_TRUE(fs::exists(dir / "sr_frames" / "frame0001.ppm"));
}

TEST(Cli, BadInputsMapToExitCodes) {
    const auto dir = scratch_dir("cli_bad");
    write_text(dir / "bad.cfg", "learning_rate = 3\n");
    EXPECT_EQ(vesr_cli("train --config " + (dir / "bad.cfg").string() + " --checkpoint " +
                       (dir / "x.ckpt").string())
                  .code,
              1);
    write_text(dir / "junk.ckpt", "not a checkpoint");
    write_text(dir / "junk.vesr", "not a clip");
    EXPECT_EQ(vesr_cli("infer --checkpoint " + (dir / "junk.ckpt").string() + " --input " +
                       (dir / "junk.vesr").string() + " --output " + (dir / "o.vesr").string())
                  .code,
              2);
    EXPECT_EQ(vesr_cli("train --config " + (dir / "absent.cfg").string() + " --checkpoint x").code, 2);
    EXPECT_EQ(vesr_cli("gradcheck --samples 5").code, 1);
}

TEST(Cli, GradcheckAndFootprint) {
    const auto gc = vesr_cli("gradcheck --seed 2 --samples 80");
    EXPECT_EQ(gc.code, 0) << gc.out;
    EXPECT_NE(gc.out.find("PASS"), std::string::npos);
    const auto fp = vesr_cli("footprint");
    EXPECT_EQ(fp.code, 0);
    EXPECT_NE(fp.out.find("ratio: 49.0"), std::string::npos) << fp.out;
}
