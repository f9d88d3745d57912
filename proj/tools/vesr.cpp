// Command-line front end: data generation, training, inference and analysis.

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "vesr/analysis.hpp"
#include "vesr/train.hpp"

namespace fs = std::filesystem;
using namespace vesr;

namespace {

struct Options {
    std::string preset = "small";
    std::string config;
    std::uint64_t seed = 0;
    std::string checkpoint;
    std::string input;
    std::string output;
    std::int64_t frames = 7;
    std::int64_t size = 64;
    std::int64_t steps = -1;
    std::int64_t samples = 200;
    std::int64_t channels = 128;
    std::vector<std::string> clips;
    bool resume = false;
    bool csv_only = false;
};

VesrNetConfig model_config(const Options& o) {
    if (!o.config.empty()) return load_run_config(o.config).model;
    return preset(o.preset);
}

int gen_data(const Options& o) {
    RunConfig run;
    if (!o.config.empty()) run = load_run_config(o.config);
    auto& d = run.data;
    d.data_seed = o.seed;
    d.clip_frames = o.frames;
    d.clip_size = o.size;
    fs::create_directories(o.output);
    const auto pairs = make_synthetic_pairs(d);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "clip%03zu", i);
        write_clip(fs::path(o.output) / (std::string(stem) + "_hr.vesr"), pairs[i].hr);
        write_clip(fs::path(o.output) / (std::string(stem) + "_lr.vesr"), pairs[i].lr);
    }
    std::cout << "wrote " << pairs.size() << " clip pairs to " << o.output << "\n";
    return 0;
}

int train(const Options& o) {
    if (o.config.empty()) throw ValidationError("train needs --config");
    if (o.checkpoint.empty()) throw ValidationError("train needs --checkpoint");
    const auto run = load_run_config(o.config);
    TrainState state = o.resume ? load_train_state(o.checkpoint) : TrainState::fresh(run.model, run.model_seed);
    if (o.resume && !(state.model.config == run.model)) {
        throw ValidationError("checkpoint architecture differs from the config");
    }
    auto pairs = make_synthetic_pairs(run.data);
    ClipPatchSource source(pairs, run.model.n_frames, run.train.patch_size, run.train.seed);
    const auto result = train_loop(state, source, run.train, o.checkpoint, o.steps);
    for (const auto& r : result.history) {
        if (r.step == 1 || r.step % 10 == 0 || &r == &result.history.back()) {
            std::cout << "step " << r.step << "  epoch " << r.epoch << "  lr " << r.lr << "  loss " << r.loss << "\n";
        }
    }
    if (!o.output.empty()) write_loss_csv(o.output, result.history);
    if (result.halted) {
        std::cerr << "training halted: " << result.halt_reason << "\n";
        return 1;
    }
    if (run.data.clip_frames >= run.model.n_frames) {
        const auto report = evaluate(state.model, pairs);
        std::cout << std::fixed << std::setprecision(2) << "train-clip PSNR: model " << report.mean_model_psnr
                  << " dB, bicubic " << report.mean_bicubic_psnr << " dB\n";
    }
    return 0;
}

int infer(const Options& o) {
    if (o.checkpoint.empty() || o.input.empty() || o.output.empty()) {
        throw ValidationError("infer needs --checkpoint, --input and --output");
    }
    const auto model = model_from_entries(read_checkpoint(o.checkpoint));
    const auto lr = read_clip(o.input);
    const auto hr = super_resolve_clip(model, lr);
    write_clip(o.output, hr);
    auto frames_dir = fs::path(o.output);
    frames_dir.replace_extension();
    frames_dir += "_frames";
    write_ppm_frames(frames_dir, hr);
    std::cout << "wrote " << o.output << " (" << shape_str(hr.frames.shape()) << ") and frames in "
              << frames_dir.string() << "\n";
    return 0;
}

int psnr_cmd(const Options& o) {
    if (o.clips.size() != 2) throw ValidationError("psnr needs two clip paths");
    const auto a = read_clip(o.clips[0]);
    const auto b = read_clip(o.clips[1]);
    std::cout << std::fixed << std::setprecision(2) << "PSNR: " << psnr(a.frames, b.frames) << " dB\n";
    return 0;
}

int count(const Options& o, bool with_flops) {
    const auto net = VesrNet<float>::build(model_config(o), o.seed);
    const auto report = with_flops ? count_flops(net, o.size, o.size) : count_params(net);
    if (!o.csv_only) std::cout << format_count_table(report, with_flops) << "\n";
    std::cout << format_count_csv(report);
    return 0;
}

int gradcheck(const Options& o) {
    const auto cfg = o.config.empty() ? gradcheck_config() : load_run_config(o.config).model;
    const auto report = gradcheck_model(cfg, o.seed, o.samples);
    std::cout << format_gradcheck(report);
    return report.passed() ? 0 : 1;
}

int footprint(const Options& o) {
    const auto f = attention_memory_footprint(o.frames, o.size, o.size, o.channels);
    std::cout << "input " << o.frames << "x" << o.channels << "x" << o.size << "x" << o.size << "\n"
              << "full non-local entries:     " << f.full_entries << "\n"
              << "separate non-local entries: " << f.separate_entries << "\n"
              << std::fixed << std::setprecision(1) << "ratio: " << f.ratio << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"VESR-Net video super-resolution"};
    app.require_subcommand(1);
    Options o;

    auto* gen = app.add_subcommand("gen-data", "Generate synthetic HR/LR clip pairs");
    gen->add_option("--output", o.output, "Output directory")->required();
    gen->add_option("--seed", o.seed, "Data seed");
    gen->add_option("--frames", o.frames, "Frames per clip");
    gen->add_option("--size", o.size, "HR frame size");
    gen->add_option("--config", o.config, "Run config (n_clips, noise_sigma, quantize)");

    auto* tr = app.add_subcommand("train", "Train from a config file");
    tr->add_option("--config", o.config, "Run config")->required();
    tr->add_option("--checkpoint", o.checkpoint, "Checkpoint to write")->required();
    tr->add_option("--steps", o.steps, "Stop after this many steps");
    tr->add_option("--output", o.output, "Loss history CSV");
    tr->add_flag("--resume", o.resume, "Continue from --checkpoint");

    auto* inf = app.add_subcommand("infer", "Super-resolve an LR clip");
    inf->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
    inf->add_option("--input", o.input, "LR clip")->required();
    inf->add_option("--output", o.output, "HR clip to write")->required();

    auto* ps = app.add_subcommand("psnr", "PSNR between two clips");
    ps->add_option("clips", o.clips, "Two .vesr clips")->expected(2)->required();

    auto* cp = app.add_subcommand("count-params", "Parameter counts per submodule");
    auto* cf = app.add_subcommand("count-flops", "FLOP counts per submodule");
    for (auto* sub : {cp, cf}) {
        sub->add_option("--preset", o.preset, "Model preset");
        sub->add_option("--config", o.config, "Run config (overrides --preset)");
        sub->add_option("--seed", o.seed, "Model seed");
        sub->add_flag("--csv", o.csv_only, "CSV only");
    }
    cf->add_option("--size", o.size, "LR frame size");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
    gc->add_option("--seed", o.seed, "Model and input seed");
    gc->add_option("--config", o.config, "Run config (defaults to the tiny check model)");
    gc->add_option("--samples", o.samples, "Sampled parameters");

    auto* fp = app.add_subcommand("footprint", "Attention relation-matrix sizes");
    fp->add_option("--frames", o.frames, "Frames");
    fp->add_option("--size", o.size, "Frame size");
    fp->add_option("--channels", o.channels, "Channels");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return gen_data(o);
        if (tr->parsed()) return train(o);
        if (inf->parsed()) return infer(o);
        if (ps->parsed()) return psnr_cmd(o);
        if (cp->parsed()) return count(o, false);
        if (cf->parsed()) return count(o, true);
        if (gc->parsed()) return gradcheck(o);
        if (fp->parsed()) return footprint(o);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
