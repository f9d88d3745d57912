#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "vesr/data.hpp"
#include "vesr/model.hpp"

namespace vesr {

/// Raised when training produces non-finite values.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Mean absolute error; subgradient sign(pred - target) / n, zero at ties.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target);

/// 10 log10(peak^2 / MSE) in dB; exactly equal inputs give kPsnrCap.
inline constexpr double kPsnrCap = 100.0;
template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& target, double peak = 1.0);

struct AdamState {
    std::vector<Tensor<float>> m, v;
    std::int64_t step = 0;
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;

    static AdamState init(const ParamList<float>& params, float lr = 1e-4f);
};

/// Bias-corrected Adam. Throws NumericError, leaving everything untouched,
/// when any gradient is non-finite.
void adam_step(AdamState& state, const ParamList<float>& params, const std::vector<Tensor<float>>& grads);

struct TrainConfig {
    std::int64_t batch_size = 4;
    std::int64_t total_epochs = 1;
    std::int64_t steps_per_epoch = 100;
    double base_lr = 1e-4;
    double lr_decay = 0.8;
    std::int64_t lr_decay_epochs = 20;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 100;
    std::int64_t patch_size = 64;

    void validate() const;
    std::int64_t total_steps() const { return total_epochs * steps_per_epoch; }
};

/// base_lr * lr_decay^floor(epoch / lr_decay_epochs).
float lr_at(const TrainConfig& cfg, std::int64_t epoch);

/// Synthetic training corpus used by the CLI and the desk-scale runs.
struct DataConfig {
    std::int64_t n_clips = 8;
    std::int64_t clip_frames = 7;
    std::int64_t clip_size = 64;  // HR height and width
    double noise_sigma = 0.02;
    bool quantize = true;
    std::uint64_t data_seed = 1;

    void validate() const;
};

struct ClipPair {
    Clip hr;
    Clip lr;
};

std::vector<ClipPair> make_synthetic_pairs(const DataConfig& cfg);

/// Deterministic source of (LR window, HR central patch) training samples.
class PatchSource {
public:
    virtual ~PatchSource() = default;
    virtual PatchPair sample(std::int64_t step, std::int64_t index) const = 0;
};

class ClipPatchSource final : public PatchSource {
public:
    ClipPatchSource(std::vector<ClipPair> clips, std::int64_t n_frames, std::int64_t patch, std::uint64_t seed);
    PatchPair sample(std::int64_t step, std::int64_t index) const override;
    const std::vector<ClipPair>& clips() const { return clips_; }

private:
    std::vector<ClipPair> clips_;
    std::int64_t n_frames_, patch_;
    std::uint64_t seed_;
};

struct LossRecord {
    std::int64_t step;  // 1-based
    std::int64_t epoch;
    float lr;
    float loss;
};

/// Everything needed to continue training bit-exactly.
struct TrainState {
    VesrNet<float> model;
    AdamState adam;
    std::int64_t step = 0;  // completed steps

    static TrainState fresh(const VesrNetConfig& cfg, std::uint64_t seed);
};

/// Model entries plus adam.m.*, adam.v.* and train.step.
std::vector<NamedTensor> state_entries(const TrainState& state);
TrainState state_from_entries(const std::vector<NamedTensor>& entries);
void save_train_state(const std::filesystem::path& path, const TrainState& state);
TrainState load_train_state(const std::filesystem::path& path);

struct TrainResult {
    std::vector<LossRecord> history;
    bool halted = false;
    std::string halt_reason;
};

/// One optimizer step on a batch; returns the batch-mean L1 loss. The state
/// is left unchanged when the loss or a gradient is non-finite (NumericError).
float train_step(TrainState& state, const PatchSource& data, const TrainConfig& cfg);

/// Runs until state.step == cfg.total_steps() (or max_steps more steps).
/// Checkpoints go to `checkpoint` every cfg.checkpoint_every steps and at the
/// end; a non-finite loss halts the run and keeps the last checkpoint.
TrainResult train_loop(TrainState& state, const PatchSource& data, const TrainConfig& cfg,
                       const std::filesystem::path& checkpoint = {}, std::int64_t max_steps = -1);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history);

struct ClipScore {
    std::size_t clip = 0;
    std::int64_t frames = 0;
    double model_psnr = 0.0;
    double bicubic_psnr = 0.0;
};

struct EvalReport {
    std::vector<ClipScore> clips;
    double mean_model_psnr = 0.0;
    double mean_bicubic_psnr = 0.0;
};

/// Super-resolves every `frame_stride`-th frame of each clip from its
/// reflect-padded window and scores it against the HR frame, alongside a
/// bicubic upsampling of the same LR frame. Outputs are clamped to [0, 1].
EvalReport evaluate(const VesrNet<float>& model, const std::vector<ClipPair>& clips, std::int64_t frame_stride = 1);

/// Super-resolves every frame of an LR clip.
Clip super_resolve_clip(const VesrNet<float>& model, const Clip& lr);

/// key=value lines ('#' comments); keys are VesrNetConfig, TrainConfig and
/// DataConfig field names, plus `preset` which must come first if present.
struct RunConfig {
    VesrNetConfig model = preset("small");
    TrainConfig train;
    DataConfig data;
    std::uint64_t model_seed = 0;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace vesr
