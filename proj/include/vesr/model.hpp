#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "vesr/attention.hpp"
#include "vesr/blocks.hpp"

namespace vesr {

/// Initial gain of the output conv when the bicubic skip carries the image,
/// so training starts from the upsampled frame rather than a random residual.
inline constexpr double kOutputInitScale = 0.01;

struct VesrNetConfig {
    std::int64_t channels = 128;
    std::int64_t n_frames = 7;
    std::int64_t n_encoder_carbs = 5;
    std::int64_t n_recon_blocks = 40;
    std::int64_t scale = 4;
    std::int64_t reduction = kDefaultReduction;
    bool use_separate_nl = true;
    bool use_carb = true;
    bool use_alignment = true;
    /// Adds a bicubic upsampling of the central LR frame to the output.
    bool use_upsample_skip = true;

    /// Throws ValidationError: even frame count, scale != 4, channels odd or
    /// not divisible by the reduction, non-positive counts.
    void validate() const;
    bool operator==(const VesrNetConfig&) const = default;
};

/// small, full, edvr_like_small, model1, model2.
VesrNetConfig preset(std::string_view name);
const std::vector<std::string>& preset_names();

template <typename T>
using ResidualBlock = std::variant<Carb<T>, PlainResBlock<T>>;

template <typename T>
struct VesrNet {
    VesrNetConfig config;

    // feature encoder, shared across frames
    Conv2dLayer<T> conv1;
    std::vector<ResidualBlock<T>> encoder_blocks;

    // fusion
    std::vector<AlignmentModule<T>> aligners;  // one per neighbor frame
    std::optional<SeparateNonLocalBlock<T>> separate_nl;
    Conv2dLayer<T> conv9;

    // reconstruction
    std::vector<ResidualBlock<T>> recon_blocks;
    Conv2dLayer<T> conv31, conv33, conv35, conv36;

    /// Deterministic in (cfg, seed).
    static VesrNet build(const VesrNetConfig& cfg, std::uint64_t seed);

    std::int64_t center_index() const { return config.n_frames / 2; }

    /// 3 x H x W -> C x H x W.
    Tensor<T> encode_frame(const Tensor<T>& frame, Tape<T>* tape = nullptr) const;
    /// T x C x H x W aligned stack, after Separate NL when enabled.
    Tensor<T> fuse_features(const std::vector<Tensor<T>>& features, Tape<T>* tape = nullptr) const;
    /// T x 3 x H x W -> 3 x 4H x 4W reconstruction of the central frame.
    Tensor<T> forward(const Tensor<T>& frames, Tape<T>* tape = nullptr) const;

    /// Stable hierarchical names, e.g. encoder.carb3.conv_a.weight.
    ParamList<T> parameters();
    /// Same names and order as parameters(); tensors share storage.
    std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const;
    std::int64_t param_count() const;
};

template <typename T>
Tensor<T> block_forward(const ResidualBlock<T>& block, const Tensor<T>& x, Tape<T>* tape = nullptr);

/// Copies all parameters into a model of another scalar type.
template <typename To, typename From>
VesrNet<To> convert_model(const VesrNet<From>& net);

// ---------------------------------------------------------------------------
// Checkpoints: "VSRC", u8 version, u32 count, then per tensor u16 name length,
// UTF-8 name, u8 rank, u32 dims, f32 data. All little-endian.

struct NamedTensor {
    std::string name;
    Tensor<float> value;
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

/// Model parameters plus config.* entries describing the architecture.
std::vector<NamedTensor> model_entries(const VesrNet<float>& net);
/// Rebuilds a model from entries written by model_entries; entries outside
/// the model and config namespaces are ignored.
VesrNet<float> model_from_entries(const std::vector<NamedTensor>& entries);
VesrNetConfig config_from_entries(const std::vector<NamedTensor>& entries);

}  // namespace vesr
