#pragma once

#include <filesystem>
#include <vector>

#include "vesr/tensor.hpp"

namespace vesr {

/// T x 3 x H x W video with values in [0, 1].
struct Clip {
    Tensor<float> frames;

    std::int64_t n_frames() const { return frames.dim(0); }
    std::int64_t channels() const { return frames.dim(1); }
    std::int64_t height() const { return frames.dim(2); }
    std::int64_t width() const { return frames.dim(3); }
    /// 3 x H x W copy of frame t.
    Tensor<float> frame(std::int64_t t) const;
    /// Throws ValidationError unless rank 4 with values in [0, 1].
    void validate() const;
};

struct DegradationSpec {
    std::int64_t scale = 4;
    float gaussian_noise_sigma = 0.0f;
    bool quantize_8bit = false;

    void validate() const;
};

/// Ground truth about a generated clip's moving layer.
struct SceneInfo {
    std::int64_t velocity_y = 0, velocity_x = 0;
    /// T x H x W, 1 where a moving object covers the pixel.
    Tensor<float> object_mask;
};

/// Static smooth background plus rectangles and glyph patterns that all move
/// with one constant integer velocity. Bitwise deterministic in the seed.
Clip generate_synthetic_clip(std::uint64_t seed, std::int64_t frames, std::int64_t height, std::int64_t width,
                             SceneInfo* info = nullptr);

/// Catmull-Rom (a = -0.5) separable resize with edge clamping. When shrinking,
/// the kernel is widened by the scale factor (antialiased, imresize-style).
Tensor<float> bicubic_resize(const Tensor<float>& image, std::int64_t out_h, std::int64_t out_w);

/// Catmull-Rom kernel value at distance x.
double cubic_kernel(double x);

/// Per-frame bicubic 1/scale, additive Gaussian noise, optional 8-bit
/// quantization, clamped to [0, 1].
Clip degrade_clip(const Clip& hr, const DegradationSpec& spec, std::uint64_t seed);

struct PatchPair {
    Tensor<float> lr;  // T x 3 x p x p
    Tensor<float> hr;  // 3 x 4p x 4p, central frame
    std::int64_t y = 0, x = 0;  // LR crop origin
};

/// Random aligned crop: LR window at (y, x), HR central frame at (4y, 4x).
PatchPair sample_patch_pair(const Clip& hr, const Clip& lr, std::int64_t patch, std::uint64_t seed);

/// Frame index reflected into [0, n).
std::int64_t reflect_index(std::int64_t i, std::int64_t n);
/// `length` frames centred on `center`, reflect-padded at the clip ends.
Clip frame_window(const Clip& clip, std::int64_t center, std::int64_t length);

inline constexpr std::uint8_t kClipVersion = 1;

/// "VESR", u8 version, u32 T, C, H, W, f32 data; little-endian.
void write_clip(const std::filesystem::path& path, const Clip& clip);
Clip read_clip(const std::filesystem::path& path);
/// One binary PPM (P6) per frame, pixel = round(255 * v).
std::vector<std::filesystem::path> write_ppm_frames(const std::filesystem::path& dir, const Clip& clip,
                                                    const std::string& stem = "frame");
std::uint8_t quantize_8bit(float v);

}  // namespace vesr
