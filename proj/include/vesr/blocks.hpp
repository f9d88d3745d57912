#pragma once

#include "vesr/nn.hpp"

namespace vesr {

inline constexpr std::int64_t kDefaultReduction = 16;
/// Initial gain of the last layer in each residual branch.
inline constexpr double kResidualInitScale = 0.1;

/// Channel Attention Residual Block.
///   h   = conv_b(lrelu(conv_a(x)))
///   z   = sigmoid(fc2(relu(fc1(avgpool(h)))))
///   out = x + fuse([h, z * h])
template <typename T>
struct Carb {
    Conv2dLayer<T> conv_a, conv_b;
    LinearLayer<T> ca_fc1, ca_fc2;
    Conv2dLayer<T> fuse;

    static Carb create(std::int64_t channels, std::int64_t reduction, Rng& rng);

    std::int64_t channels() const { return conv_a.in_channels(); }
    std::int64_t reduction() const { return channels() / ca_fc1.out_features(); }

    /// Channel weights z in (0, 1)^C for a C x H x W feature.
    Tensor<T> channel_attention_weights(const Tensor<T>& x, Tape<T>* tape = nullptr) const;
    Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) const;

    std::int64_t param_count() const;
    void collect(const std::string& prefix, ParamList<T>& out);
};

/// out = x + conv_b(lrelu(conv_a(x)))
template <typename T>
struct PlainResBlock {
    Conv2dLayer<T> conv_a, conv_b;

    static PlainResBlock create(std::int64_t channels, Rng& rng);

    Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) const;

    std::int64_t param_count() const { return conv_a.param_count() + conv_b.param_count(); }
    void collect(const std::string& prefix, ParamList<T>& out);
};

/// Bilinear resampling of a C x H x W feature at (y + dy, x + dx), where
/// offsets is 2 x H x W holding (dy, dx). Sample positions are clamped to the
/// image; the offset gradient is zero where clamping is active.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& features, const Tensor<T>& offsets);

/// Single-level offset-predicting warp that aligns a neighbor frame's
/// features to the center frame.
template <typename T>
struct AlignmentModule {
    Conv2dLayer<T> offset_conv;  // 2C -> 2
    Conv2dLayer<T> blend_conv;   // 2C -> C

    static AlignmentModule create(std::int64_t channels, Rng& rng);

    Tensor<T> offsets(const Tensor<T>& center, const Tensor<T>& neighbor, Tape<T>* tape = nullptr) const;
    Tensor<T> forward(const Tensor<T>& center, const Tensor<T>& neighbor, Tape<T>* tape = nullptr) const;

    std::int64_t param_count() const { return offset_conv.param_count() + blend_conv.param_count(); }
    void collect(const std::string& prefix, ParamList<T>& out);
};

}  // namespace vesr
