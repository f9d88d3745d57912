#pragma once

#include <string>
#include <vector>

#include "vesr/random.hpp"
#include "vesr/tensor.hpp"

namespace vesr {

inline constexpr double kLeakySlope = 0.1;

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T>* tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

/// Parameter as seen by a forward pass: tracked when a tape is given.
template <typename T>
Tensor<T> track(const Tensor<T>& param, Tape<T>* tape) {
    return tape ? tape->leaf(param) : param;
}

/// Cross-correlation. `x` is C_in x H x W or N x C_in x H x W; weight is
/// C_out x C_in x k x k.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding);

/// y = W x + b for x of shape [in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(kLeakySlope));
/// Logistic function, clamped so every output lies strictly inside (0, 1).
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// C x H x W -> C, mean over the spatial extent.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// C*r^2 x H x W -> C x rH x rW with
/// out[c, y, x] = in[c*r^2 + r*(y mod r) + (x mod r), y/r, x/r].
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r);
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r);

template <typename T>
struct Conv2dLayer {
    Tensor<T> weight;
    Tensor<T> bias;
    int stride = 1;
    int padding = 0;

    /// Kaiming-uniform (fan-in, leaky-ReLU gain) weights scaled by `gain_scale`,
    /// zero bias, "same" padding for odd k.
    static Conv2dLayer create(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel, Rng& rng,
                              double gain_scale = 1.0);

    std::int64_t in_channels() const { return weight.dim(1); }
    std::int64_t out_channels() const { return weight.dim(0); }
    std::int64_t kernel() const { return weight.dim(2); }
    std::int64_t param_count() const { return weight.numel() + bias.numel(); }

    Tensor<T> operator()(const Tensor<T>& x, Tape<T>* tape = nullptr) const {
        return conv2d(x, track(weight, tape), track(bias, tape), stride, padding);
    }
    void collect(const std::string& prefix, ParamList<T>& out) {
        out.push_back({prefix + ".weight", &weight});
        out.push_back({prefix + ".bias", &bias});
    }
};

template <typename T>
struct LinearLayer {
    Tensor<T> weight;  // out x in
    Tensor<T> bias;

    static LinearLayer create(std::int64_t in_features, std::int64_t out_features, Rng& rng);

    std::int64_t in_features() const { return weight.dim(1); }
    std::int64_t out_features() const { return weight.dim(0); }
    std::int64_t param_count() const { return weight.numel() + bias.numel(); }

    Tensor<T> operator()(const Tensor<T>& x, Tape<T>* tape = nullptr) const {
        return linear(x, track(weight, tape), track(bias, tape));
    }
    void collect(const std::string& prefix, ParamList<T>& out) {
        out.push_back({prefix + ".weight", &weight});
        out.push_back({prefix + ".bias", &bias});
    }
};

}  // namespace vesr
