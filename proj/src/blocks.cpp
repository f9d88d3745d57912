#include "vesr/blocks.hpp"

#include <algorithm>
#include <cmath>

namespace vesr {

namespace {

template <typename T>
void require_chw(const Tensor<T>& x, std::int64_t channels, const char* who) {
    if (x.rank() != 3 || x.dim(0) != channels) {
        throw ValidationError(std::string(who) + " expects " + std::to_string(channels) + " x H x W, got " +
                              shape_str(x.shape()));
    }
}

}  // namespace

template <typename T>
Carb<T> Carb<T>::create(std::int64_t channels, std::int64_t reduction, Rng& rng) {
    if (reduction < 1 || channels % reduction != 0) {
        throw ValidationError("CARB channels " + std::to_string(channels) + " not divisible by reduction " +
                              std::to_string(reduction));
    }
    Carb block;
    block.conv_a = Conv2dLayer<T>::create(channels, channels, 3, rng);
    block.conv_b = Conv2dLayer<T>::create(channels, channels, 3, rng);
    block.ca_fc1 = LinearLayer<T>::create(channels, channels / reduction, rng);
    block.ca_fc2 = LinearLayer<T>::create(channels / reduction, channels, rng);
    block.fuse = Conv2dLayer<T>::create(2 * channels, channels, 1, rng, kResidualInitScale);
    return block;
}

template <typename T>
Tensor<T> Carb<T>::channel_attention_weights(const Tensor<T>& x, Tape<T>* tape) const {
    require_chw(x, channels(), "channel_attention_weights");
    auto w = global_avg_pool(x);
    return sigmoid(ca_fc2(relu(ca_fc1(w, tape)), tape));
}

template <typename T>
Tensor<T> Carb<T>::forward(const Tensor<T>& x, Tape<T>* tape) const {
    require_chw(x, channels(), "carb_forward");
    auto h = conv_b(leaky_relu(conv_a(x, tape)), tape);
    auto z = channel_attention_weights(h, tape);
    auto zh = mul(expand(reshape(z, {channels(), 1, 1}), h.shape()), h);
    return add(x, fuse(concat<T>({h, zh}, 0), tape));
}

template <typename T>
std::int64_t Carb<T>::param_count() const {
    return conv_a.param_count() + conv_b.param_count() + ca_fc1.param_count() + ca_fc2.param_count() +
           fuse.param_count();
}

template <typename T>
void Carb<T>::collect(const std::string& prefix, ParamList<T>& out) {
    conv_a.collect(prefix + ".conv_a", out);
    conv_b.collect(prefix + ".conv_b", out);
    ca_fc1.collect(prefix + ".ca_fc1", out);
    ca_fc2.collect(prefix + ".ca_fc2", out);
    fuse.collect(prefix + ".fuse", out);
}

template <typename T>
PlainResBlock<T> PlainResBlock<T>::create(std::int64_t channels, Rng& rng) {
    PlainResBlock block;
    block.conv_a = Conv2dLayer<T>::create(channels, channels, 3, rng);
    block.conv_b = Conv2dLayer<T>::create(channels, channels, 3, rng, kResidualInitScale);
    return block;
}

template <typename T>
Tensor<T> PlainResBlock<T>::forward(const Tensor<T>& x, Tape<T>* tape) const {
    require_chw(x, conv_a.in_channels(), "plain_resblock_forward");
    return add(x, conv_b(leaky_relu(conv_a(x, tape)), tape));
}

template <typename T>
void PlainResBlock<T>::collect(const std::string& prefix, ParamList<T>& out) {
    conv_a.collect(prefix + ".conv_a", out);
    conv_b.collect(prefix + ".conv_b", out);
}

namespace {

struct SamplePoint {
    std::int64_t y0, y1, x0, x1;
    double wy, wx;
    bool clamped_y, clamped_x;
};

template <typename T>
SamplePoint sample_point(std::int64_t y, std::int64_t x, T dy, T dx, std::int64_t h, std::int64_t w) {
    SamplePoint p{};
    const double py = static_cast<double>(y) + static_cast<double>(dy);
    const double px = static_cast<double>(x) + static_cast<double>(dx);
    const double cy = std::clamp(py, 0.0, static_cast<double>(h - 1));
    const double cx = std::clamp(px, 0.0, static_cast<double>(w - 1));
    p.clamped_y = cy != py;
    p.clamped_x = cx != px;
    p.y0 = static_cast<std::int64_t>(std::floor(cy));
    p.x0 = static_cast<std::int64_t>(std::floor(cx));
    p.y1 = std::min(p.y0 + 1, h - 1);
    p.x1 = std::min(p.x0 + 1, w - 1);
    p.wy = cy - static_cast<double>(p.y0);
    p.wx = cx - static_cast<double>(p.x0);
    return p;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& features, const Tensor<T>& offsets) {
    if (features.rank() != 3 || offsets.rank() != 3 || offsets.dim(0) != 2 || offsets.dim(1) != features.dim(1) ||
        offsets.dim(2) != features.dim(2)) {
        throw ValidationError("bilinear_sample expects C x H x W features and 2 x H x W offsets, got " +
                              shape_str(features.shape()) + " and " + shape_str(offsets.shape()));
    }
    const auto c = features.dim(0), h = features.dim(1), w = features.dim(2);
    const auto hw = h * w;
    const auto fd = features.data();
    const auto od = offsets.data();
    Tensor<T> result(features.shape());
    auto out = result.mutable_data();
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            const auto pix = y * w + x;
            const auto p = sample_point(y, x, od[pix], od[hw + pix], h, w);
            const T w00 = T((1 - p.wy) * (1 - p.wx)), w01 = T((1 - p.wy) * p.wx);
            const T w10 = T(p.wy * (1 - p.wx)), w11 = T(p.wy * p.wx);
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const T* plane = fd.data() + ch * hw;
                out[ch * hw + pix] = w00 * plane[p.y0 * w + p.x0] + w01 * plane[p.y0 * w + p.x1] +
                                     w10 * plane[p.y1 * w + p.x0] + w11 * plane[p.y1 * w + p.x1];
            }
        }
    }
    Tape<T>* tape = common_tape({&features, &offsets});
    if (!tape) return result;
    return tape->record(
        "bilinear_sample", std::move(result), {&features, &offsets},
        [features = features.detach(), offsets = offsets.detach(), c, h, w](std::span<const T> g, GradSink<T>& sink) {
            const auto hw = h * w;
            const auto fd = features.data();
            const auto od = offsets.data();
            const bool want_f = sink.wants(0), want_o = sink.wants(1);
            std::vector<T> gf(want_f ? static_cast<std::size_t>(c * hw) : 0, T(0));
            std::vector<T> go(want_o ? static_cast<std::size_t>(2 * hw) : 0, T(0));
            for (std::int64_t y = 0; y < h; ++y) {
                for (std::int64_t x = 0; x < w; ++x) {
                    const auto pix = y * w + x;
                    const auto p = sample_point(y, x, od[pix], od[hw + pix], h, w);
                    const T wy = T(p.wy), wx = T(p.wx);
                    T gdy = 0, gdx = 0;
                    for (std::int64_t ch = 0; ch < c; ++ch) {
                        const T gv = g[ch * hw + pix];
                        const T* plane = fd.data() + ch * hw;
                        const T v00 = plane[p.y0 * w + p.x0], v01 = plane[p.y0 * w + p.x1];
                        const T v10 = plane[p.y1 * w + p.x0], v11 = plane[p.y1 * w + p.x1];
                        if (want_f) {
                            T* gp = gf.data() + ch * hw;
                            gp[p.y0 * w + p.x0] += gv * (1 - wy) * (1 - wx);
                            gp[p.y0 * w + p.x1] += gv * (1 - wy) * wx;
                            gp[p.y1 * w + p.x0] += gv * wy * (1 - wx);
                            gp[p.y1 * w + p.x1] += gv * wy * wx;
                        }
                        gdy += gv * ((1 - wx) * (v10 - v00) + wx * (v11 - v01));
                        gdx += gv * ((1 - wy) * (v01 - v00) + wy * (v11 - v10));
                    }
                    if (want_o) {
                        go[pix] = p.clamped_y ? T(0) : gdy;
                        go[hw + pix] = p.clamped_x ? T(0) : gdx;
                    }
                }
            }
            if (want_f) sink.add(0, gf);
            if (want_o) sink.add(1, go);
        });
}

template <typename T>
AlignmentModule<T> AlignmentModule<T>::create(std::int64_t channels, Rng& rng) {
    AlignmentModule m;
    // Small initial offsets: sub-pixel, non-integer motion.
    m.offset_conv = Conv2dLayer<T>::create(2 * channels, 2, 3, rng, kResidualInitScale);
    m.blend_conv = Conv2dLayer<T>::create(2 * channels, channels, 3, rng);
    return m;
}

template <typename T>
Tensor<T> AlignmentModule<T>::offsets(const Tensor<T>& center, const Tensor<T>& neighbor, Tape<T>* tape) const {
    const auto c = blend_conv.out_channels();
    require_chw(center, c, "align_frames");
    require_chw(neighbor, c, "align_frames");
    if (center.shape() != neighbor.shape()) {
        throw ValidationError("align_frames shape mismatch: " + shape_str(center.shape()) + " vs " +
                              shape_str(neighbor.shape()));
    }
    return offset_conv(concat<T>({center, neighbor}, 0), tape);
}

template <typename T>
Tensor<T> AlignmentModule<T>::forward(const Tensor<T>& center, const Tensor<T>& neighbor, Tape<T>* tape) const {
    auto warped = bilinear_sample(neighbor, offsets(center, neighbor, tape));
    return blend_conv(concat<T>({center, warped}, 0), tape);
}

template <typename T>
void AlignmentModule<T>::collect(const std::string& prefix, ParamList<T>& out) {
    offset_conv.collect(prefix + ".offset_conv", out);
    blend_conv.collect(prefix + ".blend_conv", out);
}

#define VESR_INSTANTIATE(T)                                                                                        \
    template struct Carb<T>;                                                                                       \
    template struct PlainResBlock<T>;                                                                              \
    template struct AlignmentModule<T>;                                                                            \
    template Tensor<T> bilinear_sample(const Tensor<T>&, const Tensor<T>&);

VESR_INSTANTIATE(float)
VESR_INSTANTIATE(double)

}  // namespace vesr
