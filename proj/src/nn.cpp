#include "vesr/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vesr {

namespace {

struct ConvGeometry {
    std::int64_t batch, cin, h, w, cout, k, ho, wo;
    int stride, pad;
    bool batched;
    std::int64_t col_rows() const { return cin * k * k; }
    std::int64_t col_cols() const { return ho * wo; }
    // 1x1, stride 1, no padding: the input already is the column matrix.
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                           int padding) {
    if (x.rank() != 3 && x.rank() != 4) {
        throw ValidationError("conv2d input must be CxHxW or NxCxHxW, got " + shape_str(x.shape()));
    }
    if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
        throw ValidationError("conv2d weight must be Cout x Cin x k x k, got " + shape_str(weight.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
        throw ValidationError("conv2d bias " + shape_str(bias.shape()) + " does not match weight " +
                              shape_str(weight.shape()));
    }
    if (stride < 1 || padding < 0) throw ValidationError("conv2d needs stride >= 1 and padding >= 0");
    ConvGeometry g{};
    g.batched = x.rank() == 4;
    const std::size_t off = g.batched ? 1 : 0;
    g.batch = g.batched ? x.dim(0) : 1;
    g.cin = x.dim(off);
    g.h = x.dim(off + 1);
    g.w = x.dim(off + 2);
    g.cout = weight.dim(0);
    g.k = weight.dim(2);
    g.stride = stride;
    g.pad = padding;
    if (weight.dim(1) != g.cin) {
        throw ValidationError("conv2d channel mismatch: input " + shape_str(x.shape()) + " vs weight " +
                              shape_str(weight.shape()));
    }
    const auto span_h = g.h + 2 * padding - g.k;
    const auto span_w = g.w + 2 * padding - g.k;
    if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
        throw ValidationError("conv2d output extent is not an integer for input " + shape_str(x.shape()) +
                              ", kernel " + std::to_string(g.k) + ", stride " + std::to_string(stride) +
                              ", padding " + std::to_string(padding));
    }
    g.ho = span_h / stride + 1;
    g.wo = span_w / stride + 1;
    return g;
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
        for (std::int64_t ky = 0; ky < g.k; ++ky) {
            for (std::int64_t kx = 0; kx < g.k; ++kx) {
                T* row = col + ((c * g.k + ky) * g.k + kx) * g.ho * g.wo;
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = oy * g.stride - g.pad + ky;
                    T* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill_n(dst, g.wo, T(0));
                        continue;
                    }
                    const T* src = x + (c * g.h + iy) * g.w;
                    for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                        const auto ix = ox * g.stride - g.pad + kx;
                        dst[ox] = (ix < 0 || ix >= g.w) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
        for (std::int64_t ky = 0; ky < g.k; ++ky) {
            for (std::int64_t kx = 0; kx < g.k; ++kx) {
                const T* row = col + ((c * g.k + ky) * g.k + kx) * g.ho * g.wo;
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    T* dst = x + (c * g.h + iy) * g.w;
                    const T* src = row + oy * g.wo;
                    for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                        const auto ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

template <typename T, typename Forward, typename Derivative>
Tensor<T> pointwise(const char* kind, const Tensor<T>& x, Forward f, Derivative df) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = f(v);
    Tensor<T> result(x.shape(), std::move(out));
    if (!x.tracked()) return result;
    return x.tape()->record(kind, result, {&x},
                            [x = x.detach(), y = result.detach(), df](std::span<const T> g, GradSink<T>& sink) {
                                const auto xd = x.data();
                                const auto yd = y.data();
                                std::vector<T> gx(g.size());
                                for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * df(xd[i], yd[i]);
                                sink.add(0, gx);
                            });
}

template <typename T>
std::vector<T> shuffle_buffer(std::span<const T> in, std::int64_t c_out, std::int64_t h, std::int64_t w, int r,
                              bool inverse) {
    // h, w are the low-resolution extents.
    std::vector<T> out(in.size());
    const auto H = h * r, W = w * r;
    for (std::int64_t c = 0; c < c_out; ++c) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                const auto src_c = c * r * r + r * (y % r) + (x % r);
                const auto lo = (src_c * h + y / r) * w + x / r;
                const auto hi = (c * H + y) * W + x;
                if (inverse) {
                    out[static_cast<std::size_t>(lo)] = in[static_cast<std::size_t>(hi)];
                } else {
                    out[static_cast<std::size_t>(hi)] = in[static_cast<std::size_t>(lo)];
                }
            }
        }
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding) {
    const ConvGeometry g = conv_geometry(x, weight, bias, stride, padding);
    Shape out_shape = g.batched ? Shape{g.batch, g.cout, g.ho, g.wo} : Shape{g.cout, g.ho, g.wo};
    Tensor<T> result(out_shape);
    auto out = result.mutable_data();
    const auto in_stride = g.cin * g.h * g.w;
    const auto out_stride = g.cout * g.ho * g.wo;
    const auto cols = g.col_cols();
    std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.col_rows() * cols));
    const auto bd = bias.data();
    for (std::int64_t n = 0; n < g.batch; ++n) {
        const T* xn = x.data().data() + n * in_stride;
        T* on = out.data() + n * out_stride;
        for (std::int64_t co = 0; co < g.cout; ++co) std::fill_n(on + co * cols, cols, bd[co]);
        const T* src = xn;
        if (!g.pointwise()) {
            im2col(xn, g, col.data());
            src = col.data();
        }
        gemm<T>(false, false, g.cout, cols, g.col_rows(), T(1), weight.data().data(), src, T(1), on);
    }
    Tape<T>* tape = common_tape({&x, &weight, &bias});
    if (!tape) return result;
    return tape->record(
        "conv2d", std::move(result), {&x, &weight, &bias},
        [g, x = x.detach(), weight = weight.detach()](std::span<const T> grad, GradSink<T>& sink) {
            const auto in_stride = g.cin * g.h * g.w;
            const auto out_stride = g.cout * g.ho * g.wo;
            const auto cols = g.col_cols();
            const auto rows = g.col_rows();
            const bool want_x = sink.wants(0), want_w = sink.wants(1), want_b = sink.wants(2);
            std::vector<T> gx(want_x ? static_cast<std::size_t>(x.numel()) : 0, T(0));
            std::vector<T> gw(want_w ? static_cast<std::size_t>(weight.numel()) : 0, T(0));
            std::vector<T> gb(want_b ? static_cast<std::size_t>(g.cout) : 0, T(0));
            std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(rows * cols));
            std::vector<T> dcol(want_x && !g.pointwise() ? static_cast<std::size_t>(rows * cols) : 0);
            for (std::int64_t n = 0; n < g.batch; ++n) {
                const T* gn = grad.data() + n * out_stride;
                const T* xn = x.data().data() + n * in_stride;
                if (want_b) {
                    for (std::int64_t co = 0; co < g.cout; ++co) {
                        T s = 0;
                        for (std::int64_t i = 0; i < cols; ++i) s += gn[co * cols + i];
                        gb[static_cast<std::size_t>(co)] += s;
                    }
                }
                if (want_w) {
                    const T* src = xn;
                    if (!g.pointwise()) {
                        im2col(xn, g, col.data());
                        src = col.data();
                    }
                    gemm<T>(false, true, g.cout, rows, cols, T(1), gn, src, T(1), gw.data());
                }
                if (want_x) {
                    if (g.pointwise()) {
                        gemm<T>(true, false, rows, cols, g.cout, T(1), weight.data().data(), gn, T(1),
                                gx.data() + n * in_stride);
                    } else {
                        gemm<T>(true, false, rows, cols, g.cout, T(1), weight.data().data(), gn, T(0), dcol.data());
                        col2im_add(dcol.data(), g, gx.data() + n * in_stride);
                    }
                }
            }
            if (want_x) sink.add(0, gx);
            if (want_w) sink.add(1, gw);
            if (want_b) sink.add(2, gb);
        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (x.rank() != 1 || weight.rank() != 2 || weight.dim(1) != x.dim(0) || bias.rank() != 1 ||
        bias.dim(0) != weight.dim(0)) {
        throw ValidationError("linear dimension mismatch: x " + shape_str(x.shape()) + ", weight " +
                              shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
    }
    auto y = matmul(weight, reshape(x, {x.dim(0), 1}));
    return add(reshape(y, {weight.dim(0)}), bias);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return pointwise(
        "relu", x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    return pointwise(
        "leaky_relu", x, [slope](T v) { return v > 0 ? v : slope * v; },
        [slope](T v, T) { return v > 0 ? T(1) : slope; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    const T lo = std::numeric_limits<T>::min();
    const T hi = std::nextafter(T(1), T(0));
    return pointwise(
        "sigmoid", x,
        [lo, hi](T v) {
            const T s = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
            return std::clamp(s, lo, hi);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 3) throw ValidationError("global_avg_pool expects CxHxW, got " + shape_str(x.shape()));
    const auto c = x.dim(0);
    const auto hw = x.dim(1) * x.dim(2);
    std::vector<T> out(static_cast<std::size_t>(c));
    const auto xd = x.data();
    for (std::int64_t i = 0; i < c; ++i) {
        T s = 0;
        for (std::int64_t j = 0; j < hw; ++j) s += xd[static_cast<std::size_t>(i * hw + j)];
        out[static_cast<std::size_t>(i)] = s / static_cast<T>(hw);
    }
    Tensor<T> result({c}, std::move(out));
    if (!x.tracked()) return result;
    return x.tape()->record("global_avg_pool", std::move(result), {&x},
                            [c, hw](std::span<const T> g, GradSink<T>& sink) {
                                std::vector<T> gx(static_cast<std::size_t>(c * hw));
                                for (std::int64_t i = 0; i < c; ++i) {
                                    std::fill_n(gx.begin() + i * hw, hw, g[static_cast<std::size_t>(i)] / T(hw));
                                }
                                sink.add(0, gx);
                            });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ValidationError("softmax axis out of range for " + shape_str(x.shape()));
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const auto len = x.dim(axis);
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    const auto xd = x.data();
    // Weights below eps^2 are flushed to zero. A row loses at most len * eps^2
    // of mass, below rounding, and the tiny weights would otherwise produce
    // subnormal products that slow the following matmul tenfold.
    const T kTiny = std::numeric_limits<T>::epsilon() * std::numeric_limits<T>::epsilon();
    const T kMinLogit = std::log(kTiny);
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const auto base = o * len * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::int64_t j = 0; j < len; ++j) mx = std::max(mx, xd[static_cast<std::size_t>(base + j * inner)]);
            T s = 0;
            for (std::int64_t j = 0; j < len; ++j) {
                const auto idx = static_cast<std::size_t>(base + j * inner);
                const T z = xd[idx] - mx;
                out[idx] = z < kMinLogit ? T(0) : std::exp(z);
                s += out[idx];
            }
            for (std::int64_t j = 0; j < len; ++j) {
                auto& v = out[static_cast<std::size_t>(base + j * inner)];
                v /= s;
                if (v < kTiny) v = T(0);
            }
        }
    }
    Tensor<T> result(x.shape(), std::move(out));
    if (!x.tracked()) return result;
    return x.tape()->record(
        "softmax", result, {&x},
        [y = result.detach(), outer, inner, len](std::span<const T> g, GradSink<T>& sink) {
            const auto yd = y.data();
            std::vector<T> gx(g.size());
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const auto base = o * len * inner + in;
                    T dot = 0;
                    for (std::int64_t j = 0; j < len; ++j) {
                        const auto idx = static_cast<std::size_t>(base + j * inner);
                        dot += g[idx] * yd[idx];
                    }
                    for (std::int64_t j = 0; j < len; ++j) {
                        const auto idx = static_cast<std::size_t>(base + j * inner);
                        gx[idx] = yd[idx] * (g[idx] - dot);
                    }
                }
            }
            sink.add(0, gx);
        });
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
    if (x.rank() != 3 || r < 1) throw ValidationError("pixel_shuffle expects CxHxW and r >= 1");
    if (x.dim(0) % (r * r) != 0) {
        throw ValidationError("pixel_shuffle: channels " + std::to_string(x.dim(0)) + " not divisible by r^2 = " +
                              std::to_string(r * r));
    }
    const auto c = x.dim(0) / (r * r), h = x.dim(1), w = x.dim(2);
    Tensor<T> result({c, h * r, w * r}, shuffle_buffer<T>(x.data(), c, h, w, r, false));
    if (!x.tracked()) return result;
    return x.tape()->record("pixel_shuffle", std::move(result), {&x},
                            [c, h, w, r](std::span<const T> g, GradSink<T>& sink) {
                                sink.add(0, shuffle_buffer<T>(g, c, h, w, r, true));
                            });
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
    if (x.rank() != 3 || r < 1) throw ValidationError("pixel_unshuffle expects CxHxW and r >= 1");
    if (x.dim(1) % r != 0 || x.dim(2) % r != 0) {
        throw ValidationError("pixel_unshuffle: spatial extent of " + shape_str(x.shape()) +
                              " not divisible by r = " + std::to_string(r));
    }
    const auto c = x.dim(0), h = x.dim(1) / r, w = x.dim(2) / r;
    Tensor<T> result({c * r * r, h, w}, shuffle_buffer<T>(x.data(), c, h, w, r, true));
    if (!x.tracked()) return result;
    return x.tape()->record("pixel_unshuffle", std::move(result), {&x},
                            [c, h, w, r](std::span<const T> g, GradSink<T>& sink) {
                                sink.add(0, shuffle_buffer<T>(g, c, h, w, r, false));
                            });
}

template <typename T>
Conv2dLayer<T> Conv2dLayer<T>::create(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
                                      Rng& rng, double gain_scale) {
    if (kernel % 2 == 0) throw ValidationError("only odd kernel sizes are supported");
    const double fan_in = static_cast<double>(in_channels * kernel * kernel);
    const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
    const double bound = gain_scale * gain * std::sqrt(3.0 / fan_in);
    Conv2dLayer layer;
    layer.weight = Tensor<T>({out_channels, in_channels, kernel, kernel});
    for (auto& v : layer.weight.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
    layer.bias = Tensor<T>({out_channels});
    layer.stride = 1;
    layer.padding = static_cast<int>(kernel / 2);
    return layer;
}

template <typename T>
LinearLayer<T> LinearLayer<T>::create(std::int64_t in_features, std::int64_t out_features, Rng& rng) {
    const double bound = std::sqrt(2.0) * std::sqrt(3.0 / static_cast<double>(in_features));
    LinearLayer layer;
    layer.weight = Tensor<T>({out_features, in_features});
    for (auto& v : layer.weight.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
    layer.bias = Tensor<T>({out_features});
    return layer;
}

#define VESR_INSTANTIATE(T)                                                                                        \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);                     \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> relu(const Tensor<T>&);                                                                     \
    template Tensor<T> leaky_relu(const Tensor<T>&, T);                                                            \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                                  \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                                          \
    template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                     \
    template Tensor<T> pixel_shuffle(const Tensor<T>&, int);                                                       \
    template Tensor<T> pixel_unshuffle(const Tensor<T>&, int);                                                     \
    template struct Conv2dLayer<T>;                                                                                \
    template struct LinearLayer<T>;

VESR_INSTANTIATE(float)
VESR_INSTANTIATE(double)

}  // namespace vesr
