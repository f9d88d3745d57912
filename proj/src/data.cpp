#include "vesr/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "binary_io.hpp"
#include "vesr/random.hpp"

namespace vesr {

Tensor<float> Clip::frame(std::int64_t t) const {
    return reshape(narrow(frames, 0, t, 1), {channels(), height(), width()}).clone();
}

void Clip::validate() const {
    if (frames.rank() != 4) throw ValidationError("clip must be T x C x H x W, got " + shape_str(frames.shape()));
    for (float v : frames.data()) {
        if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("clip values must lie in [0, 1]");
    }
}

void DegradationSpec::validate() const {
    if (scale != 4) throw ValidationError("degradation scale is fixed to 4");
    if (!(gaussian_noise_sigma >= 0.0f && gaussian_noise_sigma < 0.5f)) {
        throw ValidationError("gaussian_noise_sigma must lie in [0, 0.5)");
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

struct MovingShape {
    std::int64_t y, x, h, w;
    std::array<float, 3> color;
    std::vector<std::uint8_t> bitmap;  // empty for solid rectangles
    std::int64_t cell = 1;
    std::int64_t cols = 0;
};

}  // namespace

Clip generate_synthetic_clip(std::uint64_t seed, std::int64_t frames, std::int64_t height, std::int64_t width,
                             SceneInfo* info) {
    if (frames < 1 || height < 4 || width < 4) throw ValidationError("generate_synthetic_clip: invalid dimensions");
    Rng rng(seed);

    // Low-frequency background: a few cosines per channel around a base level.
    struct Wave {
        double fy, fx, phase, amp;
    };
    std::array<std::vector<Wave>, 3> waves;
    std::array<double, 3> base{};
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(0.3, 0.7);
        for (int k = 0; k < 4; ++k) {
            waves[c].push_back({rng.uniform(0.0, 2.5), rng.uniform(0.0, 2.5), rng.uniform(0.0, 2 * std::numbers::pi),
                                rng.uniform(0.02, 0.06)});
        }
    }

    std::int64_t vy = 0, vx = 0;
    while (vy == 0 && vx == 0) {
        vy = rng.uniform_int(-2, 2);
        vx = rng.uniform_int(-2, 2);
    }

    std::vector<MovingShape> shapes;
    const auto n_rects = rng.uniform_int(3, 5);
    for (std::int64_t i = 0; i < n_rects; ++i) {
        MovingShape s;
        s.h = rng.uniform_int(std::max<std::int64_t>(2, height / 8), std::max<std::int64_t>(3, height / 3));
        s.w = rng.uniform_int(std::max<std::int64_t>(2, width / 8), std::max<std::int64_t>(3, width / 3));
        s.y = rng.uniform_int(-s.h / 2, height - s.h / 2);
        s.x = rng.uniform_int(-s.w / 2, width - s.w / 2);
        for (auto& v : s.color) v = static_cast<float>(rng.uniform(0.0, 1.0));
        shapes.push_back(std::move(s));
    }
    // Text-like glyph rows: random 5x7 bitmaps, one LR pixel per cell.
    const auto n_glyph_rows = rng.uniform_int(1, 2);
    for (std::int64_t g = 0; g < n_glyph_rows; ++g) {
        MovingShape s;
        s.cell = 4;
        const auto n_chars = rng.uniform_int(2, 4);
        s.cols = n_chars * 6;
        s.h = 7 * s.cell;
        s.w = s.cols * s.cell;
        s.bitmap.assign(static_cast<std::size_t>(7 * s.cols), 0);
        for (std::int64_t ch = 0; ch < n_chars; ++ch) {
            for (std::int64_t r = 0; r < 7; ++r) {
                for (std::int64_t col = 0; col < 5; ++col) {
                    s.bitmap[static_cast<std::size_t>(r * s.cols + ch * 6 + col)] = rng.uniform() < 0.45 ? 1 : 0;
                }
            }
        }
        s.y = rng.uniform_int(0, std::max<std::int64_t>(0, height - s.h));
        s.x = rng.uniform_int(-s.w / 4, std::max<std::int64_t>(0, width - s.w));
        const float tone = rng.uniform() < 0.5 ? 0.95f : 0.05f;
        s.color = {tone, tone, tone};
        shapes.push_back(std::move(s));
    }

    const auto plane = height * width;
    std::vector<float> data(static_cast<std::size_t>(frames * 3 * plane));
    std::vector<float> mask(static_cast<std::size_t>(frames * plane), 0.0f);
    std::vector<float> background(static_cast<std::size_t>(3 * plane));
    for (int c = 0; c < 3; ++c) {
        for (std::int64_t y = 0; y < height; ++y) {
            for (std::int64_t x = 0; x < width; ++x) {
                double v = base[c];
                for (const auto& wv : waves[c]) {
                    v += wv.amp * std::cos(2 * std::numbers::pi * (wv.fy * double(y) / double(height) +
                                                                   wv.fx * double(x) / double(width)) +
                                           wv.phase);
                }
                background[static_cast<std::size_t>(c * plane + y * width + x)] = static_cast<float>(v);
            }
        }
    }
    for (std::int64_t t = 0; t < frames; ++t) {
        float* f = data.data() + t * 3 * plane;
        std::copy(background.begin(), background.end(), f);
        float* m = mask.data() + t * plane;
        for (const auto& s : shapes) {
            const auto oy = s.y + t * vy, ox = s.x + t * vx;
            for (std::int64_t y = std::max<std::int64_t>(0, oy); y < std::min(height, oy + s.h); ++y) {
                for (std::int64_t x = std::max<std::int64_t>(0, ox); x < std::min(width, ox + s.w); ++x) {
                    if (!s.bitmap.empty()) {
                        const auto r = (y - oy) / s.cell, col = (x - ox) / s.cell;
                        if (!s.bitmap[static_cast<std::size_t>(r * s.cols + col)]) continue;
                    }
                    for (int c = 0; c < 3; ++c) f[c * plane + y * width + x] = s.color[static_cast<std::size_t>(c)];
                    m[y * width + x] = 1.0f;
                }
            }
        }
    }
    for (auto& v : data) v = std::clamp(v, 0.0f, 1.0f);
    if (info) {
        info->velocity_y = vy;
        info->velocity_x = vx;
        info->object_mask = Tensor<float>({frames, height, width}, std::move(mask));
    }
    return Clip{Tensor<float>({frames, 3, height, width}, std::move(data))};
}

// ---------------------------------------------------------------------------
// Bicubic resampling

double cubic_kernel(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}

namespace {

struct Taps {
    std::vector<std::int64_t> index;
    std::vector<double> weight;
};

std::vector<Taps> resize_taps(std::int64_t in, std::int64_t out) {
    const double scale = static_cast<double>(out) / static_cast<double>(in);
    const double stretch = scale < 1.0 ? scale : 1.0;
    const double support = 2.0 / stretch;
    std::vector<Taps> taps(static_cast<std::size_t>(out));
    for (std::int64_t i = 0; i < out; ++i) {
        const double center = (static_cast<double>(i) + 0.5) / scale - 0.5;
        const auto first = static_cast<std::int64_t>(std::floor(center - support));
        const auto last = static_cast<std::int64_t>(std::ceil(center + support));
        auto& t = taps[static_cast<std::size_t>(i)];
        double total = 0.0;
        for (std::int64_t j = first; j <= last; ++j) {
            const double w = cubic_kernel((center - static_cast<double>(j)) * stretch);
            if (w == 0.0) continue;
            t.index.push_back(std::clamp<std::int64_t>(j, 0, in - 1));
            t.weight.push_back(w);
            total += w;
        }
        for (auto& w : t.weight) w /= total;
    }
    return taps;
}

}  // namespace

Tensor<float> bicubic_resize(const Tensor<float>& image, std::int64_t out_h, std::int64_t out_w) {
    if (image.rank() != 3 || out_h < 1 || out_w < 1) {
        throw ValidationError("bicubic_resize expects C x H x W and positive output size, got " +
                              shape_str(image.shape()));
    }
    const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const auto ty = resize_taps(h, out_h);
    const auto tx = resize_taps(w, out_w);
    const auto src = image.data();
    // Horizontal pass into C x H x out_w, then vertical.
    std::vector<double> mid(static_cast<std::size_t>(c * h * out_w));
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t y = 0; y < h; ++y) {
            const float* row = src.data() + (ch * h + y) * w;
            for (std::int64_t x = 0; x < out_w; ++x) {
                const auto& t = tx[static_cast<std::size_t>(x)];
                double s = 0.0;
                for (std::size_t k = 0; k < t.index.size(); ++k) s += t.weight[k] * row[t.index[k]];
                mid[static_cast<std::size_t>((ch * h + y) * out_w + x)] = s;
            }
        }
    }
    std::vector<float> out(static_cast<std::size_t>(c * out_h * out_w));
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t y = 0; y < out_h; ++y) {
            const auto& t = ty[static_cast<std::size_t>(y)];
            for (std::int64_t x = 0; x < out_w; ++x) {
                double s = 0.0;
                for (std::size_t k = 0; k < t.index.size(); ++k) {
                    s += t.weight[k] * mid[static_cast<std::size_t>((ch * h + t.index[k]) * out_w + x)];
                }
                out[static_cast<std::size_t>((ch * out_h + y) * out_w + x)] = static_cast<float>(s);
            }
        }
    }
    return Tensor<float>({c, out_h, out_w}, std::move(out));
}

// ---------------------------------------------------------------------------
// Degradation and sampling

std::uint8_t quantize_8bit(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

Clip degrade_clip(const Clip& hr, const DegradationSpec& spec, std::uint64_t seed) {
    spec.validate();
    if (hr.frames.rank() != 4) throw ValidationError("degrade_clip expects a T x C x H x W clip");
    const auto t = hr.n_frames(), c = hr.channels(), h = hr.height(), w = hr.width();
    if (h % spec.scale != 0 || w % spec.scale != 0) {
        throw ValidationError("degrade_clip: HR size " + std::to_string(h) + "x" + std::to_string(w) +
                              " not divisible by " + std::to_string(spec.scale));
    }
    const auto lh = h / spec.scale, lw = w / spec.scale;
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(t * c * lh * lw));
    for (std::int64_t i = 0; i < t; ++i) {
        auto small = bicubic_resize(hr.frame(i), lh, lw);
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        for (float v : small.data()) {
            if (spec.gaussian_noise_sigma > 0.0f) v += static_cast<float>(spec.gaussian_noise_sigma * rng.normal());
            v = std::clamp(v, 0.0f, 1.0f);
            if (spec.quantize_8bit) v = static_cast<float>(quantize_8bit(v)) / 255.0f;
            out.push_back(v);
        }
    }
    return Clip{Tensor<float>({t, c, lh, lw}, std::move(out))};
}

PatchPair sample_patch_pair(const Clip& hr, const Clip& lr, std::int64_t patch, std::uint64_t seed) {
    if (patch < 1) throw ValidationError("patch size must be positive");
    if (hr.n_frames() != lr.n_frames() || hr.height() != 4 * lr.height() || hr.width() != 4 * lr.width()) {
        throw ValidationError("sample_patch_pair: HR " + shape_str(hr.frames.shape()) + " is not 4x LR " +
                              shape_str(lr.frames.shape()));
    }
    if (lr.height() < patch || lr.width() < patch) {
        throw ValidationError("sample_patch_pair: clip " + shape_str(lr.frames.shape()) + " smaller than patch " +
                              std::to_string(patch));
    }
    Rng rng(seed);
    PatchPair p;
    p.y = rng.uniform_int(0, lr.height() - patch);
    p.x = rng.uniform_int(0, lr.width() - patch);
    p.lr = narrow(narrow(lr.frames, 2, p.y, patch), 3, p.x, patch);
    const auto center = hr.frame(hr.n_frames() / 2);
    p.hr = narrow(narrow(center, 1, 4 * p.y, 4 * patch), 2, 4 * p.x, 4 * patch);
    return p;
}

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
    if (n == 1) return 0;
    const auto period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

Clip frame_window(const Clip& clip, std::int64_t center, std::int64_t length) {
    if (length < 1 || length % 2 == 0) throw ValidationError("frame window length must be odd");
    std::vector<Tensor<float>> parts;
    for (std::int64_t k = -length / 2; k <= length / 2; ++k) {
        parts.push_back(narrow(clip.frames, 0, reflect_index(center + k, clip.n_frames()), 1));
    }
    return Clip{concat(parts, 0)};
}

// ---------------------------------------------------------------------------
// Files

void write_clip(const std::filesystem::path& path, const Clip& clip) {
    if (clip.frames.rank() != 4) throw ValidationError("write_clip expects a T x C x H x W clip");
    detail::ByteWriter w;
    w.raw("VESR");
    w.u8(kClipVersion);
    for (auto d : clip.frames.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(clip.frames.data());
    detail::write_file_atomic(path, w.bytes());
}

Clip read_clip(const std::filesystem::path& path) {
    detail::ByteReader r(detail::read_file(path), path.string());
    if (r.str(4) != "VESR") throw IoError(path.string() + ": bad magic, not a VESR clip");
    if (const auto v = r.u8(); v != kClipVersion) {
        throw IoError(path.string() + ": unsupported clip version " + std::to_string(v));
    }
    Shape shape;
    std::uint64_t n = 1;
    for (int i = 0; i < 4; ++i) {
        const auto d = r.u32();
        if (d == 0) throw IoError(path.string() + ": zero clip dimension");
        if (__builtin_mul_overflow(n, std::uint64_t{d}, &n)) throw IoError(path.string() + ": dimension overflow");
        shape.push_back(d);
    }
    if (n > r.remaining() / 4) {
        throw IoError(path.string() + ": truncated file (header declares " + shape_str(shape) + ")");
    }
    std::vector<float> data(n);
    r.f32s(data);
    if (r.remaining() != 0) throw IoError(path.string() + ": trailing bytes after clip data");
    return Clip{Tensor<float>(std::move(shape), std::move(data))};
}

std::vector<std::filesystem::path> write_ppm_frames(const std::filesystem::path& dir, const Clip& clip,
                                                    const std::string& stem) {
    if (clip.frames.rank() != 4 || clip.channels() != 3) throw ValidationError("PPM export needs 3-channel clips");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    const auto h = clip.height(), w = clip.width(), plane = h * w;
    std::vector<std::filesystem::path> written;
    for (std::int64_t t = 0; t < clip.n_frames(); ++t) {
        char name[64];
        std::snprintf(name, sizeof name, "%s%04lld.ppm", stem.c_str(), static_cast<long long>(t));
        const auto path = dir / name;
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot open " + path.string());
        out << "P6\n" << w << ' ' << h << "\n255\n";
        const float* f = clip.frames.data().data() + t * 3 * plane;
        std::vector<char> pixels(static_cast<std::size_t>(3 * plane));
        for (std::int64_t i = 0; i < plane; ++i) {
            for (int c = 0; c < 3; ++c) pixels[static_cast<std::size_t>(3 * i + c)] = static_cast<char>(quantize_8bit(f[c * plane + i]));
        }
        out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
        if (!out) throw IoError("write failed: " + path.string());
        written.push_back(path);
    }
    return written;
}

}  // namespace vesr
