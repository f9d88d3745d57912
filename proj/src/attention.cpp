#include "vesr/attention.hpp"

namespace vesr {

template <typename T>
Tensor<T> relation_matrix(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || a.shape() != b.shape()) {
        throw ValidationError("relation_matrix expects matching d x N inputs, got " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
    }
    return softmax(matmul(transpose(a), b), 1);
}

template <typename T>
AttentionResult<T> attend(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& d) {
    if (d.rank() != 2 || d.dim(1) != a.dim(1)) {
        throw ValidationError("attend: value " + shape_str(d.shape()) + " does not match keys " + shape_str(a.shape()));
    }
    auto m = relation_matrix(a, b);
    auto e = matmul(d, transpose(m));
    return {std::move(e), std::move(m)};
}

namespace {

template <typename T>
void require_video(const Tensor<T>& f, std::int64_t channels, const char* who) {
    if (f.rank() != 4 || f.dim(1) != channels) {
        throw ValidationError(std::string(who) + " expects T x " + std::to_string(channels) + " x H x W, got " +
                              shape_str(f.shape()));
    }
}

}  // namespace

template <typename T>
NonLocalBlock<T> NonLocalBlock<T>::create(std::int64_t channels, Rng& rng) {
    NonLocalBlock block;
    block.conv_a = Conv2dLayer<T>::create(channels, channels, 1, rng);
    block.conv_b = Conv2dLayer<T>::create(channels, channels, 1, rng);
    block.conv_d = Conv2dLayer<T>::create(channels, channels, 1, rng);
    return block;
}

template <typename T>
Tensor<T> NonLocalBlock<T>::forward(const Tensor<T>& f, Tape<T>* tape, Tensor<T>* relation_out) const {
    require_video(f, conv_a.in_channels(), "nonlocal_forward");
    const auto t = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
    const auto n = static_cast<std::uint64_t>(t * h * w);
    if (n > relation_cap / n) {
        throw ValidationError("nonlocal_forward: relation matrix would hold " + std::to_string(n * n) + " entries (" +
                              std::to_string(n * n * sizeof(T) / (1024 * 1024)) + " MiB), cap is " +
                              std::to_string(relation_cap));
    }
    auto to_cn = [&](const Tensor<T>& x) { return reshape(permute(x, {1, 0, 2, 3}), {c, t * h * w}); };
    auto r = attend(to_cn(conv_a(f, tape)), to_cn(conv_b(f, tape)), to_cn(conv_d(f, tape)));
    if (relation_out) *relation_out = r.relation;
    auto e = permute(reshape(r.output, {c, t, h, w}), {1, 0, 2, 3});
    return add(f, e);
}

template <typename T>
std::int64_t NonLocalBlock<T>::param_count() const {
    return conv_a.param_count() + conv_b.param_count() + conv_d.param_count();
}

template <typename T>
void NonLocalBlock<T>::collect(const std::string& prefix, ParamList<T>& out) {
    conv_a.collect(prefix + ".conv_a", out);
    conv_b.collect(prefix + ".conv_b", out);
    conv_d.collect(prefix + ".conv_d", out);
}

template <typename T>
SeparateNonLocalBlock<T> SeparateNonLocalBlock<T>::create(std::int64_t channels, Rng& rng) {
    SeparateNonLocalBlock block;
    for (auto& br : block.branches) {
        br.conv_a = Conv2dLayer<T>::create(channels, channels, 1, rng);
        br.conv_b = Conv2dLayer<T>::create(channels, channels, 1, rng);
        br.conv_d = Conv2dLayer<T>::create(channels, channels, 1, rng);
    }
    return block;
}

template <typename T>
Tensor<T> SeparateNonLocalBlock<T>::forward(const Tensor<T>& f, Tape<T>* tape, SeparateRelations<T>* relations) const {
    require_video(f, branches[0].conv_a.in_channels(), "separate_nl_forward");
    const auto t = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);

    // Each branch lays the feature out as descriptor x position, with the
    // attended axis as the position axis.
    auto spatial_in = [&](const Tensor<T>& x) { return reshape(x, {t * c, h * w}); };
    auto spatial_out = [&](const Tensor<T>& e) { return reshape(e, {t, c, h, w}); };
    auto channel_in = [&](const Tensor<T>& x) { return reshape(permute(x, {0, 2, 3, 1}), {t * h * w, c}); };
    auto channel_out = [&](const Tensor<T>& e) { return permute(reshape(e, {t, h, w, c}), {0, 3, 1, 2}); };
    auto temporal_in = [&](const Tensor<T>& x) { return transpose(reshape(x, {t, c * h * w})); };
    auto temporal_out = [&](const Tensor<T>& e) { return reshape(transpose(e), {t, c, h, w}); };

    auto run = [&](const Branch& br, auto&& layout_in, auto&& layout_out, Tensor<T>* relation) {
        auto r = attend(layout_in(br.conv_a(f, tape)), layout_in(br.conv_b(f, tape)), layout_in(br.conv_d(f, tape)));
        if (relation) *relation = r.relation;
        return layout_out(r.output);
    };
    auto e1 = run(branches[0], spatial_in, spatial_out, relations ? &relations->spatial : nullptr);
    auto e2 = run(branches[1], channel_in, channel_out, relations ? &relations->channel : nullptr);
    auto e3 = run(branches[2], temporal_in, temporal_out, relations ? &relations->temporal : nullptr);
    return add(add(add(f, e1), e2), e3);
}

template <typename T>
std::int64_t SeparateNonLocalBlock<T>::param_count() const {
    std::int64_t n = 0;
    for (const auto& br : branches) n += br.conv_a.param_count() + br.conv_b.param_count() + br.conv_d.param_count();
    return n;
}

template <typename T>
void SeparateNonLocalBlock<T>::collect(const std::string& prefix, ParamList<T>& out) {
    for (std::size_t i = 0; i < branches.size(); ++i) {
        const auto p = prefix + ".branch" + std::to_string(i + 1);
        branches[i].conv_a.collect(p + ".conv_a", out);
        branches[i].conv_b.collect(p + ".conv_b", out);
        branches[i].conv_d.collect(p + ".conv_d", out);
    }
}

AttentionFootprint attention_memory_footprint(std::int64_t frames, std::int64_t height, std::int64_t width,
                                              std::int64_t channels) {
    if (frames < 1 || height < 1 || width < 1 || channels < 1) {
        throw ValidationError("attention_memory_footprint needs positive dimensions");
    }
    auto mul = [](std::uint64_t a, std::uint64_t b) {
        std::uint64_t r;
        if (__builtin_mul_overflow(a, b, &r)) throw ValidationError("attention footprint overflows 64 bits");
        return r;
    };
    auto add = [](std::uint64_t a, std::uint64_t b) {
        std::uint64_t r;
        if (__builtin_add_overflow(a, b, &r)) throw ValidationError("attention footprint overflows 64 bits");
        return r;
    };
    const auto t = static_cast<std::uint64_t>(frames), c = static_cast<std::uint64_t>(channels);
    const auto hw = mul(static_cast<std::uint64_t>(height), static_cast<std::uint64_t>(width));
    const auto n = mul(t, hw);
    AttentionFootprint fp{};
    fp.full_entries = mul(n, n);
    fp.separate_entries = add(add(mul(hw, hw), mul(c, c)), mul(t, t));
    fp.ratio = static_cast<double>(fp.full_entries) / static_cast<double>(fp.separate_entries);
    return fp;
}

#define VESR_INSTANTIATE(T)                                                                                        \
    template Tensor<T> relation_matrix(const Tensor<T>&, const Tensor<T>&);                                        \
    template AttentionResult<T> attend(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
    template struct NonLocalBlock<T>;                                                                              \
    template struct SeparateNonLocalBlock<T>;

VESR_INSTANTIATE(float)
VESR_INSTANTIATE(double)

}  // namespace vesr
