#include "vesr/model.hpp"

#include <map>

#include "binary_io.hpp"
#include "vesr/data.hpp"

namespace vesr {

void VesrNetConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ValidationError("invalid VesrNetConfig: " + msg); };
    if (channels < 2 || channels % 2 != 0) fail("channels must be even and >= 2");
    if (reduction < 1 || channels % reduction != 0) fail("channels must be divisible by reduction");
    if (n_frames < 1 || n_frames % 2 == 0) fail("n_frames must be odd so a central frame exists");
    if (n_encoder_carbs < 0 || n_recon_blocks < 0) fail("block counts must be non-negative");
    if (scale != 4) fail("scale is fixed to 4");
}

VesrNetConfig preset(std::string_view name) {
    VesrNetConfig cfg;
    cfg.n_recon_blocks = 20;
    if (name == "small") {
        return cfg;
    }
    if (name == "full") {
        cfg.n_recon_blocks = 40;
        return cfg;
    }
    if (name == "edvr_like_small") {
        cfg.use_separate_nl = false;
        cfg.use_carb = false;
        return cfg;
    }
    if (name == "model1") {
        cfg.use_carb = false;
        return cfg;
    }
    if (name == "model2") {
        cfg.use_separate_nl = false;
        return cfg;
    }
    throw ValidationError("unknown preset '" + std::string(name) + "'");
}

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{"small", "full", "edvr_like_small", "model1", "model2"};
    return names;
}

template <typename T>
Tensor<T> block_forward(const ResidualBlock<T>& block, const Tensor<T>& x, Tape<T>* tape) {
    return std::visit([&](const auto& b) { return b.forward(x, tape); }, block);
}

namespace {

template <typename T>
ResidualBlock<T> make_block(const VesrNetConfig& cfg, Rng& rng) {
    if (cfg.use_carb) return Carb<T>::create(cfg.channels, cfg.reduction, rng);
    return PlainResBlock<T>::create(cfg.channels, rng);
}

template <typename T>
void collect_block(ResidualBlock<T>& block, const std::string& scope, std::size_t index, ParamList<T>& out) {
    if (auto* carb = std::get_if<Carb<T>>(&block)) {
        carb->collect(scope + ".carb" + std::to_string(index), out);
    } else {
        std::get<PlainResBlock<T>>(block).collect(scope + ".res" + std::to_string(index), out);
    }
}

template <typename T>
std::int64_t block_params(const ResidualBlock<T>& block) {
    return std::visit([](const auto& b) { return b.param_count(); }, block);
}

}  // namespace

template <typename T>
VesrNet<T> VesrNet<T>::build(const VesrNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const auto c = cfg.channels;
    VesrNet net;
    net.config = cfg;
    net.conv1 = Conv2dLayer<T>::create(3, c, 3, rng);
    for (std::int64_t i = 0; i < cfg.n_encoder_carbs; ++i) net.encoder_blocks.push_back(make_block<T>(cfg, rng));
    if (cfg.use_alignment) {
        for (std::int64_t i = 0; i + 1 < cfg.n_frames; ++i) net.aligners.push_back(AlignmentModule<T>::create(c, rng));
    }
    if (cfg.use_separate_nl) net.separate_nl = SeparateNonLocalBlock<T>::create(c, rng);
    net.conv9 = Conv2dLayer<T>::create(cfg.n_frames * c, c, 3, rng);
    for (std::int64_t i = 0; i < cfg.n_recon_blocks; ++i) net.recon_blocks.push_back(make_block<T>(cfg, rng));
    // Table-1 widths at C = 128 (128 -> 512 -> 128 -> 256 -> 64 -> 64 -> 3), scaled with C.
    net.conv31 = Conv2dLayer<T>::create(c, 4 * c, 3, rng);
    net.conv33 = Conv2dLayer<T>::create(c, 2 * c, 3, rng);
    net.conv35 = Conv2dLayer<T>::create(c / 2, c / 2, 3, rng);
    net.conv36 = Conv2dLayer<T>::create(c / 2, 3, 3, rng, cfg.use_upsample_skip ? kOutputInitScale : 1.0);
    return net;
}

template <typename T>
Tensor<T> VesrNet<T>::encode_frame(const Tensor<T>& frame, Tape<T>* tape) const {
    auto x = leaky_relu(conv1(frame, tape));
    for (const auto& b : encoder_blocks) x = block_forward(b, x, tape);
    return x;
}

template <typename T>
Tensor<T> VesrNet<T>::fuse_features(const std::vector<Tensor<T>>& features, Tape<T>* tape) const {
    const auto t = config.n_frames;
    if (static_cast<std::int64_t>(features.size()) != t) {
        throw ValidationError("fuse_features expects " + std::to_string(t) + " frame features");
    }
    const auto center = center_index();
    const auto& ref = features[static_cast<std::size_t>(center)];
    std::vector<Tensor<T>> aligned;
    aligned.reserve(features.size());
    for (std::int64_t i = 0; i < t; ++i) {
        const auto& f = features[static_cast<std::size_t>(i)];
        Tensor<T> a = f;
        if (i != center && config.use_alignment) {
            const auto k = static_cast<std::size_t>(i < center ? i : i - 1);
            a = aligners[k].forward(ref, f, tape);
        }
        aligned.push_back(reshape(a, {1, a.dim(0), a.dim(1), a.dim(2)}));
    }
    auto stack = concat(aligned, 0);
    if (separate_nl) stack = separate_nl->forward(stack, tape);
    return stack;
}

namespace {

// Bicubic x4 of frame `center`; constant w.r.t. the parameters.
template <typename T>
Tensor<T> upsample_center(const Tensor<T>& frames, std::int64_t center) {
    const auto h = frames.dim(2), w = frames.dim(3);
    const auto frame = narrow(frames.detach(), 0, center, 1);
    Tensor<float> lr({3, h, w}, std::vector<float>(frame.data().begin(), frame.data().end()));
    const auto up = bicubic_resize(lr, 4 * h, 4 * w);
    return Tensor<T>({3, 4 * h, 4 * w}, std::vector<T>(up.data().begin(), up.data().end()));
}

}  // namespace

template <typename T>
Tensor<T> VesrNet<T>::forward(const Tensor<T>& frames, Tape<T>* tape) const {
    if (frames.rank() != 4 || frames.dim(0) != config.n_frames || frames.dim(1) != 3) {
        throw ValidationError("forward expects " + std::to_string(config.n_frames) + " x 3 x H x W frames, got " +
                              shape_str(frames.shape()));
    }
    const auto t = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
    if (h < 8 || w < 8) throw ValidationError("forward needs H, W >= 8, got " + shape_str(frames.shape()));
    std::vector<Tensor<T>> feats;
    feats.reserve(static_cast<std::size_t>(t));
    for (std::int64_t i = 0; i < t; ++i) {
        feats.push_back(encode_frame(reshape(narrow(frames, 0, i, 1), {3, h, w}), tape));
    }
    auto stack = fuse_features(feats, tape);
    auto x = leaky_relu(conv9(reshape(stack, {t * config.channels, h, w}), tape));
    for (const auto& b : recon_blocks) x = block_forward(b, x, tape);
    x = leaky_relu(pixel_shuffle(conv31(x, tape), 2));
    x = leaky_relu(pixel_shuffle(conv33(x, tape), 2));
    x = leaky_relu(conv35(x, tape));
    auto out = conv36(x, tape);
    if (!config.use_upsample_skip) return out;
    return add(out, upsample_center(frames, center_index()));
}

template <typename T>
ParamList<T> VesrNet<T>::parameters() {
    ParamList<T> out;
    conv1.collect("encoder.conv1", out);
    for (std::size_t i = 0; i < encoder_blocks.size(); ++i) collect_block(encoder_blocks[i], "encoder", i, out);
    for (std::size_t i = 0; i < aligners.size(); ++i) aligners[i].collect("fusion.align" + std::to_string(i), out);
    if (separate_nl) separate_nl->collect("fusion.snl", out);
    conv9.collect("fusion.conv9", out);
    for (std::size_t i = 0; i < recon_blocks.size(); ++i) collect_block(recon_blocks[i], "recon", i, out);
    conv31.collect("recon.conv31", out);
    conv33.collect("recon.conv33", out);
    conv35.collect("recon.conv35", out);
    conv36.collect("recon.conv36", out);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> VesrNet<T>::named_tensors() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (auto& p : const_cast<VesrNet*>(this)->parameters()) out.emplace_back(p.name, *p.tensor);
    return out;
}

template <typename T>
std::int64_t VesrNet<T>::param_count() const {
    std::int64_t n = conv1.param_count() + conv9.param_count() + conv31.param_count() + conv33.param_count() +
                     conv35.param_count() + conv36.param_count();
    for (const auto& b : encoder_blocks) n += block_params(b);
    for (const auto& b : recon_blocks) n += block_params(b);
    for (const auto& a : aligners) n += a.param_count();
    if (separate_nl) n += separate_nl->param_count();
    return n;
}

template <typename To, typename From>
VesrNet<To> convert_model(const VesrNet<From>& net) {
    auto out = VesrNet<To>::build(net.config, 0);
    auto src = net.named_tensors();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        auto values = dst[i].tensor->mutable_data();
        const auto from = src[i].second.data();
        for (std::size_t j = 0; j < values.size(); ++j) values[j] = static_cast<To>(from[j]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
    detail::ByteWriter w;
    w.raw("VSRC");
    w.u8(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (e.name.empty() || e.name.size() > 0xFFFF) throw ValidationError("checkpoint tensor name length invalid");
        if (e.value.rank() > 0xFF) throw ValidationError("checkpoint tensor rank too large");
        w.u16(static_cast<std::uint16_t>(e.name.size()));
        w.raw(e.name);
        w.u8(static_cast<std::uint8_t>(e.value.rank()));
        for (auto d : e.value.shape()) {
            if (d > 0xFFFFFFFFLL) throw ValidationError("checkpoint dimension exceeds u32");
            w.u32(static_cast<std::uint32_t>(d));
        }
        w.f32s(e.value.data());
    }
    detail::write_file_atomic(path, w.bytes());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
    detail::ByteReader r(detail::read_file(path), path.string());
    if (r.str(4) != "VSRC") throw IoError(path.string() + ": bad magic, not a VSRC checkpoint");
    if (const auto v = r.u8(); v != kCheckpointVersion) {
        throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(v));
    }
    const auto count = r.u32();
    std::vector<NamedTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor e;
        e.name = r.str(r.u16());
        const auto rank = r.u8();
        Shape shape;
        std::uint64_t n = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            const auto dim = r.u32();
            if (dim == 0) throw IoError(path.string() + ": zero extent in tensor " + e.name);
            if (__builtin_mul_overflow(n, std::uint64_t{dim}, &n) || n > r.remaining() / 4) {
                throw IoError(path.string() + ": dimension overflow in tensor " + e.name);
            }
            shape.push_back(dim);
        }
        std::vector<float> data(n);
        r.f32s(data);
        e.value = Tensor<float>(std::move(shape), std::move(data));
        out.push_back(std::move(e));
    }
    if (r.remaining() != 0) throw IoError(path.string() + ": trailing bytes after last tensor");
    return out;
}

namespace {

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys{"channels",       "n_frames",        "n_encoder_carbs",
                                               "n_recon_blocks", "scale",           "reduction",
                                               "use_separate_nl", "use_carb",       "use_alignment",
                                               "use_upsample_skip"};
    return keys;
}

std::vector<double> config_values(const VesrNetConfig& c) {
    return {double(c.channels), double(c.n_frames),        double(c.n_encoder_carbs),
            double(c.n_recon_blocks), double(c.scale),     double(c.reduction),
            c.use_separate_nl ? 1.0 : 0.0, c.use_carb ? 1.0 : 0.0, c.use_alignment ? 1.0 : 0.0,
            c.use_upsample_skip ? 1.0 : 0.0};
}

}  // namespace

std::vector<NamedTensor> model_entries(const VesrNet<float>& net) {
    std::vector<NamedTensor> out;
    const auto values = config_values(net.config);
    for (std::size_t i = 0; i < values.size(); ++i) {
        out.push_back({"config." + config_keys()[i], Tensor<float>({1}, {static_cast<float>(values[i])})});
    }
    for (auto& [name, t] : net.named_tensors()) out.push_back({name, t});
    return out;
}

VesrNetConfig config_from_entries(const std::vector<NamedTensor>& entries) {
    std::map<std::string, double> found;
    for (const auto& e : entries) {
        if (e.name.rfind("config.", 0) == 0 && e.value.numel() == 1) found[e.name.substr(7)] = e.value.item();
    }
    auto get = [&](const std::string& key) {
        auto it = found.find(key);
        if (it == found.end()) throw IoError("checkpoint is missing config." + key);
        return it->second;
    };
    VesrNetConfig c;
    c.channels = static_cast<std::int64_t>(get("channels"));
    c.n_frames = static_cast<std::int64_t>(get("n_frames"));
    c.n_encoder_carbs = static_cast<std::int64_t>(get("n_encoder_carbs"));
    c.n_recon_blocks = static_cast<std::int64_t>(get("n_recon_blocks"));
    c.scale = static_cast<std::int64_t>(get("scale"));
    c.reduction = static_cast<std::int64_t>(get("reduction"));
    c.use_separate_nl = get("use_separate_nl") != 0.0;
    c.use_carb = get("use_carb") != 0.0;
    c.use_alignment = get("use_alignment") != 0.0;
    c.use_upsample_skip = get("use_upsample_skip") != 0.0;
    c.validate();
    return c;
}

VesrNet<float> model_from_entries(const std::vector<NamedTensor>& entries) {
    auto net = VesrNet<float>::build(config_from_entries(entries), 0);
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e.value;
    for (auto& p : net.parameters()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw IoError("checkpoint is missing parameter " + p.name);
        if (it->second->shape() != p.tensor->shape()) {
            throw IoError("checkpoint parameter " + p.name + " has shape " + shape_str(it->second->shape()) +
                          ", model expects " + shape_str(p.tensor->shape()));
        }
        *p.tensor = it->second->clone();
    }
    return net;
}

#define VESR_INSTANTIATE(T)                                                                                        \
    template struct VesrNet<T>;                                                                                    \
    template Tensor<T> block_forward(const ResidualBlock<T>&, const Tensor<T>&, Tape<T>*);

VESR_INSTANTIATE(float)
VESR_INSTANTIATE(double)

template VesrNet<double> convert_model(const VesrNet<float>&);
template VesrNet<float> convert_model(const VesrNet<double>&);
template VesrNet<float> convert_model(const VesrNet<float>&);

}  // namespace vesr
