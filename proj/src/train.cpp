#include "vesr/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace vesr {

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape()) {
        throw ValidationError("l1_loss shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    }
    return mean(abs(sub(pred, target)));
}

template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& target, double peak) {
    if (pred.shape() != target.shape()) {
        throw ValidationError("psnr shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    }
    if (pred.numel() == 0) throw ValidationError("psnr of empty tensors");
    const auto a = pred.data();
    const auto b = target.data();
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.size());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

template Tensor<float> l1_loss(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> l1_loss(const Tensor<double>&, const Tensor<double>&);
template double psnr(const Tensor<float>&, const Tensor<float>&, double);
template double psnr(const Tensor<double>&, const Tensor<double>&, double);

AdamState AdamState::init(const ParamList<float>& params, float lr) {
    AdamState s;
    s.lr = lr;
    for (const auto& p : params) {
        s.m.push_back(Tensor<float>::zeros(p.tensor->shape()));
        s.v.push_back(Tensor<float>::zeros(p.tensor->shape()));
    }
    return s;
}

void adam_step(AdamState& state, const ParamList<float>& params, const std::vector<Tensor<float>>& grads) {
    if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
        throw ValidationError("adam_step: parameter, gradient and moment counts differ");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& shape = params[i].tensor->shape();
        if (grads[i].shape() != shape || state.m[i].shape() != shape || state.v[i].shape() != shape) {
            throw ValidationError("adam_step: shape mismatch for " + params[i].name);
        }
        if (!all_finite(grads[i].data())) throw NumericError("adam_step: non-finite gradient in " + params[i].name);
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), static_cast<double>(state.step));
    const float b1 = state.beta1, b2 = state.beta2;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].tensor->mutable_data();
        auto m = state.m[i].mutable_data();
        auto v = state.v[i].mutable_data();
        const auto g = grads[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (1.0f - b1) * g[j];
            v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= static_cast<float>(state.lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (total_epochs < 0) throw ValidationError("total_epochs must be >= 0");
    if (steps_per_epoch < 1) throw ValidationError("steps_per_epoch must be >= 1");
    if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ValidationError("base_lr must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ValidationError("lr_decay must be in (0, 1]");
    if (lr_decay_epochs < 1) throw ValidationError("lr_decay_epochs must be >= 1");
    if (checkpoint_every < 1) throw ValidationError("checkpoint_every must be >= 1");
    if (patch_size < 8) throw ValidationError("patch_size must be >= 8");
}

float lr_at(const TrainConfig& cfg, std::int64_t epoch) {
    if (epoch < 0) throw ValidationError("lr_at: negative epoch");
    const auto k = epoch / cfg.lr_decay_epochs;
    return static_cast<float>(cfg.base_lr * std::pow(cfg.lr_decay, static_cast<double>(k)));
}

void DataConfig::validate() const {
    if (n_clips < 1) throw ValidationError("n_clips must be >= 1");
    if (clip_frames < 1) throw ValidationError("clip_frames must be >= 1");
    if (clip_size < 32 || clip_size % 4 != 0) throw ValidationError("clip_size must be a multiple of 4 and >= 32");
    if (!(noise_sigma >= 0.0 && noise_sigma < 0.5)) throw ValidationError("noise_sigma must be in [0, 0.5)");
}

std::vector<ClipPair> make_synthetic_pairs(const DataConfig& cfg) {
    cfg.validate();
    DegradationSpec spec;
    spec.gaussian_noise_sigma = static_cast<float>(cfg.noise_sigma);
    spec.quantize_8bit = cfg.quantize;
    std::vector<ClipPair> out;
    for (std::int64_t i = 0; i < cfg.n_clips; ++i) {
        const auto k = static_cast<std::uint64_t>(i);
        auto hr = generate_synthetic_clip(mix_seed(cfg.data_seed, 2 * k), cfg.clip_frames, cfg.clip_size, cfg.clip_size);
        auto lr = degrade_clip(hr, spec, mix_seed(cfg.data_seed, 2 * k + 1));
        out.push_back({std::move(hr), std::move(lr)});
    }
    return out;
}

ClipPatchSource::ClipPatchSource(std::vector<ClipPair> clips, std::int64_t n_frames, std::int64_t patch,
                                 std::uint64_t seed)
    : clips_(std::move(clips)), n_frames_(n_frames), patch_(patch), seed_(seed) {
    if (clips_.empty()) throw ValidationError("patch source needs at least one clip");
    if (n_frames_ < 1 || n_frames_ % 2 == 0) throw ValidationError("window length must be odd");
    for (const auto& c : clips_) {
        if (c.lr.height() < patch_ || c.lr.width() < patch_) {
            throw ValidationError("clip smaller than the patch size " + std::to_string(patch_));
        }
    }
}

PatchPair ClipPatchSource::sample(std::int64_t step, std::int64_t index) const {
    Rng rng(mix_seed(mix_seed(seed_, static_cast<std::uint64_t>(step)), static_cast<std::uint64_t>(index)));
    const auto& pair = clips_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(clips_.size()) - 1))];
    const auto center = rng.uniform_int(0, pair.lr.n_frames() - 1);
    auto lr = frame_window(pair.lr, center, n_frames_);
    auto hr = frame_window(pair.hr, center, n_frames_);
    return sample_patch_pair(hr, lr, patch_, rng.next());
}

TrainState TrainState::fresh(const VesrNetConfig& cfg, std::uint64_t seed) {
    TrainState s{VesrNet<float>::build(cfg, seed), {}, 0};
    s.adam = AdamState::init(s.model.parameters());
    return s;
}

namespace {

constexpr std::int64_t kMaxExactStep = std::int64_t{1} << 24;

}  // namespace

std::vector<NamedTensor> state_entries(const TrainState& state) {
    if (state.step >= kMaxExactStep) throw ValidationError("step counter too large to checkpoint");
    auto out = model_entries(state.model);
    const auto named = state.model.named_tensors();
    for (std::size_t i = 0; i < named.size(); ++i) {
        out.push_back({"adam.m." + named[i].first, state.adam.m.at(i).clone()});
        out.push_back({"adam.v." + named[i].first, state.adam.v.at(i).clone()});
    }
    out.push_back({"train.step", Tensor<float>({1}, {static_cast<float>(state.step)})});
    out.push_back({"adam.step", Tensor<float>({1}, {static_cast<float>(state.adam.step)})});
    return out;
}

TrainState state_from_entries(const std::vector<NamedTensor>& entries) {
    TrainState s{model_from_entries(entries), {}, 0};
    s.adam = AdamState::init(s.model.parameters());
    std::unordered_map<std::string, const Tensor<float>*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e.value;
    auto scalar_entry = [&](const std::string& name) {
        auto it = by_name.find(name);
        if (it == by_name.end() || it->second->numel() != 1) throw IoError("checkpoint is missing " + name);
        return static_cast<std::int64_t>(it->second->item());
    };
    const auto named = s.model.named_tensors();
    for (std::size_t i = 0; i < named.size(); ++i) {
        for (auto [prefix, dst] : {std::pair{"adam.m.", &s.adam.m[i]}, std::pair{"adam.v.", &s.adam.v[i]}}) {
            auto it = by_name.find(prefix + named[i].first);
            if (it == by_name.end()) throw IoError(std::string("checkpoint is missing ") + prefix + named[i].first);
            if (it->second->shape() != named[i].second.shape()) {
                throw IoError(std::string("checkpoint shape mismatch for ") + prefix + named[i].first);
            }
            *dst = it->second->clone();
        }
    }
    s.step = scalar_entry("train.step");
    s.adam.step = scalar_entry("adam.step");
    return s;
}

void save_train_state(const std::filesystem::path& path, const TrainState& state) {
    write_checkpoint(path, state_entries(state));
}

TrainState load_train_state(const std::filesystem::path& path) { return state_from_entries(read_checkpoint(path)); }

float train_step(TrainState& state, const PatchSource& data, const TrainConfig& cfg) {
    auto params = state.model.parameters();
    std::vector<Tensor<float>> grads;
    for (const auto& p : params) grads.push_back(Tensor<float>::zeros(p.tensor->shape()));
    const float inv_batch = 1.0f / static_cast<float>(cfg.batch_size);
    double loss_sum = 0.0;
    for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
        const auto sample = data.sample(state.step, b);
        Tape<float> tape;
        auto loss = l1_loss(state.model.forward(sample.lr, &tape), sample.hr);
        const float value = loss.item();
        if (!std::isfinite(value)) throw NumericError("non-finite loss at step " + std::to_string(state.step + 1));
        loss_sum += value;
        tape.backward(loss);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto g = tape.param_grad(*params[i].tensor);
            auto acc = grads[i].mutable_data();
            const auto src = g.data();
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += src[j] * inv_batch;
        }
    }
    state.adam.lr = lr_at(cfg, state.step / cfg.steps_per_epoch);
    adam_step(state.adam, params, grads);
    state.step += 1;
    return static_cast<float>(loss_sum / static_cast<double>(cfg.batch_size));
}

TrainResult train_loop(TrainState& state, const PatchSource& data, const TrainConfig& cfg,
                       const std::filesystem::path& checkpoint, std::int64_t max_steps) {
    cfg.validate();
    TrainResult result;
    auto end = cfg.total_steps();
    if (max_steps >= 0) end = std::min(end, state.step + max_steps);
    while (state.step < end) {
        const auto epoch = state.step / cfg.steps_per_epoch;
        float loss = 0.0f;
        try {
            loss = train_step(state, data, cfg);
        } catch (const NumericError& e) {
            result.halted = true;
            result.halt_reason = e.what();
            return result;
        }
        result.history.push_back({state.step, epoch, state.adam.lr, loss});
        if (!checkpoint.empty() && (state.step % cfg.checkpoint_every == 0 || state.step == end)) {
            save_train_state(checkpoint, state);
        }
    }
    return result;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "step,epoch,lr,loss\n";
    out.precision(9);
    for (const auto& r : history) out << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.loss << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

namespace {

Tensor<float> clamp01(const Tensor<float>& x) {
    auto out = x.clone();
    for (auto& v : out.mutable_data()) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

}  // namespace

Clip super_resolve_clip(const VesrNet<float>& model, const Clip& lr) {
    lr.validate();
    std::vector<Tensor<float>> frames;
    for (std::int64_t t = 0; t < lr.n_frames(); ++t) {
        auto window = frame_window(lr, t, model.config.n_frames);
        frames.push_back(reshape(clamp01(model.forward(window.frames)), Shape{1, 3, 4 * lr.height(), 4 * lr.width()}));
    }
    return Clip{concat(frames, 0)};
}

EvalReport evaluate(const VesrNet<float>& model, const std::vector<ClipPair>& clips, std::int64_t frame_stride) {
    if (frame_stride < 1) throw ValidationError("frame_stride must be >= 1");
    if (clips.empty()) throw ValidationError("evaluate needs at least one clip");
    EvalReport report;
    for (std::size_t c = 0; c < clips.size(); ++c) {
        const auto& pair = clips[c];
        if (pair.lr.n_frames() < model.config.n_frames) {
            throw ValidationError("clip " + std::to_string(c) + " has fewer than " +
                                  std::to_string(model.config.n_frames) + " frames");
        }
        if (pair.hr.n_frames() != pair.lr.n_frames() || pair.hr.height() != 4 * pair.lr.height() ||
            pair.hr.width() != 4 * pair.lr.width()) {
            throw ValidationError("clip " + std::to_string(c) + ": HR and LR do not match at scale 4");
        }
        ClipScore score{c, 0, 0.0, 0.0};
        for (std::int64_t t = 0; t < pair.lr.n_frames(); t += frame_stride) {
            const auto target = pair.hr.frame(t);
            const auto window = frame_window(pair.lr, t, model.config.n_frames);
            score.model_psnr += psnr(clamp01(model.forward(window.frames)), target);
            const auto up = bicubic_resize(pair.lr.frame(t), pair.hr.height(), pair.hr.width());
            score.bicubic_psnr += psnr(clamp01(up), target);
            score.frames += 1;
        }
        score.model_psnr /= static_cast<double>(score.frames);
        score.bicubic_psnr /= static_cast<double>(score.frames);
        report.mean_model_psnr += score.model_psnr;
        report.mean_bicubic_psnr += score.bicubic_psnr;
        report.clips.push_back(score);
    }
    report.mean_model_psnr /= static_cast<double>(clips.size());
    report.mean_bicubic_psnr /= static_cast<double>(clips.size());
    return report;
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::int64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ValidationError("config: " + key + " expects an integer");
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) throw ValidationError("config: " + key + " expects a number");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValidationError("config: " + key + " expects true or false");
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    bool seen_other = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key=value");
        const auto key = trim(std::string_view(line).substr(0, eq));
        const auto val = trim(std::string_view(line).substr(eq + 1));
        auto& m = cfg.model;
        auto& t = cfg.train;
        auto& d = cfg.data;
        if (key == "preset") {
            if (seen_other) throw ValidationError("config: preset must come before other keys");
            m = preset(val);
            continue;
        }
        seen_other = true;
        if (key == "channels") m.channels = parse_int(key, val);
        else if (key == "n_frames") m.n_frames = parse_int(key, val);
        else if (key == "n_encoder_carbs") m.n_encoder_carbs = parse_int(key, val);
        else if (key == "n_recon_blocks") m.n_recon_blocks = parse_int(key, val);
        else if (key == "scale") m.scale = parse_int(key, val);
        else if (key == "reduction") m.reduction = parse_int(key, val);
        else if (key == "use_separate_nl") m.use_separate_nl = parse_bool(key, val);
        else if (key == "use_carb") m.use_carb = parse_bool(key, val);
        else if (key == "use_alignment") m.use_alignment = parse_bool(key, val);
        else if (key == "use_upsample_skip") m.use_upsample_skip = parse_bool(key, val);
        else if (key == "batch_size") t.batch_size = parse_int(key, val);
        else if (key == "total_epochs") t.total_epochs = parse_int(key, val);
        else if (key == "steps_per_epoch") t.steps_per_epoch = parse_int(key, val);
        else if (key == "base_lr") t.base_lr = parse_double(key, val);
        else if (key == "lr_decay") t.lr_decay = parse_double(key, val);
        else if (key == "lr_decay_epochs") t.lr_decay_epochs = parse_int(key, val);
        else if (key == "seed") t.seed = static_cast<std::uint64_t>(parse_int(key, val));
        else if (key == "checkpoint_every") t.checkpoint_every = parse_int(key, val);
        else if (key == "patch_size") t.patch_size = parse_int(key, val);
        else if (key == "n_clips") d.n_clips = parse_int(key, val);
        else if (key == "clip_frames") d.clip_frames = parse_int(key, val);
        else if (key == "clip_size") d.clip_size = parse_int(key, val);
        else if (key == "noise_sigma") d.noise_sigma = parse_double(key, val);
        else if (key == "quantize") d.quantize = parse_bool(key, val);
        else if (key == "data_seed") d.data_seed = static_cast<std::uint64_t>(parse_int(key, val));
        else if (key == "model_seed") cfg.model_seed = static_cast<std::uint64_t>(parse_int(key, val));
        else throw ValidationError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    cfg.model.validate();
    cfg.train.validate();
    cfg.data.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

}  // namespace vesr
