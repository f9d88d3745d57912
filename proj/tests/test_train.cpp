#include <cstring>
#include <fstream>
#include <limits>

#include "test_util.hpp"
#include "vesr/analysis.hpp"
#include "vesr/train.hpp"

using namespace vesr;
using vesr::testing::expect_gradients_match;
using vesr::testing::random_tensor;
using vesr::testing::scratch_dir;

namespace {

TrainConfig tiny_train() {
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.total_epochs = 2;
    cfg.steps_per_epoch = 3;
    cfg.base_lr = 1e-3;
    cfg.lr_decay_epochs = 1;
    cfg.checkpoint_every = 2;
    cfg.patch_size = 8;
    return cfg;
}

DataConfig tiny_data() {
    DataConfig d;
    d.n_clips = 2;
    d.clip_frames = 3;
    d.clip_size = 32;
    return d;
}

ClipPatchSource tiny_source(const TrainConfig& cfg) {
    return ClipPatchSource(make_synthetic_pairs(tiny_data()), 3, cfg.patch_size, cfg.seed);
}

// Returns NaN inputs from a given step on.
class PoisonedSource final : public PatchSource {
public:
    PoisonedSource(const PatchSource& inner, std::int64_t from_step) : inner_(inner), from_(from_step) {}
    PatchPair sample(std::int64_t step, std::int64_t index) const override {
        auto p = inner_.sample(step, index);
        if (step >= from_) {
            p.lr = p.lr.clone();
            for (auto& v : p.lr.mutable_data()) v = std::numeric_limits<float>::quiet_NaN();
        }
        return p;
    }

private:
    const PatchSource& inner_;
    std::int64_t from_;
};

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0;
}

void expect_states_equal(const TrainState& a, const TrainState& b) {
    const auto ea = state_entries(a), eb = state_entries(b);
    ASSERT_EQ(ea.size(), eb.size());
    for (std::size_t i = 0; i < ea.size(); ++i) {
        EXPECT_EQ(ea[i].name, eb[i].name);
        EXPECT_TRUE(bitwise_equal(ea[i].value, eb[i].value)) << ea[i].name;
    }
}

std::vector<char> slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Loss, L1Examples) {
    const Tensor<double> a({4}, {0.0, 1.0, 2.0, 3.0});
    const Tensor<double> b({4}, {1.0, 1.0, 0.0, 3.5});
    EXPECT_DOUBLE_EQ(l1_loss(a, b).item(), (1.0 + 0.0 + 2.0 + 0.5) / 4.0);
    EXPECT_EQ(l1_loss(a, a).item(), 0.0);
    EXPECT_THROW(l1_loss(a, Tensor<double>({3})), ValidationError);
    Rng rng(50);
    using V = std::vector<Tensor<double>>;
    auto target = random_tensor({2, 3}, rng);
    auto pred = target.clone();
    for (auto& v : pred.mutable_data()) v += rng.uniform() < 0.5 ? -0.3 : 0.3;
    expect_gradients_match([&](const V& in) { return l1_loss(in[0], target); }, {pred}, rng);
    // Ties give a zero subgradient.
    Tape<double> tape;
    auto x = tape.leaf(a);
    tape.backward(l1_loss(x, b));
    const auto g = tape.grad(x);
    EXPECT_EQ(g.data()[1], 0.0);
    EXPECT_EQ(g.data()[0], -0.25);
    EXPECT_EQ(g.data()[2], 0.25);
}

TEST(Metrics, Psnr) {
    const auto a = Tensor<float>::full({3, 4, 4}, 0.5f);
    EXPECT_EQ(psnr(a, a), kPsnrCap);
    // MSE 0.01 -> 20 dB.
    EXPECT_NEAR(psnr(a, Tensor<float>::full({3, 4, 4}, 0.6f)), 20.0, 1e-4);
    Rng rng(51);
    const auto x = random_tensor({5, 7}, rng), y = random_tensor({5, 7}, rng);
    double mse = 0.0;
    for (std::size_t i = 0; i < x.data().size(); ++i) mse += (x.data()[i] - y.data()[i]) * (x.data()[i] - y.data()[i]);
    mse /= 35.0;
    EXPECT_NEAR(psnr(x, y, 2.0), 10.0 * std::log10(4.0 / mse), 1e-10);
    EXPECT_THROW(psnr(x, Tensor<double>({5, 6})), ValidationError);
}

TEST(Adam, FirstStepClosedForm) {
    Tensor<float> w({3}, {1.0f, -2.0f, 0.5f});
    ParamList<float> params{{"w", &w}};
    auto adam = AdamState::init(params, 0.01f);
    const Tensor<float> g({3}, {0.5f, -4.0f, 1e-3f});
    adam_step(adam, params, {g});
    // At t = 1, m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
    const float want[] = {1.0f - 0.01f * 0.5f / (0.5f + 1e-8f), -2.0f + 0.01f * 4.0f / (4.0f + 1e-8f),
                          0.5f - 0.01f * 1e-3f / (1e-3f + 1e-8f)};
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(w.data()[i], want[i], 1e-6);
    EXPECT_EQ(adam.step, 1);
    // The betas are stored as float, so 1 - beta is not exactly 0.1 / 0.001.
    EXPECT_NEAR(adam.m[0].data()[1], (1.0 - double(0.9f)) * -4.0, 1e-8);
    EXPECT_NEAR(adam.v[0].data()[1], (1.0 - double(0.999f)) * 16.0, 1e-8);
}

TEST(Adam, SecondStepMatchesRecurrence) {
    Tensor<float> w({1}, {0.0f});
    ParamList<float> params{{"w", &w}};
    auto adam = AdamState::init(params, 0.1f);
    adam_step(adam, params, {Tensor<float>({1}, {1.0f})});
    adam_step(adam, params, {Tensor<float>({1}, {-2.0f})});
    double m = 0.0, v = 0.0, x = 0.0;
    for (auto [t, gv] : {std::pair{1, 1.0}, std::pair{2, -2.0}}) {
        m = 0.9 * m + 0.1 * gv;
        v = 0.999 * v + 0.001 * gv * gv;
        const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
        x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
    EXPECT_NEAR(w.data()[0], x, 1e-6);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
    Rng rng(52);
    auto w = random_tensor<float>({4, 2}, rng);
    const auto before = w.clone();
    ParamList<float> params{{"w", &w}};
    auto adam = AdamState::init(params, 0.1f);
    for (int i = 0; i < 3; ++i) adam_step(adam, params, {Tensor<float>({4, 2})});
    EXPECT_TRUE(bitwise_equal(w, before));
}

TEST(Adam, NonFiniteGradientThrowsWithoutSideEffects) {
    Tensor<float> a({2}, {1.0f, 2.0f}), b({2}, {3.0f, 4.0f});
    ParamList<float> params{{"a", &a}, {"b", &b}};
    auto adam = AdamState::init(params, 0.1f);
    adam_step(adam, params, {Tensor<float>({2}, {1.0f, 1.0f}), Tensor<float>({2}, {1.0f, 1.0f})});
    const auto a0 = a.clone(), b0 = b.clone(), m0 = adam.m[0].clone();
    const auto nan = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(adam_step(adam, params, {Tensor<float>({2}, {1.0f, 1.0f}), Tensor<float>({2}, {nan, 1.0f})}),
                 NumericError);
    EXPECT_TRUE(bitwise_equal(a, a0));
    EXPECT_TRUE(bitwise_equal(b, b0));
    EXPECT_TRUE(bitwise_equal(adam.m[0], m0));
    EXPECT_EQ(adam.step, 1);
    EXPECT_THROW(adam_step(adam, params, {Tensor<float>({2})}), ValidationError);
}

TEST(Schedule, StepDecay) {
    TrainConfig cfg;
    EXPECT_FLOAT_EQ(lr_at(cfg, 0), 1e-4f);
    EXPECT_FLOAT_EQ(lr_at(cfg, 19), 1e-4f);
    EXPECT_FLOAT_EQ(lr_at(cfg, 20), 0.8e-4f);
    EXPECT_FLOAT_EQ(lr_at(cfg, 39), 0.8e-4f);
    EXPECT_FLOAT_EQ(lr_at(cfg, 40), 0.64e-4f);
    EXPECT_THROW(lr_at(cfg, -1), ValidationError);
}

TEST(Training, HistoryLengthScheduleAndCsv) {
    const auto dir = scratch_dir("train_history");
    const auto cfg = tiny_train();
    auto state = TrainState::fresh(gradcheck_config(), 1);
    const auto source = tiny_source(cfg);
    const auto result = train_loop(state, source, cfg, dir / "ckpt");
    EXPECT_FALSE(result.halted);
    ASSERT_EQ(static_cast<std::int64_t>(result.history.size()), cfg.total_steps());
    for (std::size_t i = 0; i < result.history.size(); ++i) {
        const auto& r = result.history[i];
        EXPECT_EQ(r.step, static_cast<std::int64_t>(i) + 1);
        EXPECT_EQ(r.epoch, static_cast<std::int64_t>(i) / cfg.steps_per_epoch);
        EXPECT_FLOAT_EQ(r.lr, lr_at(cfg, r.epoch));
        EXPECT_TRUE(std::isfinite(r.loss));
    }
    EXPECT_EQ(state.step, cfg.total_steps());
    EXPECT_EQ(load_train_state(dir / "ckpt").step, cfg.total_steps());
    write_loss_csv(dir / "loss.csv", result.history);
    std::ifstream csv(dir / "loss.csv");
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "step,epoch,lr,loss");
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    EXPECT_EQ(rows, cfg.total_steps());
}

TEST(Training, ResumeReproducesTheUninterruptedRun) {
    const auto dir = scratch_dir("train_resume");
    const auto cfg = tiny_train();
    const auto source = tiny_source(cfg);

    auto straight = TrainState::fresh(gradcheck_config(), 2);
    const auto full = train_loop(straight, source, cfg);

    auto first = TrainState::fresh(gradcheck_config(), 2);
    train_loop(first, source, cfg, dir / "ckpt", 4);
    auto resumed = load_train_state(dir / "ckpt");
    EXPECT_EQ(resumed.step, 4);
    expect_states_equal(first, resumed);
    const auto rest = train_loop(resumed, source, cfg);
    ASSERT_EQ(rest.history.size(), 2u);
    EXPECT_EQ(rest.history[0].step, 5);
    EXPECT_EQ(rest.history[0].loss, full.history[4].loss);
    EXPECT_EQ(rest.history[1].loss, full.history[5].loss);
    expect_states_equal(straight, resumed);
}

TEST(Training, IdenticalRunsGiveIdenticalCheckpoints) {
    const auto dir = scratch_dir("train_repro");
    const auto cfg = tiny_train();
    const auto source = tiny_source(cfg);
    auto a = TrainState::fresh(gradcheck_config(), 3);
    auto b = TrainState::fresh(gradcheck_config(), 3);
    train_loop(a, source, cfg, dir / "a.ckpt");
    train_loop(b, source, cfg, dir / "b.ckpt");
    EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
}

TEST(Training, NonFiniteLossHaltsAndKeepsLastCheckpoint) {
    const auto dir = scratch_dir("train_nan");
    const auto cfg = tiny_train();
    const auto clean = tiny_source(cfg);
    const PoisonedSource poisoned(clean, 3);
    auto state = TrainState::fresh(gradcheck_config(), 4);
    const auto result = train_loop(state, poisoned, cfg, dir / "ckpt");
    EXPECT_TRUE(result.halted);
    EXPECT_NE(result.halt_reason.find("non-finite"), std::string::npos);
    EXPECT_EQ(result.history.size(), 3u);
    EXPECT_EQ(state.step, 3);
    const auto saved = load_train_state(dir / "ckpt");
    EXPECT_EQ(saved.step, 2);
    for (const auto& [name, t] : saved.model.named_tensors()) {
        for (float v : t.data()) ASSERT_TRUE(std::isfinite(v)) << name;
    }
}

TEST(Training, TrainStepFailureLeavesStateUntouched) {
    const auto cfg = tiny_train();
    const auto clean = tiny_source(cfg);
    const PoisonedSource poisoned(clean, 0);
    auto state = TrainState::fresh(gradcheck_config(), 5);
    const auto before = TrainState::fresh(gradcheck_config(), 5);
    EXPECT_THROW(train_step(state, poisoned, cfg), NumericError);
    expect_states_equal(state, before);
}

TEST(Training, PatchSourceIsDeterministic) {
    const auto cfg = tiny_train();
    const auto source = tiny_source(cfg);
    const auto a = source.sample(7, 1), b = source.sample(7, 1), c = source.sample(8, 1);
    EXPECT_TRUE(bitwise_equal(a.lr, b.lr));
    EXPECT_TRUE(bitwise_equal(a.hr, b.hr));
    EXPECT_EQ(a.lr.shape(), (Shape{3, 3, 8, 8}));
    EXPECT_EQ(a.hr.shape(), (Shape{3, 32, 32}));
    EXPECT_FALSE(bitwise_equal(a.lr, c.lr) && a.y == c.y && a.x == c.x);
}

TEST(Config, ParsesAllSections) {
    const auto cfg = parse_run_config(R"(# desk run
preset = model1
channels = 16
reduction = 4
n_recon_blocks = 3
use_upsample_skip = false
batch_size = 3
base_lr = 2e-3
lr_decay_epochs = 5
patch_size = 16

n_clips = 4
noise_sigma = 0.01
quantize = false
data_seed = 9
model_seed = 11
)");
    EXPECT_FALSE(cfg.model.use_carb);
    EXPECT_EQ(cfg.model.channels, 16);
    EXPECT_EQ(cfg.model.n_recon_blocks, 3);
    EXPECT_FALSE(cfg.model.use_upsample_skip);
    EXPECT_EQ(cfg.train.batch_size, 3);
    EXPECT_DOUBLE_EQ(cfg.train.base_lr, 2e-3);
    EXPECT_EQ(cfg.train.lr_decay_epochs, 5);
    EXPECT_EQ(cfg.data.n_clips, 4);
    EXPECT_DOUBLE_EQ(cfg.data.noise_sigma, 0.01);
    EXPECT_FALSE(cfg.data.quantize);
    EXPECT_EQ(cfg.data.data_seed, 9u);
    EXPECT_EQ(cfg.model_seed, 11u);
}

TEST(Config, RejectsBadInput) {
    EXPECT_THROW(parse_run_config("channels = 16\npreset = small\n"), ValidationError);
    EXPECT_THROW(parse_run_config("colour = red\n"), ValidationError);
    EXPECT_THROW(parse_run_config("batch_size = many\n"), ValidationError);
    EXPECT_THROW(parse_run_config("batch_size 4\n"), ValidationError);
    EXPECT_THROW(parse_run_config("quantize = maybe\n"), ValidationError);
    EXPECT_THROW(parse_run_config("n_frames = 4\n"), ValidationError);
    EXPECT_THROW(parse_run_config("patch_size = 4\n"), ValidationError);
    EXPECT_THROW(parse_run_config("preset = giant\n"), ValidationError);
    EXPECT_THROW(load_run_config("/nonexistent/run.cfg"), IoError);
}

TEST(Evaluation, ErrorsAndFiniteScores) {
    const auto pairs = make_synthetic_pairs(tiny_data());
    const auto net = VesrNet<float>::build(gradcheck_config(), 6);
    const auto report = evaluate(net, pairs);
    ASSERT_EQ(report.clips.size(), 2u);
    EXPECT_TRUE(std::isfinite(report.mean_model_psnr));
    EXPECT_GT(report.mean_bicubic_psnr, 10.0);
    EXPECT_EQ(report.clips[0].frames, 3);
    // An untrained model with the bicubic skip starts near the bicubic baseline.
    EXPECT_NEAR(report.mean_model_psnr, report.mean_bicubic_psnr, 3.0);

    auto mismatched = pairs;
    mismatched[0].lr = Clip{narrow(pairs[0].lr.frames, 2, 0, 4).clone()};
    EXPECT_THROW(evaluate(net, mismatched), ValidationError);
    auto cfg = gradcheck_config();
    cfg.n_frames = 5;
    const auto wide = VesrNet<float>::build(cfg, 6);
    auto short_clip = pairs;
    short_clip[0].hr = Clip{narrow(pairs[0].hr.frames, 0, 0, 1).clone()};
    short_clip[0].lr = Clip{narrow(pairs[0].lr.frames, 0, 0, 1).clone()};
    EXPECT_THROW(evaluate(wide, short_clip), ValidationError);
    EXPECT_THROW(evaluate(net, {}), ValidationError);
}

TEST(Evaluation, SuperResolveClipShape) {
    const auto pairs = make_synthetic_pairs(tiny_data());
    const auto net = VesrNet<float>::build(gradcheck_config(), 7);
    const auto hr = super_resolve_clip(net, pairs[0].lr);
    EXPECT_EQ(hr.frames.shape(), pairs[0].hr.frames.shape());
    EXPECT_NO_THROW(hr.validate());
}
