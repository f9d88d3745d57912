#include <cstring>
#include <fstream>

#include "test_util.hpp"
#include "vesr/data.hpp"

using namespace vesr;
using vesr::testing::random_tensor;
using vesr::testing::scratch_dir;

namespace {

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0;
}

std::vector<char> slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::vector<char>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Synthetic, DeterministicAndInRange) {
    const auto a = generate_synthetic_clip(5, 4, 32, 48);
    const auto b = generate_synthetic_clip(5, 4, 32, 48);
    const auto c = generate_synthetic_clip(6, 4, 32, 48);
    EXPECT_EQ(a.frames.shape(), (Shape{4, 3, 32, 48}));
    EXPECT_TRUE(bitwise_equal(a.frames, b.frames));
    EXPECT_FALSE(bitwise_equal(a.frames, c.frames));
    EXPECT_NO_THROW(a.validate());
    EXPECT_THROW(generate_synthetic_clip(1, 0, 32, 32), ValidationError);
}

TEST(Synthetic, ObjectsTranslateByTheVelocityAndBackgroundIsStatic) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SceneInfo info;
        const auto clip = generate_synthetic_clip(seed, 5, 40, 40, &info);
        const auto vy = info.velocity_y, vx = info.velocity_x;
        EXPECT_TRUE(vy != 0 || vx != 0);
        std::int64_t moved = 0;
        for (std::int64_t t = 0; t + 1 < 5; ++t)
            for (std::int64_t y = 0; y < 40; ++y)
                for (std::int64_t x = 0; x < 40; ++x) {
                    const bool obj = info.object_mask.at({t, y, x}) > 0.5f;
                    const auto ny = y + vy, nx = x + vx;
                    if (obj && ny >= 0 && ny < 40 && nx >= 0 && nx < 40) {
                        ++moved;
                        ASSERT_EQ(info.object_mask.at({t + 1, ny, nx}), 1.0f);
                        for (std::int64_t c = 0; c < 3; ++c) {
                            ASSERT_EQ(clip.frames.at({t + 1, c, ny, nx}), clip.frames.at({t, c, y, x}));
                        }
                    }
                    if (!obj && info.object_mask.at({t + 1, y, x}) < 0.5f) {
                        for (std::int64_t c = 0; c < 3; ++c) {
                            ASSERT_EQ(clip.frames.at({t + 1, c, y, x}), clip.frames.at({t, c, y, x}));
                        }
                    }
                }
        EXPECT_GT(moved, 0) << "seed " << seed;
    }
}

TEST(Bicubic, KernelValues) {
    EXPECT_EQ(cubic_kernel(0.0), 1.0);
    EXPECT_EQ(cubic_kernel(1.0), 0.0);
    EXPECT_EQ(cubic_kernel(2.0), 0.0);
    EXPECT_EQ(cubic_kernel(3.0), 0.0);
    EXPECT_DOUBLE_EQ(cubic_kernel(0.5), 0.5625);
    EXPECT_DOUBLE_EQ(cubic_kernel(-1.5), -0.0625);
    // Partition of unity.
    for (double f : {0.0, 0.1, 0.25, 0.5, 0.9}) {
        double total = 0.0;
        for (int j = -2; j <= 2; ++j) total += cubic_kernel(f + j);
        EXPECT_NEAR(total, 1.0, 1e-14);
    }
}

TEST(Bicubic, ConstantsAndIdentity) {
    const auto flat = Tensor<float>::full({3, 9, 7}, 0.4f);
    const auto up = bicubic_resize(flat, 36, 28);
    const auto down = bicubic_resize(flat, 3, 2);
    for (float v : up.data()) EXPECT_NEAR(v, 0.4f, 1e-6);
    for (float v : down.data()) EXPECT_NEAR(v, 0.4f, 1e-6);
    Rng rng(40);
    const auto img = random_tensor<float>({2, 6, 5}, rng, 0.0, 1.0);
    const auto same = bicubic_resize(img, 6, 5);
    for (std::size_t i = 0; i < img.data().size(); ++i) EXPECT_NEAR(same.data()[i], img.data()[i], 1e-6);
    EXPECT_THROW(bicubic_resize(Tensor<float>({4, 4}), 8, 8), ValidationError);
}

TEST(Bicubic, UpsampleInteriorMatchesSeparableSum) {
    Rng rng(41);
    const auto img = random_tensor<float>({1, 8, 8}, rng, 0.0, 1.0);
    const auto up = bicubic_resize(img, 32, 32);
    for (std::int64_t oy : {10, 13, 16, 21})
        for (std::int64_t ox : {9, 14, 18, 22}) {
            const double cy = (oy + 0.5) / 4.0 - 0.5, cx = (ox + 0.5) / 4.0 - 0.5;
            double want = 0.0;
            for (std::int64_t y = 0; y < 8; ++y)
                for (std::int64_t x = 0; x < 8; ++x) want += cubic_kernel(cy - y) * cubic_kernel(cx - x) * img.at({0, y, x});
            EXPECT_NEAR(up.at({0, oy, ox}), want, 1e-6);
        }
}

TEST(Degrade, ShapeRangeAndDeterminism) {
    const auto hr = generate_synthetic_clip(3, 3, 32, 32);
    DegradationSpec spec;
    spec.gaussian_noise_sigma = 0.05f;
    spec.quantize_8bit = true;
    const auto lr = degrade_clip(hr, spec, 9);
    EXPECT_EQ(lr.frames.shape(), (Shape{3, 3, 8, 8}));
    EXPECT_NO_THROW(lr.validate());
    for (float v : lr.frames.data()) {
        const float scaled = v * 255.0f;
        EXPECT_NEAR(scaled, std::round(scaled), 1e-3);
    }
    EXPECT_TRUE(bitwise_equal(lr.frames, degrade_clip(hr, spec, 9).frames));
    EXPECT_FALSE(bitwise_equal(lr.frames, degrade_clip(hr, spec, 10).frames));
    EXPECT_THROW(degrade_clip(generate_synthetic_clip(3, 1, 30, 32), spec, 0), ValidationError);
    spec.scale = 2;
    EXPECT_THROW(degrade_clip(hr, spec, 0), ValidationError);
}

TEST(Degrade, NoiseStandardDeviationWithinFivePercent) {
    const Clip hr{Tensor<float>::full({8, 3, 128, 128}, 0.5f)};
    DegradationSpec spec;
    spec.gaussian_noise_sigma = 0.05f;
    const auto lr = degrade_clip(hr, spec, 77);
    double sum = 0.0, sq = 0.0;
    const auto n = static_cast<double>(lr.frames.numel());
    for (float v : lr.frames.data()) {
        sum += v - 0.5;
        sq += (v - 0.5) * (v - 0.5);
    }
    const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
    EXPECT_NEAR(sd, 0.05, 0.05 * 0.05);
    EXPECT_NEAR(sum / n, 0.0, 0.002);
}

TEST(Patches, AlignedCrops) {
    const auto hr = generate_synthetic_clip(8, 5, 64, 64);
    const auto lr = degrade_clip(hr, DegradationSpec{}, 8);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = sample_patch_pair(hr, lr, 6, seed);
        ASSERT_EQ(p.lr.shape(), (Shape{5, 3, 6, 6}));
        ASSERT_EQ(p.hr.shape(), (Shape{3, 24, 24}));
        for (std::int64_t t = 0; t < 5; ++t)
            for (std::int64_t y = 0; y < 6; ++y) EXPECT_EQ(p.lr.at({t, 1, y, 2}), lr.frames.at({t, 1, p.y + y, p.x + 2}));
        for (std::int64_t y = 0; y < 24; y += 5)
            for (std::int64_t x = 0; x < 24; x += 7) {
                EXPECT_EQ(p.hr.at({2, y, x}), hr.frames.at({2, 2, 4 * p.y + y, 4 * p.x + x}));
            }
    }
    EXPECT_THROW(sample_patch_pair(hr, lr, 17, 0), ValidationError);
    EXPECT_THROW(sample_patch_pair(lr, lr, 4, 0), ValidationError);
}

TEST(Frames, ReflectIndex) {
    EXPECT_EQ(reflect_index(-1, 5), 1);
    EXPECT_EQ(reflect_index(-2, 5), 2);
    EXPECT_EQ(reflect_index(5, 5), 3);
    EXPECT_EQ(reflect_index(6, 5), 2);
    EXPECT_EQ(reflect_index(3, 5), 3);
    EXPECT_EQ(reflect_index(-3, 1), 0);
    EXPECT_EQ(reflect_index(-7, 3), 1);
}

TEST(Frames, WindowReflectsAtClipEnds) {
    const auto clip = generate_synthetic_clip(2, 3, 16, 16);
    const auto win = frame_window(clip, 0, 5);
    ASSERT_EQ(win.n_frames(), 5);
    const std::int64_t want[] = {2, 1, 0, 1, 2};
    for (std::int64_t k = 0; k < 5; ++k) EXPECT_TRUE(bitwise_equal(win.frame(k), clip.frame(want[k])));
    EXPECT_THROW(frame_window(clip, 0, 4), ValidationError);
}

TEST(ClipFiles, RoundTripAndCorruption) {
    const auto dir = scratch_dir("data_clip");
    const auto clip = generate_synthetic_clip(12, 3, 16, 20);
    write_clip(dir / "c.vesr", clip);
    EXPECT_TRUE(bitwise_equal(read_clip(dir / "c.vesr").frames, clip.frames));
    const auto bytes = slurp(dir / "c.vesr");
    EXPECT_EQ(bytes.size(), 4 + 1 + 16 + 4 * static_cast<std::size_t>(clip.frames.numel()));

    auto magic = bytes;
    magic[1] = 'X';
    spit(dir / "m.vesr", magic);
    EXPECT_THROW(read_clip(dir / "m.vesr"), IoError);
    spit(dir / "t.vesr", std::vector<char>(bytes.begin(), bytes.end() - 3));
    EXPECT_THROW(read_clip(dir / "t.vesr"), IoError);
    spit(dir / "h.vesr", std::vector<char>(bytes.begin(), bytes.begin() + 10));
    EXPECT_THROW(read_clip(dir / "h.vesr"), IoError);
    EXPECT_THROW(read_clip(dir / "absent.vesr"), IoError);
}

TEST(ClipFiles, PpmFrames) {
    const auto dir = scratch_dir("data_ppm");
    Tensor<float> frames({2, 3, 2, 3});
    auto d = frames.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(i) / static_cast<float>(d.size() - 1);
    const auto paths = write_ppm_frames(dir, Clip{frames});
    ASSERT_EQ(paths.size(), 2u);
    EXPECT_EQ(paths[1].filename(), "frame0001.ppm");
    const auto bytes = slurp(paths[1]);
    const std::string header = "P6\n3 2\n255\n";
    ASSERT_EQ(bytes.size(), header.size() + 18);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header.size())), header);
    // Interleaved RGB of pixel (1, 2) in frame 1.
    for (std::int64_t c = 0; c < 3; ++c) {
        const auto got = static_cast<std::uint8_t>(bytes[header.size() + 3 * 5 + static_cast<std::size_t>(c)]);
        EXPECT_EQ(got, quantize_8bit(frames.at({1, c, 1, 2})));
    }
    EXPECT_EQ(quantize_8bit(1.0f), 255);
    EXPECT_EQ(quantize_8bit(-0.2f), 0);
    EXPECT_EQ(quantize_8bit(0.5f), 128);
    EXPECT_THROW(write_ppm_frames(dir, Clip{Tensor<float>({1, 1, 2, 2})}), ValidationError);
}
