#include <set>
#include <sstream>

#include "test_util.hpp"
#include "vesr/analysis.hpp"

using namespace vesr;

namespace {

struct CsvRow {
    std::string path;
    std::int64_t params, flops;
};

std::vector<CsvRow> parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "path,params,flops");
    std::vector<CsvRow> rows;
    while (std::getline(in, line)) {
        const auto a = line.find(','), b = line.rfind(',');
        rows.push_back({line.substr(0, a), std::stoll(line.substr(a + 1, b - a - 1)), std::stoll(line.substr(b + 1))});
    }
    return rows;
}

const CountRow& row_of(const CountReport& r, const std::string& path) {
    for (const auto& row : r.rows)
        if (row.path == path) return row;
    throw std::runtime_error("no row " + path);
}

std::int64_t row_flops(const CountReport& r, const std::string& path) { return row_of(r, path).flops; }

}  // namespace

TEST(Flops, ConvClosedForm) {
    EXPECT_EQ(conv2d_flops(3, 3, 128, 64, 64), 28311552);
    EXPECT_EQ(conv2d_flops(1, 256, 128, 2, 3), 2 * 256 * 128 * 6);
}

TEST(Flops, EncoderConvRowCoversAllFramesPlusActivation) {
    const auto net = VesrNet<float>::build(preset("small"), 0);
    const auto r = count_flops(net);
    EXPECT_EQ(r.frames, 7);
    EXPECT_EQ(r.height, 64);
    EXPECT_EQ(row_flops(r, "encoder.conv1"), 7 * (28311552 + 128 * 64 * 64));
    EXPECT_EQ(r.flops_per_frame(), r.total_flops / 7);
}

TEST(Flops, AttentionRowMatchesMatrixDimensions) {
    const auto net = VesrNet<float>::build(preset("small"), 0);
    const auto r = count_flops(net, 16, 16);
    const std::int64_t t = 7, c = 128, hw = 256;
    auto attention = [](std::int64_t d, std::int64_t n) {
        // logits d x n by n x n, softmax, value application, residual add
        return 2 * d * n * n + n * n + 2 * d * n * n + d * n;
    };
    const std::int64_t convs = 9 * t * 2 * c * c * hw;
    EXPECT_EQ(row_flops(r, "fusion.snl"), convs + attention(t * c, hw) + attention(t * hw, c) + attention(c * hw, t));
}

TEST(Flops, DeeperReconstructionCostsExactlyItsExtraBlocks) {
    const auto small = count_flops(VesrNet<float>::build(preset("small"), 0));
    const auto full = count_flops(VesrNet<float>::build(preset("full"), 0));
    EXPECT_LT(small.total_flops, full.total_flops);
    EXPECT_EQ(full.total_flops - small.total_flops, 20 * row_flops(small, "recon.carb0"));
    EXPECT_EQ(full.total_params - small.total_params, 20 * row_of(small, "recon.carb0").params);
}

TEST(Counts, RowsSumToTotalsAndMatchTheModel) {
    for (const auto& name : preset_names()) {
        const auto net = VesrNet<float>::build(preset(name), 0);
        const auto r = count_flops(net);
        std::int64_t params = 0, flops = 0;
        std::set<std::string> paths;
        for (const auto& row : r.rows) {
            params += row.params;
            flops += row.flops;
            EXPECT_TRUE(paths.insert(row.path).second) << row.path;
            EXPECT_GT(row.flops, 0) << row.path;
        }
        EXPECT_EQ(params, r.total_params) << name;
        EXPECT_EQ(flops, r.total_flops) << name;
        EXPECT_EQ(r.total_params, net.param_count()) << name;
        EXPECT_EQ(r.total_params, analytic_param_count(preset(name))) << name;
        EXPECT_EQ(count_params(net).total_params, r.total_params) << name;
    }
}

TEST(Counts, CsvParsesBackToTotals) {
    const auto r = count_flops(VesrNet<float>::build(preset("model1"), 0));
    const auto rows = parse_csv(format_count_csv(r));
    ASSERT_EQ(rows.size(), r.rows.size() + 1);
    std::int64_t params = 0, flops = 0;
    for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
        EXPECT_EQ(rows[i].path, r.rows[i].path);
        params += rows[i].params;
        flops += rows[i].flops;
    }
    EXPECT_EQ(rows.back().path, "total");
    EXPECT_EQ(rows.back().params, params);
    EXPECT_EQ(rows.back().flops, flops);
    EXPECT_EQ(rows.back().flops, r.total_flops);
}

TEST(Counts, TableDeclaresTheConvention) {
    const auto r = count_flops(VesrNet<float>::build(gradcheck_config(), 0), 8, 8);
    const auto table = format_count_table(r, true);
    EXPECT_NE(table.find("one multiply-accumulate = 2 FLOPs"), std::string::npos);
    EXPECT_NE(table.find("per frame"), std::string::npos);
    EXPECT_NE(table.find("all 3 frames"), std::string::npos);
    EXPECT_THROW(count_flops(VesrNet<float>::build(gradcheck_config(), 0), 0, 8), ValidationError);
}

TEST(Gradcheck, DefaultConfigPasses) {
    const auto report = gradcheck_model(gradcheck_config(), 0, 200);
    EXPECT_TRUE(report.passed()) << format_gradcheck(report);
    EXPECT_EQ(report.samples.size(), 200u);
    EXPECT_LT(report.max_rel_error, kGradTolerance);
    EXPECT_LT(report.max_rel_error_sampling, kSamplingGradTolerance);
    // Every parameter tensor is sampled at least once.
    auto net = VesrNet<float>::build(gradcheck_config(), 0);
    std::set<std::string> sampled;
    for (const auto& s : report.samples) {
        sampled.insert(s.name);
        const bool sampling = s.name.find("offset_conv") != std::string::npos;
        EXPECT_EQ(s.tolerance, sampling ? kSamplingGradTolerance : kGradTolerance) << s.name;
    }
    for (const auto& p : net.parameters()) EXPECT_TRUE(sampled.count(p.name)) << p.name;
    EXPECT_NE(format_gradcheck(report).find("PASS"), std::string::npos);
}

TEST(Gradcheck, RejectsTooFewSamples) {
    EXPECT_THROW(gradcheck_model(gradcheck_config(), 0, 0), ValidationError);
    EXPECT_THROW(gradcheck_model(gradcheck_config(), 0, 10), ValidationError);
}

TEST(Gradcheck, AblationConfigsPass) {
    auto cfg = gradcheck_config();
    cfg.use_carb = false;
    cfg.use_separate_nl = false;
    EXPECT_TRUE(gradcheck_model(cfg, 3, 60).passed());
    cfg = gradcheck_config();
    cfg.use_upsample_skip = false;
    cfg.use_alignment = false;
    EXPECT_TRUE(gradcheck_model(cfg, 4, 80).passed());
}
