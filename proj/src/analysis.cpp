#include "vesr/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include "vesr/train.hpp"

namespace vesr {

namespace {

std::string group_of(const std::string& name) {
    const auto first = name.find('.');
    if (first == std::string::npos) return name;
    const auto second = name.find('.', first + 1);
    return second == std::string::npos ? name : name.substr(0, second);
}

std::int64_t conv_params(std::int64_t k, std::int64_t in, std::int64_t out) { return k * k * in * out + out; }
std::int64_t linear_params(std::int64_t in, std::int64_t out) { return in * out + out; }

std::int64_t block_param_formula(const VesrNetConfig& cfg) {
    const auto c = cfg.channels;
    if (!cfg.use_carb) return 2 * conv_params(3, c, c);
    const auto hidden = c / cfg.reduction;
    return 2 * conv_params(3, c, c) + linear_params(c, hidden) + linear_params(hidden, c) + conv_params(1, 2 * c, c);
}

void finish(CountReport& r) {
    r.total_params = 0;
    r.total_flops = 0;
    for (const auto& row : r.rows) {
        r.total_params += row.params;
        r.total_flops += row.flops;
    }
}

}  // namespace

CountReport count_params(const VesrNet<float>& net) {
    CountReport r;
    r.frames = net.config.n_frames;
    std::map<std::string, std::size_t> index;
    for (const auto& [name, t] : net.named_tensors()) {
        const auto g = group_of(name);
        auto it = index.find(g);
        if (it == index.end()) {
            it = index.emplace(g, r.rows.size()).first;
            r.rows.push_back({g, 0, 0});
        }
        r.rows[it->second].params += t.numel();
    }
    finish(r);
    return r;
}

std::int64_t analytic_param_count(const VesrNetConfig& cfg) {
    cfg.validate();
    const auto c = cfg.channels;
    const auto t = cfg.n_frames;
    std::int64_t n = conv_params(3, 3, c);
    n += (cfg.n_encoder_carbs + cfg.n_recon_blocks) * block_param_formula(cfg);
    if (cfg.use_alignment) n += (t - 1) * (conv_params(3, 2 * c, 2) + conv_params(3, 2 * c, c));
    if (cfg.use_separate_nl) n += 9 * conv_params(1, c, c);
    n += conv_params(3, t * c, c);
    n += conv_params(3, c, 4 * c) + conv_params(3, c, 2 * c) + conv_params(3, c / 2, c / 2) + conv_params(3, c / 2, 3);
    return n;
}

std::int64_t conv2d_flops(std::int64_t kernel, std::int64_t in_channels, std::int64_t out_channels,
                          std::int64_t out_h, std::int64_t out_w) {
    return 2 * kernel * kernel * in_channels * out_channels * out_h * out_w;
}

namespace {

std::int64_t conv_flops(std::int64_t k, std::int64_t in, std::int64_t out, std::int64_t hw) {
    return conv2d_flops(k, in, out, hw, 1);
}

std::int64_t block_flops(const VesrNetConfig& cfg, std::int64_t hw) {
    const auto c = cfg.channels;
    std::int64_t f = 2 * conv_flops(3, c, c, hw) + c * hw;  // convs + leaky relu
    if (cfg.use_carb) {
        const auto hidden = c / cfg.reduction;
        f += c * hw;                              // average pool
        f += 2 * c * hidden + hidden;             // fc1 + relu
        f += 2 * hidden * c + c;                  // fc2 + sigmoid
        f += c * hw;                              // z * h
        f += conv_flops(1, 2 * c, c, hw);         // fuse
    }
    return f + c * hw;  // skip add
}

// Relation (a^T b), softmax, application (d M^T) and the residual add.
std::int64_t attention_flops(std::int64_t d, std::int64_t n) { return 2 * n * n * d + n * n + 2 * d * n * n + d * n; }

// Loss roundoff makes a central difference good to ~5e-11 absolute, so below
// this magnitude a 1e-4 relative check becomes a 1e-10 absolute one.
constexpr double kGradMagnitudeFloor = 1e-6;

// Four multiply-adds per bilinear sample.
constexpr std::int64_t kBilinearFlopsPerSample = 8;

}  // namespace

CountReport count_flops(const VesrNet<float>& net, std::int64_t height, std::int64_t width) {
    if (height < 1 || width < 1) throw ValidationError("count_flops needs a positive input size");
    const auto& cfg = net.config;
    auto r = count_params(net);
    r.height = height;
    r.width = width;
    const auto c = cfg.channels;
    const auto t = cfg.n_frames;
    const auto hw = height * width;
    std::map<std::string, std::int64_t> flops;

    flops["encoder.conv1"] = t * (conv_flops(3, 3, c, hw) + c * hw);
    for (std::size_t i = 0; i < net.encoder_blocks.size(); ++i) {
        const auto kind = cfg.use_carb ? ".carb" : ".res";
        flops["encoder" + std::string(kind) + std::to_string(i)] = t * block_flops(cfg, hw);
    }
    for (std::size_t i = 0; i < net.aligners.size(); ++i) {
        flops["fusion.align" + std::to_string(i)] =
            conv_flops(3, 2 * c, 2, hw) + kBilinearFlopsPerSample * c * hw + conv_flops(3, 2 * c, c, hw);
    }
    if (net.separate_nl) {
        std::int64_t f = 3 * 3 * t * conv_flops(1, c, c, hw);
        f += attention_flops(t * c, hw);      // spatial
        f += attention_flops(t * hw, c);      // channel
        f += attention_flops(c * hw, t);      // temporal
        flops["fusion.snl"] = f;
    }
    flops["fusion.conv9"] = conv_flops(3, t * c, c, hw) + c * hw;
    for (std::size_t i = 0; i < net.recon_blocks.size(); ++i) {
        const auto kind = cfg.use_carb ? ".carb" : ".res";
        flops["recon" + std::string(kind) + std::to_string(i)] = block_flops(cfg, hw);
    }
    flops["recon.conv31"] = conv_flops(3, c, 4 * c, hw) + 4 * c * hw;
    flops["recon.conv33"] = conv_flops(3, c, 2 * c, 4 * hw) + 2 * c * 4 * hw;
    flops["recon.conv35"] = conv_flops(3, c / 2, c / 2, 16 * hw) + c / 2 * 16 * hw;
    flops["recon.conv36"] = conv_flops(3, c / 2, 3, 16 * hw);

    for (auto& row : r.rows) {
        auto it = flops.find(row.path);
        if (it == flops.end()) throw std::logic_error("no FLOP rule for " + row.path);
        row.flops = it->second;
    }
    finish(r);
    return r;
}

std::string format_count_table(const CountReport& report, bool with_flops) {
    std::ostringstream out;
    out << "# FLOPs: one multiply-accumulate = 2 FLOPs";
    if (with_flops) out << "; input " << report.frames << "x3x" << report.height << "x" << report.width;
    out << "\n";
    std::size_t width = 5;
    for (const auto& r : report.rows) width = std::max(width, r.path.size());
    out << std::left << std::setw(static_cast<int>(width)) << "path" << "  " << std::right << std::setw(12) << "params";
    if (with_flops) out << "  " << std::setw(16) << "flops";
    out << "\n";
    auto line = [&](const std::string& path, std::int64_t params, std::int64_t flops) {
        out << std::left << std::setw(static_cast<int>(width)) << path << "  " << std::right << std::setw(12) << params;
        if (with_flops) out << "  " << std::setw(16) << flops;
        out << "\n";
    };
    for (const auto& r : report.rows) line(r.path, r.params, r.flops);
    line("total", report.total_params, report.total_flops);
    out << std::fixed << std::setprecision(3) << "params: " << static_cast<double>(report.total_params) / 1e6 << "M\n";
    if (with_flops) {
        out << "flops (all " << report.frames << " frames): " << static_cast<double>(report.total_flops) / 1e9 << "G\n";
        out << "flops (per frame): " << static_cast<double>(report.flops_per_frame()) / 1e9 << "G\n";
    }
    return out.str();
}

std::string format_count_csv(const CountReport& report) {
    std::ostringstream out;
    out << "path,params,flops\n";
    for (const auto& r : report.rows) out << r.path << ',' << r.params << ',' << r.flops << '\n';
    out << "total," << report.total_params << ',' << report.total_flops << '\n';
    return out.str();
}

VesrNetConfig gradcheck_config() {
    VesrNetConfig cfg;
    cfg.channels = 8;
    cfg.n_frames = 3;
    cfg.n_encoder_carbs = 1;
    cfg.n_recon_blocks = 2;
    cfg.reduction = 4;
    return cfg;
}

GradcheckReport gradcheck_model(const VesrNetConfig& cfg, std::uint64_t seed, std::int64_t n_samples) {
    if (n_samples < 1) throw ValidationError("gradcheck needs at least one sampled parameter");
    constexpr std::int64_t kSize = 8;
    auto net = VesrNet<double>::build(cfg, seed);
    auto params = net.parameters();
    if (n_samples < static_cast<std::int64_t>(params.size())) {
        throw ValidationError("gradcheck needs at least one sample per parameter tensor (" +
                              std::to_string(params.size()) + ")");
    }

    Rng rng(mix_seed(seed, 0x67726164));
    const auto t = cfg.n_frames;
    Tensor<double> input({t, 3, kSize, kSize});
    for (auto& v : input.mutable_data()) v = rng.uniform();
    Tensor<double> target({3, 4 * kSize, 4 * kSize});
    for (auto& v : target.mutable_data()) v = rng.uniform();

    Tape<double> tape;
    auto loss = l1_loss(net.forward(input, &tape), target);
    tape.backward(loss);
    std::vector<Tensor<double>> grads;
    for (const auto& p : params) grads.push_back(tape.param_grad(*p.tensor));

    // One sample per tensor, then uniform over all scalars.
    std::vector<std::pair<std::size_t, std::int64_t>> picks;
    std::int64_t total = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        picks.emplace_back(i, rng.uniform_int(0, params[i].tensor->numel() - 1));
        total += params[i].tensor->numel();
    }
    while (static_cast<std::int64_t>(picks.size()) < n_samples) {
        auto flat = rng.uniform_int(0, total - 1);
        std::size_t i = 0;
        while (flat >= params[i].tensor->numel()) flat -= params[i++].tensor->numel();
        picks.emplace_back(i, flat);
    }

    auto eval_loss = [&] { return l1_loss(net.forward(input), target).item(); };
    GradcheckReport report;
    for (const auto& [i, k] : picks) {
        auto w = params[i].tensor->mutable_data();
        const auto orig = w[static_cast<std::size_t>(k)];
        const double analytic = grads[i].data()[static_cast<std::size_t>(k)];
        const bool sampling = params[i].name.find("offset_conv") != std::string::npos;
        GradSample s{params[i].name, k, analytic, 0.0, 0.0, sampling ? kSamplingGradTolerance : kGradTolerance};
        // Several step sizes: large steps may straddle an |x| or leaky-ReLU
        // kink, small ones drown in loss roundoff.
        double best = std::numeric_limits<double>::infinity();
        for (double h : {1e-3, 1e-4, 1e-5, 1e-6}) {
            w[static_cast<std::size_t>(k)] = orig + h;
            const double up = eval_loss();
            w[static_cast<std::size_t>(k)] = orig - h;
            const double down = eval_loss();
            w[static_cast<std::size_t>(k)] = orig;
            const double numeric = (up - down) / (2 * h);
            const double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradMagnitudeFloor});
            if (err < best) {
                best = err;
                s.numeric = numeric;
            }
        }
        s.rel_error = best;
        if (sampling) {
            report.max_rel_error_sampling = std::max(report.max_rel_error_sampling, best);
        } else {
            report.max_rel_error = std::max(report.max_rel_error, best);
        }
        if (best > s.tolerance &&
            std::find(report.failures.begin(), report.failures.end(), s.name) == report.failures.end()) {
            report.failures.push_back(s.name);
        }
        report.samples.push_back(std::move(s));
    }
    return report;
}

std::string format_gradcheck(const GradcheckReport& report) {
    std::ostringstream out;
    out << std::scientific << std::setprecision(3);
    out << "samples: " << report.samples.size() << "\n";
    out << "max rel error: " << report.max_rel_error << " (tolerance " << kGradTolerance << ")\n";
    out << "max rel error, offset prediction: " << report.max_rel_error_sampling << " (tolerance "
        << kSamplingGradTolerance << ")\n";
    if (report.passed()) {
        out << "PASS\n";
    } else {
        out << "FAIL:";
        for (const auto& f : report.failures) out << " " << f;
        out << "\n";
    }
    return out.str();
}

}  // namespace vesr
