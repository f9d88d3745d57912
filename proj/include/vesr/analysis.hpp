#pragma once

#include <string>
#include <vector>

#include "vesr/model.hpp"

namespace vesr {

struct CountRow {
    std::string path;
    std::int64_t params = 0;
    std::int64_t flops = 0;
};

/// Per-submodule tallies. FLOPs count one multiply-accumulate as 2 and are
/// for one forward pass over all frames at `height` x `width`.
struct CountReport {
    std::vector<CountRow> rows;
    std::int64_t total_params = 0;
    std::int64_t total_flops = 0;
    std::int64_t frames = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;

    std::int64_t flops_per_frame() const { return frames > 0 ? total_flops / frames : 0; }
};

/// Exact learnable-scalar count grouped by submodule (first two name levels).
CountReport count_params(const VesrNet<float>& net);
/// Closed-form count from the config alone.
std::int64_t analytic_param_count(const VesrNetConfig& cfg);

/// Multiply-accumulates of a k x k conv, bias and activation excluded.
std::int64_t conv2d_flops(std::int64_t kernel, std::int64_t in_channels, std::int64_t out_channels,
                          std::int64_t out_h, std::int64_t out_w);

/// FLOPs of one forward pass on a T x 3 x height x width LR input.
CountReport count_flops(const VesrNet<float>& net, std::int64_t height = 64, std::int64_t width = 64);

std::string format_count_table(const CountReport& report, bool with_flops);
std::string format_count_csv(const CountReport& report);

struct GradSample {
    std::string name;
    std::int64_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
    double tolerance = 0.0;
};

struct GradcheckReport {
    std::vector<GradSample> samples;
    double max_rel_error = 0.0;           // over non-sampling parameters
    double max_rel_error_sampling = 0.0;  // over offset-predicting parameters
    std::vector<std::string> failures;    // parameter paths over tolerance
    bool passed() const { return failures.empty(); }
};

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kSamplingGradTolerance = 1e-3;

/// Tiny default config for gradient checks: C = 8, T = 3, 1 + 2 CARBs.
VesrNetConfig gradcheck_config();

/// Compares tape gradients of the L1 loss against central differences in
/// f64 on `n_samples` parameter scalars (every parameter tensor at least
/// once) on a random 8 x 8 input.
GradcheckReport gradcheck_model(const VesrNetConfig& cfg, std::uint64_t seed, std::int64_t n_samples = 200);

std::string format_gradcheck(const GradcheckReport& report);

}  // namespace vesr
