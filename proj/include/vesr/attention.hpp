#pragma once

#include <array>
#include <cstdint>

#include "vesr/nn.hpp"

namespace vesr {

/// Default guard on the full non-local relation matrix: 2^26 entries.
inline constexpr std::uint64_t kDefaultRelationCap = std::uint64_t{1} << 26;

/// Rows of softmax(a^T b): entry (i, j) is how much position i draws from
/// position j. `a`, `b` are d x N (descriptor x position).
template <typename T>
Tensor<T> relation_matrix(const Tensor<T>& a, const Tensor<T>& b);

/// Attention over N positions with d-dimensional descriptors, all d x N.
/// Returns E = d * M^T together with M.
template <typename T>
struct AttentionResult {
    Tensor<T> output;
    Tensor<T> relation;
};

template <typename T>
AttentionResult<T> attend(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& d);

/// Full non-local block over all T*H*W positions of a T x C x H x W feature.
template <typename T>
struct NonLocalBlock {
    Conv2dLayer<T> conv_a, conv_b, conv_d;
    std::uint64_t relation_cap = kDefaultRelationCap;

    static NonLocalBlock create(std::int64_t channels, Rng& rng);

    /// F + E. Throws ValidationError when (T*H*W)^2 exceeds relation_cap.
    Tensor<T> forward(const Tensor<T>& f, Tape<T>* tape = nullptr, Tensor<T>* relation_out = nullptr) const;

    std::int64_t param_count() const;
    void collect(const std::string& prefix, ParamList<T>& out);
};

/// Spatial (HW x HW), channel (C x C) and temporal (T x T) relation matrices.
template <typename T>
struct SeparateRelations {
    Tensor<T> spatial, channel, temporal;
};

/// Factorized non-local fusion. Branch 0 attends over spatial positions,
/// branch 1 over channels and branch 2 over frames; all 1x1 convs are
/// applied per frame with shared weights.
template <typename T>
struct SeparateNonLocalBlock {
    struct Branch {
        Conv2dLayer<T> conv_a, conv_b, conv_d;
    };
    std::array<Branch, 3> branches;

    static SeparateNonLocalBlock create(std::int64_t channels, Rng& rng);

    /// F + E1 + E2 + E3, same shape as F.
    Tensor<T> forward(const Tensor<T>& f, Tape<T>* tape = nullptr, SeparateRelations<T>* relations = nullptr) const;

    std::int64_t param_count() const;
    void collect(const std::string& prefix, ParamList<T>& out);
};

struct AttentionFootprint {
    std::uint64_t full_entries;
    std::uint64_t separate_entries;
    double ratio;
};

/// Relation-matrix sizes of the full vs separated attention. Throws
/// ValidationError on non-positive dims or 64-bit overflow.
AttentionFootprint attention_memory_footprint(std::int64_t frames, std::int64_t height, std::int64_t width,
                                              std::int64_t channels);

}  // namespace vesr
