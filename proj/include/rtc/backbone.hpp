#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rtc/random.hpp"
#include "rtc/tensor.hpp"

// Shared-weight toy encoder. Three stem stages bring the input to 1/8
// resolution (bilinear half-downsample + stride-1 3x3 conv + ReLU each; the
// resize replaces strided convolution, whose odd-kernel output constraint
// cannot halve even extents exactly). Two stride-1 blocks then produce the
// deeper pyramid levels, all at the same h x w.

namespace rtc {

struct ModelParams {
    std::size_t classes = 4;

    // stem, pyramid blocks
    Tensor stem1_k, stem1_b;    // 16 x 3 x 3 x 3
    Tensor stem2_k, stem2_b;    // 24 x 16 x 3 x 3
    Tensor stem3_k, stem3_b;    // 32 x 24 x 3 x 3
    Tensor block5_k, block5_b;  // 48 x 32 x 3 x 3
    Tensor block6_k, block6_b;  // 48 x 48 x 3 x 3

    // channel reductions feeding the refinement features
    Tensor reduce4_k, reduce4_b;  // 16 x 32 x 1 x 1
    Tensor reduce5_k, reduce5_b;  // 32 x 48 x 1 x 1
    Tensor reduce6_k, reduce6_b;  // 32 x 48 x 1 x 1

    // fusion of [reduced F4, downsampled image] and [reduced F5, reduced F6]
    Tensor fuse_shallow_k, fuse_shallow_b;  // 16 x 19 x 1 x 1
    Tensor fuse_deep_k, fuse_deep_b;        // 32 x 64 x 1 x 1

    // projection head and classifier
    Tensor proj_k, proj_b;  // 32 x 48 x 1 x 1
    Tensor classifier;      // C x 32

    // segmentation head (C+1 logits incl. background)
    Tensor seg_k, seg_b;

    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        return {
            {"stem1.kernel", stem1_k},       {"stem1.bias", stem1_b},
            {"stem2.kernel", stem2_k},       {"stem2.bias", stem2_b},
            {"stem3.kernel", stem3_k},       {"stem3.bias", stem3_b},
            {"block5.kernel", block5_k},     {"block5.bias", block5_b},
            {"block6.kernel", block6_k},     {"block6.bias", block6_b},
            {"reduce4.kernel", reduce4_k},   {"reduce4.bias", reduce4_b},
            {"reduce5.kernel", reduce5_k},   {"reduce5.bias", reduce5_b},
            {"reduce6.kernel", reduce6_k},   {"reduce6.bias", reduce6_b},
            {"fuse_shallow.kernel", fuse_shallow_k}, {"fuse_shallow.bias", fuse_shallow_b},
            {"fuse_deep.kernel", fuse_deep_k},       {"fuse_deep.bias", fuse_deep_b},
            {"proj.kernel", proj_k},         {"proj.bias", proj_b},
            {"classifier.weight", classifier},
            {"seg.kernel", seg_k},           {"seg.bias", seg_b},
        };
    }

    std::vector<std::pair<std::string, Tensor>> seg_head_parameters() const {
        return {{"seg.kernel", seg_k}, {"seg.bias", seg_b}};
    }
};

struct FeaturePyramid {
    Tensor f4, f5, f6;  // shared h x w at 1/8 input resolution
    Tensor projected;   // X, D x h x w, nonnegative
};

namespace channels {
inline constexpr std::size_t c1 = 16, c2 = 24, c3 = 32, c4 = 48, c5 = 48;
inline constexpr std::size_t r4 = 16, r5 = 32, r6 = 32;
inline constexpr std::size_t proj_dim = 32;
inline constexpr std::size_t shallow_dim = 16, deep_dim = 32;
}  // namespace channels

namespace detail {

inline Tensor he_kernel(std::size_t co, std::size_t ci, std::size_t k, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(ci * k * k));
    std::vector<double> vals(co * ci * k * k);
    for (auto& v : vals) v = rng.normal() * stddev;
    return Tensor::from({co, ci, k, k}, std::move(vals), true);
}

inline Tensor he_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(cols));
    std::vector<double> vals(rows * cols);
    for (auto& v : vals) v = rng.normal() * stddev;
    return Tensor::from({rows, cols}, std::move(vals), true);
}

// Overwrites leading filters with fixed center-tap combinations of input
// channels. Seeding the stack with an identity color path is the desk-scale
// stand-in for pretrained features: it gives the classifier and the affinity
// features a usable per-pixel signal inside the short training schedule, and
// every tap remains trainable.
using FilterTaps = std::vector<std::pair<std::size_t, double>>;  // (src channel, gain)

inline void seed_filter_taps(Tensor& kernel, const std::vector<FilterTaps>& filters) {
    auto& v = kernel.values_mut();
    const std::size_t ci = kernel.extent(1), k = kernel.extent(2);
    for (std::size_t f = 0; f < filters.size(); ++f) {
        for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t i = 0; i < k * k; ++i) v[(f * ci + c) * k * k + i] = 0.0;
        for (const auto& [src, gain] : filters[f])
            v[(f * ci + src) * k * k + (k / 2) * k + (k / 2)] = gain;
    }
}

inline std::vector<FilterTaps> identity_taps(std::size_t count, std::size_t offset = 0,
                                             double gain = 1.0) {
    std::vector<FilterTaps> out;
    for (std::size_t f = 0; f < count; ++f) out.push_back({{offset + f, gain}});
    return out;
}

}  // namespace detail

inline ModelParams init_params(std::size_t classes, std::uint64_t seed) {
    using namespace channels;
    ModelParams p;
    p.classes = classes;
    std::uint64_t stream = 0;
    auto next_rng = [&] { return Rng(derive_seed(seed, stream++)); };
    auto conv = [&](std::size_t co, std::size_t ci, std::size_t k, Tensor& kt, Tensor& bt) {
        Rng rng = next_rng();
        kt = detail::he_kernel(co, ci, k, rng);
        bt = Tensor::zeros({co}, true);
    };
    conv(c1, 3, 3, p.stem1_k, p.stem1_b);
    conv(c2, c1, 3, p.stem2_k, p.stem2_b);
    conv(c3, c2, 3, p.stem3_k, p.stem3_b);
    conv(c4, c3, 3, p.block5_k, p.block5_b);
    conv(c5, c4, 3, p.block6_k, p.block6_b);
    // rectified signed color taps in the first stage, carried up the stack
    detail::seed_filter_taps(
        p.stem1_k, {{{0, 2.0}}, {{1, 2.0}}, {{2, 2.0}}, {{0, -2.0}}, {{1, -2.0}}, {{2, -2.0}}});
    const auto carry = detail::identity_taps(6);
    detail::seed_filter_taps(p.stem2_k, carry);
    detail::seed_filter_taps(p.stem3_k, carry);
    detail::seed_filter_taps(p.block5_k, carry);
    detail::seed_filter_taps(p.block6_k, carry);
    conv(r4, c3, 1, p.reduce4_k, p.reduce4_b);
    conv(r5, c4, 1, p.reduce5_k, p.reduce5_b);
    conv(r6, c5, 1, p.reduce6_k, p.reduce6_b);
    conv(shallow_dim, r4 + 3, 1, p.fuse_shallow_k, p.fuse_shallow_b);
    conv(deep_dim, r5 + r6, 1, p.fuse_deep_k, p.fuse_deep_b);
    // carry the color planes into the refinement features too: the fusions
    // recombine rectified pairs into signed contrasts (x+ - x- = x), so the
    // initial affinities measure color similarity rather than random mixing
    detail::seed_filter_taps(p.reduce4_k, carry);
    detail::seed_filter_taps(p.reduce5_k, carry);
    detail::seed_filter_taps(p.reduce6_k, carry);
    auto signed_contrasts = [](std::size_t base) {
        return std::vector<detail::FilterTaps>{{{base + 0, 1.0}, {base + 3, -1.0}},
                                               {{base + 1, 1.0}, {base + 4, -1.0}},
                                               {{base + 2, 1.0}, {base + 5, -1.0}}};
    };
    {
        auto taps = signed_contrasts(0);  // from reduced F4
        for (std::size_t c = 0; c < 3; ++c) taps.push_back({{r4 + c, 1.0}});  // raw image
        detail::seed_filter_taps(p.fuse_shallow_k, taps);
    }
    {
        auto taps = signed_contrasts(0);  // from reduced F5
        auto from_r6 = signed_contrasts(r5);
        taps.insert(taps.end(), from_r6.begin(), from_r6.end());
        detail::seed_filter_taps(p.fuse_deep_k, taps);
    }
    conv(proj_dim, c5, 1, p.proj_k, p.proj_b);
    detail::seed_filter_taps(p.proj_k, carry);  // color planes reach X directly
    {
        Rng rng = next_rng();
        p.classifier = detail::he_matrix(classes, proj_dim, rng);
    }
    conv(classes + 1, c5, 1, p.seg_k, p.seg_b);
    return p;
}

inline Tensor conv_bias(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                        std::size_t stride = 1, std::size_t pad = 0) {
    return add_channel_bias(conv2d(x, kernel, stride, pad), bias);
}

inline FeaturePyramid encode(const Tensor& image, const ModelParams& p) {
    detail::require(image.rank() == 3 && image.extent(0) == 3,
                    "encode: image must be 3 x H x W");
    const std::size_t h = image.extent(1), w = image.extent(2);
    detail::require(h % 8 == 0 && w % 8 == 0, "encode: extents must be divisible by 8");

    auto stage = [&](const Tensor& x, const Tensor& k, const Tensor& b) {
        Tensor half = bilinear_resize(x, x.extent(1) / 2, x.extent(2) / 2);
        return relu(conv_bias(half, k, b, 1, 1));
    };
    FeaturePyramid out;
    Tensor s1 = stage(image, p.stem1_k, p.stem1_b);
    Tensor s2 = stage(s1, p.stem2_k, p.stem2_b);
    out.f4 = stage(s2, p.stem3_k, p.stem3_b);
    out.f5 = relu(conv_bias(out.f4, p.block5_k, p.block5_b, 1, 1));
    out.f6 = relu(conv_bias(out.f5, p.block6_k, p.block6_b, 1, 1));
    out.projected = relu(conv_bias(out.f6, p.proj_k, p.proj_b));
    return out;
}

// logits = w . GAP(X)
inline Tensor classify(const Tensor& projected, const Tensor& classifier) {
    Tensor pooled = reshape(global_avg_pool(projected), {projected.extent(0), 1});
    return reshape(matmul(classifier, pooled), {classifier.extent(0)});
}

// Per-pixel class evidence: ReLU of the classifier applied at every location.
inline Tensor raw_cams(const Tensor& projected, const Tensor& classifier) {
    const std::size_t d = projected.extent(0);
    const std::size_t h = projected.extent(1), w = projected.extent(2);
    Tensor flat = reshape(projected, {d, h * w});
    return reshape(relu(matmul(classifier, flat)), {classifier.extent(0), h, w});
}

// Same projection without the ReLU; pooling this recovers the logits exactly.
inline Tensor raw_cams_linear(const Tensor& projected, const Tensor& classifier) {
    const std::size_t d = projected.extent(0);
    const std::size_t h = projected.extent(1), w = projected.extent(2);
    Tensor flat = reshape(projected, {d, h * w});
    return reshape(matmul(classifier, flat), {classifier.extent(0), h, w});
}

}  // namespace rtc
