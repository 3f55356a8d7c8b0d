#pragma once

#include <vector>

#include "rtc/backbone.hpp"
#include "rtc/tensor.hpp"

// Cross-representation refinement: CAM scores are propagated through
// inter-pixel cosine affinities built from a shallow fusion (reduced F4 +
// downsampled image) and a deep fusion (reduced F5 + reduced F6).

namespace rtc {

struct AffinityPair {
    Tensor pre;         // symmetric, unit diagonal, entries in [0,1]
    Tensor normalized;  // rows L1-normalized to sum 1
};

inline Tensor build_shallow(const Tensor& f4, const Tensor& image, const ModelParams& p) {
    Tensor reduced = conv_bias(f4, p.reduce4_k, p.reduce4_b);
    Tensor image_small = bilinear_resize(image, f4.extent(1), f4.extent(2));
    return conv_bias(concat0({reduced, image_small}), p.fuse_shallow_k, p.fuse_shallow_b);
}

inline Tensor build_deep(const Tensor& f5, const Tensor& f6, const ModelParams& p) {
    detail::require(f5.extent(1) == f6.extent(1) && f5.extent(2) == f6.extent(2),
                    "build_deep: spatial size mismatch");
    Tensor r5 = conv_bias(f5, p.reduce5_k, p.reduce5_b);
    Tensor r6 = conv_bias(f6, p.reduce6_k, p.reduce6_b);
    return conv_bias(concat0({r5, r6}), p.fuse_deep_k, p.fuse_deep_b);
}

// ReLU-cosine similarity between all pixel pairs of a d x h x w feature map.
// The diagonal is pinned to 1 (the cosine of a pixel with itself, made robust
// for zero feature vectors) before rows are normalized into a convex
// combination.
inline AffinityPair pixel_affinity(const Tensor& features) {
    detail::require(features.rank() == 3, "pixel_affinity: d x h x w tensor required");
    const std::size_t d = features.extent(0);
    const std::size_t hw = features.extent(1) * features.extent(2);
    Tensor flat = reshape(features, {d, hw});
    Tensor unit = l2_normalize(flat, 0);
    Tensor cosine = relu(matmul(transpose(unit), unit));

    std::vector<double> eye(hw * hw, 0.0), off(hw * hw, 1.0);
    for (std::size_t i = 0; i < hw; ++i) {
        eye[i * hw + i] = 1.0;
        off[i * hw + i] = 0.0;
    }
    AffinityPair out;
    out.pre = add(mul(cosine, Tensor::from({hw, hw}, std::move(off))),
                  Tensor::from({hw, hw}, std::move(eye)));

    Tensor row_sums = reshape(sum_axis(out.pre, 1), {hw, 1});
    Tensor denom = matmul(row_sums, Tensor::full({1, hw}, 1.0));
    out.normalized = divide(out.pre, denom);
    return out;
}

// M(c,i) = sum_j A(i,j) * M~(c,j) for a row-stochastic propagation matrix A.
inline Tensor refine_with(const Tensor& cams, const Tensor& affinity) {
    detail::require(cams.rank() == 3, "refine: C x h x w CAMs required");
    const std::size_t c = cams.extent(0), h = cams.extent(1), w = cams.extent(2);
    detail::require(affinity.rank() == 2 && affinity.extent(0) == h * w &&
                        affinity.extent(1) == h * w,
                    "refine: affinity must be hw x hw");
    Tensor flat = reshape(cams, {c, h * w});
    return reshape(matmul(flat, transpose(affinity)), {c, h, w});
}

inline Tensor refine_cams(const Tensor& cams, const Tensor& shallow_norm,
                          const Tensor& deep_norm) {
    Tensor mean_aff = mul(add(shallow_norm, deep_norm), Tensor::scalar(0.5));
    return refine_with(cams, mean_aff);
}

struct CrrConfig {
    bool enabled = true;
    bool pcm_mode = false;         // one affinity from a single fused representation
    bool detach_affinity = false;  // stop gradient through the propagation matrix
};

struct CrrOutput {
    Tensor refined;
    AffinityPair shallow, deep;  // unset in pcm mode
    AffinityPair fused;          // set in pcm mode only
};

// Single-affinity comparison mode: one matrix from the concatenation of
// reduced F4, reduced F5 and the downsampled image.
inline Tensor build_pcm_features(const FeaturePyramid& pyr, const Tensor& image,
                                 const ModelParams& p) {
    Tensor r4 = conv_bias(pyr.f4, p.reduce4_k, p.reduce4_b);
    Tensor r5 = conv_bias(pyr.f5, p.reduce5_k, p.reduce5_b);
    Tensor image_small = bilinear_resize(image, pyr.f4.extent(1), pyr.f4.extent(2));
    return concat0({r4, r5, image_small});
}

inline CrrOutput run_crr(const FeaturePyramid& pyr, const Tensor& image, const Tensor& cams,
                         const ModelParams& p, const CrrConfig& cfg) {
    CrrOutput out;
    if (!cfg.enabled) {
        out.refined = cams;
        return out;
    }
    auto maybe_detach = [&](const Tensor& t) { return cfg.detach_affinity ? detach(t) : t; };
    if (cfg.pcm_mode) {
        out.fused = pixel_affinity(build_pcm_features(pyr, image, p));
        out.refined = refine_with(cams, maybe_detach(out.fused.normalized));
        return out;
    }
    out.shallow = pixel_affinity(build_shallow(pyr.f4, image, p));
    out.deep = pixel_affinity(build_deep(pyr.f5, pyr.f6, p));
    out.refined = refine_cams(cams, maybe_detach(out.shallow.normalized),
                              maybe_detach(out.deep.normalized));
    return out;
}

}  // namespace rtc
