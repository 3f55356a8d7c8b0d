#pragma once

#include <vector>

#include "rtc/tensor.hpp"

// Compensatory CAM feedback. Anchors are the top-K pixels of a class map;
// their paired-view features query the whole batch's features for globally
// similar regions, and the resulting affinity mass is added back onto the
// refined CAMs. An L1 loss then pulls the raw CAMs toward these enhanced maps.

namespace rtc {

struct BatchFeatureBank {
    Tensor features;                 // (n*hw) x D, unit rows
    std::size_t images = 0;
    std::size_t pixels_per_image = 0;
};

// Stacks per-image D x hw feature matrices (unit columns) into one bank.
inline BatchFeatureBank build_feature_bank(const std::vector<Tensor>& per_image) {
    detail::require(!per_image.empty(), "feature bank: no images");
    std::vector<Tensor> rows;
    rows.reserve(per_image.size());
    for (const Tensor& f : per_image) {
        detail::require(f.rank() == 2, "feature bank: D x hw features required");
        rows.push_back(transpose(f));  // hw x D
    }
    BatchFeatureBank bank;
    bank.images = per_image.size();
    bank.pixels_per_image = per_image[0].extent(1);
    bank.features = concat0(rows);
    return bank;
}

// Softmax affinity of each anchor against every pixel in the batch. Rows sum
// to one.
inline Tensor global_affinity(const BatchFeatureBank& bank, const Tensor& anchors) {
    detail::require(anchors.rank() == 2, "global_affinity: K x D anchors required");
    detail::require(anchors.extent(1) == bank.features.extent(1),
                    "global_affinity: feature dimension mismatch");
    Tensor logits = matmul(anchors, transpose(bank.features));  // K x nhw
    return softmax(logits, 1);
}

// One class of one image: adds the anchor-weighted affinity mass (restricted
// to this image's slice of the batch axis) onto the refined map.
inline Tensor compensate_class(const Tensor& refined_flat, const Tensor& affinity_rows,
                               const Tensor& anchor_weights, std::size_t image_index,
                               std::size_t pixels_per_image) {
    detail::require(refined_flat.rank() == 1 && refined_flat.extent(0) == pixels_per_image,
                    "compensate: refined map size mismatch");
    const std::size_t k = anchor_weights.extent(0);
    detail::require(affinity_rows.rank() == 2 && affinity_rows.extent(0) == k,
                    "compensate: affinity/anchor count mismatch");
    Tensor combined = matmul(reshape(anchor_weights, {1, k}), affinity_rows);  // 1 x nhw
    Tensor scaled = divide(combined, Tensor::scalar(static_cast<double>(k)));
    Tensor slice = slice0(reshape(scaled, {affinity_rows.extent(1)}),
                          image_index * pixels_per_image,
                          (image_index + 1) * pixels_per_image);
    return add(slice, refined_flat);
}

struct ComConfig {
    std::size_t top_k = 8;
    bool detach_target = true;  // enhanced maps act as fixed L1 targets
};

struct ComViewInputs {
    // Everything on the common grid, one entry per batch image.
    std::vector<Tensor> refined;                 // C x h x w
    std::vector<Tensor> raw;                     // C x h x w
    std::vector<Tensor> other_features;          // D x hw unit columns
    std::vector<std::vector<int>> present;       // per-image present class ids
};

struct ComViewOutput {
    Tensor loss;                      // mean L1 over present classes and pixels
    std::vector<Tensor> comp_cams;    // per image C x h x w (absent classes keep M)
};

inline ComViewOutput comloss_view(const ComViewInputs& in, const ComConfig& cfg) {
    const std::size_t n = in.refined.size();
    detail::require(n > 0 && in.raw.size() == n && in.other_features.size() == n &&
                        in.present.size() == n,
                    "comloss: inconsistent batch inputs");
    BatchFeatureBank bank = build_feature_bank(in.other_features);
    const std::size_t hw = bank.pixels_per_image;

    ComViewOutput out;
    Tensor total = Tensor::scalar(0.0);
    std::size_t scored = 0;
    for (std::size_t b = 0; b < n; ++b) {
        const std::size_t c_all = in.refined[b].extent(0);
        const std::size_t h = in.refined[b].extent(1), w = in.refined[b].extent(2);
        Tensor refined_flat = reshape(in.refined[b], {c_all, hw});
        Tensor raw_flat = reshape(in.raw[b], {c_all, hw});
        std::vector<Tensor> comp_rows;
        comp_rows.reserve(c_all);
        std::vector<bool> is_present(c_all, false);
        for (int cls : in.present[b]) is_present[static_cast<std::size_t>(cls)] = true;

        for (std::size_t cls = 0; cls < c_all; ++cls) {
            Tensor map = reshape(slice0(refined_flat, cls, cls + 1), {hw});
            if (!is_present[cls]) {  // absent classes carry no anchors and are skipped
                comp_rows.push_back(reshape(map, {1, hw}));
                continue;
            }
            const std::size_t k = std::min(cfg.top_k, hw);
            const std::vector<std::size_t> anchors_idx = topk_indices(map, k);
            Tensor anchor_weights = gather(map, anchors_idx);
            Tensor anchor_feats = transpose(gather_cols(in.other_features[b], anchors_idx));
            Tensor affinity = global_affinity(bank, anchor_feats);
            Tensor enhanced = compensate_class(map, affinity, anchor_weights, b, hw);
            comp_rows.push_back(reshape(enhanced, {1, hw}));

            Tensor target = cfg.detach_target ? detach(enhanced) : enhanced;
            Tensor raw_map = reshape(slice0(raw_flat, cls, cls + 1), {hw});
            total = add(total, sum_all(abs(sub(target, raw_map))));
            scored += hw;
        }
        out.comp_cams.push_back(reshape(concat0(comp_rows), {c_all, h, w}));
    }
    out.loss = scored == 0 ? Tensor::scalar(0.0)
                           : divide(total, Tensor::scalar(static_cast<double>(scored)));
    return out;
}

}  // namespace rtc
