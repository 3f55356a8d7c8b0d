#pragma once

#include <stdexcept>
#include <vector>

#include "rtc/tensor.hpp"

// Cross-transform regularization: class prototypes estimated from one view's
// CAM weights and the other view's projected features, then pixel-to-prototype
// contrast applied intra- and cross-view. All maps live on the first view's
// grid; the second view's features and CAMs are bilinearly aligned first.

namespace rtc {

struct CtrConfig {
    std::size_t top_k = 8;
    double tau = 0.1;
    double conf_threshold = 0.5;
    bool str_mode = false;          // prototypes from self-view features instead
    bool cross_labels_self = false; // cross terms reuse the current view's labels
};

struct AlignedFeatures {
    Tensor x1, x2;  // D x hw, per-pixel (column) unit L2 norm, view-1 grid
    std::size_t height = 0, width = 0;
};

// Resizes the second view's projection onto the first view's grid and
// L2-normalizes both per pixel.
inline AlignedFeatures align_views(const Tensor& x1, const Tensor& x2) {
    detail::require(x1.rank() == 3 && x2.rank() == 3, "align_views: D x h x w tensors required");
    detail::require(x1.extent(0) == x2.extent(0), "align_views: channel mismatch");
    const std::size_t d = x1.extent(0), h = x1.extent(1), w = x1.extent(2);
    AlignedFeatures out;
    out.height = h;
    out.width = w;
    Tensor x2_resized = bilinear_resize(x2, h, w);
    out.x1 = l2_normalize(reshape(x1, {d, h * w}), 0);
    out.x2 = l2_normalize(reshape(x2_resized, {d, h * w}), 0);
    return out;
}

struct PixelAssignment {
    std::vector<int> labels;        // dataset class id per pixel (argmax over present)
    std::vector<double> confidence; // max over present classes of max-normalized CAM
    std::vector<bool> participate;  // confidence >= threshold
};

// Hard pixel labels from refined CAMs over the classes present in the
// image-level label. Pure value computation; selection is not differentiated.
inline PixelAssignment assign_pixels(const Tensor& refined, const std::vector<int>& present,
                                     double conf_threshold, double eps = 1e-8) {
    detail::require(refined.rank() == 3, "assign_pixels: C x h x w CAMs required");
    detail::require(!present.empty(), "assign_pixels: no present classes");
    const std::size_t hw = refined.extent(1) * refined.extent(2);
    const auto& mv = refined.values();

    std::vector<double> class_max(present.size(), 0.0);
    for (std::size_t p = 0; p < present.size(); ++p) {
        const std::size_t c = static_cast<std::size_t>(present[p]);
        double mx = 0.0;
        for (std::size_t i = 0; i < hw; ++i) mx = std::max(mx, mv[c * hw + i]);
        class_max[p] = mx + eps;
    }

    PixelAssignment out;
    out.labels.resize(hw);
    out.confidence.resize(hw);
    out.participate.resize(hw);
    TraceCollector* tc = trace_collector();
    for (std::size_t i = 0; i < hw; ++i) {
        std::size_t best = 0;
        double best_score = mv[static_cast<std::size_t>(present[0]) * hw + i] / class_max[0];
        for (std::size_t p = 1; p < present.size(); ++p) {
            const double s = mv[static_cast<std::size_t>(present[p]) * hw + i] / class_max[p];
            if (s > best_score) {
                best_score = s;
                best = p;
            }
        }
        out.labels[i] = present[best];
        out.confidence[i] = best_score;
        out.participate[i] = best_score >= conf_threshold;
        if (tc) {
            tc->feed(static_cast<std::uint64_t>(out.labels[i]));
            tc->feed_bool(out.participate[i]);
        }
    }
    return out;
}

struct PrototypeBank {
    Tensor prototypes;                               // C_present x D, unit rows
    std::vector<int> class_ids;                      // row -> dataset class id
    std::vector<std::vector<std::size_t>> topk_sets; // row -> source pixel indices
    std::size_t k = 0;
    double tau = 0.1;

    std::size_t row_of(int class_id) const {
        for (std::size_t r = 0; r < class_ids.size(); ++r)
            if (class_ids[r] == class_id) return r;
        throw std::logic_error("prototype bank: class id not present");
    }
};

// One prototype per present class: the CAM-weighted average of the paired
// view's features at the top-K pixels of this view's CAM, L2-normalized.
// Gradients flow through the CAM weights and the gathered features; the top-K
// index selection itself is discrete.
inline PrototypeBank cross_prototypes(const Tensor& cams_self, const Tensor& features_other,
                                      const std::vector<int>& present, std::size_t k,
                                      double tau) {
    detail::require(cams_self.rank() == 3, "cross_prototypes: C x h x w CAMs required");
    detail::require(features_other.rank() == 2, "cross_prototypes: D x hw features required");
    detail::require(k >= 1, "cross_prototypes: k must be >= 1");
    const std::size_t c_all = cams_self.extent(0);
    const std::size_t hw = cams_self.extent(1) * cams_self.extent(2);
    detail::require(features_other.extent(1) == hw, "cross_prototypes: grid mismatch");

    PrototypeBank bank;
    bank.k = std::min(k, hw);
    bank.tau = tau;
    Tensor cams_flat = reshape(cams_self, {c_all, hw});
    std::vector<Tensor> rows;
    for (int cls : present) {
        detail::require(cls >= 0 && static_cast<std::size_t>(cls) < c_all,
                        "cross_prototypes: class id out of range");
        Tensor map = reshape(slice0(cams_flat, static_cast<std::size_t>(cls),
                                    static_cast<std::size_t>(cls) + 1),
                             {hw});
        const std::vector<std::size_t> idx = topk_indices(map, bank.k);
        Tensor weights = gather(map, idx);
        Tensor gathered = gather_cols(features_other, idx);  // D x K
        double wsum = 0.0;
        for (double wv : weights.values()) wsum += wv;
        Tensor proto_col;
        if (wsum == 0.0) {  // all top-K weights zero: plain mean of the features
            proto_col = matmul(gathered, Tensor::full({bank.k, 1}, 1.0 / bank.k));
        } else {
            Tensor weighted = matmul(gathered, reshape(weights, {bank.k, 1}));
            proto_col = divide(weighted, sum_all(weights));
        }
        rows.push_back(transpose(proto_col));  // 1 x D
        bank.class_ids.push_back(cls);
        bank.topk_sets.push_back(idx);
    }
    detail::require(!rows.empty(), "cross_prototypes: empty class set");
    bank.prototypes = l2_normalize(concat0(rows), 1);
    return bank;
}

// Mean over participating pixels of -log softmax of the own-prototype cosine
// similarity at temperature tau. Zero when nothing participates.
inline Tensor contrast_loss(const Tensor& features, const PixelAssignment& assignment,
                            const PrototypeBank& bank) {
    detail::require(features.rank() == 2, "contrast_loss: D x hw features required");
    const std::size_t hw = features.extent(1);
    detail::require(assignment.labels.size() == hw, "contrast_loss: assignment size mismatch");
    detail::require(bank.prototypes.defined() && !bank.class_ids.empty(),
                    "contrast_loss: empty prototype bank");

    const std::size_t rows = bank.class_ids.size();
    std::vector<double> pick(rows * hw, 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < hw; ++i) {
        if (!assignment.participate[i]) continue;
        pick[bank.row_of(assignment.labels[i]) * hw + i] = 1.0;
        ++count;
    }
    if (count == 0) return Tensor::scalar(0.0);

    Tensor sims = matmul(bank.prototypes, features);           // rows x hw
    Tensor scores = log_softmax(divide(sims, Tensor::scalar(bank.tau)), 0);
    Tensor picked = mul(scores, Tensor::from({rows, hw}, std::move(pick)));
    return divide(mul(sum_all(picked), Tensor::scalar(-1.0)),
                  Tensor::scalar(static_cast<double>(count)));
}

struct CtrViewState {
    Tensor features;  // D x hw unit columns, common grid
    Tensor refined;   // C x h x w CAMs, common grid
    PixelAssignment assignment;
    PrototypeBank bank;
};

struct CtrOutput {
    CtrViewState view1, view2;
    Tensor loss;  // intra1 + intra2 + cross1 + cross2
};

// Full per-image CTR computation on the common grid. refined2 must already be
// aligned to view 1's grid.
inline CtrOutput ctr_total(const Tensor& refined1, const Tensor& refined2_aligned,
                           const AlignedFeatures& aligned, const std::vector<int>& present,
                           const CtrConfig& cfg) {
    CtrOutput out;
    out.view1.features = aligned.x1;
    out.view2.features = aligned.x2;
    out.view1.refined = refined1;
    out.view2.refined = refined2_aligned;
    out.view1.assignment = assign_pixels(refined1, present, cfg.conf_threshold);
    out.view2.assignment = assign_pixels(refined2_aligned, present, cfg.conf_threshold);

    const Tensor& proto_src1 = cfg.str_mode ? aligned.x1 : aligned.x2;
    const Tensor& proto_src2 = cfg.str_mode ? aligned.x2 : aligned.x1;
    out.view1.bank = cross_prototypes(refined1, proto_src1, present, cfg.top_k, cfg.tau);
    out.view2.bank = cross_prototypes(refined2_aligned, proto_src2, present, cfg.top_k, cfg.tau);

    Tensor intra1 = contrast_loss(aligned.x1, out.view1.assignment, out.view1.bank);
    Tensor intra2 = contrast_loss(aligned.x2, out.view2.assignment, out.view2.bank);
    const PixelAssignment& labels_for_1 =
        cfg.cross_labels_self ? out.view1.assignment : out.view2.assignment;
    const PixelAssignment& labels_for_2 =
        cfg.cross_labels_self ? out.view2.assignment : out.view1.assignment;
    Tensor cross1 = contrast_loss(aligned.x1, labels_for_1, out.view2.bank);
    Tensor cross2 = contrast_loss(aligned.x2, labels_for_2, out.view1.bank);
    out.loss = add(add(intra1, intra2), add(cross1, cross2));
    return out;
}

}  // namespace rtc
