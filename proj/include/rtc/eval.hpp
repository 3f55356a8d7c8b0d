#pragma once

#include <string>
#include <vector>

#include "rtc/dataset.hpp"
#include "rtc/metrics.hpp"
#include "rtc/trainer.hpp"

// Whole-image evaluation forwards. CAM predictions label a pixel with the
// argmax class wherever the max-normalized refined CAM clears the background
// threshold; mask predictions are the argmax of the upsampled segmentation
// logits. Ground-truth filtering of false-positive classes happens in the
// scorer, so one prediction map serves both CAM modes.

namespace rtc {

struct SamplePrediction {
    std::vector<int> cam_map;   // labels in 0..C
    std::vector<int> mask_map;  // labels in 0..C
};

struct CamSet {
    Tensor raw, refined, comp;  // C x h x w on the view-1 grid
    PseudoMask pmask;
};

inline SamplePrediction predict_sample(const ModelParams& params, const Sample& sample,
                                       const TrainConfig& cfg) {
    const std::size_t height = sample.image.extent(1), width = sample.image.extent(2);
    FeaturePyramid pyr = encode(sample.image, params);
    Tensor raw = raw_cams(pyr.projected, params.classifier);
    Tensor refined = run_crr(pyr, sample.image, raw, params, cfg.crr_config()).refined;
    Tensor cam_up = bilinear_resize(refined, height, width);
    const std::size_t classes = cam_up.extent(0);
    const std::size_t hw = height * width;
    const auto& cv = cam_up.values();

    std::vector<double> class_max(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        double mx = 0.0;
        for (std::size_t i = 0; i < hw; ++i) mx = std::max(mx, cv[c * hw + i]);
        class_max[c] = mx + 1e-8;
    }

    SamplePrediction out;
    out.cam_map.assign(hw, 0);
    for (std::size_t i = 0; i < hw; ++i) {
        double best = -1.0;
        std::size_t best_c = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double s = cv[c * hw + i] / class_max[c];
            if (s > best) {
                best = s;
                best_c = c;
            }
        }
        if (best >= cfg.theta_bg) out.cam_map[i] = static_cast<int>(best_c) + 1;
    }

    Tensor seg_up = bilinear_resize(seg_logits(pyr.f6, params), height, width);
    const auto& sv = seg_up.values();
    out.mask_map.assign(hw, 0);
    for (std::size_t i = 0; i < hw; ++i) {
        double best = sv[i];
        std::size_t best_c = 0;
        for (std::size_t c = 1; c < classes + 1; ++c)
            if (sv[c * hw + i] > best) {
                best = sv[c * hw + i];
                best_c = c;
            }
        out.mask_map[i] = static_cast<int>(best_c);
    }
    return out;
}

// All three CAM tensors for one image plus the derived pseudo-mask; used by
// the export path.
inline CamSet compute_cam_set(const ModelParams& params, const Sample& sample,
                              const std::vector<const Sample*>& batch_context,
                              const TrainConfig& cfg) {
    // ComLoss needs batch-global features; forward the provided context batch
    // deterministically with augmentation disabled (full-size crop).
    Rng rng(0);
    TrainConfig eval_cfg = cfg;
    std::vector<const Sample*> batch = batch_context;
    bool found = false;
    std::size_t index = 0;
    for (std::size_t i = 0; i < batch.size(); ++i)
        if (batch[i] == &sample) {
            found = true;
            index = i;
        }
    if (!found) {
        batch.push_back(&sample);
        index = batch.size() - 1;
    }
    BatchForward fwd = forward_batch(batch, params, eval_cfg, /*warmup=*/false, rng);
    CamSet out;
    ImageState& st = fwd.images[index];
    out.raw = st.raw1;
    out.refined = st.refined1;
    out.comp = cfg.enable_comloss ? st.comp1 : st.refined1;
    out.pmask = st.pmask;
    return out;
}

struct EvalSuite {
    EvalReport cam_filtered, cam_unfiltered, mask;
};

inline EvalSuite evaluate_model(const ModelParams& params, const Dataset& ds,
                                const TrainConfig& cfg) {
    const ModelParams frozen = detached_params(params);
    std::vector<std::vector<int>> cam_preds, mask_preds, gts, labels;
    for (const Sample& s : ds.samples) {
        SamplePrediction pred = predict_sample(frozen, s, cfg);
        cam_preds.push_back(std::move(pred.cam_map));
        mask_preds.push_back(std::move(pred.mask_map));
        gts.emplace_back(s.mask.begin(), s.mask.end());
        labels.push_back(s.label);
    }
    EvalSuite out;
    out.cam_filtered =
        miou_from_maps(cam_preds, gts, ds.classes, EvalMode::cam_filtered, labels);
    out.cam_unfiltered = miou_from_maps(cam_preds, gts, ds.classes, EvalMode::cam_unfiltered);
    out.mask = miou_from_maps(mask_preds, gts, ds.classes, EvalMode::mask);
    return out;
}

}  // namespace rtc
