#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rtc/tensor.hpp"

// Confusion-matrix segmentation scoring. Class 0 is background; classes absent
// from both prediction and ground truth across a split are excluded from the
// mean.

namespace rtc {

enum class EvalMode { cam_filtered, cam_unfiltered, mask };

inline const char* eval_mode_name(EvalMode m) {
    switch (m) {
        case EvalMode::cam_filtered: return "cam_filtered";
        case EvalMode::cam_unfiltered: return "cam_unfiltered";
        default: return "mask";
    }
}

struct EvalReport {
    std::vector<double> iou;  // length C+1 incl. background; -1 marks undefined
    double miou = 0.0;
    EvalMode mode = EvalMode::mask;
};

// pred/gt: one label map per image, values in 0..C. In cam_filtered mode,
// predicted foreground classes missing from the image-level label are remapped
// to background before scoring.
inline EvalReport miou_from_maps(const std::vector<std::vector<int>>& pred,
                                 const std::vector<std::vector<int>>& gt,
                                 std::size_t num_foreground, EvalMode mode,
                                 const std::vector<std::vector<int>>& image_labels = {}) {
    detail::require(pred.size() == gt.size(), "miou: prediction/ground-truth count mismatch");
    if (mode == EvalMode::cam_filtered)
        detail::require(image_labels.size() == pred.size(),
                        "miou: cam_filtered mode requires image labels");
    const std::size_t classes = num_foreground + 1;
    std::vector<std::size_t> confusion(classes * classes, 0);
    for (std::size_t n = 0; n < pred.size(); ++n) {
        detail::require(pred[n].size() == gt[n].size(), "miou: map size mismatch");
        for (std::size_t i = 0; i < pred[n].size(); ++i) {
            int p = pred[n][i];
            const int g = gt[n][i];
            detail::require(p >= 0 && static_cast<std::size_t>(p) < classes &&
                                g >= 0 && static_cast<std::size_t>(g) < classes,
                            "miou: label out of range");
            if (mode == EvalMode::cam_filtered && p > 0 &&
                !image_labels[n][static_cast<std::size_t>(p - 1)])
                p = 0;
            confusion[static_cast<std::size_t>(g) * classes + static_cast<std::size_t>(p)]++;
        }
    }

    EvalReport report;
    report.mode = mode;
    report.iou.assign(classes, -1.0);
    double total = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t tp = confusion[c * classes + c];
        std::size_t fp = 0, fn = 0;
        for (std::size_t o = 0; o < classes; ++o) {
            if (o == c) continue;
            fp += confusion[o * classes + c];
            fn += confusion[c * classes + o];
        }
        if (tp + fp + fn == 0) continue;  // absent everywhere: undefined
        report.iou[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        total += report.iou[c];
        ++defined;
    }
    report.miou = defined > 0 ? total / static_cast<double>(defined) : 0.0;
    return report;
}

// CSV metric table: header row, one row per class, one mIoU row.
inline std::string eval_report_csv(const EvalReport& report,
                                   const std::vector<std::string>& class_names) {
    std::string out = "class,iou\n";
    char buf[64];
    for (std::size_t c = 0; c < report.iou.size(); ++c) {
        const std::string name = c == 0 ? "background" : class_names.at(c - 1);
        if (report.iou[c] < 0.0) {
            out += name + ",undefined\n";
        } else {
            std::snprintf(buf, sizeof(buf), "%.6f", report.iou[c]);
            out += name + "," + buf + "\n";
        }
    }
    std::snprintf(buf, sizeof(buf), "%.6f", report.miou);
    out += std::string("mIoU,") + buf + "\n";
    return out;
}

}  // namespace rtc
