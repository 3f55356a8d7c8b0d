#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "rtc/eval.hpp"
#include "rtc/trainer.hpp"

namespace rtc {

struct EpochRow {
    std::size_t epoch = 0;  // 1-based
    StepLosses mean_losses;
    double cam_miou = 0.0;   // cam_filtered on the validation split
    double mask_miou = 0.0;  // segmentation branch on the validation split
};

struct TrainResult {
    ModelParams params;       // final
    ModelParams best_params;  // highest validation CAM mIoU
    std::vector<EpochRow> history;
    std::size_t best_epoch = 0;
    double best_cam_miou = 0.0;
};

inline std::string metrics_csv_header() {
    return "epoch,loss_cls,loss_er,loss_ecr,loss_contrast,loss_com,loss_seg,loss_total,"
           "cam_miou,mask_miou\n";
}

inline std::string metrics_csv_row(const EpochRow& row) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  row.epoch, row.mean_losses.cls, row.mean_losses.er, row.mean_losses.ecr,
                  row.mean_losses.contrast, row.mean_losses.com, row.mean_losses.seg,
                  row.mean_losses.total, row.cam_miou, row.mask_miou);
    return buf;
}

inline std::string metrics_csv(const std::vector<EpochRow>& history) {
    std::string out = metrics_csv_header();
    for (const EpochRow& row : history) out += metrics_csv_row(row);
    return out;
}

// Full deterministic training run. An optional per-step callback sees every
// StepLosses (used by invariant checks).
inline TrainResult train_model(
    const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
    const std::function<void(std::size_t, const StepLosses&, const ModelParams&)>& on_step = {}) {
    cfg.validate();
    detail::require(!train_set.samples.empty(), "train: empty training set");

    TrainResult result;
    result.params = init_params(train_set.classes, cfg.seed);
    SgdOptimizer opt(result.params.named_parameters(), cfg.momentum, cfg.weight_decay);
    Rng shuffle_rng(derive_seed(cfg.seed, 100));
    Rng view_rng(derive_seed(cfg.seed, 101));

    const std::size_t n = train_set.samples.size();
    const std::size_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    const std::size_t max_iter = steps_per_epoch * cfg.epochs_total;
    std::size_t iter = 0;

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs_total; ++epoch) {
        const bool warmup = epoch < cfg.epochs_warmup;
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        StepLosses sums;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch) {
            std::vector<const Sample*> batch;
            for (std::size_t i = start; i < std::min(start + cfg.batch, n); ++i)
                batch.push_back(&train_set.samples[order[i]]);
            const double lr = poly_lr(iter, max_iter, cfg.lr0, cfg.poly_power);
            StepLosses losses = train_step(batch, result.params, opt, cfg, warmup, lr, view_rng);
            if (on_step) on_step(iter, losses, result.params);
            sums.cls += losses.cls;
            sums.er += losses.er;
            sums.ecr += losses.ecr;
            sums.contrast += losses.contrast;
            sums.com += losses.com;
            sums.seg += losses.seg;
            sums.total += losses.total;
            ++iter;
            ++steps;
        }

        EpochRow row;
        row.epoch = epoch + 1;
        const double inv = 1.0 / static_cast<double>(steps);
        row.mean_losses.cls = sums.cls * inv;
        row.mean_losses.er = sums.er * inv;
        row.mean_losses.ecr = sums.ecr * inv;
        row.mean_losses.contrast = sums.contrast * inv;
        row.mean_losses.com = sums.com * inv;
        row.mean_losses.seg = sums.seg * inv;
        row.mean_losses.total = sums.total * inv;
        if (!val_set.samples.empty()) {
            EvalSuite suite = evaluate_model(result.params, val_set, cfg);
            row.cam_miou = suite.cam_filtered.miou;
            row.mask_miou = suite.mask.miou;
        }
        result.history.push_back(row);

        if (result.best_epoch == 0 || row.cam_miou > result.best_cam_miou) {
            result.best_epoch = row.epoch;
            result.best_cam_miou = row.cam_miou;
            result.best_params = clone_params(result.params);
        }
    }
    return result;
}

}  // namespace rtc
