#include "rtc/grad_check.hpp"

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace {

TEST(GradCheck, FullPipelinePassesOnSmallViews) {
    rtc::Dataset ds = rtc::generate_dataset(2, 4, 41);
    rtc::TrainConfig cfg;
    cfg.view1 = 32;
    cfg.view2 = 16;
    cfg.top_k = 4;
    cfg.seed = 2;
    rtc::GradCheckConfig gc;
    gc.samples_per_tensor = 4;
    rtc::GradCheckReport report = rtc::run_grad_check(ds, cfg, gc);
    EXPECT_TRUE(report.passed) << rtc::grad_check_summary(report);
    EXPECT_GT(report.total_checked, 0u);
    EXPECT_LT(report.worst, 1e-3);
}

TEST(GradCheck, DifferentiableComVariantAlsoPasses) {
    rtc::Dataset ds = rtc::generate_dataset(2, 4, 43);
    rtc::TrainConfig cfg;
    cfg.view1 = 32;
    cfg.view2 = 16;
    cfg.top_k = 4;
    cfg.seed = 3;
    cfg.detach_comp_target = false;  // gradient flows through the enhanced maps
    rtc::GradCheckConfig gc;
    gc.samples_per_tensor = 3;
    rtc::GradCheckReport report = rtc::run_grad_check(ds, cfg, gc);
    EXPECT_TRUE(report.passed) << rtc::grad_check_summary(report);
}

// A deliberately wrong backward rule must trip the finite-difference
// comparison; this guards the detector itself.
TEST(GradCheck, DetectsCorruptedBackwardRule) {
    auto broken_square = [](const rtc::Tensor& x) {
        std::vector<double> out(x.numel());
        for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x.v(i) * x.v(i);
        return rtc::detail::make_result(
            x.shape(), std::move(out), "broken_square", {x},
            [](rtc::detail::TensorNode& node) {
                auto& p = *node.parents[0];
                auto& g = rtc::detail::ensure_grad(p);
                for (std::size_t i = 0; i < node.value.size(); ++i)
                    g[i] += 3.0 * p.value[i] * node.grad[i];  // should be 2x
            });
    };
    rtc::Tensor x = rtc::Tensor::from({3}, {0.5, -1.0, 2.0}, true);
    rtc::Tensor loss = rtc::sum_all(broken_square(x));
    rtc::backward(loss);
    const std::vector<double> analytic = x.grad();
    auto f = [&](const std::vector<double>& v) {
        double acc = 0.0;
        for (double value : v) acc += value * value;
        return acc;
    };
    const std::vector<double> fd = oracle::fd_gradient(f, x.values());
    EXPECT_GT(oracle::max_rel_err(analytic, fd), 1e-3);
}

}  // namespace
