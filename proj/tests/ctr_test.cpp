#include "rtc/ctr.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "rtc/random.hpp"

using rtc::Tensor;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, rtc::Rng& rng, double lo = 0.0,
                     double hi = 1.0) {
    std::vector<double> vals(rtc::detail::shape_numel(shape));
    for (auto& v : vals) v = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(vals));
}

// Unit-column D x hw feature matrix.
Tensor unit_features(std::size_t d, std::size_t hw, rtc::Rng& rng) {
    Tensor raw = random_tensor({d, hw}, rng, -1.0, 1.0);
    return rtc::l2_normalize(raw, 0);
}

TEST(AlignViews, UnitPixelsSameSizeAreFixpoint) {
    rtc::Rng rng(1);
    Tensor x = rtc::reshape(unit_features(4, 6, rng), {4, 2, 3});
    rtc::AlignedFeatures a = rtc::align_views(x, x);
    const Tensor flat = rtc::reshape(x, {4, 6});
    for (std::size_t i = 0; i < flat.numel(); ++i) {
        EXPECT_NEAR(a.x1.v(i), flat.v(i), 1e-12);
        EXPECT_NEAR(a.x2.v(i), flat.v(i), 1e-12);
    }
}

TEST(AlignViews, ConstantMapResizesToConstantUnit) {
    Tensor x1 = Tensor::full({2, 4, 4}, 1.0);
    std::vector<double> x2v(2 * 2 * 2);
    for (std::size_t i = 0; i < 4; ++i) {
        x2v[i] = 3.0;       // channel 0
        x2v[4 + i] = 4.0;   // channel 1
    }
    Tensor x2 = Tensor::from({2, 2, 2}, x2v);
    rtc::AlignedFeatures a = rtc::align_views(x1, x2);
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_NEAR(a.x2.v(i), 0.6, 1e-12);       // 3/5
        EXPECT_NEAR(a.x2.v(16 + i), 0.8, 1e-12);  // 4/5
    }
}

TEST(AlignViews, ResizeMatchesOracleAndPixelsAreUnit) {
    rtc::Rng rng(2);
    Tensor x1 = random_tensor({3, 4, 4}, rng, 0.1, 1.0);
    Tensor x2 = random_tensor({3, 2, 2}, rng, 0.1, 1.0);
    rtc::AlignedFeatures a = rtc::align_views(x1, x2);

    // resize each channel with the scalar oracle, then unit-normalize per pixel
    for (std::size_t i = 0; i < 16; ++i) {
        std::vector<double> pix(3);
        double norm = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            std::vector<double> plane(x2.values().begin() + static_cast<std::ptrdiff_t>(c * 4),
                                      x2.values().begin() + static_cast<std::ptrdiff_t>((c + 1) * 4));
            pix[c] = oracle::bilinear_at(plane, 2, 2, 4, 4, i / 4, i % 4);
            norm += pix[c] * pix[c];
        }
        norm = std::sqrt(norm);
        double unit_norm = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_NEAR(a.x2.v(c * 16 + i), pix[c] / norm, 1e-10);
            unit_norm += a.x2.v(c * 16 + i) * a.x2.v(c * 16 + i);
        }
        EXPECT_NEAR(std::sqrt(unit_norm), 1.0, 1e-10);
    }
}

TEST(CrossPrototypes, UniformWeightsGiveNormalizedMean) {
    rtc::Rng rng(3);
    Tensor features = unit_features(4, 9, rng);
    Tensor cams = Tensor::full({1, 3, 3}, 0.7);  // uniform weights
    rtc::PrototypeBank bank = rtc::cross_prototypes(cams, features, {0}, 4, 0.1);
    const auto& idx = bank.topk_sets[0];
    const auto mean = oracle::weighted_mean(features.values(), 4, 9, idx,
                                            std::vector<double>(idx.size(), 1.0));
    double norm = 0.0;
    for (double v : mean) norm += v * v;
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < 4; ++d)
        EXPECT_NEAR(bank.prototypes.v(d), mean[d] / norm, 1e-10);
}

TEST(CrossPrototypes, KOneIsSinglePixelFeature) {
    rtc::Rng rng(4);
    Tensor features = unit_features(3, 4, rng);
    Tensor cams = Tensor::from({1, 2, 2}, {0.1, 0.9, 0.3, 0.2});
    rtc::PrototypeBank bank = rtc::cross_prototypes(cams, features, {0}, 1, 0.1);
    ASSERT_EQ(bank.topk_sets[0], (std::vector<std::size_t>{1}));
    for (std::size_t d = 0; d < 3; ++d)
        EXPECT_NEAR(bank.prototypes.v(d), features.v(d * 4 + 1), 1e-10);
}

TEST(CrossPrototypes, MatchesWeightedMeanOracle) {
    // weights (0.8, 0.4) over features (1,0) and (0,1): pre-norm (2/3, 1/3)
    Tensor features = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor cams = Tensor::from({1, 1, 2}, {0.8, 0.4});
    rtc::PrototypeBank bank = rtc::cross_prototypes(cams, features, {0}, 2, 0.1);
    const double expect0 = 2.0 / 3.0, expect1 = 1.0 / 3.0;
    const double norm = std::sqrt(expect0 * expect0 + expect1 * expect1);
    EXPECT_NEAR(bank.prototypes.v(0), expect0 / norm, 1e-12);
    EXPECT_NEAR(bank.prototypes.v(1), expect1 / norm, 1e-12);

    rtc::Rng rng(5);
    Tensor feats = unit_features(5, 12, rng);
    Tensor maps = random_tensor({2, 3, 4}, rng, 0.0, 1.0);
    rtc::PrototypeBank big = rtc::cross_prototypes(maps, feats, {0, 1}, 5, 0.1);
    for (std::size_t row = 0; row < 2; ++row) {
        const auto& idx = big.topk_sets[row];
        std::vector<double> weights;
        for (std::size_t i : idx) weights.push_back(maps.v(row * 12 + i));
        auto mean = oracle::weighted_mean(feats.values(), 5, 12, idx, weights);
        double norm2 = 0.0;
        for (double v : mean) norm2 += v * v;
        norm2 = std::sqrt(norm2);
        for (std::size_t d = 0; d < 5; ++d)
            EXPECT_NEAR(big.prototypes.v(row * 5 + d), mean[d] / norm2, 1e-10);
    }
}

TEST(CrossPrototypes, ZeroWeightsFallBackToPlainMean) {
    rtc::Rng rng(6);
    Tensor features = unit_features(3, 4, rng);
    Tensor cams = Tensor::zeros({1, 2, 2});
    rtc::PrototypeBank bank = rtc::cross_prototypes(cams, features, {0}, 2, 0.1);
    const auto& idx = bank.topk_sets[0];
    auto mean = oracle::weighted_mean(features.values(), 3, 4, idx,
                                      std::vector<double>(idx.size(), 1.0));
    double norm = 0.0;
    for (double v : mean) norm += v * v;
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(bank.prototypes.v(d), mean[d] / norm, 1e-10);
}

TEST(CrossPrototypes, InvariantToPositiveCamRescaling) {
    rtc::Rng rng(7);
    Tensor features = unit_features(4, 8, rng);
    Tensor cams = random_tensor({1, 2, 4}, rng, 0.0, 1.0);
    rtc::PrototypeBank a = rtc::cross_prototypes(cams, features, {0}, 3, 0.1);
    Tensor scaled = rtc::mul(cams, Tensor::scalar(37.5));
    rtc::PrototypeBank b = rtc::cross_prototypes(scaled, features, {0}, 3, 0.1);
    for (std::size_t i = 0; i < a.prototypes.numel(); ++i)
        EXPECT_NEAR(a.prototypes.v(i), b.prototypes.v(i), 1e-10);
}

TEST(CrossPrototypes, GradientFlowsThroughWeightsAndFeatures) {
    rtc::Rng rng(8);
    Tensor features_raw = Tensor::from({3, 4}, {0.3, -0.2, 0.8, 0.4, 0.5, 0.9, -0.1, 0.2,
                                                0.7, 0.1, 0.6, -0.5});
    Tensor features_leaf = Tensor::from(features_raw.shape(), features_raw.values(), true);
    Tensor cams_leaf = Tensor::from({1, 2, 2}, {0.5, 0.9, 0.1, 0.4}, true);
    Tensor features = rtc::l2_normalize(features_leaf, 0);
    rtc::PrototypeBank bank = rtc::cross_prototypes(cams_leaf, features, {0}, 2, 0.1);
    rtc::backward(rtc::sum_all(bank.prototypes));
    double fg = 0.0, cg = 0.0;
    for (double g : features_leaf.grad()) fg += std::fabs(g);
    for (double g : cams_leaf.grad()) cg += std::fabs(g);
    EXPECT_GT(fg, 0.0);
    EXPECT_GT(cg, 0.0);
}

rtc::PixelAssignment all_participating(const std::vector<int>& labels) {
    rtc::PixelAssignment a;
    a.labels = labels;
    a.confidence.assign(labels.size(), 1.0);
    a.participate.assign(labels.size(), true);
    return a;
}

TEST(ContrastLoss, SinglePrototypeIsZero) {
    rtc::Rng rng(9);
    Tensor features = unit_features(4, 6, rng);
    rtc::PrototypeBank bank;
    bank.prototypes = rtc::l2_normalize(random_tensor({1, 4}, rng, -1.0, 1.0), 1);
    bank.class_ids = {2};
    bank.tau = 0.1;
    Tensor loss = rtc::contrast_loss(features, all_participating(std::vector<int>(6, 2)), bank);
    EXPECT_NEAR(loss.item(), 0.0, 1e-12);
}

TEST(ContrastLoss, EqualSimilarityGivesLogTwo) {
    // Two orthogonal prototypes, every pixel feature equidistant from both.
    rtc::PrototypeBank bank;
    bank.prototypes = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    bank.class_ids = {0, 1};
    bank.tau = 0.5;
    const double s = 1.0 / std::sqrt(2.0);
    Tensor features = Tensor::from({2, 3}, {s, s, s, s, s, s});
    Tensor loss = rtc::contrast_loss(features, all_participating({0, 1, 0}), bank);
    EXPECT_NEAR(loss.item(), std::log(2.0), 1e-10);
}

TEST(ContrastLoss, ClosedFormTwoPrototypeCase) {
    // similarities (1, 0) at tau = 0.5: loss = ln(1 + e^-2)
    rtc::PrototypeBank bank;
    bank.prototypes = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    bank.class_ids = {0, 1};
    bank.tau = 0.5;
    Tensor features = Tensor::from({2, 1}, {1.0, 0.0});
    Tensor loss = rtc::contrast_loss(features, all_participating({0}), bank);
    EXPECT_NEAR(loss.item(), std::log1p(std::exp(-2.0)), 1e-12);
}

TEST(ContrastLoss, NoParticipationIsZero) {
    rtc::Rng rng(10);
    Tensor features = unit_features(3, 4, rng);
    rtc::PrototypeBank bank;
    bank.prototypes = rtc::l2_normalize(random_tensor({2, 3}, rng, -1.0, 1.0), 1);
    bank.class_ids = {0, 1};
    rtc::PixelAssignment a;
    a.labels.assign(4, 0);
    a.confidence.assign(4, 0.0);
    a.participate.assign(4, false);
    EXPECT_EQ(rtc::contrast_loss(features, a, bank).item(), 0.0);
}

TEST(ContrastLoss, UnknownLabelThrows) {
    rtc::Rng rng(11);
    Tensor features = unit_features(3, 2, rng);
    rtc::PrototypeBank bank;
    bank.prototypes = rtc::l2_normalize(random_tensor({1, 3}, rng, -1.0, 1.0), 1);
    bank.class_ids = {1};
    EXPECT_THROW(rtc::contrast_loss(features, all_participating({0, 1}), bank), std::logic_error);
}

TEST(ContrastLoss, AlwaysNonnegative) {
    rtc::Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor features = unit_features(4, 8, rng);
        rtc::PrototypeBank bank;
        bank.prototypes = rtc::l2_normalize(random_tensor({3, 4}, rng, -1.0, 1.0), 1);
        bank.class_ids = {0, 1, 2};
        bank.tau = 0.1;
        std::vector<int> labels(8);
        for (auto& l : labels) l = static_cast<int>(rng.below(3));
        Tensor loss = rtc::contrast_loss(features, all_participating(labels), bank);
        EXPECT_GE(loss.item(), -1e-15);
    }
}

TEST(AssignPixels, ArgmaxOverPresentAndThreshold) {
    // class 0 peaks at pixel 0, class 2 at pixel 3; both maps max-normalized
    Tensor refined = Tensor::from({3, 1, 4}, {1.0, 0.2, 0.1, 0.0,   // class 0
                                              9.9, 9.9, 9.9, 9.9,   // class 1 (absent)
                                              0.0, 0.1, 0.3, 0.6});  // class 2
    rtc::PixelAssignment a = rtc::assign_pixels(refined, {0, 2}, 0.5);
    EXPECT_EQ(a.labels, (std::vector<int>{0, 0, 2, 2}));
    EXPECT_TRUE(a.participate[0]);   // 1.0
    EXPECT_FALSE(a.participate[1]);  // 0.2
    EXPECT_TRUE(a.participate[3]);   // 1.0
    EXPECT_NEAR(a.confidence[2], 0.5, 1e-7);
}

TEST(AssignPixels, InvariantToUniformScaling) {
    rtc::Rng rng(13);
    Tensor refined = random_tensor({3, 2, 3}, rng, 0.0, 1.0);
    rtc::PixelAssignment a = rtc::assign_pixels(refined, {0, 1, 2}, 0.5);
    Tensor scaled = rtc::mul(refined, Tensor::scalar(7.0));
    rtc::PixelAssignment b = rtc::assign_pixels(scaled, {0, 1, 2}, 0.5);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_EQ(a.participate, b.participate);
}

rtc::CtrConfig toy_cfg() {
    rtc::CtrConfig cfg;
    cfg.top_k = 2;
    cfg.tau = 0.5;
    cfg.conf_threshold = 0.5;
    return cfg;
}

TEST(CtrTotal, IdenticalViewsGivePairwiseEqualTerms) {
    rtc::Rng rng(14);
    Tensor x = rtc::reshape(unit_features(4, 8, rng), {4, 2, 4});
    Tensor refined = random_tensor({3, 2, 4}, rng, 0.1, 1.0);
    rtc::AlignedFeatures aligned = rtc::align_views(x, x);
    rtc::CtrOutput out = rtc::ctr_total(refined, refined, aligned, {0, 2}, toy_cfg());

    Tensor intra1 = rtc::contrast_loss(aligned.x1, out.view1.assignment, out.view1.bank);
    Tensor cross1 = rtc::contrast_loss(aligned.x1, out.view2.assignment, out.view2.bank);
    EXPECT_NEAR(intra1.item(), cross1.item(), 1e-12);
    EXPECT_NEAR(out.loss.item(), 4.0 * intra1.item(), 1e-10);
}

TEST(CtrTotal, NothingAboveThresholdIsZero) {
    rtc::Rng rng(15);
    Tensor x = rtc::reshape(unit_features(4, 4, rng), {4, 2, 2});
    Tensor refined = random_tensor({2, 2, 2}, rng, 0.1, 1.0);
    rtc::AlignedFeatures aligned = rtc::align_views(x, x);
    rtc::CtrConfig cfg = toy_cfg();
    cfg.conf_threshold = 2.0;  // unreachable: normalized confidence tops out at ~1
    rtc::CtrOutput out = rtc::ctr_total(refined, refined, aligned, {0, 1}, cfg);
    EXPECT_EQ(out.loss.item(), 0.0);
}

TEST(CtrTotal, MatchesTermByTermOracle) {
    rtc::Rng rng(16);
    Tensor x1 = rtc::reshape(unit_features(4, 8, rng), {4, 2, 4});
    Tensor x2 = rtc::reshape(unit_features(4, 8, rng), {4, 2, 4});
    Tensor refined1 = random_tensor({3, 2, 4}, rng, 0.1, 1.0);
    Tensor refined2 = random_tensor({3, 2, 4}, rng, 0.1, 1.0);
    rtc::CtrConfig cfg = toy_cfg();
    rtc::AlignedFeatures aligned = rtc::align_views(x1, x2);
    rtc::CtrOutput out = rtc::ctr_total(refined1, refined2, aligned, {0, 1}, cfg);

    rtc::PixelAssignment a1 = rtc::assign_pixels(refined1, {0, 1}, cfg.conf_threshold);
    rtc::PixelAssignment a2 = rtc::assign_pixels(refined2, {0, 1}, cfg.conf_threshold);
    rtc::PrototypeBank b1 = rtc::cross_prototypes(refined1, aligned.x2, {0, 1}, 2, cfg.tau);
    rtc::PrototypeBank b2 = rtc::cross_prototypes(refined2, aligned.x1, {0, 1}, 2, cfg.tau);
    const double expect = rtc::contrast_loss(aligned.x1, a1, b1).item() +
                          rtc::contrast_loss(aligned.x2, a2, b2).item() +
                          rtc::contrast_loss(aligned.x1, a2, b2).item() +
                          rtc::contrast_loss(aligned.x2, a1, b1).item();
    EXPECT_NEAR(out.loss.item(), expect, 1e-10);
}

TEST(CtrTotal, StrModeSwapsOnlyPrototypeSource) {
    rtc::Rng rng(17);
    Tensor x1 = rtc::reshape(unit_features(4, 8, rng), {4, 2, 4});
    Tensor x2 = rtc::reshape(unit_features(4, 8, rng), {4, 2, 4});
    Tensor refined = random_tensor({2, 2, 4}, rng, 0.1, 1.0);
    rtc::CtrConfig cfg = toy_cfg();
    cfg.str_mode = true;
    rtc::AlignedFeatures aligned = rtc::align_views(x1, x2);
    rtc::CtrOutput out = rtc::ctr_total(refined, refined, aligned, {0, 1}, cfg);
    // self-view prototype source: bank1 built from x1, matching a direct call
    rtc::PrototypeBank expect1 = rtc::cross_prototypes(refined, aligned.x1, {0, 1}, 2, cfg.tau);
    for (std::size_t i = 0; i < expect1.prototypes.numel(); ++i)
        EXPECT_NEAR(out.view1.bank.prototypes.v(i), expect1.prototypes.v(i), 1e-12);

    cfg.str_mode = false;
    rtc::CtrOutput cross = rtc::ctr_total(refined, refined, aligned, {0, 1}, cfg);
    rtc::PrototypeBank expect_cross =
        rtc::cross_prototypes(refined, aligned.x2, {0, 1}, 2, cfg.tau);
    for (std::size_t i = 0; i < expect_cross.prototypes.numel(); ++i)
        EXPECT_NEAR(cross.view1.bank.prototypes.v(i), expect_cross.prototypes.v(i), 1e-12);
}

}  // namespace
