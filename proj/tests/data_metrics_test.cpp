#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "oracles.hpp"
#include "rtc/dataset.hpp"
#include "rtc/metrics.hpp"

namespace {

TEST(GenerateDataset, SameSeedIsBitIdentical) {
    rtc::Dataset a = rtc::generate_dataset(12, 4, 77);
    rtc::Dataset b = rtc::generate_dataset(12, 4, 77);
    ASSERT_EQ(a.samples.size(), b.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        EXPECT_EQ(0, std::memcmp(a.samples[i].image.values().data(),
                                 b.samples[i].image.values().data(),
                                 a.samples[i].image.numel() * sizeof(double)));
        EXPECT_EQ(a.samples[i].mask, b.samples[i].mask);
        EXPECT_EQ(a.samples[i].label, b.samples[i].label);
    }
    rtc::Dataset c = rtc::generate_dataset(12, 4, 78);
    EXPECT_NE(a.samples[0].mask, c.samples[0].mask);
}

TEST(GenerateDataset, LabelMatchesMaskOccupancy) {
    rtc::Dataset ds = rtc::generate_dataset(60, 4, 5);
    for (const auto& s : ds.samples) {
        std::vector<int> occupancy(4, 0);
        for (std::uint8_t m : s.mask) {
            ASSERT_LE(m, 4);
            if (m > 0) occupancy[m - 1] = 1;
        }
        EXPECT_EQ(s.label, occupancy);
        int total = 0;
        for (int l : s.label) total += l;
        EXPECT_GE(total, 1);
        EXPECT_LE(total, 3);
    }
}

TEST(GenerateDataset, SingleShapeSampleIsOneHot) {
    rtc::Rng rng(9);
    // direct sample generation until a single-shape draw appears
    for (int tries = 0; tries < 50; ++tries) {
        rtc::Sample s = rtc::generate_sample(4, 64, 64, rng);
        int total = 0;
        for (int l : s.label) total += l;
        if (total == 1) {
            std::vector<int> classes_seen;
            for (std::uint8_t m : s.mask)
                if (m > 0 && (classes_seen.empty() || classes_seen[0] != m))
                    classes_seen.push_back(m);
            EXPECT_EQ(classes_seen.size(), 1u);
            return;
        }
    }
    FAIL() << "no single-shape sample in 50 draws";
}

TEST(GenerateDataset, ClassFrequenciesNearUniform) {
    rtc::Dataset ds = rtc::generate_dataset(200, 4, 31);
    std::vector<double> counts(4, 0.0);
    double total = 0.0;
    for (const auto& s : ds.samples)
        for (std::size_t c = 0; c < 4; ++c)
            if (s.label[c]) {
                counts[c] += 1.0;
                total += 1.0;
            }
    for (std::size_t c = 0; c < 4; ++c) {
        const double share = counts[c] / total;
        EXPECT_GT(share, 0.25 * 0.9) << "class " << c;
        EXPECT_LT(share, 0.25 * 1.1) << "class " << c;
    }
}

TEST(GenerateDataset, PixelsStayInCenteredRange) {
    rtc::Dataset ds = rtc::generate_dataset(8, 4, 13);
    for (const auto& s : ds.samples)
        for (double v : s.image.values()) {
            EXPECT_GE(v, -0.5);
            EXPECT_LE(v, 0.5);
        }
}

TEST(DatasetIo, SaveLoadRoundTrip) {
    const std::string dir = std::string(::testing::TempDir()) + "/rtc_ds";
    rtc::Dataset ds = rtc::generate_dataset(5, 4, 21);
    rtc::save_dataset(ds, dir, 21);
    rtc::Dataset back = rtc::load_dataset(dir);
    ASSERT_EQ(back.samples.size(), ds.samples.size());
    EXPECT_EQ(back.classes, ds.classes);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        EXPECT_EQ(back.samples[i].image.values(), ds.samples[i].image.values());
        EXPECT_EQ(back.samples[i].mask, ds.samples[i].mask);
        EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    }
    std::filesystem::remove_all(dir);
}

TEST(Miou, PerfectPredictionScoresOne) {
    rtc::Dataset ds = rtc::generate_dataset(6, 4, 3);
    std::vector<std::vector<int>> maps;
    for (const auto& s : ds.samples) {
        std::vector<int> m(s.mask.begin(), s.mask.end());
        maps.push_back(std::move(m));
    }
    rtc::EvalReport r = rtc::miou_from_maps(maps, maps, 4, rtc::EvalMode::mask);
    EXPECT_NEAR(r.miou, 1.0, 1e-12);
    for (double iou : r.iou)
        if (iou >= 0.0) EXPECT_NEAR(iou, 1.0, 1e-12);
}

TEST(Miou, AllBackgroundAgainstAllForeground) {
    std::vector<std::vector<int>> pred = {{0, 0, 0, 0}};
    std::vector<std::vector<int>> gt = {{1, 1, 1, 1}};
    rtc::EvalReport r = rtc::miou_from_maps(pred, gt, 4, rtc::EvalMode::mask);
    EXPECT_EQ(r.iou[1], 0.0);
    EXPECT_EQ(r.iou[0], 0.0);  // background predicted everywhere but true nowhere
    EXPECT_EQ(r.iou[2], -1.0);
}

TEST(Miou, MatchesConfusionMatrixOracle) {
    std::vector<std::vector<int>> pred = {{1, 1, 0, 0}};
    std::vector<std::vector<int>> gt = {{1, 0, 1, 0}};
    rtc::EvalReport r = rtc::miou_from_maps(pred, gt, 1, rtc::EvalMode::mask);
    EXPECT_NEAR(r.iou[1], 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(r.iou[0], 1.0 / 3.0, 1e-12);

    // larger randomized case against the oracle
    rtc::Rng rng(17);
    std::vector<std::vector<int>> p2(3), g2(3);
    std::vector<int> flat_p, flat_g;
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < 40; ++i) {
            p2[n].push_back(static_cast<int>(rng.below(5)));
            g2[n].push_back(static_cast<int>(rng.below(5)));
            flat_p.push_back(p2[n].back());
            flat_g.push_back(g2[n].back());
        }
    rtc::EvalReport big = rtc::miou_from_maps(p2, g2, 4, rtc::EvalMode::mask);
    const auto expect = oracle::confusion_iou(flat_p, flat_g, 5);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(big.iou[c], expect[c], 1e-12);
}

TEST(Miou, ShapeMismatchThrows) {
    std::vector<std::vector<int>> pred = {{0, 0}};
    std::vector<std::vector<int>> gt = {{0, 0, 0}};
    EXPECT_THROW(rtc::miou_from_maps(pred, gt, 1, rtc::EvalMode::mask), std::invalid_argument);
}

TEST(Miou, PermutationInvariantOverImages) {
    rtc::Rng rng(19);
    std::vector<std::vector<int>> pred(4), gt(4);
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) {
            pred[n].push_back(static_cast<int>(rng.below(3)));
            gt[n].push_back(static_cast<int>(rng.below(3)));
        }
    rtc::EvalReport a = rtc::miou_from_maps(pred, gt, 2, rtc::EvalMode::mask);
    std::vector<std::vector<int>> pred_r(pred.rbegin(), pred.rend());
    std::vector<std::vector<int>> gt_r(gt.rbegin(), gt.rend());
    rtc::EvalReport b = rtc::miou_from_maps(pred_r, gt_r, 2, rtc::EvalMode::mask);
    EXPECT_NEAR(a.miou, b.miou, 1e-15);
}

TEST(Miou, FilteringRemapsAbsentClassesToBackground) {
    // image-level label says only class 1 is present; class-2 predictions
    // count as background after filtering
    std::vector<std::vector<int>> pred = {{2, 2, 1, 0}};
    std::vector<std::vector<int>> gt = {{0, 0, 1, 0}};
    std::vector<std::vector<int>> labels = {{1, 0}};
    rtc::EvalReport unfiltered =
        rtc::miou_from_maps(pred, gt, 2, rtc::EvalMode::cam_unfiltered);
    rtc::EvalReport filtered =
        rtc::miou_from_maps(pred, gt, 2, rtc::EvalMode::cam_filtered, labels);
    EXPECT_NEAR(filtered.iou[0], 1.0, 1e-12);       // background recovered
    EXPECT_NEAR(unfiltered.iou[0], 1.0 / 3.0, 1e-12);
    EXPECT_GE(filtered.miou, unfiltered.miou);
}

TEST(EvalCsv, TableLayout) {
    rtc::EvalReport r;
    r.iou = {0.5, 1.0, -1.0};
    r.miou = 0.75;
    r.mode = rtc::EvalMode::mask;
    const std::string csv = rtc::eval_report_csv(r, {"circle", "square"});
    EXPECT_EQ(csv,
              "class,iou\nbackground,0.500000\ncircle,1.000000\nsquare,undefined\n"
              "mIoU,0.750000\n");
}

}  // namespace
